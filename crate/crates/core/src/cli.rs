//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 failed gradient check.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::eval::{self, Decision};
use crate::gradcheck::{self, GradcheckConfig, Target};
use crate::imaging::{self, Label, Patch, PatchGrid, Resample, RgbImage, ThermalImage};
use crate::pipeline::{self, PipelineError, SynthSpec, Texture, TrainConfig};
use crate::segmentation::{self, BinaryMask, SegParams};
use crate::util::write_atomic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) | PipelineError::InvalidSpec(_) | PipelineError::PairMismatch(_) => {
                CliError::Invalid(e.to_string())
            }
            other => runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flamefinder", version, about = "Flame detection in thermal patches with RGB-derived labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct SegArgs {
    /// Green-channel ceiling
    #[arg(long, default_value_t = 200.0)]
    pub tau_g: f64,
    /// Blue-channel ceiling
    #[arg(long, default_value_t = 200.0)]
    pub tau_b: f64,
    /// Red/green separation factor
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Red/2-green tolerance factor
    #[arg(long, default_value_t = 0.47)]
    pub beta: f64,
    /// Green/2-blue separation factor
    #[arg(long, default_value_t = 0.14)]
    pub delta: f64,
}

impl SegArgs {
    pub fn params(&self) -> Result<SegParams, CliError> {
        let p = SegParams {
            tau_g: self.tau_g,
            tau_b: self.tau_b,
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
        };
        p.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(p)
    }
}

/// Training options generated from [`TrainConfig::OPTIONS`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides(pub Vec<(String, String)>);

impl FromArgMatches for TrainOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            TrainConfig::OPTIONS
                .iter()
                .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for TrainOverrides {
    fn augment_args(cmd: Command) -> Command {
        let defaults = TrainConfig::default();
        TrainConfig::OPTIONS.iter().fold(cmd, |cmd, (key, help)| {
            cmd.arg(
                Arg::new(*key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help(format!("{help} [default: {}]", defaults.get(key).unwrap_or_default())),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Segment flame pixels in an RGB frame
    Segment {
        /// Input RGB image
        input: PathBuf,
        /// Output mask PNG (0/255)
        #[arg(long, default_value = "mask.png")]
        out: PathBuf,
        /// Optional overlay PNG with the mask blended over the frame
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
    },
    /// Cut paired frames into labeled thermal patches
    Patchify {
        /// Directory of <stem>.rgb.<ext> / <stem>.ir.<ext> pairs
        #[arg(long)]
        data: PathBuf,
        /// Output directory for patch PGMs and index.csv
        #[arg(long)]
        out: PathBuf,
        /// Patch side in pixels
        #[arg(long, default_value_t = 32)]
        patch_size: usize,
        /// Resample every frame to this square size first
        #[arg(long)]
        frame_size: Option<usize>,
        #[command(flatten)]
        seg: SegArgs,
    },
    /// Generate a synthetic paired corpus
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_frames: usize,
        #[arg(long, default_value_t = 128)]
        frame_size: usize,
        #[arg(long, default_value_t = 6.0)]
        radius_min: f64,
        #[arg(long, default_value_t = 14.0)]
        radius_max: f64,
        /// flat, gradient or noise
        #[arg(long, default_value = "noise")]
        texture: String,
        #[arg(long, default_value_t = 0.7)]
        intensity_min: f64,
        #[arg(long, default_value_t = 1.0)]
        intensity_max: f64,
        #[arg(long, default_value_t = 0.5)]
        flame_probability: f64,
        #[arg(long, default_value_t = 0.2)]
        distractor_probability: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a paired corpus
    Train {
        /// Directory of paired frames
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path
        #[arg(long, default_value = "model.ffck")]
        out: PathBuf,
        /// Per-step loss log (CSV)
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
        /// Config file of `key = value` lines; flags take precedence
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resample every frame to this square size first
        #[arg(long)]
        frame_size: Option<usize>,
        #[command(flatten)]
        seg: SegArgs,
        #[command(flatten)]
        options: TrainOverrides,
    },
    /// Classify thermal frames patch by patch
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of <stem>.ir.<ext> frames (matching .rgb frames are used for overlays)
        #[arg(long)]
        input: PathBuf,
        /// Per-patch predictions (CSV)
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        /// Write overlay PNGs into this directory
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        /// Minimum class probability for a decision
        #[arg(long, default_value_t = 0.9)]
        gate: f64,
        /// Use the nearest prototype instead of the classifier
        #[arg(long)]
        prototypes: bool,
        #[arg(long)]
        frame_size: Option<usize>,
    },
    /// Score a checkpoint against segmentation-derived labels
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of paired frames
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON output
        #[arg(long, default_value = "metrics.json")]
        metrics: PathBuf,
        /// Confusion matrix CSV output
        #[arg(long, default_value = "confusion.csv")]
        confusion: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        gate: f64,
        /// Use the nearest prototype instead of the classifier
        #[arg(long)]
        prototypes: bool,
        #[arg(long)]
        frame_size: Option<usize>,
        #[command(flatten)]
        seg: SegArgs,
    },
    /// Check closed-form loss derivatives against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Corrupt one analytic derivative, e.g. `triplet:e` (testing aid)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(msg) => {
            if !msg.is_empty() {
                print!("{msg}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Builds the training configuration: defaults, then the config file, then flags.
pub fn train_config(config: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        cfg.merge_str(&text)?;
    }
    for (k, v) in &overrides.0 {
        cfg.set(k, v).map_err(|e| CliError::Invalid(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let pairs = imaging::pair_frames(dir).map_err(runtime)?;
    if pairs.is_empty() {
        return Err(CliError::Invalid(format!("no <stem>.rgb/<stem>.ir pairs in {}", dir.display())));
    }
    Ok(pairs)
}

fn load_dataset(
    dir: &Path,
    seg: &SegParams,
    patch_size: usize,
    frame_size: Option<usize>,
) -> Result<pipeline::LabeledDataset, CliError> {
    let pairs = pairs(dir)?;
    let rgb: Vec<&PathBuf> = pairs.iter().map(|p| &p.1).collect();
    let ir: Vec<&PathBuf> = pairs.iter().map(|p| &p.2).collect();
    Ok(pipeline::build_dataset(&rgb, &ir, seg, patch_size, frame_size)?)
}

fn resized<T: Resample + Clone>(img: T, size: Option<usize>) -> Result<T, CliError> {
    match size {
        Some(s) => img.resample(s, s).map_err(runtime),
        None => Ok(img),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn thermal_preview(t: &ThermalImage) -> Result<RgbImage, CliError> {
    let data = t
        .data()
        .iter()
        .flat_map(|&v| {
            let g = (v * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    RgbImage::new(t.width(), t.height(), data).map_err(runtime)
}

fn decisions(ck: &Checkpoint, xs: &[Vec<f64>], gate: f64, use_protos: bool) -> Result<(Vec<Decision>, Vec<eval::Prediction>), CliError> {
    let preds = eval::predict(ck, xs, gate).map_err(|e| match e {
        eval::EvalError::InvalidGate(_) => CliError::Invalid(e.to_string()),
        other => runtime(other),
    })?;
    let ds = if use_protos {
        let protos = ck
            .prototypes
            .as_ref()
            .ok_or_else(|| runtime("checkpoint has no prototypes"))?;
        preds
            .iter()
            .map(|p| eval::nearest_prototype(&p.embedding, protos).into())
            .collect()
    } else {
        preds.iter().map(|p| p.decision).collect()
    };
    Ok((ds, preds))
}

fn execute(cmd: Cmd) -> Result<String, CliError> {
    match cmd {
        Cmd::Segment { input, out, overlay, seg } => {
            let params = seg.params()?;
            let img = imaging::load_rgb(&input).map_err(runtime)?;
            let mask = segmentation::flame_seg(&img, &params).map_err(runtime)?;
            imaging::save_mask(&out, &mask).map_err(runtime)?;
            if let Some(path) = overlay {
                let blended = segmentation::mask_overlay(&img, &mask).map_err(runtime)?;
                imaging::save_rgb(&path, &blended).map_err(runtime)?;
            }
            Ok(format!("{} flame pixels of {}\n", mask.count(), img.width() * img.height()))
        }
        Cmd::Patchify {
            data,
            out,
            patch_size,
            frame_size,
            seg,
        } => {
            let params = seg.params()?;
            let mut frames: Vec<(PatchGrid, Vec<Patch>)> = Vec::new();
            for (id, r, t) in pairs(&data)? {
                let rgb = resized(imaging::load_rgb(&r).map_err(runtime)?, frame_size)?;
                let thermal = imaging::load_thermal(&t).map_err(runtime)?;
                let thermal = thermal.resample(rgb.width(), rgb.height()).map_err(runtime)?;
                let mask = segmentation::flame_seg(&rgb, &params).map_err(runtime)?;
                let (patches, grid) = imaging::patchify(&thermal, &mask, patch_size, &id).map_err(|e| CliError::Invalid(e.to_string()))?;
                frames.push((grid, patches));
            }
            imaging::export_patches(&out, &frames).map_err(runtime)?;
            let n: usize = frames.iter().map(|(_, p)| p.len()).sum();
            let flame: usize = frames
                .iter()
                .flat_map(|(_, p)| p)
                .filter(|p| p.label == Some(Label::Flame))
                .count();
            Ok(format!("{n} patches from {} frames ({flame} flame)\n", frames.len()))
        }
        Cmd::Synth {
            out,
            n_frames,
            frame_size,
            radius_min,
            radius_max,
            texture,
            intensity_min,
            intensity_max,
            flame_probability,
            distractor_probability,
            seed,
        } => {
            let texture = Texture::parse(&texture)
                .ok_or_else(|| CliError::Invalid(format!("--texture: unknown texture {texture:?}")))?;
            let spec = SynthSpec {
                n_frames,
                frame_size,
                blob_radius_range: (radius_min, radius_max),
                background_texture: texture,
                blob_intensity: (intensity_min, intensity_max),
                flame_probability,
                distractor_probability,
                seed,
            };
            let frames = pipeline::synth_dataset(&spec, &out)?;
            let flame = frames.iter().filter(|f| f.truth.count() > 0).count();
            Ok(format!("{} frames written to {} ({flame} with flame)\n", frames.len(), out.display()))
        }
        Cmd::Train {
            data,
            out,
            log,
            config,
            frame_size,
            seg,
            options,
        } => {
            let cfg = train_config(config.as_deref(), &options)?;
            let params = seg.params()?;
            let ds = load_dataset(&data, &params, cfg.patch_size, frame_size)?;
            let result = pipeline::train(&cfg, &ds)?;
            result.checkpoint.save(&out).map_err(runtime)?;
            write_text(&log, &pipeline::train::log_csv(&result.log))?;
            let (flame, noflame) = ds.class_counts();
            let last = result.log.last().map_or(f64::NAN, |r| r.total);
            Ok(format!(
                "trained on {flame} flame / {noflame} no-flame patches, {} steps, final loss {last:.6}\n",
                result.log.len()
            ))
        }
        Cmd::Infer {
            checkpoint,
            input,
            out,
            overlay_dir,
            gate,
            prototypes,
            frame_size,
        } => {
            let ck = Checkpoint::load(&checkpoint).map_err(runtime)?;
            let ps = ck.params.config.patch_size;
            let mut frames: Vec<(String, PathBuf)> = Vec::new();
            for entry in std::fs::read_dir(&input).map_err(runtime)? {
                let path = entry.map_err(runtime)?.path();
                if let Some((stem, modality)) = imaging::frame_stem(&path) {
                    if modality == "ir" {
                        frames.push((stem, path));
                    }
                }
            }
            frames.sort();
            if frames.is_empty() {
                return Err(CliError::Invalid(format!("no <stem>.ir frames in {}", input.display())));
            }
            if let Some(dir) = &overlay_dir {
                std::fs::create_dir_all(dir).map_err(runtime)?;
            }
            let mut csv = String::from("frame_id,row,col,label,prob_flame\n");
            for (stem, path) in &frames {
                let thermal = resized(imaging::load_thermal(path).map_err(runtime)?, frame_size)?;
                let empty = BinaryMask::zeros(thermal.width(), thermal.height());
                let (patches, grid) =
                    imaging::patchify(&thermal, &empty, ps, stem).map_err(|e| CliError::Invalid(e.to_string()))?;
                let xs: Vec<Vec<f64>> = patches.into_iter().map(|p| p.thermal).collect();
                let (ds, preds) = decisions(&ck, &xs, gate, prototypes)?;
                for (i, (d, p)) in ds.iter().zip(&preds).enumerate() {
                    let _ = writeln!(
                        csv,
                        "{stem},{},{},{},{:?}",
                        i / grid.cols,
                        i % grid.cols,
                        d.as_str(),
                        p.probs[1]
                    );
                }
                if let Some(dir) = &overlay_dir {
                    let rgb_path = path.with_file_name(
                        path.file_name()
                            .and_then(|n| n.to_str())
                            .map(|n| n.replacen(".ir.", ".rgb.", 1))
                            .unwrap_or_default(),
                    );
                    let base = match imaging::load_rgb(&rgb_path) {
                        Ok(rgb) => rgb.resample(thermal.width(), thermal.height()).map_err(runtime)?,
                        Err(_) => thermal_preview(&thermal)?,
                    };
                    let img = eval::overlay(&base, &grid, &ds).map_err(runtime)?;
                    imaging::save_rgb(dir.join(format!("{stem}.overlay.png")), &img).map_err(runtime)?;
                }
            }
            write_text(&out, &csv)?;
            Ok(format!("{} frames classified\n", frames.len()))
        }
        Cmd::Eval {
            checkpoint,
            data,
            metrics,
            confusion,
            gate,
            prototypes,
            frame_size,
            seg,
        } => {
            let ck = Checkpoint::load(&checkpoint).map_err(runtime)?;
            let params = seg.params()?;
            let ds = load_dataset(&data, &params, ck.params.config.patch_size, frame_size)?;
            let xs: Vec<Vec<f64>> = ds.patches.iter().map(|p| p.thermal.clone()).collect();
            let labels = ds.labels();
            let (decs, preds) = decisions(&ck, &xs, gate, prototypes)?;
            let (cm, gated) = eval::gated_confusion(&decs, &labels);
            let mut report = eval::metrics(&cm).map_err(runtime)?;
            report.n_gated = gated;
            if let Some(protos) = &ck.prototypes {
                let es: Vec<Vec<f64>> = preds.into_iter().map(|p| p.embedding).collect();
                report.icv = eval::intra_class_variance(&es, &labels, protos).ok();
            }
            let json = serde_json::to_string_pretty(&report.to_json()).map_err(runtime)?;
            write_text(&metrics, &(json + "\n"))?;
            write_text(&confusion, &cm.to_csv())?;
            Ok(format!(
                "accuracy {:.4} over {} patches ({} abstained)\n",
                report.accuracy,
                cm.total(),
                gated
            ))
        }
        Cmd::Gradcheck {
            trials,
            seed,
            inject_fault,
        } => {
            if trials == 0 {
                return Err(CliError::Invalid("--trials must be at least 1".into()));
            }
            let fault = match inject_fault {
                Some(s) => Some(
                    Target::parse(&s).ok_or_else(|| CliError::Invalid(format!("--inject-fault: unknown target {s:?}")))?,
                ),
                None => None,
            };
            let report = gradcheck::run(&GradcheckConfig {
                trials,
                seed,
                fault,
                ..GradcheckConfig::default()
            })
            .map_err(runtime)?;
            let text = report.render();
            if report.passed() {
                Ok(text)
            } else {
                print!("{text}");
                Err(CliError::CheckFailed("derivative check failed".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("flamefinder").chain(args.iter().copied()))
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 3\nepochs = 4\nlr_decay_epochs = 2\n").unwrap();
        let cli = parse(&["train", "--data", "d", "--config", path.to_str().unwrap(), "--seed", "7"]).unwrap();
        let Cmd::Train { config, options, .. } = cli.command else {
            panic!("expected train")
        };
        let cfg = train_config(config.as_deref(), &options).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 4);
    }

    #[test]
    fn segment_defaults_match_flags() {
        let cli = parse(&["segment", "--alpha", "0.1", "--beta", "0.47", "--delta", "0.14", "in.png"]).unwrap();
        let Cmd::Segment { seg, .. } = cli.command else {
            panic!("expected segment")
        };
        assert_eq!(seg.params().unwrap(), SegParams::default());
    }

    #[test]
    fn unknown_subcommand_and_flag_are_errors() {
        assert!(parse(&["frobnicate"]).is_err());
        assert!(parse(&["gradcheck", "--bogus", "1"]).is_err());
        assert_eq!(run(["flamefinder", "frobnicate"]), EXIT_INVALID);
    }

    #[test]
    fn bad_option_value_names_the_flag() {
        let cli = parse(&["train", "--data", "d", "--epochs", "lots"]).unwrap();
        let Cmd::Train { config, options, .. } = cli.command else {
            panic!("expected train")
        };
        let err = train_config(config.as_deref(), &options).unwrap_err();
        assert!(err.to_string().contains("--epochs"), "{err}");
        assert_eq!(err.exit_code(), EXIT_INVALID);
    }

    #[test]
    fn train_help_lists_every_option_with_default() {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let help = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        let defaults = TrainConfig::default();
        for (k, _) in TrainConfig::OPTIONS {
            assert!(help.contains(&format!("--{}", k.replace('_', "-"))), "{k}");
            assert!(help.contains(&format!("[default: {}]", defaults.get(k).unwrap())), "{k}");
        }
    }

    #[test]
    fn gradcheck_exit_codes() {
        assert_eq!(run(["flamefinder", "gradcheck", "--trials", "2"]), EXIT_OK);
        assert_eq!(
            run(["flamefinder", "gradcheck", "--trials", "2", "--inject-fault", "center:a"]),
            EXIT_CHECK_FAILED
        );
        assert_eq!(run(["flamefinder", "gradcheck", "--trials", "0"]), EXIT_INVALID);
    }
}
