//! Training configuration and its `key = value` file format.
//!
//! Keys are the option names in [`TrainConfig::OPTIONS`]; the command line
//! accepts the same names as `--kebab-case` flags. Lines starting with `#`
//! and blank lines are ignored.

use std::fmt::Display;
use std::str::FromStr;

use super::PipelineError;
use crate::dml::DmlHyper;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    /// Heavy-ball coefficient; 0 gives plain SGD.
    pub momentum: f64,
    pub hyper: DmlHyper,
    pub seed: u64,
    pub c_d: usize,
    /// Width of the last encoder stage.
    pub c_f: usize,
    pub patch_size: usize,
    pub confidence_gate: f64,
    /// Cross-entropy weight of the flame class (no_flame is fixed at 1).
    pub class_weight_flame: f64,
    /// When false the attention heads are bypassed and a = 1.
    pub use_attention: bool,
    /// When false the masked branch sees an all-ones mask.
    pub use_lfe: bool,
    /// Probability that a training sample's masked branch gets an all-ones
    /// mask, matching what the branch sees at inference.
    pub lfe_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 512,
            lr_init: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![10, 18],
            momentum: 0.9,
            hyper: DmlHyper::default(),
            seed: 0,
            c_d: 64,
            c_f: 32,
            patch_size: 32,
            confidence_gate: 0.9,
            class_weight_flame: 1.0,
            use_attention: true,
            use_lfe: true,
            lfe_dropout: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, PipelineError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| PipelineError::InvalidConfig(format!("{key}: cannot parse {value:?}: {e}")))
}

impl TrainConfig {
    /// Option names with one-line descriptions.
    pub const OPTIONS: &'static [(&'static str, &'static str)] = &[
        ("epochs", "number of passes over the balanced training set"),
        ("batch_size", "patches per SGD step"),
        ("lr_init", "initial learning rate"),
        ("lr_decay_factor", "learning-rate multiplier applied at each decay epoch"),
        ("lr_decay_epochs", "comma-separated epochs at which the rate decays"),
        ("momentum", "SGD momentum coefficient (0 = plain SGD)"),
        ("seed", "seed for initialization, shuffling and augmentation"),
        ("c_d", "embedding dimension"),
        ("c_f", "channels of the last encoder stage"),
        ("patch_size", "patch side in pixels"),
        ("confidence_gate", "minimum class probability for a decision"),
        ("margin", "triplet-center margin"),
        ("gamma1", "triplet-center loss weight"),
        ("gamma2", "cosine loss weight"),
        ("gamma3", "center loss weight"),
        ("lambda", "reconstruction loss weight"),
        ("proto_lr_tl", "prototype step size for the triplet-center loss"),
        ("proto_lr_cl", "prototype step size for the center loss"),
        ("proto_lr_cos", "prototype step size for the cosine loss"),
        ("class_weight_flame", "cross-entropy weight of the flame class"),
        ("use_attention", "learn per-dimension attention for the metric losses"),
        ("use_lfe", "feed the segmentation mask to the local feature branch"),
        ("lfe_dropout", "probability of replacing a training mask by all ones"),
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let h = &self.hyper;
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_init" => self.lr_init.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_epochs" => self
                .lr_decay_epochs
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "momentum" => self.momentum.to_string(),
            "seed" => self.seed.to_string(),
            "c_d" => self.c_d.to_string(),
            "c_f" => self.c_f.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "confidence_gate" => self.confidence_gate.to_string(),
            "margin" => h.margin.to_string(),
            "gamma1" => h.gamma1.to_string(),
            "gamma2" => h.gamma2.to_string(),
            "gamma3" => h.gamma3.to_string(),
            "lambda" => h.lambda.to_string(),
            "proto_lr_tl" => h.proto_lr_tl.to_string(),
            "proto_lr_cl" => h.proto_lr_cl.to_string(),
            "proto_lr_cos" => h.proto_lr_cos.to_string(),
            "class_weight_flame" => self.class_weight_flame.to_string(),
            "use_attention" => self.use_attention.to_string(),
            "use_lfe" => self.use_lfe.to_string(),
            "lfe_dropout" => self.lfe_dropout.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let h = &mut self.hyper;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_init" => self.lr_init = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?
            }
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "c_d" => self.c_d = parse(key, value)?,
            "c_f" => self.c_f = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "confidence_gate" => self.confidence_gate = parse(key, value)?,
            "margin" => h.margin = parse(key, value)?,
            "gamma1" => h.gamma1 = parse(key, value)?,
            "gamma2" => h.gamma2 = parse(key, value)?,
            "gamma3" => h.gamma3 = parse(key, value)?,
            "lambda" => h.lambda = parse(key, value)?,
            "proto_lr_tl" => h.proto_lr_tl = parse(key, value)?,
            "proto_lr_cl" => h.proto_lr_cl = parse(key, value)?,
            "proto_lr_cos" => h.proto_lr_cos = parse(key, value)?,
            "class_weight_flame" => self.class_weight_flame = parse(key, value)?,
            "use_attention" => self.use_attention = parse(key, value)?,
            "use_lfe" => self.use_lfe = parse(key, value)?,
            "lfe_dropout" => self.lfe_dropout = parse(key, value)?,
            _ => return Err(PipelineError::InvalidConfig(format!("unknown option {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file body on top of the current values.
    pub fn merge_str(&mut self, text: &str) -> Result<(), PipelineError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::InvalidConfig(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        Self::OPTIONS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.patch_size, self.c_d, self.c_f)
    }

    /// `lr_init` multiplied by the decay factor once per decay epoch already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_decay_epochs
            .iter()
            .filter(|&&d| d <= epoch)
            .fold(self.lr_init, |lr, _| lr * self.lr_decay_factor)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return bad(format!("lr_init {} must be positive", self.lr_init));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor {} must be positive", self.lr_decay_factor));
        }
        if !(0.0..=1.0).contains(&self.lfe_dropout) {
            return bad(format!("lfe_dropout {} is not a probability", self.lfe_dropout));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.iter().any(|&d| d >= self.epochs) {
            return bad("every decay epoch must be below epochs".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_gate) {
            return bad(format!("confidence_gate {} outside [0, 1]", self.confidence_gate));
        }
        if !(self.class_weight_flame.is_finite() && self.class_weight_flame > 0.0) {
            return bad("class_weight_flame must be positive".into());
        }
        self.hyper.validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}
