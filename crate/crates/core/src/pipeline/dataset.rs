//! Segmentation-driven patch labeling, class balancing and augmentation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::PipelineError;
use crate::imaging::{self, patchify, Label, Patch, Resample, RgbImage, ThermalImage};
use crate::segmentation::{flame_seg, SegParams};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub frame_id: String,
    pub grid_index: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub patches: Vec<Patch>,
    pub provenance: Vec<Provenance>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn label(&self, i: usize) -> Label {
        self.patches[i].label.unwrap_or(Label::NoFlame)
    }

    pub fn labels(&self) -> Vec<Label> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    /// `(n_flame, n_noflame)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let flame = self.patches.iter().filter(|p| p.label == Some(Label::Flame)).count();
        (flame, self.len() - flame)
    }

    pub fn push(&mut self, patch: Patch, frame_id: &str) {
        self.provenance.push(Provenance {
            frame_id: frame_id.to_string(),
            grid_index: patch.grid_index,
        });
        self.patches.push(patch);
    }

    fn select(&self, idx: impl IntoIterator<Item = usize>) -> LabeledDataset {
        let mut out = LabeledDataset::default();
        for i in idx {
            out.patches.push(self.patches[i].clone());
            out.provenance.push(self.provenance[i].clone());
        }
        out
    }
}

/// Segments one RGB frame and transfers the patch labels to its thermal pair.
pub fn label_frame(
    frame_id: &str,
    rgb: &RgbImage,
    thermal: &ThermalImage,
    seg: &SegParams,
    patch_size: usize,
) -> Result<Vec<Patch>, PipelineError> {
    let thermal = if (thermal.width(), thermal.height()) != (rgb.width(), rgb.height()) {
        thermal.resample(rgb.width(), rgb.height())?
    } else {
        thermal.clone()
    };
    let mask = flame_seg(rgb, seg)?;
    let (patches, _) = patchify(&thermal, &mask, patch_size, frame_id)?;
    Ok(patches)
}

/// In-memory variant of [`build_dataset`].
pub fn build_from_frames<'a>(
    frames: impl IntoIterator<Item = (&'a str, &'a RgbImage, &'a ThermalImage)>,
    seg: &SegParams,
    patch_size: usize,
) -> Result<LabeledDataset, PipelineError> {
    let mut ds = LabeledDataset::default();
    for (id, rgb, thermal) in frames {
        for p in label_frame(id, rgb, thermal, seg, patch_size)? {
            ds.push(p, id);
        }
    }
    Ok(ds)
}

/// Loads aligned RGB/thermal path lists, optionally resampling both to `frame_size`.
pub fn build_dataset(
    rgb_paths: &[impl AsRef<Path>],
    thermal_paths: &[impl AsRef<Path>],
    seg: &SegParams,
    patch_size: usize,
    frame_size: Option<usize>,
) -> Result<LabeledDataset, PipelineError> {
    if rgb_paths.len() != thermal_paths.len() {
        return Err(PipelineError::PairMismatch(format!(
            "{} rgb frames vs {} thermal frames",
            rgb_paths.len(),
            thermal_paths.len()
        )));
    }
    let mut ds = LabeledDataset::default();
    for (r, t) in rgb_paths.iter().zip(thermal_paths) {
        let (r, t) = (r.as_ref(), t.as_ref());
        let mut rgb = imaging::load_rgb(r)?;
        let mut thermal = imaging::load_thermal(t)?;
        if let Some(s) = frame_size {
            rgb = rgb.resample(s, s)?;
            thermal = thermal.resample(s, s)?;
        }
        let id = imaging::frame_stem(r)
            .map(|(stem, _)| stem)
            .or_else(|| r.file_stem().and_then(|s| s.to_str()).map(str::to_string))
            .unwrap_or_default();
        for p in label_frame(&id, &rgb, &thermal, seg, patch_size)? {
            ds.push(p, &id);
        }
    }
    Ok(ds)
}

/// Oversamples the minority class with replacement until both counts match.
pub fn balance(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset, PipelineError> {
    let (flame, noflame) = ds.class_counts();
    if flame == 0 || noflame == 0 {
        return Err(PipelineError::SingleClassDataset);
    }
    if flame == noflame {
        return Ok(ds.clone());
    }
    let minority = if flame < noflame { Label::Flame } else { Label::NoFlame };
    let pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == minority).collect();
    let need = flame.max(noflame) - flame.min(noflame);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra: Vec<usize> = (0..need).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
    Ok(ds.select((0..ds.len()).chain(extra)))
}

/// Splits by frame so no frame contributes to both sides.
pub fn split_by_frame(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> (LabeledDataset, LabeledDataset) {
    let frames: BTreeSet<&str> = ds.provenance.iter().map(|p| p.frame_id.as_str()).collect();
    let mut frames: Vec<&str> = frames.into_iter().collect();
    frames.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (frames.len() as f64 * test_fraction).round() as usize;
    let test: BTreeSet<&str> = frames[..n_test].iter().copied().collect();
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, p) in ds.provenance.iter().enumerate() {
        if test.contains(p.frame_id.as_str()) {
            te.push(i);
        } else {
            tr.push(i);
        }
    }
    (ds.select(tr), ds.select(te))
}

/// Zero mean, unit variance with a variance floor of 1e-8. Constant input maps to zeros.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    if x.iter().all(|&v| v == x[0]) {
        return vec![0.0; x.len()];
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.max(1e-8).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

pub fn flip_horizontal(values: &[f64], size: usize) -> Vec<f64> {
    values
        .chunks_exact(size)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

pub fn flip_vertical(values: &[f64], size: usize) -> Vec<f64> {
    values.chunks_exact(size).rev().flatten().copied().collect()
}

/// Flips applied identically to thermal and mask; returns the flip choices.
pub fn random_flips(p: &Patch, rng: &mut ChaCha8Rng) -> (Patch, bool, bool) {
    let h = rng.gen_bool(0.5);
    let v = rng.gen_bool(0.5);
    let size = p.size;
    let mut thermal = p.thermal.clone();
    let mut mask: Vec<f64> = p.mask_as_f64();
    if h {
        thermal = flip_horizontal(&thermal, size);
        mask = flip_horizontal(&mask, size);
    }
    if v {
        thermal = flip_vertical(&thermal, size);
        mask = flip_vertical(&mask, size);
    }
    let out = Patch {
        thermal,
        mask: mask.into_iter().map(|m| m as u8).collect(),
        ..p.clone()
    };
    (out, h, v)
}

/// Random horizontal/vertical flips (each with probability 1/2), then per-patch normalization.
pub fn augment(p: &Patch, rng: &mut ChaCha8Rng) -> Patch {
    let (mut out, _, _) = random_flips(p, rng);
    out.thermal = normalize(&out.thermal);
    out
}
