//! Thermal-only inference, confidence gating and evaluation metrics.

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::dml::PrototypePair;
use crate::imaging::{Label, PatchGrid, RgbImage};
use crate::model::{self, ModelError};
use crate::pipeline::dataset::normalize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no embeddings for class {0}")]
    EmptyClass(&'static str),
    #[error("gate {0} outside [0.5, 1]")]
    InvalidGate(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Counts with flame as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn to_csv(&self) -> String {
        format!(
            "actual,pred_flame,pred_no_flame\nflame,{},{}\nno_flame,{},{}\n",
            self.tp, self.fn_, self.fp, self.tn
        )
    }
}

/// Fractions are `None` when their denominator is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub false_negative_rate: Option<f64>,
    pub icv: Option<f64>,
    pub n_gated: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "fnr": self.false_negative_rate,
            "icv": self.icv,
            "n_gated": self.n_gated,
        })
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
        false_negative_rate: ratio(cm.fn_, cm.tp + cm.fn_),
        icv: None,
        n_gated: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Flame,
    NoFlame,
    Abstain,
}

impl Decision {
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::Flame => Some(Label::Flame),
            Decision::NoFlame => Some(Label::NoFlame),
            Decision::Abstain => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Flame => "flame",
            Decision::NoFlame => "no_flame",
            Decision::Abstain => "abstain",
        }
    }
}

impl From<Label> for Decision {
    fn from(l: Label) -> Self {
        match l {
            Label::Flame => Decision::Flame,
            Label::NoFlame => Decision::NoFlame,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub decision: Decision,
    /// `[p(no_flame), p(flame)]`.
    pub probs: [f64; 2],
    pub embedding: Vec<f64>,
}

/// Abstains when the larger class probability is below `gate`.
pub fn gate_decision(probs: [f64; 2], gate: f64) -> Decision {
    let (best, p) = if probs[1] > probs[0] {
        (Decision::Flame, probs[1])
    } else {
        (Decision::NoFlame, probs[0])
    };
    if p < gate {
        Decision::Abstain
    } else {
        best
    }
}

/// Embeds raw thermal patches (values in `[0, 1]`).
///
/// Patches are normalized per patch and the masked branch receives an
/// all-ones mask, so only thermal data is consulted.
pub fn embed(ck: &Checkpoint, patches: &[Vec<f64>]) -> Result<Vec<model::ForwardTrace>> {
    let n = ck.params.config.patch_size.pow(2);
    if let Some(p) = patches.iter().find(|p| p.len() != n) {
        return Err(EvalError::CorruptCheckpoint(format!(
            "checkpoint expects {n}-pixel patches, got {}",
            p.len()
        )));
    }
    let ones = vec![1.0; n];
    patches
        .par_iter()
        .map(|p| {
            let x = normalize(p);
            let (e, mut trace) = model::encode(&x, &ones, &ck.params)?;
            let (logits, probs) = model::classify(&e, &ck.params)?;
            trace.logits = logits;
            trace.probs = probs;
            Ok(trace)
        })
        .collect()
}

pub fn predict(ck: &Checkpoint, patches: &[Vec<f64>], gate: f64) -> Result<Vec<Prediction>> {
    if !(0.5..=1.0).contains(&gate) {
        return Err(EvalError::InvalidGate(gate));
    }
    Ok(embed(ck, patches)?
        .into_iter()
        .map(|t| Prediction {
            decision: gate_decision(t.probs, gate),
            probs: t.probs,
            embedding: t.embedding.0,
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest prototype; exact ties go to no-flame.
pub fn nearest_prototype(e: &[f64], protos: &PrototypePair) -> Label {
    nearest_prototype_by(e, protos, sq_dist)
}

pub fn nearest_prototype_by(e: &[f64], protos: &PrototypePair, dist: impl Fn(&[f64], &[f64]) -> f64) -> Label {
    if dist(e, &protos.flame) < dist(e, &protos.noflame) {
        Label::Flame
    } else {
        Label::NoFlame
    }
}

pub fn prototype_predict(ck: &Checkpoint, patches: &[Vec<f64>]) -> Result<Vec<Label>> {
    let protos = ck
        .prototypes
        .as_ref()
        .ok_or_else(|| EvalError::CorruptCheckpoint("checkpoint has no prototypes".into()))?;
    Ok(embed(ck, patches)?
        .iter()
        .map(|t| nearest_prototype(&t.embedding.0, protos))
        .collect())
}

/// Mean squared distance of flame embeddings to the flame prototype, per feature.
pub fn intra_class_variance(embeddings: &[Vec<f64>], labels: &[Label], protos: &PrototypePair) -> Result<f64> {
    let flame: Vec<&Vec<f64>> = embeddings
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Flame)
        .map(|(e, _)| e)
        .collect();
    if flame.is_empty() {
        return Err(EvalError::EmptyClass("flame"));
    }
    let dim = protos.dim() as f64;
    let total: f64 = flame.iter().map(|e| sq_dist(e, &protos.flame)).sum();
    Ok(total / (flame.len() as f64 * dim))
}

/// Confusion counts over non-abstained samples plus the number abstained.
pub fn gated_confusion(decisions: &[Decision], reference: &[Label]) -> (ConfusionMatrix, usize) {
    let mut cm = ConfusionMatrix::default();
    let mut gated = 0;
    for (d, &r) in decisions.iter().zip(reference) {
        match (r, d.label()) {
            (_, None) => gated += 1,
            (Label::Flame, Some(Label::Flame)) => cm.tp += 1,
            (Label::Flame, Some(Label::NoFlame)) => cm.fn_ += 1,
            (Label::NoFlame, Some(Label::Flame)) => cm.fp += 1,
            (Label::NoFlame, Some(Label::NoFlame)) => cm.tn += 1,
        }
    }
    (cm, gated)
}

const GRID_COLOR: [u8; 3] = [255, 255, 255];
const TINT_ALPHA: f64 = 0.4;

fn tint(p: [u8; 3], color: [f64; 3]) -> [u8; 3] {
    let mix = |c: u8, t: f64| ((1.0 - TINT_ALPHA) * f64::from(c) + TINT_ALPHA * t).round() as u8;
    [mix(p[0], color[0]), mix(p[1], color[1]), mix(p[2], color[2])]
}

/// Draws the patch grid, then tints flame patches red and abstentions yellow.
pub fn overlay(frame: &RgbImage, grid: &PatchGrid, preds: &[Decision]) -> Result<RgbImage> {
    let ps = grid.patch_size;
    if preds.len() != grid.rows * grid.cols || frame.width() != grid.cols * ps || frame.height() != grid.rows * ps {
        return Err(EvalError::GridMismatch(format!(
            "{} predictions for a {}x{} grid over a {}x{} frame",
            preds.len(),
            grid.rows,
            grid.cols,
            frame.width(),
            frame.height()
        )));
    }
    let mut out = frame.clone();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if x % ps == 0 || y % ps == 0 {
                out.set_pixel(x, y, GRID_COLOR);
            }
        }
    }
    for (i, d) in preds.iter().enumerate() {
        let color = match d {
            Decision::Flame => [255.0, 0.0, 0.0],
            Decision::Abstain => [255.0, 255.0, 0.0],
            Decision::NoFlame => continue,
        };
        let (r, c) = (i / grid.cols, i % grid.cols);
        for y in r * ps..(r + 1) * ps {
            for x in c * ps..(c + 1) * ps {
                let p = out.pixel(x, y);
                out.set_pixel(x, y, tint(p, color));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_arithmetic() {
        assert_eq!(gate_decision([0.85, 0.15], 0.9), Decision::Abstain);
        assert_eq!(gate_decision([0.05, 0.95], 0.9), Decision::Flame);
        for p in [0.0, 0.2, 0.5, 0.77, 1.0] {
            assert_ne!(gate_decision([p, 1.0 - p], 0.5), Decision::Abstain);
        }
    }

    #[test]
    fn metric_guards() {
        let perfect = ConfusionMatrix { tp: 4, fn_: 0, fp: 0, tn: 6 };
        let r = metrics(&perfect).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall), (1.0, Some(1.0), Some(1.0)));
        let no_pos = ConfusionMatrix { tp: 0, fn_: 0, fp: 2, tn: 3 };
        assert_eq!(metrics(&no_pos).unwrap().recall, None);
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn prototype_rule() {
        let p = PrototypePair::new(vec![1.0, 0.0], vec![-1.0, 0.0]).unwrap();
        assert_eq!(nearest_prototype(&[1.0, 0.0], &p), Label::Flame);
        assert_eq!(nearest_prototype(&[0.0, 3.0], &p), Label::NoFlame);
    }

    #[test]
    fn icv_examples() {
        let p = PrototypePair::new(vec![2.0], vec![0.0]).unwrap();
        let at = vec![vec![2.0], vec![2.0]];
        assert_eq!(intra_class_variance(&at, &[Label::Flame; 2], &p).unwrap(), 0.0);
        let spread = vec![vec![1.0], vec![3.0], vec![100.0]];
        let labels = [Label::Flame, Label::Flame, Label::NoFlame];
        assert_eq!(intra_class_variance(&spread, &labels, &p).unwrap(), 1.0);
        assert!(intra_class_variance(&spread, &[Label::NoFlame; 3], &p).is_err());
    }

    #[test]
    fn gated_counts_add_up() {
        use Decision::*;
        let d = [Flame, Abstain, NoFlame, Abstain, Flame];
        let r = [Label::Flame, Label::Flame, Label::Flame, Label::NoFlame, Label::NoFlame];
        let (cm, gated) = gated_confusion(&d, &r);
        assert_eq!(gated, 2);
        assert_eq!(cm.total() as usize + gated, d.len());
        assert_eq!((cm.tp, cm.fn_, cm.fp, cm.tn), (1, 1, 1, 0));
    }

    fn grid(rows: usize, cols: usize, ps: usize) -> PatchGrid {
        PatchGrid { patch_size: ps, rows, cols, frame_id: "f".into() }
    }

    #[test]
    fn overlay_counts_and_colors() {
        let frame = RgbImage::filled(8, 8, [10, 100, 50]).unwrap();
        let g = grid(2, 2, 4);
        let none = overlay(&frame, &g, &[Decision::NoFlame; 4]).unwrap();
        let changed = frame.pixels().zip(none.pixels()).filter(|(a, b)| a != b).count();
        // rows and columns 0 and 4 are grid lines: 64 - 6*6
        assert_eq!(changed, 28);

        let one = overlay(&frame, &g, &[Decision::NoFlame, Decision::Flame, Decision::NoFlame, Decision::NoFlame]).unwrap();
        let tinted = none.pixels().zip(one.pixels()).filter(|(a, b)| a != b).count();
        assert_eq!(tinted, 16);
        let expect = [
            (0.6f64 * 10.0 + 0.4 * 255.0).round() as u8,
            (0.6f64 * 100.0).round() as u8,
            (0.6f64 * 50.0).round() as u8,
        ];
        assert_eq!(one.pixel(5, 1), expect);
        assert!(overlay(&frame, &g, &[Decision::Flame]).is_err());
    }
}
