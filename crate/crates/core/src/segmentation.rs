//! Heuristic RGB flame segmentation.
//!
//! Three per-pixel criteria are combined by conjunction:
//!
//! 1. distance to the channel means: red must lead both green and blue;
//! 2. absolute value: green and blue must stay below their thresholds;
//! 3. inter-channel distance: red/green and green/blue must be separated,
//!    while red must stay close to twice green.
//!
//! The conjunction is then cleaned by removing isolated pixels and closing
//! with a 3x3 square element. Inequalities are applied exactly as written,
//! including the `>=` in the second inter-channel condition, which rejects
//! pixels where `|R - 2G|` is large rather than small.

use thiserror::Error;

use crate::eval::ConfusionMatrix;
use crate::imaging::{channel_means, ImagingError, Label, RgbImage};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid segmentation parameter: {0}")]
    InvalidParams(String),
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, SegError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegParams {
    pub tau_g: f64,
    pub tau_b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            tau_g: 200.0,
            tau_b: 200.0,
            alpha: 0.1,
            beta: 0.47,
            delta: 0.14,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_g", self.tau_g), ("tau_b", self.tau_b)] {
            if !(0.0..=255.0).contains(&v) {
                return Err(SegError::InvalidParams(format!("{name}={v} outside [0, 255]")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("delta", self.delta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(SegError::InvalidParams(format!("{name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(SegError::DimensionMismatch(format!(
                "{} bits for {width}x{height}",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other.width, other.height)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        self.check_dims(other.width, other.height)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(*a && *b);
            union += usize::from(*a || *b);
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    fn check_dims(&self, w: usize, h: usize) -> Result<()> {
        if (self.width, self.height) != (w, h) {
            return Err(SegError::DimensionMismatch(format!(
                "{}x{} vs {w}x{h}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// 3x3 neighborhood reduction over in-bounds pixels.
    fn window(&self, dilate: bool) -> BinaryMask {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut bits = Vec::with_capacity(self.bits.len());
        for y in 0..h {
            for x in 0..w {
                let mut acc = !dilate;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let b = self.bits[(ny * w + nx) as usize];
                        if dilate {
                            acc |= b;
                        } else {
                            acc &= b;
                        }
                    }
                }
                bits.push(acc);
            }
        }
        BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    pub fn dilate(&self) -> BinaryMask {
        self.window(true)
    }

    pub fn erode(&self) -> BinaryMask {
        self.window(false)
    }
}

fn per_pixel(img: &RgbImage, f: impl Fn([f64; 3]) -> bool) -> BinaryMask {
    let bits = img
        .pixels()
        .map(|p| f([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]))
        .collect();
    BinaryMask {
        width: img.width(),
        height: img.height(),
        bits,
    }
}

/// Criterion 1: red must not trail green or blue relative to the channel means.
pub fn mask_mean_distance(img: &RgbImage, means: (f64, f64, f64)) -> BinaryMask {
    let (rm, gm, bm) = means;
    per_pixel(img, |[r, g, b]| !(r - rm < b - bm || r - rm < g - gm))
}

/// Criterion 2: green above `tau_g` or blue above `tau_b` rejects the pixel.
pub fn mask_value(img: &RgbImage, tau_g: f64, tau_b: f64) -> BinaryMask {
    per_pixel(img, |[_, g, b]| !(g > tau_g || b > tau_b))
}

/// Criterion 3: inter-channel distances, on real-valued channels.
pub fn mask_interchannel(img: &RgbImage, alpha: f64, beta: f64, delta: f64) -> BinaryMask {
    per_pixel(img, |[r, g, b]| {
        let reject = (r - g).abs() <= alpha * g
            || (r - 2.0 * g).abs() >= beta * r
            || (g - 2.0 * b).abs() <= delta * g;
        !reject
    })
}

/// Clears set pixels with no set 8-neighbor, then applies a 3x3 closing.
pub fn clean_mask(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut pruned = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[(y * w + x) as usize] {
                continue;
            }
            let mut has_neighbor = false;
            'scan: for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.bits[(ny * w + nx) as usize] {
                        has_neighbor = true;
                        break 'scan;
                    }
                }
            }
            if !has_neighbor {
                pruned.bits[(y * w + x) as usize] = false;
            }
        }
    }
    pruned.dilate().erode()
}

pub fn flame_seg(img: &RgbImage, params: &SegParams) -> Result<BinaryMask> {
    params.validate()?;
    let means = channel_means(img)?;
    let m1 = mask_mean_distance(img, means);
    let m2 = mask_value(img, params.tau_g, params.tau_b);
    let m3 = mask_interchannel(img, params.alpha, params.beta, params.delta);
    Ok(clean_mask(&m1.and(&m2)?.and(&m3)?))
}

/// Tallies predictions against references with flame as the positive class.
pub fn confusion_counts(pred: &[Label], reference: &[Label]) -> Result<ConfusionMatrix> {
    if pred.len() != reference.len() {
        return Err(SegError::LengthMismatch(pred.len(), reference.len()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &r) in pred.iter().zip(reference) {
        match (r, p) {
            (Label::Flame, Label::Flame) => cm.tp += 1,
            (Label::Flame, Label::NoFlame) => cm.fn_ += 1,
            (Label::NoFlame, Label::Flame) => cm.fp += 1,
            (Label::NoFlame, Label::NoFlame) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Blends set mask pixels 50/50 with pure red.
pub fn mask_overlay(img: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    mask.check_dims(img.width(), img.height())?;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                let p = img.pixel(x, y);
                let blend = |c: u8, t: f64| (0.5 * f64::from(c) + 0.5 * t).round() as u8;
                out.set_pixel(x, y, [blend(p[0], 255.0), blend(p[1], 0.0), blend(p[2], 0.0)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(rgb: [u8; 3]) -> RgbImage {
        RgbImage::filled(1, 1, rgb).unwrap()
    }

    #[test]
    fn mean_distance_cases() {
        let u = RgbImage::filled(4, 4, [12, 200, 7]).unwrap();
        let m = channel_means(&u).unwrap();
        assert_eq!(mask_mean_distance(&u, m).count(), 16);
        assert!(mask_mean_distance(&single([200, 50, 50]), (100.0, 100.0, 100.0)).get(0, 0));
        assert!(!mask_mean_distance(&single([50, 50, 200]), (100.0, 100.0, 100.0)).get(0, 0));
    }

    #[test]
    fn value_cases() {
        assert!(!mask_value(&single([0, 0, 255]), 200.0, 200.0).get(0, 0));
        assert!(mask_value(&single([255, 10, 10]), 200.0, 200.0).get(0, 0));
        assert!(!mask_value(&single([0, 201, 0]), 200.0, 200.0).get(0, 0));
        assert!(mask_value(&single([0, 200, 0]), 200.0, 200.0).get(0, 0));
    }

    #[test]
    fn interchannel_cases() {
        assert!(!mask_interchannel(&single([100, 100, 0]), 0.1, 0.47, 0.14).get(0, 0));
        assert!(mask_interchannel(&single([200, 90, 10]), 0.1, 0.47, 0.14).get(0, 0));
        assert!(!mask_interchannel(&single([100, 40, 20]), 0.1, 0.47, 0.14).get(0, 0));
    }

    #[test]
    fn clean_removes_isolated_pixel() {
        let mut m = BinaryMask::zeros(7, 7);
        m.set(3, 3, true);
        assert_eq!(clean_mask(&m).count(), 0);
    }

    #[test]
    fn clean_keeps_solid_block() {
        let mut m = BinaryMask::zeros(9, 9);
        for y in 2..7 {
            for x in 2..7 {
                m.set(x, y, true);
            }
        }
        assert_eq!(clean_mask(&m), m);
        assert_eq!(clean_mask(&BinaryMask::ones(5, 5)), BinaryMask::ones(5, 5));
    }

    #[test]
    fn clean_fills_center_hole() {
        let mut m = BinaryMask::zeros(7, 7);
        for y in 2..5 {
            for x in 2..5 {
                m.set(x, y, true);
            }
        }
        m.set(3, 3, false);
        let c = clean_mask(&m);
        assert!(c.get(3, 3));
        assert_eq!(c.count(), 9);
    }

    #[test]
    fn blue_image_is_empty() {
        let img = RgbImage::filled(8, 8, [0, 0, 255]).unwrap();
        assert_eq!(flame_seg(&img, &SegParams::default()).unwrap().count(), 0);
    }

    #[test]
    fn defaults_match_tuned_point() {
        let p = SegParams::default();
        assert_eq!((p.alpha, p.beta, p.delta), (0.1, 0.47, 0.14));
    }

    #[test]
    fn rejects_bad_params() {
        let p = SegParams {
            alpha: -1.0,
            ..SegParams::default()
        };
        assert!(p.validate().is_err());
        let p = SegParams {
            tau_g: 300.0,
            ..SegParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn confusion_examples() {
        use Label::*;
        let a = [Flame, Flame, NoFlame, NoFlame, Flame];
        let b = [Flame, NoFlame, NoFlame, Flame, Flame];
        let same = confusion_counts(&a, &a).unwrap();
        assert_eq!((same.fn_, same.fp), (0, 0));
        let ab = confusion_counts(&a, &b).unwrap();
        let ba = confusion_counts(&b, &a).unwrap();
        assert_eq!((ab.tp, ab.fn_, ab.fp, ab.tn), (ba.tp, ba.fp, ba.fn_, ba.tn));
        assert!(matches!(
            confusion_counts(&a, &b[..2]),
            Err(SegError::LengthMismatch(5, 2))
        ));
    }

    #[test]
    fn overlay_blends_red() {
        let img = RgbImage::filled(2, 1, [100, 100, 100]).unwrap();
        let mut m = BinaryMask::zeros(2, 1);
        m.set(1, 0, true);
        let o = mask_overlay(&img, &m).unwrap();
        assert_eq!(o.pixel(0, 0), [100, 100, 100]);
        assert_eq!(o.pixel(1, 0), [178, 50, 50]);
    }
}
