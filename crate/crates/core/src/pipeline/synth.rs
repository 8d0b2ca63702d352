//! Synthetic paired RGB/thermal corpus with known flame regions.
//!
//! Each frame has a textured green background. With probability
//! `flame_probability` an orange disc is painted on the RGB frame and a hot
//! dome with per-pixel flicker occupies exactly the same pixels in the thermal
//! frame. With
//! probability `distractor_probability` a broad warm blob is added to the
//! thermal frame only, so hot spots alone do not imply flame.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::imaging::{self, RgbImage, ThermalImage};
use crate::segmentation::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Gradient,
    ValueNoise,
}

impl Texture {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(Self::Flat),
            "gradient" => Some(Self::Gradient),
            "noise" | "value-noise" => Some(Self::ValueNoise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_frames: usize,
    pub frame_size: usize,
    /// Disc radius range in pixels, inclusive.
    pub blob_radius_range: (f64, f64),
    pub background_texture: Texture,
    /// Peak thermal value range of flame blobs.
    pub blob_intensity: (f64, f64),
    pub flame_probability: f64,
    pub distractor_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_frames: 200,
            frame_size: 128,
            blob_radius_range: (6.0, 14.0),
            background_texture: Texture::ValueNoise,
            blob_intensity: (0.7, 1.0),
            flame_probability: 0.5,
            distractor_probability: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        let (rmin, rmax) = self.blob_radius_range;
        let (ilo, ihi) = self.blob_intensity;
        if self.n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if self.frame_size < 8 {
            return bad(format!("frame_size {} is below 8", self.frame_size));
        }
        if !(rmin > 0.0 && rmin <= rmax && rmax < self.frame_size as f64 / 2.0) {
            return bad(format!("radius range ({rmin}, {rmax}) must satisfy 0 < min <= max < frame_size/2"));
        }
        if !(0.0..=1.0).contains(&ilo) || !(0.0..=1.0).contains(&ihi) || ilo > ihi {
            return bad(format!("intensity range ({ilo}, {ihi}) must lie in [0, 1]"));
        }
        for (name, p) in [
            ("flame_probability", self.flame_probability),
            ("distractor_probability", self.distractor_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} is not a probability"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub id: String,
    pub rgb: RgbImage,
    pub thermal: ThermalImage,
    pub truth: BinaryMask,
}

/// Smooth texture in [0, 1].
fn texture_field(kind: Texture, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        Texture::Flat => vec![0.5; size * size],
        Texture::Gradient => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (angle.cos(), angle.sin());
            let half = size as f64 / 2.0;
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let t = ((x as f64 - half) * c + (y as f64 - half) * s) / (size as f64 * 1.5);
                    out.push((0.5 + t).clamp(0.0, 1.0));
                }
            }
            out
        }
        Texture::ValueNoise => {
            let cell = 16usize;
            let n = size / cell + 2;
            let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
                    let (ix, iy) = (fx as usize, fy as usize);
                    let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                    let at = |i: usize, j: usize| lattice[j * n + i];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    out.push(top * (1.0 - ty) + bottom * ty);
                }
            }
            out
        }
    }
}

fn jitter(base: f64, spread: f64, rng: &mut ChaCha8Rng) -> u8 {
    (base + rng.gen_range(-spread..=spread)).round().clamp(0.0, 255.0) as u8
}

fn generate_frame(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<SynthFrame, PipelineError> {
    let size = spec.frame_size;
    let field = texture_field(spec.background_texture, size, rng);

    let mut rgb = Vec::with_capacity(size * size * 3);
    for &t in &field {
        let shade = (t - 0.5) * 30.0;
        rgb.push(jitter(30.0 + shade, 6.0, rng));
        rgb.push(jitter(140.0 + shade, 6.0, rng));
        rgb.push(jitter(40.0 + shade, 6.0, rng));
    }
    let mut thermal: Vec<f64> = field.iter().map(|t| 0.15 + 0.2 * t).collect();
    let mut truth = BinaryMask::zeros(size, size);

    if rng.gen_bool(spec.distractor_probability) {
        let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let sigma = rng.gen_range(spec.blob_radius_range.1..=2.0 * spec.blob_radius_range.1);
        let amp = rng.gen_range(0.3..0.5);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                thermal[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    if rng.gen_bool(spec.flame_probability) {
        let (rmin, rmax) = spec.blob_radius_range;
        let r = if rmin == rmax { rmin } else { rng.gen_range(rmin..=rmax) };
        let cx = rng.gen_range(r..=size as f64 - r);
        let cy = rng.gen_range(r..=size as f64 - r);
        let peak = if spec.blob_intensity.0 == spec.blob_intensity.1 {
            spec.blob_intensity.0
        } else {
            rng.gen_range(spec.blob_intensity.0..=spec.blob_intensity.1)
        };
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                if d2 > r * r {
                    continue;
                }
                truth.set(x, y, true);
                let i = y * size + x;
                rgb[3 * i] = jitter(230.0, 8.0, rng);
                rgb[3 * i + 1] = jitter(120.0, 8.0, rng);
                rgb[3 * i + 2] = jitter(25.0, 8.0, rng);
                let dome = 0.8 + 0.2 * (1.0 - d2 / (r * r));
                // Turbulent flicker: flames are hot and spatially rough.
                let flicker = 1.0 + rng.gen_range(-0.15..=0.15);
                thermal[i] = peak * dome * flicker;
            }
        }
    }

    for v in &mut thermal {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SynthFrame {
        id: format!("frame_{index:04}"),
        rgb: RgbImage::new(size, size, rgb)?,
        thermal: ThermalImage::new(size, size, thermal, 16)?,
        truth,
    })
}

/// Generates the corpus in memory; identical specs give identical frames.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthFrame>, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_frames).map(|i| generate_frame(spec, i, &mut rng)).collect()
}

/// Writes `<id>.rgb.png`, `<id>.ir.png` (16-bit) and `<id>.mask.png` per frame.
pub fn write_frames(dir: impl AsRef<Path>, frames: &[SynthFrame]) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for f in frames {
        imaging::save_rgb(dir.join(format!("{}.rgb.png", f.id)), &f.rgb)?;
        imaging::save_thermal(dir.join(format!("{}.ir.png", f.id)), &f.thermal)?;
        imaging::save_mask(dir.join(format!("{}.mask.png", f.id)), &f.truth)?;
    }
    Ok(())
}

/// Generates a corpus and writes it to `dir`.
pub fn synth_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Vec<SynthFrame>, PipelineError> {
    let frames = generate(spec)?;
    write_frames(dir, &frames)?;
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{flame_seg, SegParams};

    fn small(n: usize) -> SynthSpec {
        SynthSpec {
            n_frames: n,
            frame_size: 64,
            blob_radius_range: (5.0, 10.0),
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn no_flame_when_probability_zero() {
        let spec = SynthSpec {
            flame_probability: 0.0,
            ..small(10)
        };
        assert!(generate(&spec).unwrap().iter().all(|f| f.truth.count() == 0));
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
    }

    #[test]
    fn written_files_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_dataset(&small(3), a.path()).unwrap();
        synth_dataset(&small(3), b.path()).unwrap();
        for name in ["frame_0000.rgb.png", "frame_0002.ir.png", "frame_0001.mask.png"] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        assert_eq!(imaging::pair_frames(a.path()).unwrap().len(), 3);
    }

    #[test]
    fn segmentation_recovers_discs() {
        let spec = SynthSpec {
            flame_probability: 1.0,
            ..small(20)
        };
        let frames = generate(&spec).unwrap();
        let mut total = 0.0;
        for f in &frames {
            let m = flame_seg(&f.rgb, &SegParams::default()).unwrap();
            total += m.iou(&f.truth).unwrap();
        }
        assert!(total / frames.len() as f64 >= 0.9);
    }

    #[test]
    fn rejects_invalid_specs() {
        for spec in [
            SynthSpec { n_frames: 0, ..small(1) },
            SynthSpec { blob_radius_range: (5.0, 40.0), ..small(1) },
            SynthSpec { blob_intensity: (0.9, 0.2), ..small(1) },
            SynthSpec { flame_probability: 1.5, ..small(1) },
        ] {
            assert!(matches!(generate(&spec), Err(PipelineError::InvalidSpec(_))));
        }
    }
}
