//! Raster loading, resampling and patch partitioning for paired RGB/thermal frames.
//!
//! RGB frames stay 8-bit; thermal frames are rescaled to `[0, 1]` at load time
//! because the source data carries no absolute temperature reference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageError, ImageReader};
use thiserror::Error;

use crate::segmentation::BinaryMask;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot read image {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported raster format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("image has a zero dimension")]
    ZeroDimension,
    #[error("thermal input {0} has more than one channel")]
    MultiChannelInput(PathBuf),
    #[error("resample target dimensions must be positive")]
    ZeroTarget,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image {width}x{height} is not divisible by patch size {patch_size}")]
    NonDivisibleSize {
        width: usize,
        height: usize,
        patch_size: usize,
    },
    #[error("image has no pixels")]
    EmptyImage,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension);
        }
        if data.len() != width * height * 3 {
            return Err(ImagingError::DimensionMismatch(format!(
                "rgb buffer has {} values, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Single-channel thermal raster with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    source_bit_depth: u8,
}

impl ThermalImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, source_bit_depth: u8) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::ZeroDimension);
        }
        if data.len() != width * height {
            return Err(ImagingError::DimensionMismatch(format!(
                "thermal buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::DimensionMismatch(format!(
                "thermal value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            source_bit_depth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn source_bit_depth(&self) -> u8 {
        self.source_bit_depth
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NoFlame,
    Flame,
}

impl Label {
    /// Class index used by the classifier output (`0` = no flame, `1` = flame).
    pub fn index(self) -> usize {
        match self {
            Label::NoFlame => 0,
            Label::Flame => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Flame
        } else {
            Label::NoFlame
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::NoFlame => Label::Flame,
            Label::Flame => Label::NoFlame,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoFlame => "no_flame",
            Label::Flame => "flame",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flame" => Some(Label::Flame),
            "no_flame" => Some(Label::NoFlame),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub grid_index: (usize, usize),
    pub size: usize,
    pub thermal: Vec<f64>,
    pub mask: Vec<u8>,
    pub label: Option<Label>,
}

impl Patch {
    pub fn mask_popcount(&self) -> usize {
        self.mask.iter().filter(|&&b| b != 0).count()
    }

    pub fn mask_as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| f64::from(b)).collect()
    }
}

fn classify_image_error(path: &Path, err: ImageError) -> ImagingError {
    match err {
        ImageError::Unsupported(e) => ImagingError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        other => ImagingError::UnreadableFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| ImagingError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| ImagingError::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if reader.format().is_none() {
        return Err(ImagingError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "unrecognized container".into(),
        });
    }
    reader.decode().map_err(|e| classify_image_error(path, e))
}

/// Loads an 8-bit, 3-channel PNG or PPM.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::ZeroDimension);
    }
    match img {
        DynamicImage::ImageRgb8(buf) => RgbImage::new(w, h, buf.into_raw()),
        other => Err(ImagingError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

/// Loads an 8- or 16-bit single-channel PNG or PGM, rescaling to `[0, 1]`.
pub fn load_thermal(path: impl AsRef<Path>) -> Result<ThermalImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::ZeroDimension);
    }
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
            ThermalImage::new(w, h, data, 8)
        }
        DynamicImage::ImageLuma16(buf) => {
            let data = buf
                .into_raw()
                .into_iter()
                .map(|v| f64::from(v) / 65535.0)
                .collect();
            ThermalImage::new(w, h, data, 16)
        }
        _ => Err(ImagingError::MultiChannelInput(path.to_path_buf())),
    }
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::util::write_atomic(path, bytes).map_err(ImagingError::Io)
}

fn encode_png(w: usize, h: usize, color: image::ExtendedColorType, raw: &[u8]) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| ImagingError::Io(std::io::Error::other(e.to_string())))?;
    Ok(out)
}

/// Writes a thermal frame as a 16-bit grayscale PNG.
pub fn save_thermal(path: impl AsRef<Path>, img: &ThermalImage) -> Result<()> {
    // The encoder takes native-endian samples and byte-swaps for PNG itself.
    let raw: Vec<u8> = img.data.iter().flat_map(|&v| quantize16(v).to_ne_bytes()).collect();
    let png = encode_png(img.width, img.height, image::ExtendedColorType::L16, &raw)?;
    write_atomic(path.as_ref(), &png)
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let png = encode_png(img.width, img.height, image::ExtendedColorType::Rgb8, &img.data)?;
    write_atomic(path.as_ref(), &png)
}

/// Writes a mask as an 8-bit PNG with set pixels at 255.
pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let raw: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let png = encode_png(mask.width(), mask.height(), image::ExtendedColorType::L8, &raw)?;
    write_atomic(path.as_ref(), &png)
}

/// Loads a mask PNG; any nonzero pixel is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = decode(path)?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    if w == 0 || h == 0 {
        return Err(ImagingError::ZeroDimension);
    }
    let bits = luma.into_raw().into_iter().map(|v| v != 0).collect();
    BinaryMask::from_bits(w, h, bits).map_err(|e| ImagingError::DimensionMismatch(e.to_string()))
}

/// Images that can be bilinearly resampled.
pub trait Resample: Sized {
    fn resample(&self, target_w: usize, target_h: usize) -> Result<Self>;
}

/// Bilinear sample positions for one axis with pixel-center alignment.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn bilinear_plane(
    src: &[f64],
    sw: usize,
    sh: usize,
    channels: usize,
    tw: usize,
    th: usize,
) -> Vec<f64> {
    let xs = axis_taps(sw, tw);
    let ys = axis_taps(sh, th);
    let mut out = Vec::with_capacity(tw * th * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |x: usize, y: usize| src[(y * sw + x) * channels + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

impl Resample for ThermalImage {
    fn resample(&self, target_w: usize, target_h: usize) -> Result<Self> {
        if target_w == 0 || target_h == 0 {
            return Err(ImagingError::ZeroTarget);
        }
        if (target_w, target_h) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let data = bilinear_plane(&self.data, self.width, self.height, 1, target_w, target_h)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        ThermalImage::new(target_w, target_h, data, self.source_bit_depth)
    }
}

impl Resample for RgbImage {
    fn resample(&self, target_w: usize, target_h: usize) -> Result<Self> {
        if target_w == 0 || target_h == 0 {
            return Err(ImagingError::ZeroTarget);
        }
        if (target_w, target_h) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let src: Vec<f64> = self.data.iter().map(|&v| f64::from(v)).collect();
        let data = bilinear_plane(&src, self.width, self.height, 3, target_w, target_h)
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::new(target_w, target_h, data)
    }
}

pub fn resample<T: Resample>(image: &T, target_w: usize, target_h: usize) -> Result<T> {
    image.resample(target_w, target_h)
}

/// Splits a thermal frame and its mask into a row-major grid of square patches.
///
/// A patch is labeled flame iff its mask region has at least one set pixel.
pub fn patchify(
    thermal: &ThermalImage,
    mask: &BinaryMask,
    patch_size: usize,
    frame_id: &str,
) -> Result<(Vec<Patch>, PatchGrid)> {
    if mask.width() != thermal.width || mask.height() != thermal.height {
        return Err(ImagingError::DimensionMismatch(format!(
            "mask {}x{} vs thermal {}x{}",
            mask.width(),
            mask.height(),
            thermal.width,
            thermal.height
        )));
    }
    if patch_size == 0 || !thermal.width.is_multiple_of(patch_size) || !thermal.height.is_multiple_of(patch_size) {
        return Err(ImagingError::NonDivisibleSize {
            width: thermal.width,
            height: thermal.height,
            patch_size,
        });
    }
    let rows = thermal.height / patch_size;
    let cols = thermal.width / patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut t = Vec::with_capacity(patch_size * patch_size);
            let mut m = Vec::with_capacity(patch_size * patch_size);
            for y in r * patch_size..(r + 1) * patch_size {
                let start = y * thermal.width + c * patch_size;
                t.extend_from_slice(&thermal.data[start..start + patch_size]);
                m.extend(mask.bits()[start..start + patch_size].iter().map(|&b| u8::from(b)));
            }
            let label = if m.iter().any(|&b| b != 0) {
                Label::Flame
            } else {
                Label::NoFlame
            };
            patches.push(Patch {
                grid_index: (r, c),
                size: patch_size,
                thermal: t,
                mask: m,
                label: Some(label),
            });
        }
    }
    let grid = PatchGrid {
        patch_size,
        rows,
        cols,
        frame_id: frame_id.to_string(),
    };
    Ok((patches, grid))
}

/// Inverse of [`patchify`] for the thermal plane.
pub fn reassemble(patches: &[Patch], grid: &PatchGrid) -> Result<ThermalImage> {
    if patches.len() != grid.rows * grid.cols {
        return Err(ImagingError::DimensionMismatch(format!(
            "{} patches for a {}x{} grid",
            patches.len(),
            grid.rows,
            grid.cols
        )));
    }
    let ps = grid.patch_size;
    let width = grid.cols * ps;
    let mut data = vec![0.0; width * grid.rows * ps];
    for p in patches {
        let (r, c) = p.grid_index;
        for py in 0..ps {
            let dst = (r * ps + py) * width + c * ps;
            data[dst..dst + ps].copy_from_slice(&p.thermal[py * ps..(py + 1) * ps]);
        }
    }
    ThermalImage::new(width, grid.rows * ps, data, 16)
}

pub fn channel_means(img: &RgbImage) -> Result<(f64, f64, f64)> {
    let n = img.width * img.height;
    if n == 0 {
        return Err(ImagingError::EmptyImage);
    }
    let mut sums = [0u64; 3];
    for px in img.pixels() {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += u64::from(v);
        }
    }
    let n = n as f64;
    Ok((sums[0] as f64 / n, sums[1] as f64 / n, sums[2] as f64 / n))
}

/// Splits `frame_0001.rgb.png` into (`frame_0001`, `rgb`).
pub fn frame_stem(path: &Path) -> Option<(String, String)> {
    let name = path.file_name()?.to_str()?;
    let mut parts = name.rsplitn(3, '.');
    let _ext = parts.next()?;
    let modality = parts.next()?;
    let stem = parts.next()?;
    Some((stem.to_string(), modality.to_string()))
}

/// Pairs `<stem>.rgb.<ext>` with `<stem>.ir.<ext>` files in a directory, sorted by stem.
pub fn pair_frames(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut rgb = std::collections::BTreeMap::new();
    let mut ir = std::collections::BTreeMap::new();
    for entry in fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        if let Some((stem, modality)) = frame_stem(&path) {
            match modality.as_str() {
                "rgb" => {
                    rgb.insert(stem, path);
                }
                "ir" => {
                    ir.insert(stem, path);
                }
                _ => {}
            }
        }
    }
    Ok(rgb
        .into_iter()
        .filter_map(|(stem, r)| ir.remove(&stem).map(|t| (stem, r, t)))
        .collect())
}

fn pgm16(size: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n65535\n").into_bytes();
    for &v in values {
        out.extend_from_slice(&quantize16(v).to_be_bytes());
    }
    out
}

/// Exports patches as 16-bit PGM files plus `index.csv` (`frame_id,row,col,label`).
pub fn export_patches(dir: impl AsRef<Path>, frames: &[(PatchGrid, Vec<Patch>)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = String::from("frame_id,row,col,label\n");
    for (grid, patches) in frames {
        for p in patches {
            let (r, c) = p.grid_index;
            let name = format!("{}_r{r:02}_c{c:02}.pgm", grid.frame_id);
            write_atomic(&dir.join(&name), &pgm16(p.size, &p.thermal))?;
            let label = p.label.map(Label::as_str).unwrap_or("");
            let _ = writeln!(index, "{},{r},{c},{label}", grid.frame_id);
        }
    }
    write_atomic(&dir.join("index.csv"), index.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ThermalImage {
        let data = (0..w * h).map(|i| i as f64 / (w * h) as f64).collect();
        ThermalImage::new(w, h, data, 16).unwrap()
    }

    #[test]
    fn decodes_green_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[0, 255, 0]);
        }
        fs::write(&path, bytes).unwrap();
        let img = load_rgb(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert!(img.pixels().all(|p| p == [0, 255, 0]));
    }

    #[test]
    fn png_shape_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_rgb(&path, &RgbImage::filled(256, 256, [1, 2, 3]).unwrap()).unwrap();
        let img = load_rgb(&path).unwrap();
        assert_eq!(img.data().len(), 256 * 256 * 3);
    }

    #[test]
    fn truncated_file_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_rgb(&path, &RgbImage::filled(16, 16, [9, 9, 9]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_rgb(&path), Err(ImagingError::UnreadableFile { .. })));
        assert!(matches!(
            load_rgb(dir.path().join("missing.png")),
            Err(ImagingError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn thermal_linear_map() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.pgm");
        fs::write(&p8, [b"P5\n2 1\n255\n".as_slice(), &[255, 0]].concat()).unwrap();
        let t = load_thermal(&p8).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
        assert_eq!(t.source_bit_depth(), 8);

        let p16 = dir.path().join("b.pgm");
        let v: u16 = 32767;
        fs::write(&p16, [b"P5\n1 1\n65535\n".as_slice(), &v.to_be_bytes()].concat()).unwrap();
        let t = load_thermal(&p16).unwrap();
        assert_eq!(t.source_bit_depth(), 16);
        assert!((t.data()[0] - 32767.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn rgb_input_rejected_as_thermal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        save_rgb(&path, &RgbImage::filled(4, 4, [1, 2, 3]).unwrap()).unwrap();
        assert!(matches!(load_thermal(&path), Err(ImagingError::MultiChannelInput(_))));
    }

    #[test]
    fn thermal_png_roundtrip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let img = ramp(17, 9);
        save_thermal(&path, &img).unwrap();
        let back = load_thermal(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn resample_shapes_and_constants() {
        let t = ThermalImage::new(128, 128, vec![0.25; 128 * 128], 8).unwrap();
        let up = t.resample(256, 256).unwrap();
        assert_eq!((up.width(), up.height()), (256, 256));
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let wide = RgbImage::filled(640, 512, [7, 8, 9]).unwrap();
        let down = wide.resample(256, 256).unwrap();
        assert_eq!((down.width(), down.height()), (256, 256));
        assert!(down.pixels().all(|p| p == [7, 8, 9]));

        assert!(matches!(t.resample(0, 4), Err(ImagingError::ZeroTarget)));
    }

    #[test]
    fn resample_identity_dims() {
        let t = ramp(12, 7);
        assert_eq!(t.resample(12, 7).unwrap(), t);
    }

    #[test]
    fn patchify_counts_and_labels() {
        let t = ThermalImage::new(256, 256, vec![0.5; 256 * 256], 8).unwrap();
        let empty = BinaryMask::zeros(256, 256);
        let (patches, grid) = patchify(&t, &empty, 32, "f").unwrap();
        assert_eq!(patches.len(), 64);
        assert_eq!((grid.rows, grid.cols), (8, 8));
        assert!(patches.iter().all(|p| p.label == Some(Label::NoFlame)));

        let mut one = BinaryMask::zeros(256, 256);
        one.set(0, 0, true);
        let (patches, _) = patchify(&t, &one, 32, "f").unwrap();
        assert_eq!(patches[0].label, Some(Label::Flame));
        assert_eq!(
            patches.iter().filter(|p| p.label == Some(Label::NoFlame)).count(),
            63
        );
    }

    #[test]
    fn patchify_errors() {
        let t = ThermalImage::new(64, 64, vec![0.0; 64 * 64], 8).unwrap();
        assert!(matches!(
            patchify(&t, &BinaryMask::zeros(32, 64), 32, "f"),
            Err(ImagingError::DimensionMismatch(_))
        ));
        assert!(matches!(
            patchify(&t, &BinaryMask::zeros(64, 64), 30, "f"),
            Err(ImagingError::NonDivisibleSize { .. })
        ));
    }

    #[test]
    fn channel_mean_examples() {
        let u = RgbImage::filled(3, 3, [10, 20, 30]).unwrap();
        assert_eq!(channel_means(&u).unwrap(), (10.0, 20.0, 30.0));
        let two = RgbImage::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        assert_eq!(channel_means(&two).unwrap(), (127.5, 127.5, 127.5));
        let three = RgbImage::new(3, 1, vec![255, 0, 0, 0, 255, 0, 0, 0, 255]).unwrap();
        assert_eq!(channel_means(&three).unwrap(), (85.0, 85.0, 85.0));
    }

    #[test]
    fn stems_pair_up() {
        assert_eq!(
            frame_stem(Path::new("/x/frame_0001.rgb.png")),
            Some(("frame_0001".into(), "rgb".into()))
        );
        assert_eq!(frame_stem(Path::new("plain.png")), None);
    }

    #[test]
    fn export_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        let t = ramp(64, 32);
        let (patches, grid) = patchify(&t, &BinaryMask::zeros(64, 32), 32, "f7").unwrap();
        export_patches(dir.path(), &[(grid, patches)]).unwrap();
        let index = fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert_eq!(index.lines().count(), 3);
        assert!(index.contains("f7,0,1,no_flame"));
        let back = load_thermal(dir.path().join("f7_r00_c01.pgm")).unwrap();
        assert_eq!(back.width(), 32);
    }
}
