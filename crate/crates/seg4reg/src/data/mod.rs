//! Dataset ingestion and preprocessing: the angle-CSV manifest format,
//! grayscale PNG IO, bilinear resizing to the network input size, and
//! seed-deterministic geometric augmentation.
//!
//! Dataset layout (one directory per split):
//!
//! ```text
//! <dir>/angles.csv            header: source_id,pt_deg,mt_deg,tl_deg
//! <dir>/images/<id>.png       8-bit grayscale radiograph
//! <dir>/landmarks/<id>.txt    optional, 68 lines of "row col"
//! <dir>/masks/<id>.png        optional, 8-bit grayscale {0, 255}
//! ```
//!
//! A root containing `train/` (and optionally `test/`) subdirectories is
//! treated as a split dataset; a flat directory is a single train split.

pub mod landmarks;
pub mod synthetic;

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{derive_seed, CobbTriple, LandmarkSet, SpineMask, XrayImage, LANDMARK_COUNT};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Array2;

pub const ANGLE_CSV_HEADER: &str = "source_id,pt_deg,mt_deg,tl_deg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub image_path: PathBuf,
    pub landmark_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub angles_deg: [f64; 3],
    pub split: Split,
}

/// Validated dataset index, deterministically ordered by source id.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("manifest: {e}")))
    }

    /// Builds a manifest from already-validated records (e.g. a prepared
    /// manifest file), enforcing ordering and per-split id uniqueness.
    pub fn from_records(mut records: Vec<ManifestRecord>) -> Result<Self> {
        records.sort_by(|a, b| (a.split, &a.source_id).cmp(&(b.split, &b.source_id)));
        for w in records.windows(2) {
            if w[0].source_id == w[1].source_id && w[0].split == w[1].split {
                return Err(Error::Malformed(format!(
                    "duplicate source id '{}'",
                    w[0].source_id
                )));
            }
        }
        Ok(Self { records })
    }
}

/// Loads and validates a dataset rooted at `root` (split layout or flat
/// train-only directory).
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut records = Vec::new();
    if root.join("train").is_dir() {
        records.extend(load_split_dir(&root.join("train"), Split::Train)?);
        if root.join("test").is_dir() {
            records.extend(load_split_dir(&root.join("test"), Split::Test)?);
        }
    } else {
        records.extend(load_split_dir(root, Split::Train)?);
    }
    records.sort_by(|a, b| (a.split, &a.source_id).cmp(&(b.split, &b.source_id)));
    for w in records.windows(2) {
        if w[0].source_id == w[1].source_id && w[0].split == w[1].split {
            return Err(Error::Malformed(format!(
                "duplicate source id '{}'",
                w[0].source_id
            )));
        }
    }
    Ok(DatasetManifest { records })
}

impl std::cmp::PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl std::cmp::Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let rank = |s: &Split| match s {
            Split::Train => 0,
            Split::Test => 1,
        };
        rank(self).cmp(&rank(other))
    }
}

fn load_split_dir(dir: &Path, split: Split) -> Result<Vec<ManifestRecord>> {
    let csv_path = dir.join("angles.csv");
    if !csv_path.is_file() {
        return Err(Error::MissingFile(csv_path));
    }
    let text = std::fs::read_to_string(&csv_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == ANGLE_CSV_HEADER => {}
        other => {
            return Err(Error::Malformed(format!(
                "angles.csv must start with '{ANGLE_CSV_HEADER}', got {:?}",
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Malformed(format!(
                "angles.csv line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let source_id = fields[0].to_string();
        let mut angles = [0.0; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            angles[k] = f.parse::<f64>().map_err(|_| {
                Error::Malformed(format!("angles.csv line {}: bad number '{f}'", lineno + 1))
            })?;
            if !(0.0..=90.0).contains(&angles[k]) {
                return Err(Error::OutOfRange(format!(
                    "angles.csv line {}: angle {} outside [0, 90]",
                    lineno + 1,
                    angles[k]
                )));
            }
        }
        let image_path = dir.join("images").join(format!("{source_id}.png"));
        if !image_path.is_file() {
            return Err(Error::MissingFile(image_path));
        }
        let landmark_path = existing(dir.join("landmarks").join(format!("{source_id}.txt")));
        let mask_path = existing(dir.join("masks").join(format!("{source_id}.png")));
        records.push(ManifestRecord {
            source_id,
            image_path,
            landmark_path,
            mask_path,
            angles_deg: angles,
            split,
        });
    }
    Ok(records)
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.is_file().then_some(path)
}

/// Bilinear resize to the network input size, clamped back into [0, 1].
pub fn preprocess(img: &XrayImage, target: (usize, usize)) -> Result<XrayImage> {
    let (th, tw) = target;
    if th < 8 || tw < 8 {
        return Err(Error::InvalidInput(format!(
            "degenerate target size {th}x{tw}"
        )));
    }
    let resized = img
        .pixels()
        .resize_bilinear(th, tw)
        .map(|v| v.clamp(0.0, 1.0));
    XrayImage::new(resized, img.source_id())
}

/// Geometric augmentation parameters. The seed is the dataset-level
/// augmentation seed; per-sample streams derive from it via
/// [`per_sample_seed`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub rotate_deg: (f64, f64),
    pub rescale: (f64, f64),
    pub target: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_deg: (-45.0, 45.0),
            rescale: (0.85, 1.25),
            target: (512, 256),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rotate_deg.0 > self.rotate_deg.1 || self.rescale.0 > self.rescale.1 {
            return Err(Error::InvalidInput(
                "augmentation ranges must satisfy lo <= hi".into(),
            ));
        }
        if self.target.0 == 0 || self.target.1 == 0 {
            return Err(Error::InvalidInput(
                "augmentation target size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Seed for one sample's augmentation stream: hash of (dataset seed, source
/// id, epoch), so results are independent of iteration order.
pub fn per_sample_seed(global_seed: u64, source_id: &str, epoch: usize) -> u64 {
    derive_seed(&[
        &global_seed.to_le_bytes(),
        source_id.as_bytes(),
        &(epoch as u64).to_le_bytes(),
    ])
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Applies one random flip/rotate/rescale draw to an image/mask pair.
///
/// The identical geometric transform is applied to both; the image samples
/// bilinearly, the mask nearest-neighbor so binary labels stay binary.
/// Angle labels pass through unchanged: the clinical angles are relative
/// between endplates, so global rotation and mirroring leave them invariant.
pub fn augment(
    img: &XrayImage,
    mask: &SpineMask,
    angles: &CobbTriple,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(XrayImage, SpineMask, CobbTriple)> {
    cfg.validate()?;
    validate_pair_shapes(img, mask)?;
    let flip = rng.random::<f64>() < cfg.flip_prob.clamp(0.0, 1.0);
    let phi_deg = uniform(rng, cfg.rotate_deg.0, cfg.rotate_deg.1);
    let scale = uniform(rng, cfg.rescale.0, cfg.rescale.1);

    if !flip && phi_deg == 0.0 && scale == 1.0 && img.shape() == cfg.target {
        return Ok((img.clone(), mask.clone(), *angles));
    }

    let (ih, iw) = img.shape();
    let (th, tw) = cfg.target;
    let phi = phi_deg.to_radians();
    let (sin, cos) = phi.sin_cos();
    let icr = (ih as f64 - 1.0) / 2.0;
    let icc = (iw as f64 - 1.0) / 2.0;
    let ocr = (th as f64 - 1.0) / 2.0;
    let occ = (tw as f64 - 1.0) / 2.0;

    let mut out_img = Array2::zeros(th, tw);
    let mut out_mask = Array2::zeros(th, tw);
    for r in 0..th {
        for c in 0..tw {
            let y = r as f64 - ocr;
            let mut x = c as f64 - occ;
            if flip {
                x = -x;
            }
            // invert scale then rotation
            let ys = y / scale;
            let xs = x / scale;
            let src_r = cos * ys + sin * xs + icr;
            let src_c = -sin * ys + cos * xs + icc;
            out_img.set(r, c, sample_bilinear(img.pixels(), src_r, src_c));
            out_mask.set(r, c, sample_nearest(mask.values(), src_r, src_c));
        }
    }
    let img_out = XrayImage::new(out_img.map(|v| v.clamp(0.0, 1.0)), img.source_id())?;
    let mask_out = match mask.kind() {
        crate::domain::MaskKind::GroundTruth => SpineMask::ground_truth(out_mask)?,
        crate::domain::MaskKind::Predicted => SpineMask::predicted(out_mask)?,
    };
    Ok((img_out, mask_out, *angles))
}

fn validate_pair_shapes(img: &XrayImage, mask: &SpineMask) -> Result<()> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn sample_bilinear(a: &Array2, r: f64, c: f64) -> f64 {
    let (h, w) = a.shape();
    if r < -0.5 || c < -0.5 || r > h as f64 - 0.5 || c > w as f64 - 0.5 {
        return 0.0;
    }
    let rc = r.clamp(0.0, (h - 1) as f64);
    let cc = c.clamp(0.0, (w - 1) as f64);
    let r0 = rc.floor() as usize;
    let c0 = cc.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = rc - r0 as f64;
    let fc = cc - c0 as f64;
    let top = a.get(r0, c0) * (1.0 - fc) + a.get(r0, c1) * fc;
    let bot = a.get(r1, c0) * (1.0 - fc) + a.get(r1, c1) * fc;
    top * (1.0 - fr) + bot * fr
}

fn sample_nearest(a: &Array2, r: f64, c: f64) -> f64 {
    let (h, w) = a.shape();
    let ri = r.round();
    let ci = c.round();
    if ri < 0.0 || ci < 0.0 || ri >= h as f64 || ci >= w as f64 {
        return 0.0;
    }
    a.get(ri as usize, ci as usize)
}

// ---------------------------------------------------------------------------
// PNG IO
// ---------------------------------------------------------------------------

/// Loads an 8-bit PNG into [0, 1]; RGB inputs are averaged to grayscale.
pub fn load_gray_png(path: &Path) -> Result<Array2> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Malformed(format!(
            "{}: only 8-bit PNGs supported",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.buffer_size()];
    let data: Vec<f64> = match info.color_type {
        png::ColorType::Grayscale => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        png::ColorType::Rgb => bytes
            .chunks_exact(3)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0))
            .collect(),
        other => {
            return Err(Error::Malformed(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    Array2::from_vec(h, w, data)
}

/// Writes values in [0, 1] as an 8-bit grayscale PNG (atomically).
pub fn save_gray_png(path: &Path, values: &Array2) -> Result<()> {
    let (h, w) = values.shape();
    let bytes: Vec<u8> = values
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut png_bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(BufWriter::new(&mut png_bytes), w as u32, h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    }
    write_atomic(path, &png_bytes)
}

/// Loads an 8-bit RGB PNG as interleaved bytes.
pub fn load_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(Error::Malformed(format!(
            "{}: expected 8-bit RGB",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    buf.truncate(info.buffer_size());
    Ok((w, h, buf))
}

/// Writes interleaved RGB bytes as an 8-bit PNG (atomically).
pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch("rgb buffer size".into()));
    }
    let mut png_bytes = Vec::new();
    {
        let mut encoder =
            png::Encoder::new(BufWriter::new(&mut png_bytes), width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
        writer
            .write_image_data(rgb)
            .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    }
    write_atomic(path, &png_bytes)
}

/// Loads a landmark file: 68 lines of `row col` in image pixel units.
pub fn load_landmarks(path: &Path, image_shape: (usize, usize)) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let r: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("landmark line {}", lineno + 1)))?;
        let c: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("landmark line {}", lineno + 1)))?;
        points.push((r, c));
    }
    LandmarkSet::new(points, image_shape)
}

/// Writes landmark points as 68 lines of `row col`.
pub fn save_landmarks(path: &Path, lm: &LandmarkSet) -> Result<()> {
    let mut text = String::new();
    for &(r, c) in lm.points() {
        text.push_str(&format!("{r:.6} {c:.6}\n"));
    }
    write_atomic(path, text.as_bytes())
}
