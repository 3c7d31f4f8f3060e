//! Shared domain types: radiographs, spine masks, clinical angle triples,
//! class-activation maps, vertebra landmarks, and named parameter sets.
//!
//! All types are immutable value objects after construction and are safe to
//! share across workers. [`ParameterSet`] is the single exception: it is
//! mutated by the optimizer and must have one writer at a time.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Array2;

/// Degrees spanned by the normalized angle unit: angles are stored in [0, 1]
/// and converted with `degrees = normalized * 90`.
pub const ANGLE_MAX_DEG: f64 = 90.0;

/// Number of vertebrae carried by a landmark file (4 corners each).
pub const VERTEBRA_COUNT: usize = 17;

/// Landmark points per image.
pub const LANDMARK_COUNT: usize = VERTEBRA_COUNT * 4;

/// Single-channel anterior-posterior radiograph with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct XrayImage {
    pixels: Array2,
    source_id: String,
}

impl XrayImage {
    pub fn new(pixels: Array2, source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = pixels.shape();
        if h < 8 || w < 8 {
            return Err(Error::InvalidInput(format!(
                "image must be at least 8x8, got {h}x{w}"
            )));
        }
        if !pixels.all_finite() {
            return Err(Error::OutOfRange("image contains non-finite values".into()));
        }
        if pixels.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::OutOfRange(
                "image intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Array2 {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

/// Whether a mask carries ground-truth labels or model probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskKind {
    GroundTruth,
    Predicted,
}

/// Per-pixel spine map aligned to an [`XrayImage`]: binary for ground truth,
/// soft probabilities for predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpineMask {
    values: Array2,
    kind: MaskKind,
}

impl SpineMask {
    pub fn ground_truth(values: Array2) -> Result<Self> {
        if values.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::OutOfRange(
                "ground-truth mask must contain only {0, 1}".into(),
            ));
        }
        Ok(Self {
            values,
            kind: MaskKind::GroundTruth,
        })
    }

    pub fn predicted(values: Array2) -> Result<Self> {
        if !values.all_finite() || values.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::OutOfRange(
                "predicted mask values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            values,
            kind: MaskKind::Predicted,
        })
    }

    pub fn values(&self) -> &Array2 {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Binarized copy (threshold 0.5); identity for ground-truth masks.
    pub fn thresholded(&self) -> Array2 {
        self.values.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }
}

/// Checks that an image/mask pair is shape-aligned and internally valid.
/// Pure: never mutates its inputs; returns the pair on success.
pub fn validate_pair<'a>(
    img: &'a XrayImage,
    mask: &'a SpineMask,
) -> Result<(&'a XrayImage, &'a SpineMask)> {
    if img.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            img.shape(),
            mask.shape()
        )));
    }
    Ok((img, mask))
}

/// The three clinical scoliosis angles (proximal thoracic, main thoracic,
/// thoracolumbar/lumbar), stored normalized in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CobbTriple {
    pt: f64,
    mt: f64,
    tl: f64,
}

impl CobbTriple {
    pub fn from_normalized(values: [f64; 3]) -> Result<Self> {
        for (name, v) in ["pt", "mt", "tl"].iter().zip(values) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!(
                    "normalized angle {name}={v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            pt: values[0],
            mt: values[1],
            tl: values[2],
        })
    }

    pub fn from_degrees(values: [f64; 3]) -> Result<Self> {
        Self::from_degrees_with_max(values, ANGLE_MAX_DEG)
    }

    /// Normalization with a configurable divisor for datasets with a
    /// different clinical upper bound.
    pub fn from_degrees_with_max(values: [f64; 3], max_deg: f64) -> Result<Self> {
        for (name, v) in ["pt", "mt", "tl"].iter().zip(values) {
            if !v.is_finite() || !(0.0..=max_deg).contains(&v) {
                return Err(Error::OutOfRange(format!(
                    "angle {name}={v}° outside [0°, {max_deg}°]"
                )));
            }
        }
        Ok(Self {
            pt: values[0] / max_deg,
            mt: values[1] / max_deg,
            tl: values[2] / max_deg,
        })
    }

    pub fn normalized(&self) -> [f64; 3] {
        [self.pt, self.mt, self.tl]
    }

    pub fn degrees(&self) -> [f64; 3] {
        [
            self.pt * ANGLE_MAX_DEG,
            self.mt * ANGLE_MAX_DEG,
            self.tl * ANGLE_MAX_DEG,
        ]
    }
}

/// Linearly maps degree-valued angles into the normalized [0, 1] unit.
pub fn normalize_angles(degrees: [f64; 3]) -> Result<CobbTriple> {
    CobbTriple::from_degrees(degrees)
}

/// Whether a CAM is at the regressor's native feature resolution or has been
/// resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamResolution {
    Native,
    Upsampled,
}

/// Spatial class-activation map, normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    values: Array2,
    resolution: CamResolution,
}

impl Cam {
    pub fn new(values: Array2, resolution: CamResolution) -> Result<Self> {
        if !values.all_finite() || values.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::OutOfRange("CAM values must lie in [0, 1]".into()));
        }
        Ok(Self { values, resolution })
    }

    pub fn values(&self) -> &Array2 {
        &self.values
    }

    pub fn resolution(&self) -> CamResolution {
        self.resolution
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Bilinear resample to a target resolution, clamped back into [0, 1].
    pub fn resample(&self, rows: usize, cols: usize) -> Cam {
        if (rows, cols) == self.shape() {
            return self.clone();
        }
        let values = self
            .values
            .resize_bilinear(rows, cols)
            .map(|v| v.clamp(0.0, 1.0));
        Cam {
            values,
            resolution: CamResolution::Upsampled,
        }
    }
}

/// Ordered vertebra corner landmarks: 17 vertebrae × 4 corners, each corner
/// stored as (row, col) with per-vertebra order top-left, top-right,
/// bottom-left, bottom-right.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
    image_shape: (usize, usize),
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, image_shape: (usize, usize)) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::InvalidInput(format!(
                "expected {} landmark points, got {}",
                LANDMARK_COUNT,
                points.len()
            )));
        }
        let (h, w) = image_shape;
        for (i, &(r, c)) in points.iter().enumerate() {
            if !r.is_finite() || !c.is_finite() {
                return Err(Error::OutOfRange(format!("landmark {i} is non-finite")));
            }
            if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
                return Err(Error::OutOfRange(format!(
                    "landmark {i} ({r:.2}, {c:.2}) outside {h}x{w} image"
                )));
            }
        }
        Ok(Self {
            points,
            image_shape,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    /// Corners of vertebra `i` in (top-left, top-right, bottom-left,
    /// bottom-right) order.
    pub fn vertebra(&self, i: usize) -> [(f64, f64); 4] {
        let p = &self.points[i * 4..i * 4 + 4];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn vertebra_count(&self) -> usize {
        VERTEBRA_COUNT
    }
}

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamRole {
    Segmenter,
    Regressor,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Segmenter => "segnet",
            ParamRole::Regressor => "regnet",
        }
    }
}

/// One named array of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "param shape {shape:?} expects {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("param contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }
}

/// Named-array collection for one network. Entries are keyed by
/// `<layer>/<param>` and kept in deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    role: ParamRole,
    entries: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParameterSet {
    pub fn new(role: ParamRole) -> Self {
        Self {
            role,
            entries: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| {
            Error::InvalidInput(format!("{} has no param '{name}'", self.role.as_str()))
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let role = self.role.as_str();
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("{role} has no param '{name}'")))
    }

    pub fn scalar_value(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.data[0])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// FNV-1a hash over names, shapes, and raw value bytes, in sorted key
    /// order. Used for content-addressing prediction caches and for
    /// bit-identity checks in freeze contracts.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            h.update(&[0]);
            for &d in &p.shape {
                h.update(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Bit-exact equality of all entries (names, shapes, and value bits).
    pub fn bit_identical(&self, other: &ParameterSet) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries
            .iter()
            .zip(other.entries.iter())
            .all(|((an, ap), (bn, bp))| {
                an == bn
                    && ap.shape == bp.shape
                    && ap.data.len() == bp.data.len()
                    && ap
                        .data
                        .iter()
                        .zip(&bp.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients keyed like the parameter set they apply to.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Accumulate `src` into `dst` entry-wise (creating missing entries).
pub fn grad_accumulate(dst: &mut GradMap, src: GradMap) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                dst.insert(name, g);
            }
        }
    }
}

/// Scale every gradient entry in place (batch averaging).
pub fn grad_scale(grads: &mut GradMap, factor: f64) {
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

/// Incremental FNV-1a 64-bit hash.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Hash arbitrary byte strings into a derived seed; used for per-sample
/// augmentation seeds and per-stage epoch seeds so parallel order never
/// changes results.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Fnv1a::new();
    for p in parts {
        h.update(p);
        h.update(&[0xfe]);
    }
    h.finish()
}
