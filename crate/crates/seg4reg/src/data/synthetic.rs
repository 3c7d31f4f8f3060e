//! Synthetic spine generator with analytic ground truth.
//!
//! Vertebra rectangles ride a smooth sinusoidal center line, each rotated to
//! the local tangent; the mask is the rasterized landmark union, the image a
//! blurred, noised rendering of it, and the angle labels follow analytically
//! from the tangent slopes. Every sample therefore carries two independent
//! routes to its angles (analytic tangents vs. landmark corners), which the
//! generator cross-checks on emission.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::landmarks::{
    cobb_from_endplate_angles, cobb_from_landmarks, masks_from_landmarks,
};
use crate::data::{save_gray_png, save_landmarks, ANGLE_CSV_HEADER};
use crate::domain::{derive_seed, CobbTriple, LandmarkSet, SpineMask, XrayImage, VERTEBRA_COUNT};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Generator parameters. `max_amplitude` bounds the lateral deviation of the
/// spine center line in pixels; per-sample amplitude, phase, and frequency
/// are drawn from the rng.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub vertebra_count: usize,
    pub max_amplitude: f64,
    pub vertebra_width: f64,
    pub vertebra_height: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Strength of off-spine distractor artifacts (bright blobs and
    /// rib-like bands) rendered into the image channel only; 0 disables.
    pub artifact_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            vertebra_count: VERTEBRA_COUNT,
            max_amplitude: 5.0,
            vertebra_width: 9.0,
            vertebra_height: 2.6,
            noise_sigma: 0.08,
            blur_sigma: 0.7,
            artifact_level: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vertebra_count < 3 {
            return Err(Error::InvalidInput(
                "vertebra count must be at least 3".into(),
            ));
        }
        if self.height < 16 || self.width < 8 {
            return Err(Error::InvalidInput(
                "synthetic image must be at least 16x8".into(),
            ));
        }
        if self.max_amplitude < 0.0 || self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::InvalidInput(
                "amplitudes and sigmas must be non-negative".into(),
            ));
        }
        // lateral room for the widest excursion
        let margin = self.width as f64 / 2.0 - self.vertebra_width / 2.0 - self.max_amplitude;
        if margin < 1.0 {
            return Err(Error::OutOfRange(format!(
                "curvature amplitude {} pushes vertebrae out of a {}px-wide frame",
                self.max_amplitude, self.width
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.into()))?;
        let spec: SyntheticSpec =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One generated sample with both label routes already reconciled.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: XrayImage,
    pub mask: SpineMask,
    pub landmarks: LandmarkSet,
    pub angles: CobbTriple,
}

/// Maximum disagreement tolerated between the analytic angles and the
/// landmark-derived angles, in degrees.
pub const SELF_CHECK_TOLERANCE_DEG: f64 = 1.0;

/// Generates one sample. Deterministic given (spec, rng state).
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    source_id: &str,
) -> Result<SyntheticSample> {
    spec.validate()?;
    if spec.vertebra_count != VERTEBRA_COUNT {
        return Err(Error::InvalidInput(format!(
            "landmark emission requires {} vertebrae, spec asks for {}",
            VERTEBRA_COUNT, spec.vertebra_count
        )));
    }
    let h = spec.height as f64;
    let w = spec.width as f64;
    let amplitude = if spec.max_amplitude == 0.0 {
        0.0
    } else {
        spec.max_amplitude * (0.25 + 0.75 * rng.random::<f64>())
    };
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let freq = 0.85 + 0.3 * rng.random::<f64>();

    let margin_r = spec.vertebra_height / 2.0 + 1.5;
    let row_span = h - 1.0 - 2.0 * margin_r;
    let center_c = (w - 1.0) / 2.0;
    let col = |u: f64| center_c + amplitude * (std::f64::consts::TAU * freq * u + phase).sin();
    let dcol = |u: f64| {
        amplitude * std::f64::consts::TAU * freq * (std::f64::consts::TAU * freq * u + phase).cos()
    };

    let n = spec.vertebra_count;
    let mut points = Vec::with_capacity(n * 4);
    let mut analytic_endplates = Vec::with_capacity(n * 2);
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        let center = (margin_r + u * row_span, col(u));
        // tangent of the center line in (row, col) coordinates
        let t = (row_span, dcol(u));
        let norm = (t.0 * t.0 + t.1 * t.1).sqrt();
        let td = (t.0 / norm, t.1 / norm);
        // endplate direction: tangent rotated a quarter turn
        let ed = (-td.1, td.0);
        let hh = spec.vertebra_height / 2.0;
        let hw = spec.vertebra_width / 2.0;
        let corner = |sr: f64, sc: f64| -> (f64, f64) {
            (
                center.0 + sr * hh * td.0 + sc * hw * ed.0,
                center.1 + sr * hh * td.1 + sc * hw * ed.1,
            )
        };
        let tl = corner(-1.0, -1.0);
        let tr = corner(-1.0, 1.0);
        let bl = corner(1.0, -1.0);
        let br = corner(1.0, 1.0);
        for &(r, c) in [tl, tr, bl, br].iter() {
            if r < 0.0 || c < 0.0 || r > h - 1.0 || c > w - 1.0 {
                return Err(Error::OutOfRange(format!(
                    "vertebra {i} corner ({r:.1}, {c:.1}) falls outside the {h}x{w} frame"
                )));
            }
        }
        points.extend_from_slice(&[tl, tr, bl, br]);
        // analytic endplate line angle, folded into (-90, 90]
        let mut ang = ed.0.atan2(ed.1).to_degrees();
        if ang > 90.0 {
            ang -= 180.0;
        }
        if ang <= -90.0 {
            ang += 180.0;
        }
        analytic_endplates.push(ang);
        analytic_endplates.push(ang);
    }

    let landmarks = LandmarkSet::new(points, (spec.height, spec.width))?;
    let (mask, warnings) = masks_from_landmarks(&landmarks)?;
    if !warnings.is_empty() {
        return Err(Error::InvalidInput(format!(
            "synthetic rasterization produced warnings: {warnings:?}"
        )));
    }

    let (pt, mt, tl) = cobb_from_endplate_angles(&analytic_endplates);
    let angles = CobbTriple::from_degrees([pt, mt, tl])?;

    // cross-check the two label routes
    let from_landmarks = cobb_from_landmarks(&landmarks)?.degrees();
    let analytic = angles.degrees();
    for k in 0..3 {
        if (from_landmarks[k] - analytic[k]).abs() > SELF_CHECK_TOLERANCE_DEG {
            return Err(Error::State(format!(
                "angle self-check failed: analytic {analytic:?} vs landmarks {from_landmarks:?}"
            )));
        }
    }

    // image: blurred mask in a dim body, plus distractor artifacts and noise
    let blurred = mask.values().gaussian_blur(spec.blur_sigma);
    let mut pixels = blurred.map(|v| 0.08 + 0.75 * v);
    if spec.artifact_level > 0.0 {
        add_artifacts(&mut pixels, spec, rng);
    }
    for v in pixels.as_mut_slice() {
        *v = (*v + spec.noise_sigma * crate::nn::sample_normal(rng)).clamp(0.0, 1.0);
    }
    let image = XrayImage::new(pixels, source_id)?;

    Ok(SyntheticSample {
        image,
        mask,
        landmarks,
        angles,
    })
}

/// Bright gaussian blobs and horizontal rib-like bands rendered into the
/// image channel; the mask channel never sees them, so they play the role
/// of the contrast variation and overlay artifacts that segmentation is
/// meant to filter out.
fn add_artifacts(pixels: &mut crate::tensor::Array2, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) {
    let (h, w) = pixels.shape();
    let level = spec.artifact_level;
    let n_blobs = rng.random_range(2..=4usize);
    for _ in 0..n_blobs {
        let cr = rng.random::<f64>() * (h as f64 - 1.0);
        let cc = rng.random::<f64>() * (w as f64 - 1.0);
        let sr = 1.5 + 2.5 * rng.random::<f64>();
        let sc = 1.5 + 2.5 * rng.random::<f64>();
        let amp = level * (0.3 + 0.4 * rng.random::<f64>());
        for r in 0..h {
            for c in 0..w {
                let d = ((r as f64 - cr) / sr).powi(2) + ((c as f64 - cc) / sc).powi(2);
                if d < 9.0 {
                    pixels.add_at(r, c, amp * (-0.5 * d).exp());
                }
            }
        }
    }
    let n_bands = rng.random_range(1..=2usize);
    for _ in 0..n_bands {
        let br = rng.random::<f64>() * (h as f64 - 1.0);
        let thickness = 1.0 + 1.5 * rng.random::<f64>();
        let amp = level * (0.15 + 0.2 * rng.random::<f64>());
        for r in 0..h {
            let d = ((r as f64 - br) / thickness).powi(2);
            if d < 9.0 {
                let add = amp * (-0.5 * d).exp();
                for c in 0..w {
                    pixels.add_at(r, c, add);
                }
            }
        }
    }
    // decoy curve: a bright snake near one border whose curvature is
    // independent of the labels
    let side = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
    let decoy_center = (w as f64 - 1.0) / 2.0 + side * (w as f64 / 2.0 - 4.0);
    let amp_d = 1.0 + 1.5 * rng.random::<f64>();
    let phase_d = rng.random::<f64>() * std::f64::consts::TAU;
    let freq_d = 0.8 + 0.5 * rng.random::<f64>();
    let thickness = 1.0 + 0.8 * rng.random::<f64>();
    let intensity = level * (0.35 + 0.2 * rng.random::<f64>());
    for r in 0..h {
        let u = r as f64 / h as f64;
        let col_d = decoy_center + amp_d * (std::f64::consts::TAU * freq_d * u + phase_d).sin();
        for c in 0..w {
            let d = ((c as f64 - col_d) / thickness).powi(2);
            if d < 9.0 {
                pixels.add_at(r, c, intensity * (-0.5 * d).exp());
            }
        }
    }
}

/// Summary of a dataset emission.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SynthSummary {
    pub count: usize,
    pub max_self_check_err_deg: f64,
}

/// Writes `n` samples in the standard dataset layout (angles.csv, images/,
/// landmarks/, masks/). Per-sample rngs derive from (seed, index) so output
/// is independent of write order.
pub fn write_synthetic_dataset(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<SynthSummary> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("landmarks"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut csv = String::from(ANGLE_CSV_HEADER);
    csv.push('\n');
    let mut max_err: f64 = 0.0;
    for k in 0..n {
        let source_id = format!("synth_{k:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &seed.to_le_bytes(),
            &(k as u64).to_le_bytes(),
        ]));
        let sample = generate_synthetic(spec, &mut rng, &source_id)?;
        let lm_angles = cobb_from_landmarks(&sample.landmarks)?.degrees();
        let an = sample.angles.degrees();
        for j in 0..3 {
            max_err = max_err.max((lm_angles[j] - an[j]).abs());
        }
        save_gray_png(
            &out_dir.join("images").join(format!("{source_id}.png")),
            sample.image.pixels(),
        )?;
        save_gray_png(
            &out_dir.join("masks").join(format!("{source_id}.png")),
            sample.mask.values(),
        )?;
        save_landmarks(
            &out_dir.join("landmarks").join(format!("{source_id}.txt")),
            &sample.landmarks,
        )?;
        csv.push_str(&format!(
            "{source_id},{:.6},{:.6},{:.6}\n",
            an[0], an[1], an[2]
        ));
    }
    write_atomic(&out_dir.join("angles.csv"), csv.as_bytes())?;
    Ok(SynthSummary {
        count: n,
        max_self_check_err_deg: max_err,
    })
}

/// Generates `n` samples in memory (used by the desk-scale harnesses).
pub fn generate_in_memory(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    (0..n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                &seed.to_le_bytes(),
                &(k as u64).to_le_bytes(),
            ]));
            generate_synthetic(spec, &mut rng, &format!("synth_{k:05}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_yields_straight_spine() {
        let spec = SyntheticSpec {
            max_amplitude: 0.0,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_synthetic(&spec, &mut rng, "t").unwrap();
        assert_eq!(s.angles.degrees(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn same_seed_is_identical() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(7), "t").unwrap();
        let b = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(7), "t").unwrap();
        assert_eq!(a.image.pixels(), b.image.pixels());
        assert_eq!(a.mask.values(), b.mask.values());
        assert_eq!(a.angles, b.angles);
        let c = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(8), "t").unwrap();
        assert_ne!(a.image.pixels(), c.image.pixels());
    }

    #[test]
    fn analytic_angles_match_landmark_route() {
        let spec = SyntheticSpec::default();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_synthetic(&spec, &mut rng, "t").unwrap();
            let lm = cobb_from_landmarks(&s.landmarks).unwrap().degrees();
            let an = s.angles.degrees();
            for k in 0..3 {
                assert!(
                    (lm[k] - an[k]).abs() <= SELF_CHECK_TOLERANCE_DEG,
                    "seed {seed} component {k}: {lm:?} vs {an:?}"
                );
            }
        }
    }

    #[test]
    fn mask_round_trips_through_own_landmarks() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_synthetic(&spec, &mut rng, "t").unwrap();
        let (again, _) = masks_from_landmarks(&s.landmarks).unwrap();
        assert_eq!(s.mask.values(), again.values());
    }

    #[test]
    fn oversized_amplitude_is_rejected() {
        let spec = SyntheticSpec {
            max_amplitude: 30.0,
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn curved_spines_have_nonzero_main_angle() {
        let spec = SyntheticSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = generate_synthetic(&spec, &mut rng, "t").unwrap();
        assert!(s.angles.degrees()[1] > 1.0);
    }
}
