//! Cross-task couplings between the regressor and the segmenter: the
//! attention-consistency loss between two CAMs and the learnable
//! region-of-interest gate that injects a CAM into a segmenter feature map.

use crate::domain::Cam;
use crate::error::{Error, Result};
use crate::tensor::{Array2, Array3};

/// Learnable attention gate. `alpha` starts at exactly 0 so the gated
/// forward is the identity until training moves it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoieGate {
    pub alpha: f64,
    pub target_hw: (usize, usize),
}

impl RoieGate {
    pub fn new(target_hw: (usize, usize)) -> Self {
        Self {
            alpha: 0.0,
            target_hw,
        }
    }

    pub fn with_alpha(alpha: f64, target_hw: (usize, usize)) -> Self {
        Self { alpha, target_hw }
    }
}

/// Mean absolute difference between two CAMs; element-count normalization
/// keeps the weight of this term independent of CAM resolution.
pub fn ar_loss(cam_a: &Cam, cam_b: &Cam) -> Result<f64> {
    if cam_a.shape() != cam_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "CAM shapes differ after resampling: {:?} vs {:?}",
            cam_a.shape(),
            cam_b.shape()
        )));
    }
    Ok(mean_abs_diff(
        cam_a.values().as_slice(),
        cam_b.values().as_slice(),
    ))
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Loss value plus gradients w.r.t. both CAMs. Sign subgradient; exact ties
/// contribute zero.
pub fn ar_loss_grad(cam_a: &Array2, cam_b: &Array2) -> Result<(f64, Array2, Array2)> {
    if cam_a.shape() != cam_b.shape() {
        return Err(Error::ShapeMismatch("CAM shapes differ".into()));
    }
    let n = cam_a.len() as f64;
    let mut da = Array2::zeros(cam_a.rows(), cam_a.cols());
    let mut db = Array2::zeros(cam_a.rows(), cam_a.cols());
    let mut total = 0.0;
    for i in 0..cam_a.len() {
        let d = cam_a.as_slice()[i] - cam_b.as_slice()[i];
        total += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        da.as_mut_slice()[i] = s / n;
        db.as_mut_slice()[i] = -s / n;
    }
    Ok((total / n, da, db))
}

/// Gated fusion `f' = alpha * (cam ∘ f) + f`: the single-channel CAM is
/// broadcast across feature channels as a per-pixel multiplicative gate, and
/// the result is summed element-wise with the original feature.
///
/// The CAM is bilinearly resampled to the feature resolution first.
pub fn roie_fuse(cam: &Cam, feature: &Array3, gate: &RoieGate) -> Result<Array3> {
    if !cam.values().all_finite() {
        return Err(Error::OutOfRange("CAM contains non-finite values".into()));
    }
    let (h, w) = (feature.rows(), feature.cols());
    if gate.target_hw != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "gate targets {:?} but feature is {:?}",
            gate.target_hw,
            (h, w)
        )));
    }
    let cam_r = cam.resample(h, w);
    let mut out = feature.clone();
    for c in 0..feature.channels() {
        let plane = out.channel_mut(c);
        for (v, &g) in plane.iter_mut().zip(cam_r.values().as_slice()) {
            *v += gate.alpha * g * *v;
        }
    }
    Ok(out)
}

/// Gradients of [`roie_fuse`] w.r.t. the feature and alpha, with the CAM
/// treated as a constant attention input. `cam_resampled` must already be at
/// feature resolution.
pub fn roie_fuse_backward(
    cam_resampled: &Array2,
    feature: &Array3,
    gate: &RoieGate,
    d_out: &Array3,
) -> (Array3, f64) {
    let mut d_feature = d_out.clone();
    let mut d_alpha = 0.0;
    for c in 0..feature.channels() {
        let f = feature.channel(c);
        let dp = d_feature.channel_mut(c);
        for ((d, &fv), &g) in dp.iter_mut().zip(f).zip(cam_resampled.as_slice()) {
            d_alpha += *d * g * fv;
            *d *= 1.0 + gate.alpha * g;
        }
    }
    (d_feature, d_alpha)
}
