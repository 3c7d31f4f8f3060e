//! Figure emission: CAM heat overlays and segmentation error overlays.
//!
//! Error overlay color code: true positives yellow, false negatives red,
//! false positives green, true negatives untouched grayscale. The palette
//! and blend are bit-exact:
//!
//! ```text
//! yellow #FFD700, red #FF0000, green #00B000, alpha 0.45
//! out = round((1 - a) * gray8 + a * color)   per channel, u8 domain
//! ```
//!
//! CAM overlays scale both the heat color and its opacity with the CAM
//! value, so an all-zero CAM leaves the pure grayscale image.

use crate::domain::Cam;
use crate::error::{Error, Result};
use crate::tensor::Array2;

pub const TP_COLOR: [u8; 3] = [0xFF, 0xD7, 0x00];
pub const FN_COLOR: [u8; 3] = [0xFF, 0x00, 0x00];
pub const FP_COLOR: [u8; 3] = [0x00, 0xB0, 0x00];
pub const OVERLAY_ALPHA: f64 = 0.45;

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let at = (r * self.width + c) * 3;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::data::save_rgb_png(path, self.width, self.height, &self.data)
    }
}

#[inline]
fn blend(gray8: u8, color: [u8; 3], alpha: f64) -> [u8; 3] {
    let g = gray8 as f64;
    [
        ((1.0 - alpha) * g + alpha * color[0] as f64).round() as u8,
        ((1.0 - alpha) * g + alpha * color[1] as f64).round() as u8,
        ((1.0 - alpha) * g + alpha * color[2] as f64).round() as u8,
    ]
}

#[inline]
fn gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Heat color of a CAM value v in [0, 1]: red ramping to gold.
#[inline]
fn heat_color(v: f64) -> [u8; 3] {
    [0xFF, (215.0 * v).round() as u8, 0x00]
}

/// Grayscale image with a CAM heat overlay whose opacity follows the CAM.
pub fn cam_overlay(image: &Array2, cam: &Cam) -> Result<RgbImage> {
    let (h, w) = image.shape();
    let cam_full = cam.resample(h, w);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let g = gray8(image.get(r, c));
            let v = cam_full.values().get(r, c);
            let px = if v == 0.0 {
                [g, g, g]
            } else {
                blend(g, heat_color(v), OVERLAY_ALPHA * v)
            };
            data.extend_from_slice(&px);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Grayscale image with the segmentation error classes colored in.
pub fn error_overlay(image: &Array2, pred_bin: &Array2, gt_bin: &Array2) -> Result<RgbImage> {
    let (h, w) = image.shape();
    if pred_bin.shape() != (h, w) || gt_bin.shape() != (h, w) {
        return Err(Error::ShapeMismatch("overlay mask shapes".into()));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let g = gray8(image.get(r, c));
            let p = pred_bin.get(r, c) >= 0.5;
            let y = gt_bin.get(r, c) >= 0.5;
            let px = match (p, y) {
                (true, true) => blend(g, TP_COLOR, OVERLAY_ALPHA),
                (false, true) => blend(g, FN_COLOR, OVERLAY_ALPHA),
                (true, false) => blend(g, FP_COLOR, OVERLAY_ALPHA),
                (false, false) => [g, g, g],
            };
            data.extend_from_slice(&px);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}
