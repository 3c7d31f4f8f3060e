//! Dense row-major f64 arrays used throughout the crate.
//!
//! `Array2` holds single-channel maps (images, masks, CAMs); `Array3` holds
//! channel-first feature stacks. Resampling uses half-pixel-center bilinear
//! interpolation, which is exactly the identity when sizes match, plus a
//! transpose operation for gradient propagation.

use crate::error::{Error, Result};

/// Row-major 2-D array (rows × cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}={} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array2 {
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn flip_horizontal(&self) -> Array2 {
        let mut out = Array2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, self.cols - 1 - c));
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers. Identity when sizes match.
    pub fn resize_bilinear(&self, out_rows: usize, out_cols: usize) -> Array2 {
        if out_rows == self.rows && out_cols == self.cols {
            return self.clone();
        }
        let mut out = Array2::zeros(out_rows, out_cols);
        let plan_r = axis_plan(self.rows, out_rows);
        let plan_c = axis_plan(self.cols, out_cols);
        for (ro, &(r0, r1, fr)) in plan_r.iter().enumerate() {
            for (co, &(c0, c1, fc)) in plan_c.iter().enumerate() {
                let v00 = self.get(r0, c0);
                let v01 = self.get(r0, c1);
                let v10 = self.get(r1, c0);
                let v11 = self.get(r1, c1);
                let top = v00 + (v01 - v00) * fc;
                let bot = v10 + (v11 - v10) * fc;
                out.set(ro, co, top + (bot - top) * fr);
            }
        }
        out
    }

    /// Transpose of [`Array2::resize_bilinear`]: scatters an output-sized
    /// gradient back onto this array's grid (`self` supplies only the shape).
    pub fn resize_bilinear_transpose(in_rows: usize, in_cols: usize, grad_out: &Array2) -> Array2 {
        if grad_out.rows == in_rows && grad_out.cols == in_cols {
            return grad_out.clone();
        }
        let mut grad_in = Array2::zeros(in_rows, in_cols);
        let plan_r = axis_plan(in_rows, grad_out.rows);
        let plan_c = axis_plan(in_cols, grad_out.cols);
        for (ro, &(r0, r1, fr)) in plan_r.iter().enumerate() {
            for (co, &(c0, c1, fc)) in plan_c.iter().enumerate() {
                let g = grad_out.get(ro, co);
                grad_in.add_at(r0, c0, g * (1.0 - fr) * (1.0 - fc));
                grad_in.add_at(r0, c1, g * (1.0 - fr) * fc);
                grad_in.add_at(r1, c0, g * fr * (1.0 - fc));
                grad_in.add_at(r1, c1, g * fr * fc);
            }
        }
        grad_in
    }

    /// Nearest-neighbor resize; preserves binarity of label masks.
    pub fn resize_nearest(&self, out_rows: usize, out_cols: usize) -> Array2 {
        if out_rows == self.rows && out_cols == self.cols {
            return self.clone();
        }
        let mut out = Array2::zeros(out_rows, out_cols);
        let sr = self.rows as f64 / out_rows as f64;
        let sc = self.cols as f64 / out_cols as f64;
        for ro in 0..out_rows {
            let r = (((ro as f64 + 0.5) * sr - 0.5).round().max(0.0) as usize).min(self.rows - 1);
            for co in 0..out_cols {
                let c =
                    (((co as f64 + 0.5) * sc - 0.5).round().max(0.0) as usize).min(self.cols - 1);
                out.set(ro, co, self.get(r, c));
            }
        }
        out
    }

    /// Separable Gaussian blur with a 3-sigma kernel radius.
    pub fn gaussian_blur(&self, sigma: f64) -> Array2 {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
        }
        let norm: f64 = kernel.iter().sum();
        for k in kernel.iter_mut() {
            *k /= norm;
        }
        // Horizontal then vertical pass with clamped borders.
        let mut tmp = Array2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let cc = (c as i64 + ki as i64 - radius).clamp(0, self.cols as i64 - 1);
                    acc += k * self.get(r, cc as usize);
                }
                tmp.set(r, c, acc);
            }
        }
        let mut out = Array2::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let rr = (r as i64 + ki as i64 - radius).clamp(0, self.rows as i64 - 1);
                    acc += k * tmp.get(rr as usize, c);
                }
                out.set(r, c, acc);
            }
        }
        out
    }
}

/// Per-output-index (lo, hi, frac) source positions for one resize axis.
fn axis_plan(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Channel-first 3-D array (channels × rows × cols).
#[derive(Debug, Clone, PartialEq)]
pub struct Array3 {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn from_channels(planes: Vec<Array2>) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidInput("empty channel list".into()))?;
        let (rows, cols) = first.shape();
        let mut data = Vec::with_capacity(planes.len() * rows * cols);
        for p in &planes {
            if p.shape() != (rows, cols) {
                return Err(Error::ShapeMismatch("channel shapes differ".into()));
            }
            data.extend_from_slice(p.as_slice());
        }
        Ok(Self {
            channels: planes.len(),
            rows,
            cols,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.rows, self.cols)
    }

    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_array(&self, c: usize) -> Array2 {
        Array2 {
            rows: self.rows,
            cols: self.cols,
            data: self.channel(c).to_vec(),
        }
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.rows + r) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.rows + r) * self.cols + col] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel bilinear resize.
    pub fn resize_bilinear(&self, out_rows: usize, out_cols: usize) -> Array3 {
        if out_rows == self.rows && out_cols == self.cols {
            return self.clone();
        }
        let planes = (0..self.channels)
            .map(|c| self.channel_array(c).resize_bilinear(out_rows, out_cols))
            .collect();
        Array3::from_channels(planes).expect("uniform plane shapes")
    }

    pub fn resize_bilinear_transpose(in_rows: usize, in_cols: usize, grad_out: &Array3) -> Array3 {
        if grad_out.rows == in_rows && grad_out.cols == in_cols {
            return grad_out.clone();
        }
        let planes = (0..grad_out.channels)
            .map(|c| {
                Array2::resize_bilinear_transpose(in_rows, in_cols, &grad_out.channel_array(c))
            })
            .collect();
        Array3::from_channels(planes).expect("uniform plane shapes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resize_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_vec(6, 5, (0..30).map(|_| rng.random::<f64>()).collect()).unwrap();
        assert_eq!(a.resize_bilinear(6, 5), a);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let a = Array2::filled(10, 7, 0.7);
        let b = a.resize_bilinear(4, 13);
        for &v in b.as_slice() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_transpose_matches_dot_product_identity() {
        // <resize(x), g> == <x, resize^T(g)> for a linear map and random vectors.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_vec(5, 4, (0..20).map(|_| rng.random::<f64>()).collect()).unwrap();
        let g = Array2::from_vec(9, 6, (0..54).map(|_| rng.random::<f64>()).collect()).unwrap();
        let yx = x.resize_bilinear(9, 6);
        let lhs: f64 = yx
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let gt = Array2::resize_bilinear_transpose(5, 4, &g);
        let rhs: f64 = x
            .as_slice()
            .iter()
            .zip(gt.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_preserves_binary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_vec(
            8,
            8,
            (0..64)
                .map(|_| if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let b = a.resize_nearest(5, 11);
        assert!(b.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn blur_preserves_mass_of_interior_peak() {
        let mut a = Array2::zeros(21, 21);
        a.set(10, 10, 1.0);
        let b = a.gaussian_blur(1.0);
        assert!((b.sum() - 1.0).abs() < 1e-9);
        // peak stays at center
        let mut best = (0, 0);
        let mut bv = f64::NEG_INFINITY;
        for r in 0..21 {
            for c in 0..21 {
                if b.get(r, c) > bv {
                    bv = b.get(r, c);
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, (10, 10));
    }
}
