//! Minimal f64 conv-net engine with explicit backward passes.
//!
//! Networks are expressed as [`Block`] sequences whose parameters live in a
//! [`ParameterSet`] keyed by `<layer>/<param>`. Forward passes are pure given
//! (params, input) and record the caches needed for the mirrored backward
//! pass. Everything is deterministic: no threading, fixed reduction order.

mod adam;

pub use adam::Adam;

use rand_chacha::ChaCha8Rng;

use crate::domain::{GradMap, Param, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Array3;

/// 2-D convolution hyperparameters. Weight layout is
/// `[cout][cin][k][k]`, bias `[cout]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(cin: usize, cout: usize, k: usize, rate: usize) -> Self {
        // Same-padding for odd k at stride 1.
        Self {
            cin,
            cout,
            k,
            stride: 1,
            pad: rate * (k - 1) / 2,
            dilation: rate,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let eff = self.dilation * (self.k - 1) + 1;
        let oh = (h + 2 * self.pad - eff) / self.stride + 1;
        let ow = (w + 2 * self.pad - eff) / self.stride + 1;
        (oh, ow)
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

#[allow(clippy::needless_range_loop)]
pub fn conv2d(x: &Array3, w: &[f64], b: &[f64], cs: &ConvSpec) -> Array3 {
    let (cin, h, win) = x.shape();
    debug_assert_eq!(cin, cs.cin);
    let (oh, ow) = cs.out_dims(h, win);
    let mut out = Array3::zeros(cs.cout, oh, ow);
    for co in 0..cs.cout {
        out.channel_mut(co).fill(b[co]);
    }
    let od = out.as_mut_slice();
    for co in 0..cs.cout {
        for ci in 0..cin {
            let xc = x.channel(ci);
            for ky in 0..cs.k {
                for kx in 0..cs.k {
                    let wv = w[((co * cin + ci) * cs.k + ky) * cs.k + kx];
                    let off_x = (kx * cs.dilation) as i64 - cs.pad as i64;
                    let (ox_lo, ox_hi) = valid_range(win, ow, cs.stride, off_x);
                    for oy in 0..oh {
                        let iy = (oy * cs.stride + ky * cs.dilation) as i64 - cs.pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let xrow = &xc[iy as usize * win..(iy as usize + 1) * win];
                        let obase = (co * oh + oy) * ow;
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * cs.stride) as i64 + off_x;
                            od[obase + ox] += wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weights, and bias.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward(
    x: &Array3,
    w: &[f64],
    cs: &ConvSpec,
    dy: &Array3,
) -> (Array3, Vec<f64>, Vec<f64>) {
    let (cin, h, win) = x.shape();
    let (_, oh, ow) = dy.shape();
    let mut dx = Array3::zeros(cin, h, win);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cs.cout];
    for co in 0..cs.cout {
        db[co] = dy.channel(co).iter().sum();
    }
    let dxd = dx.as_mut_slice();
    for co in 0..cs.cout {
        let dyc = dy.channel(co);
        for ci in 0..cin {
            let xc = x.channel(ci);
            for ky in 0..cs.k {
                for kx in 0..cs.k {
                    let widx = ((co * cin + ci) * cs.k + ky) * cs.k + kx;
                    let wv = w[widx];
                    let off_x = (kx * cs.dilation) as i64 - cs.pad as i64;
                    let (ox_lo, ox_hi) = valid_range(win, ow, cs.stride, off_x);
                    let mut acc_dw = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * cs.stride + ky * cs.dilation) as i64 - cs.pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let xbase = iy as usize * win;
                        let dyrow = &dyc[oy * ow..(oy + 1) * ow];
                        let dxbase = ci * h * win + xbase;
                        for ox in ox_lo..ox_hi {
                            let ix = ((ox * cs.stride) as i64 + off_x) as usize;
                            acc_dw += xc[xbase + ix] * dyrow[ox];
                            dxd[dxbase + ix] += wv * dyrow[ox];
                        }
                    }
                    dw[widx] += acc_dw;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Output-x range whose source column `ox*stride + off` stays in bounds.
fn valid_range(win: usize, ow: usize, stride: usize, off: i64) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_ix = win as i64 - 1 - off;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = ((max_ix as usize) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Sigmoid,
}

impl Act {
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Act::None => z,
            Act::Relu => z.max(0.0),
            Act::Sigmoid => sigmoid(z),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            Act::None => 1.0,
            Act::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn act_forward(z: &Array3, act: Act) -> Array3 {
    if act == Act::None {
        return z.clone();
    }
    let mut y = z.clone();
    for v in y.as_mut_slice() {
        *v = act.apply(*v);
    }
    y
}

fn act_backward(z: &Array3, act: Act, dy: &Array3) -> Array3 {
    if act == Act::None {
        return dy.clone();
    }
    let mut dz = dy.clone();
    for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *d *= act.derivative(zv);
    }
    dz
}

/// One structural element of a backbone.
#[derive(Debug, Clone)]
pub enum Block {
    Conv {
        name: String,
        spec: ConvSpec,
        act: Act,
    },
    /// `y = post_act(body(x) + skip(x))`, skip = 1x1 projection when the
    /// body changes shape, identity otherwise.
    Residual {
        name: String,
        body: Vec<Block>,
        proj: Option<ConvSpec>,
        post_act: Act,
    },
}

impl Block {
    pub fn conv(name: &str, spec: ConvSpec, act: Act) -> Block {
        Block::Conv {
            name: name.to_string(),
            spec,
            act,
        }
    }
}

pub enum BlockCache {
    Conv {
        x: Array3,
        pre: Array3,
    },
    Residual {
        body: Vec<BlockCache>,
        proj_x: Option<Array3>,
        sum: Array3,
    },
}

/// Sample from N(0, 1) via Box-Muller; deterministic given the rng stream.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal initialization of every conv in a block sequence.
pub fn init_blocks(
    params: &mut ParameterSet,
    prefix: &str,
    blocks: &[Block],
    rng: &mut ChaCha8Rng,
) {
    for block in blocks {
        match block {
            Block::Conv { name, spec, .. } => {
                init_conv(params, &format!("{prefix}{name}"), spec, rng);
            }
            Block::Residual {
                name, body, proj, ..
            } => {
                init_blocks(params, &format!("{prefix}{name}/"), body, rng);
                if let Some(p) = proj {
                    init_conv(params, &format!("{prefix}{name}/proj"), p, rng);
                }
            }
        }
    }
}

fn init_conv(params: &mut ParameterSet, name: &str, spec: &ConvSpec, rng: &mut ChaCha8Rng) {
    let fan_in = spec.cin * spec.k * spec.k;
    let std = (2.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..spec.weight_len())
        .map(|_| sample_normal(rng) * std)
        .collect();
    params.insert(
        format!("{name}/w"),
        Param::new(vec![spec.cout, spec.cin, spec.k, spec.k], w).expect("init shape"),
    );
    params.insert(
        format!("{name}/b"),
        Param::new(vec![spec.cout], vec![0.0; spec.cout]).unwrap(),
    );
}

pub fn seq_forward(
    params: &ParameterSet,
    prefix: &str,
    blocks: &[Block],
    x: &Array3,
) -> Result<(Array3, Vec<BlockCache>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        match block {
            Block::Conv { name, spec, act } => {
                if cur.channels() != spec.cin {
                    return Err(Error::ShapeMismatch(format!(
                        "conv {prefix}{name} expects {} channels, got {}",
                        spec.cin,
                        cur.channels()
                    )));
                }
                let w = &params.get(&format!("{prefix}{name}/w"))?.data;
                let b = &params.get(&format!("{prefix}{name}/b"))?.data;
                let pre = conv2d(&cur, w, b, spec);
                let y = act_forward(&pre, *act);
                caches.push(BlockCache::Conv { x: cur, pre });
                cur = y;
            }
            Block::Residual {
                name,
                body,
                proj,
                post_act,
            } => {
                let sub_prefix = format!("{prefix}{name}/");
                let (body_out, body_cache) = seq_forward(params, &sub_prefix, body, &cur)?;
                let (skip, proj_x) = match proj {
                    Some(p) => {
                        let w = &params.get(&format!("{sub_prefix}proj/w"))?.data;
                        let b = &params.get(&format!("{sub_prefix}proj/b"))?.data;
                        (conv2d(&cur, w, b, p), Some(cur.clone()))
                    }
                    None => (cur.clone(), None),
                };
                if skip.shape() != body_out.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "residual {prefix}{name}: body {:?} vs skip {:?}",
                        body_out.shape(),
                        skip.shape()
                    )));
                }
                let mut sum = body_out;
                for (s, k) in sum.as_mut_slice().iter_mut().zip(skip.as_slice()) {
                    *s += k;
                }
                let y = act_forward(&sum, *post_act);
                caches.push(BlockCache::Residual {
                    body: body_cache,
                    proj_x,
                    sum,
                });
                cur = y;
            }
        }
    }
    Ok((cur, caches))
}

pub fn seq_backward(
    params: &ParameterSet,
    prefix: &str,
    blocks: &[Block],
    caches: &[BlockCache],
    dy: &Array3,
) -> Result<(Array3, GradMap)> {
    let mut grads = GradMap::new();
    let mut cur = dy.clone();
    for (block, cache) in blocks.iter().zip(caches.iter()).rev() {
        match (block, cache) {
            (Block::Conv { name, spec, act }, BlockCache::Conv { x, pre }) => {
                let dz = act_backward(pre, *act, &cur);
                let w = &params.get(&format!("{prefix}{name}/w"))?.data;
                let (dx, dw, db) = conv2d_backward(x, w, spec, &dz);
                grads.insert(format!("{prefix}{name}/w"), dw);
                grads.insert(format!("{prefix}{name}/b"), db);
                cur = dx;
            }
            (
                Block::Residual {
                    name,
                    body,
                    proj,
                    post_act,
                },
                BlockCache::Residual {
                    body: body_cache,
                    proj_x,
                    sum,
                },
            ) => {
                let sub_prefix = format!("{prefix}{name}/");
                let dsum = act_backward(sum, *post_act, &cur);
                let (dx_body, body_grads) =
                    seq_backward(params, &sub_prefix, body, body_cache, &dsum)?;
                for (k, v) in body_grads {
                    grads.insert(k, v);
                }
                let dx_skip = match (proj, proj_x) {
                    (Some(p), Some(px)) => {
                        let w = &params.get(&format!("{sub_prefix}proj/w"))?.data;
                        let (dx, dw, db) = conv2d_backward(px, w, p, &dsum);
                        grads.insert(format!("{sub_prefix}proj/w"), dw);
                        grads.insert(format!("{sub_prefix}proj/b"), db);
                        dx
                    }
                    _ => dsum.clone(),
                };
                let mut dx = dx_body;
                for (a, b) in dx.as_mut_slice().iter_mut().zip(dx_skip.as_slice()) {
                    *a += b;
                }
                cur = dx;
            }
            _ => {
                return Err(Error::State("block/cache sequence mismatch".into()));
            }
        }
    }
    Ok((cur, grads))
}

/// Per-channel spatial mean.
#[allow(clippy::needless_range_loop)]
pub fn global_avg_pool(x: &Array3) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

#[allow(clippy::needless_range_loop)]
pub fn global_avg_pool_backward(shape: (usize, usize, usize), dpooled: &[f64]) -> Array3 {
    let (c, h, w) = shape;
    let mut dx = Array3::zeros(c, h, w);
    let scale = 1.0 / (h * w) as f64;
    for ci in 0..c {
        dx.channel_mut(ci).fill(dpooled[ci] * scale);
    }
    dx
}

/// Channel-axis concatenation.
pub fn concat_channels(parts: &[&Array3]) -> Result<Array3> {
    let (_, h, w) = parts
        .first()
        .ok_or_else(|| Error::InvalidInput("empty concat".into()))?
        .shape();
    let channels: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Array3::zeros(channels, h, w);
    let mut at = 0;
    for p in parts {
        if (p.rows(), p.cols()) != (h, w) {
            return Err(Error::ShapeMismatch("concat spatial dims differ".into()));
        }
        for c in 0..p.channels() {
            out.channel_mut(at + c).copy_from_slice(p.channel(c));
        }
        at += p.channels();
    }
    Ok(out)
}

/// Splits a concat gradient back into per-part gradients.
pub fn split_channels(dy: &Array3, sizes: &[usize]) -> Vec<Array3> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &sz in sizes {
        let mut part = Array3::zeros(sz, dy.rows(), dy.cols());
        for c in 0..sz {
            part.channel_mut(c).copy_from_slice(dy.channel(at + c));
        }
        at += sz;
        out.push(part);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ParamRole;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_arr3(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3 {
        let mut a = Array3::zeros(c, h, w);
        for v in a.as_mut_slice() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        a
    }

    /// Central-difference check of conv2d gradients through a scalar loss
    /// L = sum(y * g) for fixed random g.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(42);
        for &(stride, pad, dilation) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
            let cs = ConvSpec {
                cin: 2,
                cout: 3,
                k: 3,
                stride,
                pad,
                dilation,
            };
            let x = random_arr3(2, 7, 6, &mut r);
            let mut w: Vec<f64> = (0..cs.weight_len())
                .map(|_| r.random::<f64>() - 0.5)
                .collect();
            let b: Vec<f64> = (0..cs.cout).map(|_| r.random::<f64>() - 0.5).collect();
            let y = conv2d(&x, &w, &b, &cs);
            let g = random_arr3(y.channels(), y.rows(), y.cols(), &mut r);
            let (dx, dw, db) = conv2d_backward(&x, &w, &cs, &g);

            let eps = 1e-6;
            let loss = |x: &Array3, w: &[f64], b: &[f64]| -> f64 {
                conv2d(x, w, b, &cs)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            // spot-check a handful of coordinates of each gradient
            let mut xp = x.clone();
            for idx in [0usize, 5, 17, 40] {
                let orig = xp.as_slice()[idx];
                xp.as_mut_slice()[idx] = orig + eps;
                let lp = loss(&xp, &w, &b);
                xp.as_mut_slice()[idx] = orig - eps;
                let lm = loss(&xp, &w, &b);
                xp.as_mut_slice()[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (fd - dx.as_slice()[idx]).abs() < 1e-6,
                    "dx mismatch at {idx}: fd={fd}, analytic={}",
                    dx.as_slice()[idx]
                );
            }
            for idx in [0usize, 9, 26, w.len() - 1] {
                let orig = w[idx];
                w[idx] = orig + eps;
                let lp = loss(&x, &w, &b);
                w[idx] = orig - eps;
                let lm = loss(&x, &w, &b);
                w[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - dw[idx]).abs() < 1e-6);
            }
            for (idx, dbv) in db.iter().enumerate() {
                let mut bp = b.clone();
                bp[idx] += eps;
                let lp = loss(&x, &w, &bp);
                bp[idx] -= 2.0 * eps;
                let lm = loss(&x, &w, &bp);
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - dbv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn residual_sequence_gradcheck() {
        let blocks = vec![
            Block::conv("stem", ConvSpec::new(1, 4, 3, 1, 1), Act::Relu),
            Block::Residual {
                name: "res0".into(),
                body: vec![
                    Block::conv("conv0", ConvSpec::new(4, 4, 3, 1, 1), Act::Relu),
                    Block::conv("conv1", ConvSpec::new(4, 4, 3, 1, 1), Act::None),
                ],
                proj: None,
                post_act: Act::Relu,
            },
            Block::Residual {
                name: "res1".into(),
                body: vec![
                    Block::conv("conv0", ConvSpec::new(4, 8, 3, 2, 1), Act::Relu),
                    Block::conv("conv1", ConvSpec::new(8, 8, 3, 1, 1), Act::None),
                ],
                proj: Some(ConvSpec::new(4, 8, 1, 2, 0)),
                post_act: Act::Relu,
            },
        ];
        let mut params = ParameterSet::new(ParamRole::Regressor);
        let mut r = rng(3);
        init_blocks(&mut params, "", &blocks, &mut r);
        let x = random_arr3(1, 8, 6, &mut r);
        let (y, caches) = seq_forward(&params, "", &blocks, &x).unwrap();
        let g = random_arr3(y.channels(), y.rows(), y.cols(), &mut r);
        let (_, grads) = seq_backward(&params, "", &blocks, &caches, &g).unwrap();

        let loss = |params: &ParameterSet| -> f64 {
            let (y, _) = seq_forward(params, "", &blocks, &x).unwrap();
            y.as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for (name, grad) in &grads {
            // probe two coordinates per tensor
            for &idx in &[0usize, grad.len() / 2] {
                let mut pp = params.clone();
                pp.get_mut(name).unwrap().data[idx] += eps;
                let lp = loss(&pp);
                pp.get_mut(name).unwrap().data[idx] -= 2.0 * eps;
                let lm = loss(&pp);
                let fd = (lp - lm) / (2.0 * eps);
                let a = grad[idx];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    ((fd - a) / denom).abs() < 1e-5,
                    "{name}[{idx}]: fd={fd}, analytic={a}"
                );
            }
        }
    }

    #[test]
    fn gap_is_mean_and_backward_spreads() {
        let mut r = rng(5);
        let x = random_arr3(3, 4, 5, &mut r);
        let pooled = global_avg_pool(&x);
        for (c, &p) in pooled.iter().enumerate() {
            let mean = x.channel(c).iter().sum::<f64>() / 20.0;
            assert!((p - mean).abs() < 1e-12);
        }
        let dx = global_avg_pool_backward((3, 4, 5), &[1.0, 2.0, 3.0]);
        assert!((dx.get(1, 2, 2) - 2.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng(6);
        let a = random_arr3(2, 3, 3, &mut r);
        let b = random_arr3(4, 3, 3, &mut r);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 6);
        let parts = split_channels(&cat, &[2, 4]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
