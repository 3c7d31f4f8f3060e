//! Segmentation network: a conv encoder with a dilated-convolution pyramid
//! (pooling-free multi-rate context) and a bilinear-upsampling decoder with
//! a sigmoid head. A configurable mid-level feature map can be modulated by
//! a regressor CAM through the learnable attention gate.
//!
//! The gate scalar lives in the segmenter's parameter set under
//! `roie/alpha`, initialized to exactly 0 so ungated and gated forwards
//! coincide until the gate is trained.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{roie_fuse_backward, RoieGate};
use crate::domain::{Cam, GradMap, Param, ParamRole, ParameterSet, SpineMask};
use crate::error::{Error, Result};
use crate::nn::{self, seq_backward, seq_forward, Act, Block, BlockCache, ConvSpec};
use crate::tensor::{Array2, Array3};

/// Name of the gate scalar inside the segmenter parameter set.
pub const ALPHA_PARAM: &str = "roie/alpha";

/// Smoothing term of the overlap loss.
const DICE_ETA: f64 = 1e-7;

/// Probability floor applied inside the logs of the cross-entropy term.
const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegPreset {
    Tiny,
    Small,
    Resnet50Like,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetConfig {
    pub preset: SegPreset,
    /// Dilation rates of the pyramid branches.
    pub pyramid_rates: Vec<usize>,
    /// Encoder feature that receives the CAM gate (also returned as the mid
    /// feature).
    pub injection: String,
    /// Spatial reduction at the deepest encoder feature.
    pub output_stride: usize,
    /// Cross-entropy weight in the combined loss.
    pub lambda_ce: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            preset: SegPreset::Tiny,
            pyramid_rates: vec![1, 2, 3],
            injection: "enc2".into(),
            output_stride: 4,
            lambda_ce: 1.0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce < 0.0 {
            return Err(Error::InvalidInput("lambda_ce must be non-negative".into()));
        }
        if self.pyramid_rates.is_empty() || self.pyramid_rates.contains(&0) {
            return Err(Error::InvalidInput("pyramid rates must be positive".into()));
        }
        let allowed: &[usize] = match self.preset {
            SegPreset::Tiny | SegPreset::Small => &[2, 4, 8],
            SegPreset::Resnet50Like => &[8],
        };
        if !allowed.contains(&self.output_stride) {
            return Err(Error::InvalidInput(format!(
                "output stride {} unsupported for preset (allowed {allowed:?})",
                self.output_stride
            )));
        }
        if !self.feature_names().contains(&self.injection) {
            return Err(Error::InvalidInput(format!(
                "injection layer '{}' does not name an encoder feature (have {:?})",
                self.injection,
                self.feature_names()
            )));
        }
        Ok(())
    }

    /// Names of the encoder features available as injection points.
    pub fn feature_names(&self) -> Vec<String> {
        match self.preset {
            SegPreset::Tiny | SegPreset::Small => {
                let downs = self.output_stride.trailing_zeros() as usize;
                (0..=downs).map(|i| format!("enc{i}")).collect()
            }
            SegPreset::Resnet50Like => {
                vec!["stem".into(), "stage1".into(), "stage2".into()]
            }
        }
    }

    fn base_channels(&self) -> usize {
        match self.preset {
            SegPreset::Tiny => 8,
            SegPreset::Small => 16,
            SegPreset::Resnet50Like => 16,
        }
    }

    /// Encoder as named stages; each stage output is a candidate injection
    /// feature.
    fn encoder(&self) -> Vec<(String, Vec<Block>)> {
        match self.preset {
            SegPreset::Tiny | SegPreset::Small => {
                let c = self.base_channels();
                let downs = self.output_stride.trailing_zeros() as usize;
                let mut stages = vec![(
                    "enc0".to_string(),
                    vec![Block::conv("enc0", ConvSpec::new(1, c, 3, 1, 1), Act::Relu)],
                )];
                for i in 1..=downs {
                    let cin = c << (i - 1);
                    let cout = c << i;
                    stages.push((
                        format!("enc{i}"),
                        vec![Block::conv(
                            &format!("enc{i}"),
                            ConvSpec::new(cin, cout, 3, 2, 1),
                            Act::Relu,
                        )],
                    ));
                }
                stages
            }
            SegPreset::Resnet50Like => {
                vec![
                    (
                        "stem".to_string(),
                        vec![Block::conv(
                            "stem",
                            ConvSpec::new(1, 16, 3, 2, 1),
                            Act::Relu,
                        )],
                    ),
                    (
                        "stage1".to_string(),
                        vec![
                            bottleneck("stage1a", 16, 32, 2),
                            bottleneck("stage1b", 32, 32, 1),
                        ],
                    ),
                    (
                        "stage2".to_string(),
                        vec![
                            bottleneck("stage2a", 32, 64, 2),
                            bottleneck("stage2b", 64, 64, 1),
                        ],
                    ),
                ]
            }
        }
    }

    /// Channel count of the deepest encoder feature.
    fn deep_channels(&self) -> usize {
        match self.preset {
            SegPreset::Tiny | SegPreset::Small => {
                self.base_channels() << (self.output_stride.trailing_zeros() as usize)
            }
            SegPreset::Resnet50Like => 64,
        }
    }

    fn pyramid_branch_channels(&self) -> usize {
        self.base_channels()
    }

    fn decoder_channels(&self) -> usize {
        2 * self.base_channels()
    }

    fn pyramid_blocks(&self) -> Vec<Block> {
        let deep = self.deep_channels();
        let pc = self.pyramid_branch_channels();
        self.pyramid_rates
            .iter()
            .map(|&r| {
                Block::conv(
                    &format!("pyr{r}"),
                    ConvSpec::dilated(deep, pc, 3, r),
                    Act::Relu,
                )
            })
            .collect()
    }

    fn fuse_block(&self) -> Block {
        let cin = self.deep_channels() + self.pyramid_rates.len() * self.pyramid_branch_channels();
        Block::conv(
            "fuse",
            ConvSpec::new(cin, self.decoder_channels(), 1, 1, 0),
            Act::Relu,
        )
    }

    fn dec_block(&self) -> Block {
        Block::conv(
            "dec0",
            ConvSpec::new(self.decoder_channels(), self.base_channels(), 3, 1, 1),
            Act::Relu,
        )
    }

    fn out_block(&self) -> Block {
        Block::conv(
            "out",
            ConvSpec::new(self.base_channels(), 1, 1, 1, 0),
            Act::Sigmoid,
        )
    }
}

/// 1x1 → 3x3 → 1x1 bottleneck with projected skip.
fn bottleneck(name: &str, cin: usize, cout: usize, stride: usize) -> Block {
    let mid = cout / 4;
    let proj = if stride != 1 || cin != cout {
        Some(ConvSpec::new(cin, cout, 1, stride, 0))
    } else {
        None
    };
    Block::Residual {
        name: name.to_string(),
        body: vec![
            Block::conv("reduce", ConvSpec::new(cin, mid, 1, 1, 0), Act::Relu),
            Block::conv("conv", ConvSpec::new(mid, mid, 3, stride, 1), Act::Relu),
            Block::conv("expand", ConvSpec::new(mid, cout, 1, 1, 0), Act::None),
        ],
        proj,
        post_act: Act::Relu,
    }
}

/// Fresh segmenter parameters, including the gate scalar at exactly 0.
pub fn seg_init(cfg: &SegNetConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut params = ParameterSet::new(ParamRole::Segmenter);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, blocks) in cfg.encoder() {
        nn::init_blocks(&mut params, "", &blocks, &mut rng);
    }
    nn::init_blocks(&mut params, "", &cfg.pyramid_blocks(), &mut rng);
    nn::init_blocks(&mut params, "", &[cfg.fuse_block()], &mut rng);
    nn::init_blocks(&mut params, "", &[cfg.dec_block()], &mut rng);
    nn::init_blocks(&mut params, "", &[cfg.out_block()], &mut rng);
    params.insert(ALPHA_PARAM, Param::scalar(0.0));
    Ok(params)
}

/// Feature map tapped at the configured injection layer (after gating, when
/// a gate is active).
#[derive(Debug, Clone, PartialEq)]
pub struct MidFeature(Array3);

impl MidFeature {
    pub fn new(values: Array3) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::OutOfRange(
                "mid feature contains non-finite values".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn array(&self) -> &Array3 {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }
}

pub struct SegForward {
    /// Predicted spine probabilities at input resolution.
    pub mask: Array2,
    /// Injection-layer feature (gated when a CAM was supplied).
    pub mid: MidFeature,
    cache: SegCache,
}

struct GateCache {
    cam_resampled: Array2,
    pre_gate: Array3,
    alpha: f64,
}

struct SegCache {
    enc: Vec<Vec<BlockCache>>,
    gate: Option<GateCache>,
    injection_stage: usize,
    pyr: Vec<Vec<BlockCache>>,
    concat_sizes: Vec<usize>,
    fuse: Vec<BlockCache>,
    dec0: Vec<BlockCache>,
    out: Vec<BlockCache>,
    deep_hw: (usize, usize),
    half_hw: (usize, usize),
}

/// Forward pass. When `cam_gate` is supplied the injection feature becomes
/// `alpha * (cam ∘ f) + f` before the rest of the network consumes it.
pub fn seg_forward(
    image: &Array2,
    params: &ParameterSet,
    cfg: &SegNetConfig,
    cam_gate: Option<&Cam>,
) -> Result<SegForward> {
    let (h, w) = image.shape();
    let mut x = Array3::from_channels(vec![image.clone()])?;
    let encoder = cfg.encoder();
    let mut enc_caches = Vec::with_capacity(encoder.len());
    let mut gate_cache = None;
    let mut mid: Option<Array3> = None;
    let mut injection_stage = 0;
    for (si, (name, blocks)) in encoder.iter().enumerate() {
        let (y, cache) = seq_forward(params, "", blocks, &x)?;
        enc_caches.push(cache);
        x = y;
        if *name == cfg.injection {
            injection_stage = si;
            if let Some(cam) = cam_gate {
                let alpha = params.scalar_value(ALPHA_PARAM)?;
                let (fh, fw) = (x.rows(), x.cols());
                let cam_r = cam.resample(fh, fw);
                if cam_r.shape() != (fh, fw) {
                    return Err(Error::ShapeMismatch(
                        "CAM does not match the injection feature after resampling".into(),
                    ));
                }
                let gate = RoieGate::with_alpha(alpha, (fh, fw));
                let fused = crate::consistency::roie_fuse(&cam_r, &x, &gate)?;
                gate_cache = Some(GateCache {
                    cam_resampled: cam_r.values().clone(),
                    pre_gate: x,
                    alpha,
                });
                x = fused;
            }
            mid = Some(x.clone());
        }
    }
    let mid = mid.ok_or_else(|| {
        Error::InvalidInput(format!("injection layer '{}' not found", cfg.injection))
    })?;

    let deep_hw = (x.rows(), x.cols());
    let pyr_blocks = cfg.pyramid_blocks();
    let mut branches = Vec::with_capacity(pyr_blocks.len());
    let mut pyr_caches = Vec::with_capacity(pyr_blocks.len());
    for b in &pyr_blocks {
        let (y, cache) = seq_forward(params, "", std::slice::from_ref(b), &x)?;
        branches.push(y);
        pyr_caches.push(cache);
    }
    let mut parts: Vec<&Array3> = vec![&x];
    parts.extend(branches.iter());
    let concat_sizes: Vec<usize> = parts.iter().map(|p| p.channels()).collect();
    let cat = nn::concat_channels(&parts)?;

    let fuse_blocks = [cfg.fuse_block()];
    let (fused, fuse_cache) = seq_forward(params, "", &fuse_blocks, &cat)?;

    let half_hw = (h.div_ceil(2), w.div_ceil(2));
    let up1 = fused.resize_bilinear(half_hw.0, half_hw.1);
    let dec_blocks = [cfg.dec_block()];
    let (dec, dec_cache) = seq_forward(params, "", &dec_blocks, &up1)?;
    let up2 = dec.resize_bilinear(h, w);
    let out_blocks = [cfg.out_block()];
    let (out, out_cache) = seq_forward(params, "", &out_blocks, &up2)?;
    let mask = out.channel_array(0);

    Ok(SegForward {
        mask,
        mid: MidFeature::new(mid)?,
        cache: SegCache {
            enc: enc_caches,
            gate: gate_cache,
            injection_stage,
            pyr: pyr_caches,
            concat_sizes,
            fuse: fuse_cache,
            dec0: dec_cache,
            out: out_cache,
            deep_hw,
            half_hw,
        },
    })
}

/// Backward pass from a gradient on the predicted mask probabilities.
/// Includes the gate scalar's gradient when the forward ran gated.
pub fn seg_backward(
    fw: &SegForward,
    params: &ParameterSet,
    cfg: &SegNetConfig,
    d_mask: &Array2,
) -> Result<GradMap> {
    let cache = &fw.cache;
    let mut grads = GradMap::new();
    let d_out = Array3::from_channels(vec![d_mask.clone()])?;

    let out_blocks = [cfg.out_block()];
    let (d_up2, g) = seq_backward(params, "", &out_blocks, &cache.out, &d_out)?;
    crate::domain::grad_accumulate(&mut grads, g);

    let d_dec = Array3::resize_bilinear_transpose(cache.half_hw.0, cache.half_hw.1, &d_up2);
    let dec_blocks = [cfg.dec_block()];
    let (d_up1, g) = seq_backward(params, "", &dec_blocks, &cache.dec0, &d_dec)?;
    crate::domain::grad_accumulate(&mut grads, g);

    let d_fused = Array3::resize_bilinear_transpose(cache.deep_hw.0, cache.deep_hw.1, &d_up1);
    let fuse_blocks = [cfg.fuse_block()];
    let (d_cat, g) = seq_backward(params, "", &fuse_blocks, &cache.fuse, &d_fused)?;
    crate::domain::grad_accumulate(&mut grads, g);

    let mut split = nn::split_channels(&d_cat, &cache.concat_sizes);
    let mut d_deep = split.remove(0);
    let pyr_blocks = cfg.pyramid_blocks();
    for (b, (branch_cache, d_branch)) in pyr_blocks.iter().zip(cache.pyr.iter().zip(split)) {
        let (dx, g) = seq_backward(params, "", std::slice::from_ref(b), branch_cache, &d_branch)?;
        crate::domain::grad_accumulate(&mut grads, g);
        for (a, b) in d_deep.as_mut_slice().iter_mut().zip(dx.as_slice()) {
            *a += b;
        }
    }

    // unwind encoder stages, applying the gate backward at the injection point
    let encoder = cfg.encoder();
    let mut d_cur = d_deep;
    for si in (0..encoder.len()).rev() {
        if si == cache.injection_stage {
            if let Some(gc) = &cache.gate {
                let gate = RoieGate::with_alpha(gc.alpha, (gc.pre_gate.rows(), gc.pre_gate.cols()));
                let (d_feat, d_alpha) =
                    roie_fuse_backward(&gc.cam_resampled, &gc.pre_gate, &gate, &d_cur);
                d_cur = d_feat;
                grads
                    .entry(ALPHA_PARAM.to_string())
                    .and_modify(|g| g[0] += d_alpha)
                    .or_insert_with(|| vec![d_alpha]);
            }
        }
        let (_, blocks) = &encoder[si];
        let (dx, g) = seq_backward(params, "", blocks, &cache.enc[si], &d_cur)?;
        crate::domain::grad_accumulate(&mut grads, g);
        d_cur = dx;
    }
    Ok(grads)
}

/// Combined overlap + cross-entropy objective on a predicted/ground-truth
/// mask pair:
///
/// `loss = (1 - (2*sum(p*y) + eta) / (sum(p) + sum(y) + eta)) + lambda * bce`
///
/// where `bce` is the pixel-mean binary cross-entropy with the log argument
/// floored at 1e-7. Zero exactly when the prediction equals the target with
/// full confidence.
pub fn seg_loss(pred: &SpineMask, gt: &SpineMask, lambda: f64) -> Result<f64> {
    check_loss_inputs(pred, gt)?;
    Ok(seg_loss_values(pred.values(), gt.values(), lambda))
}

fn check_loss_inputs(pred: &SpineMask, gt: &SpineMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if gt.values().as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::OutOfRange("ground-truth mask must be binary".into()));
    }
    Ok(())
}

pub(crate) fn seg_loss_values(pred: &Array2, gt: &Array2, lambda: f64) -> f64 {
    let p = pred.as_slice();
    let y = gt.as_slice();
    let n = p.len() as f64;
    let mut sp = 0.0;
    let mut sy = 0.0;
    let mut spy = 0.0;
    let mut ce = 0.0;
    for i in 0..p.len() {
        sp += p[i];
        sy += y[i];
        spy += p[i] * y[i];
        ce -= y[i] * p[i].max(CE_CLAMP).ln() + (1.0 - y[i]) * (1.0 - p[i]).max(CE_CLAMP).ln();
    }
    let dice = 1.0 - (2.0 * spy + DICE_ETA) / (sp + sy + DICE_ETA);
    dice + lambda * ce / n
}

/// Loss plus gradient w.r.t. the predicted probabilities.
pub fn seg_loss_grad(pred: &Array2, gt: &Array2, lambda: f64) -> (f64, Array2) {
    let p = pred.as_slice();
    let y = gt.as_slice();
    let n = p.len() as f64;
    let mut sp = 0.0;
    let mut sy = 0.0;
    let mut spy = 0.0;
    for i in 0..p.len() {
        sp += p[i];
        sy += y[i];
        spy += p[i] * y[i];
    }
    let num = 2.0 * spy + DICE_ETA;
    let den = sp + sy + DICE_ETA;
    let mut grad = Array2::zeros(pred.rows(), pred.cols());
    let g = grad.as_mut_slice();
    for i in 0..p.len() {
        let d_dice = (num - 2.0 * y[i] * den) / (den * den);
        let mut d_ce = 0.0;
        if p[i] > CE_CLAMP {
            d_ce -= y[i] / p[i];
        }
        if 1.0 - p[i] > CE_CLAMP {
            d_ce += (1.0 - y[i]) / (1.0 - p[i]);
        }
        g[i] = d_dice + lambda * d_ce / n;
    }
    (seg_loss_values(pred, gt, lambda), grad)
}
