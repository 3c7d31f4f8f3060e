//! Five-stage alternating training schedule:
//!
//! 1. segmenter on the overlap+cross-entropy loss (no gate),
//! 2. regressor through the shared-weight Siamese pair with the CAM
//!    consistency term (segmenter frozen, predicted masks cached),
//! 3. segmenter fine-tuned with the CAM gate active (regressor frozen; the
//!    gate scalar joins the trainable set),
//! 4. segmenter fine-tuned through the frozen regressor: the angle-ratio
//!    loss between the regressor's reading of the predicted mask and of the
//!    ground-truth mask back-propagates through the mask into the segmenter,
//! 5. regressor retrained on the refined masks (same recipe as stage 2).
//!
//! Every stage seeds its own rng streams from (seed, stage, epoch), so a
//! resumed run reproduces an uninterrupted one bit for bit. The frozen
//! parameter set of each stage is left bit-identical.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{RunConfig, StageParams};
use crate::data::{load_gray_png, per_sample_seed, AugmentationConfig, DatasetManifest, Split};
use crate::domain::{
    derive_seed, grad_accumulate, grad_scale, CobbTriple, GradMap, ParamRole, ParameterSet,
    SpineMask, XrayImage,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{build_report, EvalReport};
use crate::nn::Adam;
use crate::regnet::{
    compose_input, extract_cam, reg_backward, reg_forward, reg_init, siamese_backward,
    siamese_step, smape_raw_grad, InputMode, RegNetConfig, SiamesePair,
};
use crate::segnet::{seg_backward, seg_forward, seg_loss_grad, SegNetConfig};
use crate::tensor::Array2;

/// One training-ready sample: preprocessed image, aligned binary mask,
/// normalized angle labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: XrayImage,
    pub mask: SpineMask,
    pub angles: CobbTriple,
}

/// Loads one split from a manifest, resizing images bilinearly and masks
/// nearest-neighbor to the target size. Every record must carry a mask.
pub fn samples_from_manifest(
    manifest: &DatasetManifest,
    split: Split,
    target: (usize, usize),
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for rec in manifest.split(split) {
        let raw = load_gray_png(&rec.image_path)?;
        let image = crate::data::preprocess(&XrayImage::new(raw, rec.source_id.clone())?, target)?;
        let mask_path = rec.mask_path.as_ref().ok_or_else(|| {
            Error::State(format!(
                "sample '{}' has no mask; run the prepare step first",
                rec.source_id
            ))
        })?;
        let mask_raw = load_gray_png(mask_path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let mask_resized = mask_raw.resize_nearest(target.0, target.1);
        out.push(Sample {
            id: rec.source_id.clone(),
            image,
            mask: SpineMask::ground_truth(mask_resized)?,
            angles: CobbTriple::from_degrees(rec.angles_deg)?,
        });
    }
    Ok(out)
}

/// Per-stage role plan: (trains, frozen, recipe tag). Fixed by the schedule;
/// stage 4 in particular freezes the regressor and trains the segmenter.
pub fn stage_roles(stage: usize) -> (ParamRole, ParamRole, &'static str) {
    match stage {
        1 => (ParamRole::Segmenter, ParamRole::Regressor, "seg_overlap_ce"),
        2 => (
            ParamRole::Regressor,
            ParamRole::Segmenter,
            "reg_siamese_consistency",
        ),
        3 => (ParamRole::Segmenter, ParamRole::Regressor, "seg_gated"),
        4 => (
            ParamRole::Segmenter,
            ParamRole::Regressor,
            "seg_through_frozen_reg",
        ),
        5 => (
            ParamRole::Regressor,
            ParamRole::Segmenter,
            "reg_siamese_consistency",
        ),
        _ => unreachable!("stage index out of range"),
    }
}

/// Validation metrics attached to a stage report.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smape_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub recipe: String,
    pub seed: u64,
    /// Mean training loss per epoch; length equals the epochs run.
    pub losses: Vec<f64>,
    pub val: ValMetrics,
    pub checkpoint_dir: Option<PathBuf>,
    /// Wall time is informational only and excluded from reproducibility
    /// contracts.
    pub wall_secs: f64,
}

/// Aborts on non-finite loss immediately, or after three consecutive epochs
/// above ten times the initial epoch loss.
struct DivergenceGuard {
    stage: usize,
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    fn new(stage: usize) -> Self {
        Self {
            stage,
            initial: None,
            consecutive: 0,
        }
    }

    fn observe(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "stage {} epoch {epoch}: non-finite loss",
                self.stage
            )));
        }
        match self.initial {
            None => self.initial = Some(loss),
            Some(initial) => {
                if loss > 10.0 * initial {
                    self.consecutive += 1;
                    if self.consecutive >= 3 {
                        return Err(Error::Divergence(format!(
                            "stage {} epoch {epoch}: loss {loss:.4} above 10x initial {initial:.4} for 3 epochs",
                            self.stage
                        )));
                    }
                } else {
                    self.consecutive = 0;
                }
            }
        }
        Ok(())
    }
}

/// Training facade bundling the two configs and the schedule knobs.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub seg_cfg: SegNetConfig,
    pub reg_cfg: RegNetConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub w_ar: f64,
    pub input_mode: InputMode,
    /// When false, stages 2/5 train a single branch on the deployed input
    /// composition (the ablation baseline) instead of the Siamese pair.
    pub ar_enabled: bool,
    pub reinit_stage5: bool,
    pub augment: Option<AugmentationConfig>,
    pub stages: Vec<StageParams>,
}

impl TrainContext {
    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            seg_cfg: cfg.segnet.clone(),
            reg_cfg: cfg.regnet.clone(),
            seed: cfg.train.seed,
            batch_size: cfg.train.batch_size,
            w_ar: cfg.train.w_ar,
            input_mode: cfg.train.input_mode,
            ar_enabled: true,
            reinit_stage5: cfg.train.reinit_stage5,
            augment: cfg.data.augment.clone(),
            stages: cfg.train.stages.clone(),
        })
    }

    pub fn init_params(&self) -> Result<(ParameterSet, ParameterSet)> {
        let theta1 = crate::segnet::seg_init(
            &self.seg_cfg,
            derive_seed(&[&self.seed.to_le_bytes(), b"segnet-init"]),
        )?;
        let theta2 = reg_init(
            &self.reg_cfg,
            derive_seed(&[&self.seed.to_le_bytes(), b"regnet-init"]),
        )?;
        Ok((theta1, theta2))
    }

    fn stage_params(&self, stage: usize) -> &StageParams {
        &self.stages[stage - 1]
    }

    /// Sample order for one epoch. Keyed by the recipe tag (not the stage
    /// index) so that stage 5 with unchanged inputs is an exact stage-2
    /// rerun.
    fn epoch_order(&self, recipe: &str, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            &self.seed.to_le_bytes(),
            recipe.as_bytes(),
            &(epoch as u64).to_le_bytes(),
            b"order",
        ]));
        // Fisher-Yates
        use rand::Rng;
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Augmented view of a sample for segmentation stages; identity when
    /// augmentation is disabled.
    fn seg_view(&self, sample: &Sample, stage: usize, epoch: usize) -> Result<Sample> {
        match &self.augment {
            None => Ok(sample.clone()),
            Some(aug) => {
                let seed = per_sample_seed(
                    derive_seed(&[&aug.seed.to_le_bytes(), &(stage as u64).to_le_bytes()]),
                    &sample.id,
                    epoch,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (img, mask, angles) = crate::data::augment(
                    &sample.image,
                    &sample.mask,
                    &sample.angles,
                    aug,
                    &mut rng,
                )?;
                Ok(Sample {
                    id: sample.id.clone(),
                    image: img,
                    mask,
                    angles,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Predicted-mask cache
// ---------------------------------------------------------------------------

/// Content-addressed cache of predicted masks, keyed by the parameter hashes
/// that produced them. Backed by `SEG4REG_CACHE` when that directory root is
/// configured, otherwise memory-only per stage.
pub struct MaskCache {
    root: Option<PathBuf>,
}

impl MaskCache {
    pub fn from_env() -> Self {
        Self {
            root: std::env::var_os("SEG4REG_CACHE").map(PathBuf::from),
        }
    }

    pub fn disabled() -> Self {
        Self { root: None }
    }

    fn path_for(&self, key: u64, id: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| {
            r.join("sx")
                .join(format!("{key:016x}"))
                .join(format!("{id}.bin"))
        })
    }

    fn load(&self, key: u64, id: &str) -> Option<Array2> {
        let path = self.path_for(key, id)?;
        let bytes = std::fs::read(path).ok()?;
        if bytes.len() < 8 {
            return None;
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
        if bytes.len() != 8 + rows * cols * 8 {
            return None;
        }
        let data: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_vec(rows, cols, data).ok()
    }

    fn store(&self, key: u64, id: &str, mask: &Array2) {
        if let Some(path) = self.path_for(key, id) {
            let mut bytes = Vec::with_capacity(8 + mask.len() * 8);
            bytes.extend_from_slice(&(mask.rows() as u32).to_le_bytes());
            bytes.extend_from_slice(&(mask.cols() as u32).to_le_bytes());
            for &v in mask.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let _ = write_atomic(&path, &bytes);
        }
    }
}

/// Cache key for predicted masks: the mask depends on the segmenter always
/// and on the regressor once the gate is live.
fn mask_cache_key(theta1: &ParameterSet, theta2: &ParameterSet) -> Result<u64> {
    let alpha = theta1.scalar_value(crate::segnet::ALPHA_PARAM)?;
    Ok(if alpha == 0.0 {
        theta1.content_hash()
    } else {
        derive_seed(&[
            &theta1.content_hash().to_le_bytes(),
            &theta2.content_hash().to_le_bytes(),
        ])
    })
}

/// Segmentation inference through the deployed pipeline: ungated prediction
/// first; once the gate scalar is nonzero, a CAM from the frozen regressor
/// (reading image ⊕ ungated mask) modulates the mid feature and the gated
/// prediction is returned.
pub fn infer_mask(
    image: &XrayImage,
    theta1: &ParameterSet,
    theta2: &ParameterSet,
    seg_cfg: &SegNetConfig,
    reg_cfg: &RegNetConfig,
) -> Result<Array2> {
    let fw0 = seg_forward(image.pixels(), theta1, seg_cfg, None)?;
    let alpha = theta1.scalar_value(crate::segnet::ALPHA_PARAM)?;
    if alpha == 0.0 {
        return Ok(fw0.mask);
    }
    let input = compose_input(image.pixels(), &fw0.mask, InputMode::ImageMask)?;
    let cam = extract_cam(&reg_forward(&input, theta2, reg_cfg)?.maps)?;
    Ok(seg_forward(image.pixels(), theta1, seg_cfg, Some(&cam))?.mask)
}

/// Predicted masks for every sample, computed once per (theta1, theta2)
/// state and reused across the stage.
pub fn predicted_mask_cache(
    samples: &[Sample],
    theta1: &ParameterSet,
    theta2: &ParameterSet,
    ctx: &TrainContext,
    cache: &MaskCache,
) -> Result<Vec<Array2>> {
    let key = mask_cache_key(theta1, theta2)?;
    samples
        .iter()
        .map(|s| {
            if let Some(hit) = cache.load(key, &s.id) {
                return Ok(hit);
            }
            let mask = infer_mask(&s.image, theta1, theta2, &ctx.seg_cfg, &ctx.reg_cfg)?;
            cache.store(key, &s.id, &mask);
            Ok(mask)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Stage 1: segmenter pretraining, no gate active.
pub fn stage1_train_seg(
    samples: &[Sample],
    theta1: &mut ParameterSet,
    ctx: &TrainContext,
) -> Result<StageReport> {
    let stage = 1;
    let sp = *ctx.stage_params(stage);
    let start = Instant::now();
    let mut opt = Adam::new(sp.lr, sp.weight_decay);
    let mut guard = DivergenceGuard::new(stage);
    let mut losses = Vec::with_capacity(sp.epochs);
    for epoch in 0..sp.epochs {
        let order = ctx.epoch_order(stage_roles(stage).2, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(ctx.batch_size) {
            let mut grads = GradMap::new();
            for &idx in batch {
                let view = ctx.seg_view(&samples[idx], stage, epoch)?;
                let fw = seg_forward(view.image.pixels(), theta1, &ctx.seg_cfg, None)?;
                let (loss, d_mask) =
                    seg_loss_grad(&fw.mask, view.mask.values(), ctx.seg_cfg.lambda_ce);
                epoch_loss += loss;
                grad_accumulate(
                    &mut grads,
                    seg_backward(&fw, theta1, &ctx.seg_cfg, &d_mask)?,
                );
            }
            grad_scale(&mut grads, 1.0 / batch.len() as f64);
            opt.step(theta1, &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        guard.observe(epoch, mean)?;
        losses.push(mean);
    }
    Ok(StageReport {
        stage,
        recipe: stage_roles(stage).2.into(),
        seed: ctx.seed,
        losses,
        val: ValMetrics {
            dice: None,
            smape_pct: None,
        },
        checkpoint_dir: None,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Shared recipe of stages 2 and 5: Siamese regressor training against the
/// angle labels plus the CAM-consistency term, on cached predicted masks.
fn train_reg_siamese(
    stage: usize,
    samples: &[Sample],
    masks: &[Array2],
    theta2: &mut ParameterSet,
    ctx: &TrainContext,
) -> Result<StageReport> {
    let sp = *ctx.stage_params(stage);
    let start = Instant::now();
    let mut opt = Adam::new(sp.lr, sp.weight_decay);
    let mut guard = DivergenceGuard::new(stage);
    let mut losses = Vec::with_capacity(sp.epochs);
    for epoch in 0..sp.epochs {
        let order = ctx.epoch_order(stage_roles(stage).2, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(ctx.batch_size) {
            let mut grads = GradMap::new();
            for &idx in batch {
                let s = &samples[idx];
                if ctx.ar_enabled {
                    let pair = SiamesePair::new(s.image.pixels(), &masks[idx], ctx.input_mode)?;
                    let step = siamese_step(&pair, theta2, &s.angles, &ctx.reg_cfg, ctx.w_ar)?;
                    epoch_loss += step.losses.total;
                    grad_accumulate(&mut grads, siamese_backward(&step, theta2, &ctx.reg_cfg)?);
                } else {
                    let input = compose_input(s.image.pixels(), &masks[idx], ctx.input_mode)?;
                    let fw = reg_forward(&input, theta2, &ctx.reg_cfg)?;
                    let (loss, d_pred) =
                        smape_raw_grad(&fw.pred, &s.angles.normalized(), ctx.reg_cfg.epsilon);
                    epoch_loss += loss;
                    let (g, _) = reg_backward(&fw, theta2, &ctx.reg_cfg, d_pred, None)?;
                    grad_accumulate(&mut grads, g);
                }
            }
            grad_scale(&mut grads, 1.0 / batch.len() as f64);
            opt.step(theta2, &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        guard.observe(epoch, mean)?;
        losses.push(mean);
    }
    Ok(StageReport {
        stage,
        recipe: stage_roles(stage).2.into(),
        seed: ctx.seed,
        losses,
        val: ValMetrics {
            dice: None,
            smape_pct: None,
        },
        checkpoint_dir: None,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 2: regressor training with attention regularization; the segmenter
/// is frozen and its predictions are cached once.
pub fn stage2_train_reg_with_ar(
    samples: &[Sample],
    theta1: &ParameterSet,
    theta2: &mut ParameterSet,
    ctx: &TrainContext,
    cache: &MaskCache,
) -> Result<StageReport> {
    let masks = predicted_mask_cache(samples, theta1, theta2, ctx, cache)?;
    train_reg_siamese(2, samples, &masks, theta2, ctx)
}

/// Stage 3: segmenter fine-tuning with the CAM gate active. The CAM is
/// recomputed per view from the frozen regressor reading (image ⊕ current
/// ungated prediction) and enters as a constant attention input; the gate
/// scalar receives gradient along with the rest of the segmenter.
pub fn stage3_finetune_seg_with_roie(
    samples: &[Sample],
    theta1: &mut ParameterSet,
    theta2: &ParameterSet,
    ctx: &TrainContext,
) -> Result<StageReport> {
    let stage = 3;
    let sp = *ctx.stage_params(stage);
    let start = Instant::now();
    let mut opt = Adam::new(sp.lr, sp.weight_decay);
    let mut guard = DivergenceGuard::new(stage);
    let mut losses = Vec::with_capacity(sp.epochs);
    for epoch in 0..sp.epochs {
        let order = ctx.epoch_order(stage_roles(stage).2, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(ctx.batch_size) {
            let mut grads = GradMap::new();
            for &idx in batch {
                let view = ctx.seg_view(&samples[idx], stage, epoch)?;
                let base = seg_forward(view.image.pixels(), theta1, &ctx.seg_cfg, None)?;
                let reg_in = compose_input(view.image.pixels(), &base.mask, InputMode::ImageMask)?;
                let cam = extract_cam(&reg_forward(&reg_in, theta2, &ctx.reg_cfg)?.maps)?;
                let fw = seg_forward(view.image.pixels(), theta1, &ctx.seg_cfg, Some(&cam))?;
                let (loss, d_mask) =
                    seg_loss_grad(&fw.mask, view.mask.values(), ctx.seg_cfg.lambda_ce);
                epoch_loss += loss;
                grad_accumulate(
                    &mut grads,
                    seg_backward(&fw, theta1, &ctx.seg_cfg, &d_mask)?,
                );
            }
            grad_scale(&mut grads, 1.0 / batch.len() as f64);
            opt.step(theta1, &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        guard.observe(epoch, mean)?;
        losses.push(mean);
    }
    Ok(StageReport {
        stage,
        recipe: stage_roles(stage).2.into(),
        seed: ctx.seed,
        losses,
        val: ValMetrics {
            dice: None,
            smape_pct: None,
        },
        checkpoint_dir: None,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 4: the frozen regressor acts as a differentiable critic. Loss is
/// the angle-ratio distance between its reading of the predicted mask and
/// its reading of the ground-truth mask (both through the mask-only branch);
/// gradients flow through the prediction into the segmenter.
pub fn stage4_finetune_seg_via_reg(
    samples: &[Sample],
    theta1: &mut ParameterSet,
    theta2: &ParameterSet,
    ctx: &TrainContext,
) -> Result<StageReport> {
    let stage = 4;
    let sp = *ctx.stage_params(stage);
    let start = Instant::now();
    // r(y) is constant while the regressor is frozen
    let gt_readings: Vec<[f64; 3]> = samples
        .iter()
        .map(|s| {
            let input = compose_input(s.image.pixels(), s.mask.values(), InputMode::Mask)?;
            Ok(reg_forward(&input, theta2, &ctx.reg_cfg)?.pred)
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(sp.lr, sp.weight_decay);
    let mut guard = DivergenceGuard::new(stage);
    let mut losses = Vec::with_capacity(sp.epochs);
    for epoch in 0..sp.epochs {
        let order = ctx.epoch_order(stage_roles(stage).2, epoch, samples.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(ctx.batch_size) {
            let mut grads = GradMap::new();
            for &idx in batch {
                let s = &samples[idx];
                // gated prediction, same pipeline the deployed model uses
                let base = seg_forward(s.image.pixels(), theta1, &ctx.seg_cfg, None)?;
                let reg_in = compose_input(s.image.pixels(), &base.mask, InputMode::ImageMask)?;
                let cam = extract_cam(&reg_forward(&reg_in, theta2, &ctx.reg_cfg)?.maps)?;
                let fw = seg_forward(s.image.pixels(), theta1, &ctx.seg_cfg, Some(&cam))?;
                // frozen regressor reads the prediction through branch B
                let pred_in = compose_input(s.image.pixels(), &fw.mask, InputMode::Mask)?;
                let fwr = reg_forward(&pred_in, theta2, &ctx.reg_cfg)?;
                let (loss, d_pred) =
                    smape_raw_grad(&fwr.pred, &gt_readings[idx], ctx.reg_cfg.epsilon);
                epoch_loss += loss;
                let (_, dx) = reg_backward(&fwr, theta2, &ctx.reg_cfg, d_pred, None)?;
                let d_mask = dx.channel_array(1);
                grad_accumulate(
                    &mut grads,
                    seg_backward(&fw, theta1, &ctx.seg_cfg, &d_mask)?,
                );
            }
            grad_scale(&mut grads, 1.0 / batch.len() as f64);
            opt.step(theta1, &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        guard.observe(epoch, mean)?;
        losses.push(mean);
    }
    Ok(StageReport {
        stage,
        recipe: stage_roles(stage).2.into(),
        seed: ctx.seed,
        losses,
        val: ValMetrics {
            dice: None,
            smape_pct: None,
        },
        checkpoint_dir: None,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 5: regressor retraining on the refined segmenter's masks. The mask
/// cache is regenerated because the segmenter (and gate) changed; the
/// regressor continues from its stage-2 optimum unless `reinit_stage5` asks
/// for a fresh start.
pub fn stage5_retrain_reg(
    samples: &[Sample],
    theta1: &ParameterSet,
    theta2: &mut ParameterSet,
    ctx: &TrainContext,
    cache: &MaskCache,
) -> Result<StageReport> {
    // refined masks come from the trained configuration; regenerate the
    // cache before any regressor reset
    let masks = predicted_mask_cache(samples, theta1, theta2, ctx, cache)?;
    if ctx.reinit_stage5 {
        *theta2 = reg_init(
            &ctx.reg_cfg,
            derive_seed(&[&ctx.seed.to_le_bytes(), b"regnet-reinit"]),
        )?;
    }
    train_reg_siamese(5, samples, &masks, theta2, ctx)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-sample evaluation rows plus the aggregated report.
pub struct Evaluation {
    pub report: EvalReport,
    pub ids: Vec<String>,
    pub preds: Vec<CobbTriple>,
    pub gts: Vec<CobbTriple>,
}

/// Runs the deployed pipeline over a sample set: gated segmentation, then
/// the regressor on the configured input composition.
pub fn evaluate(
    samples: &[Sample],
    theta1: &ParameterSet,
    theta2: &ParameterSet,
    ctx: &TrainContext,
) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut ids = Vec::with_capacity(samples.len());
    let mut seg_pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let mask = infer_mask(&s.image, theta1, theta2, &ctx.seg_cfg, &ctx.reg_cfg)?;
        let input = compose_input(s.image.pixels(), &mask, ctx.input_mode)?;
        let pred = reg_forward(&input, theta2, &ctx.reg_cfg)?.pred;
        preds.push(CobbTriple::from_normalized(pred)?);
        gts.push(s.angles);
        ids.push(s.id.clone());
        let bin = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        seg_pairs.push((bin, s.mask.values().clone()));
    }
    let report = build_report(&preds, &gts, &seg_pairs)?;
    Ok(Evaluation {
        report,
        ids,
        preds,
        gts,
    })
}

/// Mean test Dice of the gated segmentation path.
pub fn eval_dice(
    samples: &[Sample],
    theta1: &ParameterSet,
    theta2: &ParameterSet,
    ctx: &TrainContext,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let mask = infer_mask(&s.image, theta1, theta2, &ctx.seg_cfg, &ctx.reg_cfg)?;
        let bin = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        acc += crate::metrics::seg_metrics(&bin, s.mask.values())?.dice;
    }
    Ok(acc / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Schedule driver
// ---------------------------------------------------------------------------

fn stage_dir(out_dir: &Path, stage: usize) -> PathBuf {
    out_dir.join(format!("stage{stage}"))
}

fn stage_complete(out_dir: &Path, stage: usize) -> bool {
    let d = stage_dir(out_dir, stage);
    d.join("segnet.bin").is_file()
        && d.join("regnet.bin").is_file()
        && d.join("report.json").is_file()
}

/// Writes both checkpoints and the stage report.
fn write_stage(
    out_dir: &Path,
    stage: usize,
    theta1: &ParameterSet,
    theta2: &ParameterSet,
    report: &StageReport,
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let dir = stage_dir(out_dir, stage);
    std::fs::create_dir_all(&dir)?;
    let epochs = report.losses.len();
    let meta = |role: ParamRole| CheckpointMeta {
        config_hash: config_hash.to_string(),
        stage,
        epoch: epochs,
        seed,
        role,
    };
    save_checkpoint(&dir.join("segnet.bin"), theta1, &meta(ParamRole::Segmenter))?;
    save_checkpoint(&dir.join("regnet.bin"), theta2, &meta(ParamRole::Regressor))?;
    let json = serde_json::to_string_pretty(report).expect("report serialization");
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    Ok(())
}

/// Loads the parameter pair saved at a stage boundary, verifying the config
/// hash.
pub fn load_stage(
    out_dir: &Path,
    stage: usize,
    config_hash: &str,
) -> Result<(ParameterSet, ParameterSet)> {
    let dir = stage_dir(out_dir, stage);
    let (theta1, m1) = load_checkpoint(&dir.join("segnet.bin"))?;
    let (theta2, m2) = load_checkpoint(&dir.join("regnet.bin"))?;
    for m in [&m1, &m2] {
        if m.config_hash != config_hash {
            return Err(Error::State(format!(
                "stage {stage} checkpoint was produced by config {} but the current config hashes to {config_hash}",
                m.config_hash
            )));
        }
    }
    Ok((theta1, theta2))
}

/// First stage that still needs to run under `out_dir` (1..=6; 6 means all
/// done). Completed stages must match the config hash.
pub fn resume_point(out_dir: &Path, config_hash: &str) -> Result<usize> {
    for stage in 1..=5 {
        if stage_complete(out_dir, stage) {
            load_stage(out_dir, stage, config_hash)?;
        } else {
            return Ok(stage);
        }
    }
    Ok(6)
}

/// Runs stages `start..=end` in order, checkpointing after each stage.
/// `start > 1` resumes from the previous stage's checkpoints. Validation
/// metrics are computed on `test_samples` after each stage.
#[allow(clippy::too_many_arguments)]
pub fn run_schedule(
    train_samples: &[Sample],
    test_samples: &[Sample],
    theta1: &mut ParameterSet,
    theta2: &mut ParameterSet,
    ctx: &TrainContext,
    out_dir: Option<&Path>,
    config_hash: &str,
    start: usize,
    end: usize,
) -> Result<Vec<StageReport>> {
    if train_samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if !(1..=5).contains(&start) || !(start..=5).contains(&end) {
        return Err(Error::InvalidInput(format!(
            "invalid stage range {start}..={end}"
        )));
    }
    let cache = MaskCache::from_env();
    let mut reports = Vec::new();
    for stage in start..=end {
        let (_, frozen_role, _) = stage_roles(stage);
        let frozen_hash = match frozen_role {
            ParamRole::Segmenter => theta1.content_hash(),
            ParamRole::Regressor => theta2.content_hash(),
        };
        match frozen_role {
            ParamRole::Segmenter => theta1.set_frozen(true),
            ParamRole::Regressor => theta2.set_frozen(true),
        }
        let mut report = match stage {
            1 => stage1_train_seg(train_samples, theta1, ctx)?,
            2 => stage2_train_reg_with_ar(train_samples, theta1, theta2, ctx, &cache)?,
            3 => stage3_finetune_seg_with_roie(train_samples, theta1, theta2, ctx)?,
            4 => stage4_finetune_seg_via_reg(train_samples, theta1, theta2, ctx)?,
            5 => stage5_retrain_reg(train_samples, theta1, theta2, ctx, &cache)?,
            _ => unreachable!(),
        };
        match frozen_role {
            ParamRole::Segmenter => theta1.set_frozen(false),
            ParamRole::Regressor => theta2.set_frozen(false),
        }
        let frozen_after = match frozen_role {
            ParamRole::Segmenter => theta1.content_hash(),
            ParamRole::Regressor => theta2.content_hash(),
        };
        if frozen_hash != frozen_after {
            return Err(Error::State(format!(
                "stage {stage} mutated its frozen parameter set"
            )));
        }
        if !test_samples.is_empty() {
            report.val = match stage {
                1 | 3 | 4 => ValMetrics {
                    dice: Some(eval_dice(test_samples, theta1, theta2, ctx)?),
                    smape_pct: None,
                },
                _ => ValMetrics {
                    dice: None,
                    smape_pct: Some(
                        evaluate(test_samples, theta1, theta2, ctx)?
                            .report
                            .smape_pct,
                    ),
                },
            };
        }
        if let Some(dir) = out_dir {
            write_stage(dir, stage, theta1, theta2, &report, config_hash, ctx.seed)?;
            report.checkpoint_dir = Some(stage_dir(dir, stage));
        }
        reports.push(report);
    }
    Ok(reports)
}
