//! Command implementations behind the `seg4reg` binary.
//!
//! Exit code contract: 0 success, 2 input error, 3 divergence, 4
//! state/dependency error. No command mutates its input directory; all
//! outputs land under the command's `--out` (or the configured run
//! directory) and reruns on unchanged inputs are byte-identical or refuse
//! explicitly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::landmarks::masks_from_landmarks;
use crate::data::synthetic::{write_synthetic_dataset, SyntheticSpec};
use crate::data::{load_gray_png, load_landmarks, load_manifest, save_gray_png, Split};
use crate::domain::ParameterSet;
use crate::error::{Error, Result};
use crate::fig::{cam_overlay, error_overlay};
use crate::fsutil::write_atomic;
use crate::metrics::{per_sample_csv, reference};
use crate::regnet::{compose_input, extract_cam, reg_forward, InputMode};
use crate::trainer::{
    evaluate, infer_mask, load_stage, resume_point, run_schedule, samples_from_manifest, Sample,
    TrainContext,
};

/// Rasterizes masks for every record of a dataset and writes the validated
/// manifest. Outputs: `<out>/masks/*.png`, `<out>/manifest.json`.
pub fn cmd_prepare(data: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    // split-rooted datasets get per-split mask directories so identical ids
    // across splits cannot collide
    let split_root = data.join("train").is_dir();
    std::fs::create_dir_all(out.join("masks"))?;
    let mut warnings_total = 0usize;
    let mut records = Vec::new();
    for rec in manifest.records() {
        let lm_path = rec.landmark_path.as_ref().ok_or_else(|| {
            Error::Malformed(format!("record '{}' has no landmark file", rec.source_id))
        })?;
        let image = load_gray_png(&rec.image_path)?;
        let lm = load_landmarks(lm_path, image.shape())?;
        let (mask, warnings) = masks_from_landmarks(&lm)?;
        for w in &warnings {
            println!("warning: {}: {w}", rec.source_id);
        }
        warnings_total += warnings.len();
        let mask_dir = if split_root {
            out.join("masks").join(match rec.split {
                Split::Train => "train",
                Split::Test => "test",
            })
        } else {
            out.join("masks")
        };
        let mask_path = mask_dir.join(format!("{}.png", rec.source_id));
        save_gray_png(&mask_path, mask.values())?;
        let mut rec = rec.clone();
        rec.mask_path = Some(mask_path);
        records.push(rec);
    }
    let updated = serde_json::to_string_pretty(&records).expect("manifest serialization");
    write_atomic(&out.join("manifest.json"), updated.as_bytes())?;
    println!(
        "prepared {} masks ({} warnings) -> {}",
        records.len(),
        warnings_total,
        out.display()
    );
    Ok(())
}

/// Emits a synthetic dataset and runs the generator's angle self-check.
pub fn cmd_synth(spec_path: Option<&Path>, n: usize, out: &Path, seed: u64) -> Result<()> {
    let spec = match spec_path {
        Some(p) => SyntheticSpec::from_json_file(p)?,
        None => SyntheticSpec::default(),
    };
    let summary = write_synthetic_dataset(&spec, n, seed, out)?;
    println!(
        "wrote {} samples to {} (angle self-check max error {:.4} deg: pass)",
        summary.count,
        out.display(),
        summary.max_self_check_err_deg
    );
    Ok(())
}

/// Loads a dataset directory: either a raw layout (angles.csv + images/)
/// or a prepared directory holding a manifest.json written by `prepare`.
fn load_dataset_dir(dir: &Path) -> Result<crate::data::DatasetManifest> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() && !dir.join("angles.csv").is_file() && !dir.join("train").is_dir() {
        let records: Vec<crate::data::ManifestRecord> =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                .map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
        return crate::data::DatasetManifest::from_records(records);
    }
    load_manifest(dir)
}

/// Loads train/test sample sets from the configured directories.
fn load_config_samples(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train_manifest = load_dataset_dir(&cfg.data.train_dir)?;
    let train = samples_from_manifest(&train_manifest, Split::Train, cfg.data.target_size)?;
    let test = match &cfg.data.test_dir {
        Some(dir) => {
            let m = load_dataset_dir(dir)?;
            samples_from_manifest(&m, Split::Train, cfg.data.target_size)?
        }
        None => {
            let from_split: Vec<Sample> =
                samples_from_manifest(&train_manifest, Split::Test, cfg.data.target_size)?;
            from_split
        }
    };
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelector {
    All,
    One(usize),
}

impl StageSelector {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelector::All),
            _ => match s.parse::<usize>() {
                Ok(n) if (1..=5).contains(&n) => Ok(StageSelector::One(n)),
                _ => Err(Error::InvalidInput(format!(
                    "stage must be 1..5 or 'all', got '{s}'"
                ))),
            },
        }
    }
}

/// Staged training entry point. A fresh run refuses to overwrite an
/// existing run directory; `--resume` continues from completed stage
/// boundaries after verifying the config hash.
pub fn cmd_train(config_path: &Path, stage: StageSelector, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let hash = cfg.content_hash();
    let ctx = TrainContext::from_run_config(&cfg)?;
    let (train, test) = load_config_samples(&cfg)?;
    let run_dir = resume.unwrap_or(&cfg.train.out_dir).to_path_buf();

    let (start, end) = match stage {
        StageSelector::All => {
            let next = if resume.is_some() {
                resume_point(&run_dir, &hash)?
            } else if (1..=5).any(|s| run_dir.join(format!("stage{s}")).exists()) {
                let next = resume_point(&run_dir, &hash)?;
                if next <= 5 {
                    return Err(Error::State(format!(
                        "run directory {} holds a partial run; pass --resume to continue",
                        run_dir.display()
                    )));
                }
                next
            } else {
                1
            };
            if next > 5 {
                println!("all 5 stages already complete in {}", run_dir.display());
                return Ok(());
            }
            (next, 5)
        }
        StageSelector::One(n) => {
            let next = resume_point(&run_dir, &hash)?;
            if next < n {
                return Err(Error::State(format!(
                    "stage {n} needs stages 1..{} complete in {} (next missing: {next})",
                    n - 1,
                    run_dir.display()
                )));
            }
            if next > n {
                println!("stage {n} already complete in {}", run_dir.display());
                return Ok(());
            }
            (n, n)
        }
    };

    std::fs::create_dir_all(&run_dir)?;
    write_atomic(&run_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let (mut theta1, mut theta2) = if start > 1 {
        load_stage(&run_dir, start - 1, &hash)?
    } else {
        ctx.init_params()?
    };
    let reports = run_schedule(
        &train,
        &test,
        &mut theta1,
        &mut theta2,
        &ctx,
        Some(&run_dir),
        &hash,
        start,
        end,
    )?;
    for r in &reports {
        let val = match (r.val.dice, r.val.smape_pct) {
            (Some(d), _) => format!("val dice {d:.4}"),
            (_, Some(s)) => format!("val smape {s:.2}%"),
            _ => "no validation split".into(),
        };
        println!(
            "stage {} ({}): {} epochs, final loss {:.6}, {val}",
            r.stage,
            r.recipe,
            r.losses.len(),
            r.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Locates the newest complete stage under a run directory.
fn last_complete_stage(run_dir: &Path) -> Result<usize> {
    for stage in (1..=5).rev() {
        let d = run_dir.join(format!("stage{stage}"));
        if d.join("segnet.bin").is_file() && d.join("regnet.bin").is_file() {
            return Ok(stage);
        }
    }
    Err(Error::MissingFile(run_dir.join("stage1/segnet.bin")))
}

fn load_run(ckpt: &Path) -> Result<(RunConfig, ParameterSet, ParameterSet)> {
    let cfg = RunConfig::from_file(&ckpt.join("config.json"))?;
    let stage = last_complete_stage(ckpt)?;
    let (theta1, theta2) = load_stage(ckpt, stage, &cfg.content_hash())?;
    Ok((cfg, theta1, theta2))
}

/// Evaluates a checkpoint on a dataset and writes the report (JSON), the
/// per-sample CSV, and prints the aligned comparison row.
pub fn cmd_eval(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (mut cfg, theta1, theta2) = load_run(ckpt)?;
    cfg.data.train_dir = data.to_path_buf();
    cfg.data.test_dir = None;
    let ctx = TrainContext::from_run_config(&cfg)?;
    let manifest = load_dataset_dir(data)?;
    let samples = samples_from_manifest(&manifest, Split::Train, cfg.data.target_size)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let eval = evaluate(&samples, &theta1, &theta2, &ctx)?;
    write_atomic(out, eval.report.to_json().as_bytes())?;
    let csv = per_sample_csv(&eval.ids, &eval.preds, &eval.gts)?;
    write_atomic(&out.with_extension("csv"), csv.as_bytes())?;
    print!("{}", eval.report.to_table());
    println!(
        "MAE {:.2}, {:.2}, {:.2} | SMAPE (%) {:.2}",
        eval.report.mae_deg[0],
        eval.report.mae_deg[1],
        eval.report.mae_deg[2],
        eval.report.smape_pct
    );
    println!(
        "note: full-scale reference targets are SMAPE {:.2} (res18) / {:.2} (eff_b1); \
         desk-scale runs do not reproduce them.",
        reference::FULL_SCALE_SMAPE_RES18,
        reference::FULL_SCALE_SMAPE_EFF_B1
    );
    Ok(())
}

/// Emits per-sample CAM heat overlays and segmentation error overlays.
/// With `with_ar_baseline`, also emits the mask-only branch CAM for
/// side-by-side attention comparison.
pub fn cmd_cam(ckpt: &Path, data: &Path, out: &Path, with_ar_baseline: bool) -> Result<()> {
    let (mut cfg, theta1, theta2) = load_run(ckpt)?;
    cfg.data.train_dir = data.to_path_buf();
    cfg.data.test_dir = None;
    let ctx = TrainContext::from_run_config(&cfg)?;
    let manifest = load_dataset_dir(data)?;
    let samples = samples_from_manifest(&manifest, Split::Train, cfg.data.target_size)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to render".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut count = 0usize;
    for s in &samples {
        let mask = infer_mask(&s.image, &theta1, &theta2, &ctx.seg_cfg, &ctx.reg_cfg)?;
        let input = compose_input(s.image.pixels(), &mask, InputMode::ImageMask)?;
        let maps = reg_forward(&input, &theta2, &ctx.reg_cfg)?.maps;
        let cam = extract_cam(&maps)?;
        cam_overlay(s.image.pixels(), &cam)?.save(&out.join(format!("{}_cam.png", s.id)))?;
        if ctx.reg_cfg.cam_mode == crate::regnet::CamMode::PerChannel {
            for (k, ch) in crate::regnet::extract_cam_per_channel(&maps)?
                .iter()
                .enumerate()
            {
                cam_overlay(s.image.pixels(), ch)?
                    .save(&out.join(format!("{}_cam_ch{k}.png", s.id)))?;
                count += 1;
            }
        }
        let bin = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        error_overlay(s.image.pixels(), &bin, s.mask.values())?
            .save(&out.join(format!("{}_seg.png", s.id)))?;
        count += 2;
        if with_ar_baseline {
            let mask_only = compose_input(s.image.pixels(), &mask, InputMode::Mask)?;
            let cam_b = extract_cam(&reg_forward(&mask_only, &theta2, &ctx.reg_cfg)?.maps)?;
            cam_overlay(s.image.pixels(), &cam_b)?
                .save(&out.join(format!("{}_cam_maskonly.png", s.id)))?;
            count += 1;
        }
    }
    println!(
        "wrote {count} figures for {} samples to {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

/// One ablation grid cell: which couplings are active and what the deployed
/// regressor input is.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub ar: bool,
    pub roie: bool,
    pub tcl: bool,
    pub input: String,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let mut parts = vec!["base"];
        if self.ar {
            parts.push("ar");
        }
        if self.roie {
            parts.push("roie");
        }
        if self.tcl {
            parts.push("tcl");
        }
        format!("{}[{}]", parts.join("+"), self.input)
    }

    /// Last schedule stage the cell runs: the gate adds stage 3, the full
    /// schedule adds stages 4 and 5.
    pub fn end_stage(&self) -> usize {
        if self.tcl {
            5
        } else if self.roie {
            3
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub smape_mean: f64,
    pub smape_sd: f64,
    pub mae_mean: [f64; 3],
    pub dice_mean: f64,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs one ablation cell for one seed on in-memory sample sets; returns
/// (smape%, mae, dice).
pub fn run_ablation_cell(
    cell: &AblationCell,
    seed: u64,
    base: &TrainContext,
    train: &[Sample],
    test: &[Sample],
) -> Result<(f64, [f64; 3], f64)> {
    let mut ctx = base.clone();
    ctx.seed = seed;
    ctx.ar_enabled = cell.ar;
    ctx.input_mode = InputMode::parse(&cell.input)?;
    let (mut theta1, mut theta2) = ctx.init_params()?;
    run_schedule(
        train,
        &[],
        &mut theta1,
        &mut theta2,
        &ctx,
        None,
        "cfg1:ablate",
        1,
        cell.end_stage(),
    )?;
    let eval = evaluate(test, &theta1, &theta2, &ctx)?;
    let dice = eval.report.seg.map(|s| s.dice).unwrap_or(0.0);
    Ok((eval.report.smape_pct, eval.report.mae_deg, dice))
}

/// Grid runner: every cell x seed, summarized as mean +/- sd per cell.
/// Refuses grids over large datasets unless forced, to keep the default
/// harness desk-scale.
pub fn cmd_ablate(
    config_path: &Path,
    grid_path: &Path,
    seeds: &[u64],
    out: &Path,
    force: bool,
) -> Result<()> {
    let cfg = RunConfig::from_file(config_path)?;
    let base = TrainContext::from_run_config(&cfg)?;
    let grid_text = std::fs::read_to_string(grid_path)
        .map_err(|_| Error::MissingFile(grid_path.to_path_buf()))?;
    let cells: Vec<AblationCell> =
        serde_json::from_str(&grid_text).map_err(|e| Error::Malformed(format!("grid: {e}")))?;
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput(
            "ablation needs at least one cell and one seed".into(),
        ));
    }
    let (train, test) = load_config_samples(&cfg)?;
    if train.len() > 1000 && !force {
        return Err(Error::InvalidInput(format!(
            "{} training images exceeds the desk-scale guard (1000); pass --force for full-scale grids",
            train.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("ablation requires a test split".into()));
    }

    let mut rows = Vec::new();
    let mut table = String::new();
    table.push_str(&format!(
        "{:<28} {:>8} {:>8} {:>24} {:>8}\n",
        "cell", "SMAPE", "sd", "MAE (pt, mt, tl)", "Dice"
    ));
    for cell in &cells {
        let mut smapes = Vec::new();
        let mut maes = Vec::new();
        let mut dices = Vec::new();
        for &seed in seeds {
            let (smape, mae, dice) = run_ablation_cell(cell, seed, &base, &train, &test)?;
            smapes.push(smape);
            maes.push(mae);
            dices.push(dice);
        }
        let (smape_mean, smape_sd) = mean_sd(&smapes);
        let (dice_mean, _) = mean_sd(&dices);
        let mut mae_mean = [0.0; 3];
        for m in &maes {
            for k in 0..3 {
                mae_mean[k] += m[k] / maes.len() as f64;
            }
        }
        table.push_str(&format!(
            "{:<28} {:>8.2} {:>8.2} {:>6.2}, {:>6.2}, {:>6.2} {:>8.4}\n",
            cell.label(),
            smape_mean,
            smape_sd,
            mae_mean[0],
            mae_mean[1],
            mae_mean[2],
            dice_mean
        ));
        rows.push(AblationRow {
            label: cell.label(),
            seeds: seeds.to_vec(),
            smape_mean,
            smape_sd,
            mae_mean,
            dice_mean,
        });
    }
    std::fs::create_dir_all(out)?;
    let mut summary = BTreeMap::new();
    summary.insert("rows", serde_json::to_value(&rows).expect("rows"));
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary")
            .as_bytes(),
    )?;
    write_atomic(&out.join("summary.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Parses `--seeds 1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidInput(format!("bad seed '{t}'")))
        })
        .collect()
}

// Re-exported for integration tests that drive commands in-process.
