//! Criteria 7 and 8: desk-scale convergence and direction-of-effect trends
//! on the 200-train / 50-test synthetic set at 64x32 with tiny backbones.

use std::time::Instant;

use seg4reg::config::StageParams;
use seg4reg::data::synthetic::{generate_in_memory, SyntheticSpec};
use seg4reg::regnet::{InputMode, RegNetConfig};
use seg4reg::segnet::SegNetConfig;
use seg4reg::trainer::{evaluate, run_schedule, Sample, TrainContext};

fn desk_samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_in_memory(&SyntheticSpec::default(), n, seed)
        .unwrap()
        .into_iter()
        .map(|s| Sample {
            id: s.image.source_id().to_string(),
            image: s.image.clone(),
            mask: s.mask,
            angles: s.angles,
        })
        .collect()
}

fn desk_ctx(seed: u64, ar: bool, w_ar: f64, input: InputMode, s2_epochs: usize) -> TrainContext {
    TrainContext {
        seg_cfg: SegNetConfig::default(),
        reg_cfg: RegNetConfig::default(),
        seed,
        batch_size: 8,
        w_ar,
        input_mode: input,
        ar_enabled: ar,
        reinit_stage5: false,
        augment: None,
        stages: [6, s2_epochs, 3, 3, 30]
            .iter()
            .map(|&e| StageParams {
                epochs: e,
                lr: 1e-3,
                weight_decay: 1e-5,
            })
            .collect(),
    }
}

fn mean_sd(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Criterion 7: tiny backbones on the 200/50 synthetic set at 64x32.
/// Stage-1 Dice > 0.6, stage-2 SMAPE < half the untrained SMAPE, and the
/// full five-stage schedule completes within the ten-minute budget.
#[test]
fn criterion_7_desk_scale_convergence() {
    let train = desk_samples(200, 100);
    let test = desk_samples(50, 200);
    let ctx = desk_ctx(7, true, 1.0, InputMode::ImageMask, 30);
    let (mut theta1, mut theta2) = ctx.init_params().unwrap();

    let untrained_smape = evaluate(&test, &theta1, &theta2, &ctx)
        .unwrap()
        .report
        .smape_pct;

    let t0 = Instant::now();
    let reports = run_schedule(
        &train,
        &test,
        &mut theta1,
        &mut theta2,
        &ctx,
        None,
        "cfg1:c7",
        1,
        5,
    )
    .unwrap();
    let wall = t0.elapsed().as_secs_f64();

    let stage1_dice = reports[0].val.dice.expect("stage 1 reports dice");
    assert!(
        stage1_dice > 0.6,
        "stage-1 test Dice {stage1_dice:.4} does not clear 0.6"
    );
    let stage2_smape = reports[1].val.smape_pct.expect("stage 2 reports smape");
    assert!(
        stage2_smape < 0.5 * untrained_smape,
        "stage-2 SMAPE {stage2_smape:.2}% does not halve the untrained {untrained_smape:.2}%"
    );
    // the frozen-regressor critic objective must come down as the segmenter
    // adapts to it
    let s4 = &reports[3].losses;
    assert!(
        s4.last().unwrap() < s4.first().unwrap(),
        "stage-4 objective did not decrease: {s4:?}"
    );
    assert!(
        wall < 600.0,
        "five-stage schedule took {wall:.0}s, budget 600s"
    );
    println!(
        "criterion 7 (desk-scale convergence): PASS in {wall:.0}s \
         (dice {stage1_dice:.3}, smape {stage2_smape:.2}% vs untrained {untrained_smape:.2}%)"
    );
}

/// Criterion 8: direction-of-effect trends over 5 seeds. A trend fails only
/// when the mean moves against the expected direction by more than one
/// standard deviation of the per-seed differences.
#[test]
fn criterion_8_direction_of_effect_trends() {
    let t0 = Instant::now();
    let train = desk_samples(200, 100);
    let test = desk_samples(50, 200);
    let seeds = [7u64, 8, 9, 10, 11];

    let mut d_ar = Vec::new(); // smape(AR) - smape(noAR), image input
    let mut d_gate = Vec::new(); // dice(stage1) - dice(stage3)
    let mut d_tcl = Vec::new(); // smape(full) - smape(stage-2 only)

    for &seed in &seeds {
        // shared stage 1
        let c_img = desk_ctx(seed, false, 0.5, InputMode::Image, 45);
        let (mut theta1, theta2_init) = c_img.init_params().unwrap();
        run_schedule(
            &train,
            &[],
            &mut theta1,
            &mut theta2_init.clone(),
            &c_img,
            None,
            "c8",
            1,
            1,
        )
        .unwrap();

        // attention-regularization trend at image input (the reference
        // ablation's baseline sees no mask at inference)
        let mut t2 = theta2_init.clone();
        run_schedule(
            &train,
            &[],
            &mut theta1.clone(),
            &mut t2,
            &c_img,
            None,
            "c8",
            2,
            2,
        )
        .unwrap();
        let smape_noar = evaluate(&test, &theta1, &t2, &c_img)
            .unwrap()
            .report
            .smape_pct;

        let c_ar = desk_ctx(seed, true, 0.5, InputMode::Image, 45);
        let mut t2 = theta2_init.clone();
        run_schedule(
            &train,
            &[],
            &mut theta1.clone(),
            &mut t2,
            &c_ar,
            None,
            "c8",
            2,
            2,
        )
        .unwrap();
        let smape_ar = evaluate(&test, &theta1, &t2, &c_ar)
            .unwrap()
            .report
            .smape_pct;
        d_ar.push(smape_ar - smape_noar);

        // full-pipeline continuation for the gate and schedule trends
        let c_full = desk_ctx(seed, true, 1.0, InputMode::ImageMask, 30);
        let mut t1 = theta1.clone();
        let mut t2 = theta2_init.clone();
        run_schedule(&train, &[], &mut t1, &mut t2, &c_full, None, "c8", 2, 2).unwrap();
        let e2 = evaluate(&test, &t1, &t2, &c_full).unwrap();
        let smape_stage2 = e2.report.smape_pct;
        let dice_stage1 = e2.report.seg.unwrap().dice;

        run_schedule(&train, &[], &mut t1, &mut t2, &c_full, None, "c8", 3, 3).unwrap();
        let dice_stage3 = evaluate(&test, &t1, &t2, &c_full)
            .unwrap()
            .report
            .seg
            .unwrap()
            .dice;
        d_gate.push(dice_stage1 - dice_stage3);

        run_schedule(&train, &[], &mut t1, &mut t2, &c_full, None, "c8", 4, 5).unwrap();
        let smape_full = evaluate(&test, &t1, &t2, &c_full).unwrap().report.smape_pct;
        d_tcl.push(smape_full - smape_stage2);

        println!(
            "  seed {seed}: noAR {smape_noar:.2} vs AR {smape_ar:.2} | dice s1 {dice_stage1:.4} \
             -> s3 {dice_stage3:.4} | stage2 {smape_stage2:.2} -> full {smape_full:.2}"
        );
    }

    // a positive mean difference is the adverse direction for all three
    for (name, diffs) in [("AR", &d_ar), ("gate", &d_gate), ("schedule", &d_tcl)] {
        let (mean, sd) = mean_sd(diffs);
        assert!(
            mean <= sd,
            "{name} trend reversed beyond one sd: mean adverse diff {mean:.4}, sd {sd:.4}"
        );
        println!("  {name} trend: mean adverse diff {mean:.4} (sd {sd:.4}) -> holds");
    }

    let wall = t0.elapsed().as_secs_f64();
    assert!(wall < 5400.0, "trend suite took {wall:.0}s, budget 5400s");
    println!("criterion 8 (direction-of-effect trends, 5 seeds): PASS in {wall:.0}s");
}
