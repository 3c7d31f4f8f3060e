//! Evaluation metrics: five pixel-overlap scores for segmentation, plus
//! per-angle mean absolute error (degrees) and the percentage form of the
//! symmetric angle-ratio error for regression. Empty-class conventions
//! resolve 0/0 to 1 (perfect agreement on absence).

use crate::domain::CobbTriple;
use crate::error::{Error, Result};
use crate::tensor::Array2;

/// Smoothing used inside the percentage error ratio, matching the training
/// loss definition.
pub const SMAPE_EPSILON: f64 = 1e-8;

/// Reference targets from full-scale training on the 481/128 challenge
/// split. Desk-scale runs do not reproduce these; they are documentation
/// anchors for full-data experiments.
pub mod reference {
    /// Full pipeline, res18-scale regressor: per-angle MAE (degrees).
    pub const FULL_SCALE_MAE_RES18: [f64; 3] = [3.88, 4.62, 4.99];
    /// Full pipeline, res18-scale regressor: percentage error.
    pub const FULL_SCALE_SMAPE_RES18: f64 = 8.47;
    /// Full pipeline, eff-b1-scale regressor: mean MAE (degrees).
    pub const FULL_SCALE_MAE_EFF_B1: f64 = 3.73;
    /// Full pipeline, eff-b1-scale regressor: percentage error.
    pub const FULL_SCALE_SMAPE_EFF_B1: f64 = 7.32;
    /// Image-input ablation ladder: baseline, +attention regularization,
    /// +attention regularization and gate, full schedule.
    pub const FULL_SCALE_SMAPE_ABLATION_IMG: [f64; 4] = [12.32, 9.39, 9.32, 9.17];
    /// Segmentation Jaccard without / with the CAM gate.
    pub const FULL_SCALE_JACCARD_GATE: [f64; 2] = [75.47, 77.86];
}

/// Pixel confusion counts of a binary prediction against a binary target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Array2, gt: &Array2) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pred {:?} vs gt {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        for &v in pred.as_slice().iter().chain(gt.as_slice()) {
            if v != 0.0 && v != 1.0 {
                return Err(Error::OutOfRange(
                    "metric inputs must be binary (threshold soft masks first)".into(),
                ));
            }
        }
        let mut c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 0,
        };
        for (&p, &y) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p == 1.0, y == 1.0) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// The five segmentation scores, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegScores {
    pub jaccard: f64,
    pub dice: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl SegScores {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let tp = c.true_pos as f64;
        let fp = c.false_pos as f64;
        let fneg = c.false_neg as f64;
        let tn = c.true_neg as f64;
        Self {
            jaccard: ratio(tp, tp + fp + fneg),
            dice: ratio(2.0 * tp, 2.0 * tp + fp + fneg),
            accuracy: ratio(tp + tn, tp + fp + fneg + tn),
            sensitivity: ratio(tp, tp + fneg),
            specificity: ratio(tn, tn + fp),
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.jaccard,
            self.dice,
            self.accuracy,
            self.sensitivity,
            self.specificity,
        ]
    }
}

/// 0/0 resolves to 1: perfect agreement on an absent class.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Jaccard, Dice, pixel accuracy, sensitivity, specificity of a binary mask
/// pair.
pub fn seg_metrics(pred: &Array2, gt: &Array2) -> Result<SegScores> {
    Ok(SegScores::from_counts(&ConfusionCounts::from_masks(
        pred, gt,
    )?))
}

/// Per-angle mean absolute error in degrees.
pub fn mae_deg(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<[f64; 3]> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty angle lists, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = [0.0; 3];
    for (p, g) in preds.iter().zip(gts) {
        let pd = p.degrees();
        let gd = g.degrees();
        for k in 0..3 {
            acc[k] += (pd[k] - gd[k]).abs();
        }
    }
    let n = preds.len() as f64;
    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
}

/// Mean over samples of the per-sample angle-ratio error, in percent:
/// `mean_i [ sum|pred-gt| / sum(pred+gt+eps) ] * 100`, computed in degrees.
pub fn smape_percent(preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "need equal non-empty angle lists, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        acc += crate::regnet::smape_raw(&p.degrees(), &g.degrees(), SMAPE_EPSILON);
    }
    Ok(acc / preds.len() as f64 * 100.0)
}

/// Aggregated evaluation results. The segmentation block is optional so
/// regression-only evaluations stay representable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mae_deg: [f64; 3],
    pub smape_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg: Option<SegScores>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.smape_pct) {
            return Err(Error::OutOfRange(format!(
                "smape {} outside [0, 100]",
                self.smape_pct
            )));
        }
        if let Some(seg) = &self.seg {
            for v in seg.as_array() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::OutOfRange(format!("seg metric {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport =
            serde_json::from_str(text).map_err(|e| Error::Malformed(format!("report: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// Aligned text table in the row format of the full-scale comparison
    /// tables: `MAE pt, mt, tl | SMAPE (%)` plus the optional segmentation
    /// quintuple.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>22} {:>10}\n",
            "samples", "MAE (pt, mt, tl)", "SMAPE (%)"
        ));
        s.push_str(&format!(
            "{:<12} {:>6.2}, {:>6.2}, {:>6.2} {:>10.2}\n",
            self.samples, self.mae_deg[0], self.mae_deg[1], self.mae_deg[2], self.smape_pct
        ));
        if let Some(seg) = &self.seg {
            s.push_str(&format!(
                "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
                "seg", "JA", "Dice", "AC", "SE", "SP"
            ));
            s.push_str(&format!(
                "{:<12} {:>6.4} {:>6.4} {:>6.4} {:>6.4} {:>6.4}\n",
                "", seg.jaccard, seg.dice, seg.accuracy, seg.sensitivity, seg.specificity
            ));
        }
        s
    }
}

/// Aggregates regression and (optionally) segmentation metrics into one
/// report. `seg_pairs` holds binarized (pred, gt) mask pairs.
pub fn build_report(
    preds: &[CobbTriple],
    gts: &[CobbTriple],
    seg_pairs: &[(Array2, Array2)],
) -> Result<EvalReport> {
    let mae = mae_deg(preds, gts)?;
    let smape = smape_percent(preds, gts)?;
    let seg = if seg_pairs.is_empty() {
        None
    } else {
        let mut acc = [0.0; 5];
        for (p, g) in seg_pairs {
            let s = seg_metrics(p, g)?.as_array();
            for k in 0..5 {
                acc[k] += s[k];
            }
        }
        let n = seg_pairs.len() as f64;
        Some(SegScores {
            jaccard: acc[0] / n,
            dice: acc[1] / n,
            accuracy: acc[2] / n,
            sensitivity: acc[3] / n,
            specificity: acc[4] / n,
        })
    };
    let report = EvalReport {
        samples: preds.len(),
        mae_deg: mae,
        smape_pct: smape,
        seg,
    };
    report.validate()?;
    Ok(report)
}

/// CSV rows of per-sample metrics: `source_id,pt_mae,mt_mae,tl_mae,smape_pct`.
pub fn per_sample_csv(ids: &[String], preds: &[CobbTriple], gts: &[CobbTriple]) -> Result<String> {
    if ids.len() != preds.len() || preds.len() != gts.len() {
        return Err(Error::InvalidInput(
            "per-sample csv inputs misaligned".into(),
        ));
    }
    let mut out = String::from("source_id,pt_mae,mt_mae,tl_mae,smape_pct\n");
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        let pd = p.degrees();
        let gd = g.degrees();
        let smape = crate::regnet::smape_raw(&pd, &gd, SMAPE_EPSILON) * 100.0;
        out.push_str(&format!(
            "{id},{:.6},{:.6},{:.6},{:.6}\n",
            (pd[0] - gd[0]).abs(),
            (pd[1] - gd[1]).abs(),
            (pd[2] - gd[2]).abs(),
            smape
        ));
    }
    Ok(out)
}
