//! Evaluation metrics: per-class semantic IoU, average precision over mask
//! IoU thresholds (COCO-style greedy matching, all-point PR interpolation),
//! and per-step flow MSE with a u/v component breakdown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{mask_iou, FlowField, InstanceMask, SemanticMap};

/// The ten equally spaced thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticIou {
    pub per_class: BTreeMap<u8, f64>,
    pub mean: f64,
}

/// Per-class IoU between two label grids; classes absent from both maps are
/// excluded from the mean.
pub fn semantic_iou(pred: &SemanticMap, gt: &SemanticMap, classes: &[u8]) -> Result<SemanticIou> {
    if pred.labels.dim() != gt.labels.dim() {
        return Err(Error::Shape(format!(
            "semantic_iou {:?} vs {:?}",
            pred.labels.dim(),
            gt.labels.dim()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in classes {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
            let pp = p == c;
            let gg = g == c;
            if pp && gg {
                inter += 1;
            }
            if pp || gg {
                union += 1;
            }
        }
        if union == 0 {
            continue; // class absent from both
        }
        let iou = inter as f64 / union as f64;
        per_class.insert(c, iou);
        sum += iou;
        n += 1;
    }
    let mean = if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(SemanticIou { per_class, mean })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApResult {
    /// Mean over classes of per-class AP (averaged across thresholds).
    pub ap: f64,
    /// Mean over classes of AP at IoU 0.50.
    pub ap50: f64,
    pub per_class_ap: BTreeMap<u8, f64>,
    pub per_class_ap50: BTreeMap<u8, f64>,
}

/// Area under the precision-recall curve by all-point interpolation:
/// precision is replaced by its running maximum from the right, then
/// integrated over recall steps.
fn pr_area(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    if tp_flags.is_empty() {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope
    for i in (0..n - 1).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if recalls[i] > prev_recall {
            area += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    area
}

/// Greedy matching at one threshold for one class within the image list;
/// returns TP flags in descending score order plus the gt count.
fn match_class_at_threshold(
    preds: &[Vec<InstanceMask>],
    gts: &[Vec<InstanceMask>],
    class: u8,
    thr: f64,
) -> Result<(Vec<bool>, usize)> {
    // (score, img, idx), sorted by descending score then (img, idx)
    let mut ordered: Vec<(f64, usize, usize)> = Vec::new();
    for (img, frame) in preds.iter().enumerate() {
        for (idx, p) in frame.iter().enumerate() {
            if p.class_id == class && !p.is_empty() {
                if p.score.is_nan() {
                    return Err(Error::Config("prediction with missing score".into()));
                }
                ordered.push((p.score, img, idx));
            }
        }
    }
    ordered.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut n_gt = 0usize;
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|f| vec![false; f.len()]).collect();
    for frame in gts {
        n_gt += frame
            .iter()
            .filter(|g| g.class_id == class && !g.is_empty())
            .count();
    }
    let mut flags = Vec::with_capacity(ordered.len());
    for (_, img, idx) in ordered {
        let p = &preds[img][idx];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            if g.class_id != class || g.is_empty() || matched[img][j] {
                continue;
            }
            let iou = mask_iou(&p.mask, &g.mask)?;
            if best.map_or(true, |(bi, _)| iou > bi) {
                best = Some((iou, j));
            }
        }
        match best {
            Some((iou, j)) if iou >= thr => {
                matched[img][j] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    Ok((flags, n_gt))
}

/// AP / AP50 over parallel per-image prediction and ground-truth lists.
/// Per-class AP is computed across the given thresholds, then averaged over
/// the classes present in the ground truth; empty ground-truth instances are
/// excluded.
pub fn average_precision(
    preds: &[Vec<InstanceMask>],
    gts: &[Vec<InstanceMask>],
    thresholds: &[f64],
) -> Result<ApResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction images vs {} gt images",
            preds.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds".into()));
    }
    let mut classes: Vec<u8> = gts
        .iter()
        .flatten()
        .filter(|g| !g.is_empty())
        .map(|g| g.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class_ap = BTreeMap::new();
    let mut per_class_ap50 = BTreeMap::new();
    for &c in &classes {
        let mut sum = 0.0;
        let mut ap50 = 0.0;
        for &thr in thresholds {
            let (flags, n_gt) = match_class_at_threshold(preds, gts, c, thr)?;
            let area = pr_area(&flags, n_gt);
            sum += area;
            if (thr - 0.5).abs() < 1e-9 {
                ap50 = area;
            }
        }
        per_class_ap.insert(c, sum / thresholds.len() as f64);
        per_class_ap50.insert(c, ap50);
    }
    let mean = |m: &BTreeMap<u8, f64>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    };
    Ok(ApResult {
        ap: mean(&per_class_ap),
        ap50: mean(&per_class_ap50),
        per_class_ap: per_class_ap.clone(),
        per_class_ap50,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowMse {
    pub mse: f64,
    pub mse_u: f64,
    pub mse_v: f64,
}

/// Per-step MSE over all pixels, jointly and per component;
/// mse = (mse_u + mse_v) / 2.
pub fn flow_mse(pred: &[FlowField], gt: &[FlowField]) -> Result<Vec<FlowMse>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "flow_mse over {} pred vs {} gt steps",
            pred.len(),
            gt.len()
        )));
    }
    let mut out = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        if p.u.dim() != g.u.dim() {
            return Err(Error::Shape("flow_mse step shape mismatch".into()));
        }
        let n = (p.height() * p.width()) as f64;
        let mut su = 0.0;
        let mut sv = 0.0;
        for ((a, b), (c, d)) in p.u.iter().zip(g.u.iter()).zip(p.v.iter().zip(g.v.iter())) {
            let du = (*a - *b) as f64;
            let dv = (*c - *d) as f64;
            su += du * du;
            sv += dv * dv;
        }
        let mse_u = su / n;
        let mse_v = sv / n;
        out.push(FlowMse {
            mse: (mse_u + mse_v) / 2.0,
            mse_u,
            mse_v,
        });
    }
    Ok(out)
}
