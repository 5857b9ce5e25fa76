//! Detection evaluation: box similarity under IoU or the size-adaptive
//! SAFit measure, greedy COCO-style matching, 101-point interpolated AP,
//! and report generation under both protocols.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, Box};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub score: f64,
    pub class_id: i64,
    pub image_id: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: Box,
    pub class_id: i64,
    pub image_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Iou,
    Safit,
}

/// Both boxes modeled as 2D Gaussians (mean = center, deviations = half
/// extents); `exp(-W/C)` of their 2-Wasserstein distance W.
pub fn nwd(a: &Box, b: &Box, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::Config(format!("size constant must be positive, got {c}")));
    }
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let w2 = (acx - bcx).powi(2)
        + (acy - bcy).powi(2)
        + ((a.width() - b.width()) / 2.0).powi(2)
        + ((a.height() - b.height()) / 2.0).powi(2);
    Ok((-w2.sqrt() / c).exp())
}

/// Size-adaptive blend `w*IoU + (1-w)*NWD` with `w = sigmoid(sqrt(A)/C - 1)`
/// where A is the ground-truth box area: large objects are judged by IoU,
/// tiny ones increasingly by the smoother NWD.
pub fn safit(a: &Box, b: &Box, c: f64, gt_area: f64) -> Result<f64> {
    let n = nwd(a, b, c)?;
    let w = crate::ops::sigmoid(gt_area.sqrt() / c - 1.0);
    Ok(w * iou(a, b) + (1.0 - w) * n)
}

fn pair_similarity(sim: Similarity, det: &Box, gt: &Box, c: f64) -> Result<f64> {
    match sim {
        Similarity::Iou => Ok(iou(det, gt)),
        Similarity::Safit => safit(det, gt, c, gt.area()),
    }
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Aligned with the input detection order.
    pub det_is_tp: Vec<bool>,
    /// Aligned with the input ground-truth order.
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching per class and image: detections in descending
/// score order (ties by insertion order) each claim the unmatched GT with
/// the highest similarity at or above the threshold (ties by lower GT
/// index).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    sim: Similarity,
    threshold: f64,
    c: f64,
) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "matching threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut det_is_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    let mut groups: BTreeMap<(i64, i64), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.class_id, d.image_id)).or_default().0.push(i);
    }
    for (j, g) in gts.iter().enumerate() {
        groups.entry((g.class_id, g.image_id)).or_default().1.push(j);
    }
    for (det_idx, gt_idx) in groups.values() {
        let mut order = det_idx.clone();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &i in &order {
            let mut best: Option<(f64, usize)> = None;
            for &j in gt_idx {
                if gt_matched[j] {
                    continue;
                }
                let s = pair_similarity(sim, &dets[i].bbox, &gts[j].bbox, c)?;
                if s < threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bj)) => s > bs || (s == bs && j < bj),
                };
                if better {
                    best = Some((s, j));
                }
            }
            if let Some((_, j)) = best {
                gt_matched[j] = true;
                det_is_tp[i] = true;
            }
        }
    }
    Ok(MatchResult { det_is_tp, gt_matched })
}

/// 101-point interpolated average precision over `(score, is_tp)` labels.
/// Labels are sorted here by descending score (ties by input order).
pub fn average_precision(labels: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[b]
            .0
            .partial_cmp(&labels[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut recalls = Vec::with_capacity(labels.len());
    let mut precisions = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &i in &order {
        if labels[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / num_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    // Running max of precision from the high-recall end.
    let mut p_max = precisions.clone();
    for i in (0..p_max.len().saturating_sub(1)).rev() {
        p_max[i] = p_max[i].max(p_max[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // First index with recall >= r; recalls are non-decreasing.
        let pos = recalls.partition_point(|&rc| rc < r);
        if pos < p_max.len() {
            sum += p_max[pos];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: i64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: ProtocolReport,
    pub safit: ProtocolReport,
    pub num_gt: usize,
    pub num_detections: usize,
    /// Size constant used by NWD/SAFit, in pixels.
    pub size_constant: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Size constant for the SAFit protocol; computed from the ground truth
    /// as the mean of sqrt(area) when absent.
    pub size_constant: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { size_constant: None }
    }
}

/// Mean of sqrt(w*h) over ground-truth boxes; 1.0 for an empty set.
pub fn mean_object_size(gts: &[GroundTruth]) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    gts.iter().map(|g| g.bbox.area().sqrt()).sum::<f64>() / gts.len() as f64
}

const AP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

fn class_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: i64,
    sim: Similarity,
    threshold: f64,
    c: f64,
) -> Result<f64> {
    let class_dets: Vec<Detection> =
        dets.iter().filter(|d| d.class_id == class_id).cloned().collect();
    let class_gts: Vec<GroundTruth> =
        gts.iter().filter(|g| g.class_id == class_id).cloned().collect();
    let matched = match_detections(&class_dets, &class_gts, sim, threshold, c)?;
    let labels: Vec<(f64, bool)> = class_dets
        .iter()
        .zip(matched.det_is_tp.iter())
        .map(|(d, &tp)| (d.score, tp))
        .collect();
    Ok(average_precision(&labels, class_gts.len()))
}

fn protocol_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: &[i64],
    sim: Similarity,
    c: f64,
) -> Result<ProtocolReport> {
    let mut per_class = Vec::with_capacity(classes.len());
    for &class_id in classes {
        let num_gt = gts.iter().filter(|g| g.class_id == class_id).count();
        let mut aps = Vec::with_capacity(AP_THRESHOLDS.len());
        for &t in &AP_THRESHOLDS {
            aps.push(class_ap(dets, gts, class_id, sim, t, c)?);
        }
        per_class.push(ClassAp {
            class_id,
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
            num_gt,
        });
    }
    let n = per_class.len().max(1) as f64;
    Ok(ProtocolReport {
        map: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        map50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        map75: per_class.iter().map(|c| c.ap75).sum::<f64>() / n,
        per_class,
    })
}

/// Full dual-protocol evaluation. The mean AP averages only classes with at
/// least one ground-truth box.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    let c = match cfg.size_constant {
        Some(c) if c > 0.0 => c,
        Some(c) => {
            return Err(Error::Config(format!(
                "size constant must be positive, got {c}"
            )))
        }
        None => mean_object_size(gts),
    };
    let mut classes: Vec<i64> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    Ok(EvalReport {
        iou: protocol_report(dets, gts, &classes, Similarity::Iou, c)?,
        safit: protocol_report(dets, gts, &classes, Similarity::Safit, c)?,
        num_gt: gts.len(),
        num_detections: dets.len(),
        size_constant: c,
    })
}

// --- annotation file layout -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: i64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: i64,
    pub category_id: i64,
    /// (x, y, w, h), top-left corner first.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl GroundTruthFile {
    pub fn to_ground_truths(&self) -> Result<Vec<GroundTruth>> {
        self.annotations
            .iter()
            .map(|a| {
                Ok(GroundTruth {
                    bbox: Box::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3])?,
                    class_id: a.category_id,
                    image_id: a.image_id,
                })
            })
            .collect()
    }
}

pub fn load_ground_truth_file(path: &Path) -> Result<GroundTruthFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_detection_file(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)?;
    let records: Vec<DetectionRecord> = serde_json::from_str(&text)?;
    records
        .iter()
        .map(|r| {
            Ok(Detection {
                bbox: Box::from_xywh(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?,
                score: r.score,
                class_id: r.category_id,
                image_id: r.image_id,
            })
        })
        .collect()
}

pub fn save_detection_file(path: &Path, dets: &[Detection]) -> Result<()> {
    let records: Vec<DetectionRecord> = dets
        .iter()
        .map(|d| DetectionRecord {
            image_id: d.image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}
