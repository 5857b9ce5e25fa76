//! Deterministic training loop: objectness binary cross-entropy over all
//! head cells plus the combined box regression loss on positive cells,
//! optimized with plain SGD and weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{evaluate, Detection, EvalConfig, GroundTruth};
use crate::geometry::{iou, regression_loss, regression_loss_grad, Box, RegLossConfig};
use crate::harness::config::{DetectorConfig, LossChoice, TrainHistory};
use crate::harness::detector::{Detector, HEAD_CHANNELS, HEAD_STRIDE};
use crate::harness::scene::Dataset;
use crate::ops::sigmoid;
use crate::rhwd::StemMode;
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Per-cell targets for one image at the head's resolution.
#[derive(Debug, Clone)]
pub struct CellTargets {
    pub h: usize,
    pub w: usize,
    /// Objectness target per cell, row-major.
    pub obj: Vec<f64>,
    /// Box target for positive cells.
    pub boxes: Vec<Option<Box>>,
}

/// Each ground truth lands in the single cell containing its center; cell
/// collisions keep the larger box.
pub fn assign_targets(gts: &[GroundTruth], h: usize, w: usize, stride: f64) -> CellTargets {
    let mut obj = vec![0.0; h * w];
    let mut boxes: Vec<Option<Box>> = vec![None; h * w];
    for gt in gts {
        let (cx, cy) = gt.bbox.center();
        let gx = ((cx / stride).floor() as isize).clamp(0, w as isize - 1) as usize;
        let gy = ((cy / stride).floor() as isize).clamp(0, h as isize - 1) as usize;
        let cell = gy * w + gx;
        let keep = match &boxes[cell] {
            Some(existing) => gt.bbox.area() > existing.area(),
            None => true,
        };
        if keep {
            obj[cell] = 1.0;
            boxes[cell] = Some(gt.bbox);
        }
    }
    CellTargets { h, w, obj, boxes }
}

/// Decode one cell's raw head values into a box: the center moves within
/// the cell through a sigmoid, extents are exponentials in stride units.
pub fn decode_cell(vals: [f64; 4], gx: usize, gy: usize, stride: f64) -> Box {
    let cx = (gx as f64 + sigmoid(vals[0])) * stride;
    let cy = (gy as f64 + sigmoid(vals[1])) * stride;
    let w = vals[2].exp() * stride;
    let h = vals[3].exp() * stride;
    Box::from_center(cx, cy, w, h).expect("positive extents")
}

/// Stable binary cross-entropy with logits and its derivative.
fn bce_with_logits(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

/// Total loss over a batch head map and the gradient with respect to it.
/// Returns (total, objectness part, regression part, gradient).
pub fn loss_and_gradient(
    head: &FeatureMap,
    targets: &[CellTargets],
    reg_cfg: &RegLossConfig,
) -> Result<(f64, f64, f64, FeatureMap)> {
    if head.c != HEAD_CHANNELS || head.b != targets.len() {
        return Err(Error::Shape(format!(
            "head map {:?} does not fit {} target sets",
            head.shape(),
            targets.len()
        )));
    }
    let stride = HEAD_STRIDE as f64;
    let mut grad = FeatureMap::zeros(head.b, head.c, head.h, head.w);
    let n_cells = (head.b * head.h * head.w) as f64;
    let mut obj_loss = 0.0;
    let mut reg_loss = 0.0;
    for (b, t) in targets.iter().enumerate() {
        if t.h != head.h || t.w != head.w {
            return Err(Error::Geometry(format!(
                "targets are {}x{} but the head is {}x{}",
                t.h, t.w, head.h, head.w
            )));
        }
        for gy in 0..head.h {
            for gx in 0..head.w {
                let cell = gy * head.w + gx;
                let (l, dl) = bce_with_logits(head.at(b, 0, gy, gx), t.obj[cell]);
                obj_loss += l / n_cells;
                *grad.at_mut(b, 0, gy, gx) = dl / n_cells;
                let Some(gt_box) = &t.boxes[cell] else { continue };
                let vals = [
                    head.at(b, 1, gy, gx),
                    head.at(b, 2, gy, gx),
                    head.at(b, 3, gy, gx),
                    head.at(b, 4, gy, gx),
                ];
                let pred = decode_cell(vals, gx, gy, stride);
                // Summed (not averaged) over positive cells: averaging by
                // the positive count starves the box branch of gradient at
                // this scale.
                reg_loss += regression_loss(&pred, gt_box, reg_cfg)?;
                let g = regression_loss_grad(&pred, gt_box, reg_cfg)?;
                // Chain to the raw head values: the center shifts both
                // corners equally; each extent splits across the corners.
                let sx = sigmoid(vals[0]);
                let sy = sigmoid(vals[1]);
                let d_tx = (g[0] + g[2]) * sx * (1.0 - sx) * stride;
                let d_ty = (g[1] + g[3]) * sy * (1.0 - sy) * stride;
                let d_tw = (g[2] - g[0]) * 0.5 * vals[2].exp() * stride;
                let d_th = (g[3] - g[1]) * 0.5 * vals[3].exp() * stride;
                *grad.at_mut(b, 1, gy, gx) = d_tx;
                *grad.at_mut(b, 2, gy, gx) = d_ty;
                *grad.at_mut(b, 3, gy, gx) = d_tw;
                *grad.at_mut(b, 4, gy, gx) = d_th;
            }
        }
    }
    Ok((obj_loss + reg_loss, obj_loss, reg_loss, grad))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Score threshold for the per-epoch evaluation pass.
    pub eval_score_threshold: f64,
    pub eval_nms_threshold: f64,
    /// Skip the per-epoch evaluation entirely (faster experiment loops).
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            batch_size: 8,
            seed: 0,
            eval_score_threshold: 0.25,
            eval_nms_threshold: 0.5,
            eval_each_epoch: true,
        }
    }
}

/// The regression-loss configuration implied by a detector config and the
/// training ground truth.
pub fn regression_config(cfg: &DetectorConfig, gts: &[GroundTruth]) -> Result<RegLossConfig> {
    let c = match cfg.size_constant {
        Some(c) => c,
        None => crate::eval::mean_object_size(gts),
    };
    match cfg.loss {
        LossChoice::IouOnly => RegLossConfig::new(0.0, 1.0, c),
        LossChoice::IouPlusCenter => RegLossConfig::new(cfg.alpha1, cfg.alpha2, c),
    }
}

fn stack_images(images: &[&FeatureMap]) -> FeatureMap {
    let (c, h, w) = (images[0].c, images[0].h, images[0].w);
    let mut out = FeatureMap::zeros(images.len(), c, h, w);
    for (b, img) in images.iter().enumerate() {
        let n = c * h * w;
        out.data[b * n..(b + 1) * n].copy_from_slice(&img.data);
    }
    out
}

/// SGD training for `epochs` passes over the dataset. Deterministic under
/// the config seed.
pub fn train(
    detector: &mut Detector,
    dataset: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if dataset.images.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let started = std::time::Instant::now();
    let reg_cfg = regression_config(&detector.cfg.clone(), &dataset.all_gts())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let batch = cfg.batch_size.min(dataset.images.len()).max(1);
    let head_side = detector.image_size / HEAD_STRIDE;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.images.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < batch {
                continue; // keep batch statistics comparable
            }
            let images: Vec<&FeatureMap> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let batch_images = stack_images(&images);
            let targets: Vec<CellTargets> = chunk
                .iter()
                .map(|&i| assign_targets(&dataset.gts[i], head_side, head_side, HEAD_STRIDE as f64))
                .collect();
            let (head, cache) = detector.forward_cached(&batch_images, StemMode::Train)?;
            let (total, obj, reg, grad_head) = loss_and_gradient(&head, &targets, &reg_cfg)?;
            if !total.is_finite() {
                return Err(Error::Config(format!(
                    "training diverged: non-finite loss {total}"
                )));
            }
            let grads = detector.backward(&batch_images, &cache, &grad_head);
            detector.apply_gradients(&grads, cfg.lr, cfg.weight_decay);
            history.step_total.push(total);
            history.step_objectness.push(obj);
            history.step_regression.push(reg);
        }
        if cfg.eval_each_epoch {
            let dets = predict_dataset(
                detector,
                dataset,
                cfg.eval_score_threshold,
                cfg.eval_nms_threshold,
            )?;
            let report = evaluate(&dets, &dataset.all_gts(), &EvalConfig::default())?;
            history.epoch_ap50_iou.push(report.iou.map50);
            history.epoch_ap50_safit.push(report.safit.map50);
        }
    }
    history.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(history)
}

/// Inference on one image: thresholded sigmoid objectness, box decoding,
/// then greedy non-maximum suppression.
pub fn predict_and_decode(
    detector: &mut Detector,
    image: &FeatureMap,
    image_id: i64,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    let head = detector.forward(image, StemMode::Infer)?;
    let mut candidates = Vec::new();
    for gy in 0..head.h {
        for gx in 0..head.w {
            let score = sigmoid(head.at(0, 0, gy, gx));
            if score < score_threshold {
                continue;
            }
            let vals = [
                head.at(0, 1, gy, gx),
                head.at(0, 2, gy, gx),
                head.at(0, 3, gy, gx),
                head.at(0, 4, gy, gx),
            ];
            candidates.push(Detection {
                bbox: decode_cell(vals, gx, gy, HEAD_STRIDE as f64),
                score,
                class_id: 1,
                image_id,
            });
        }
    }
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= nms_threshold) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

pub fn predict_dataset(
    detector: &mut Detector,
    dataset: &Dataset,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, image) in dataset.images.iter().enumerate() {
        out.extend(predict_and_decode(
            detector,
            image,
            i as i64,
            score_threshold,
            nms_threshold,
        )?);
    }
    Ok(out)
}

/// Mean distance between each ground truth's center and the center decoded
/// at its assigned cell — the quantity the center-distance loss supervises.
pub fn mean_center_error(detector: &mut Detector, dataset: &Dataset) -> Result<f64> {
    let head_side = detector.image_size / HEAD_STRIDE;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, image) in dataset.images.iter().enumerate() {
        let head = detector.forward(image, StemMode::Infer)?;
        let targets = assign_targets(&dataset.gts[i], head_side, head_side, HEAD_STRIDE as f64);
        for gy in 0..head_side {
            for gx in 0..head_side {
                let Some(gt_box) = &targets.boxes[gy * head_side + gx] else { continue };
                let vals = [
                    head.at(0, 1, gy, gx),
                    head.at(0, 2, gy, gx),
                    head.at(0, 3, gy, gx),
                    head.at(0, 4, gy, gx),
                ];
                let pred = decode_cell(vals, gx, gy, HEAD_STRIDE as f64);
                let (px, py) = pred.center();
                let (tx, ty) = gt_box.center();
                sum += (px - tx).hypot(py - ty);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SceneConfig;
    use crate::harness::detector::build_detector;
    use crate::harness::scene::gen_dataset;

    fn gt_at(cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth {
            bbox: Box::from_center(cx, cy, w, h).unwrap(),
            class_id: 1,
            image_id: 0,
        }
    }

    #[test]
    fn one_gt_marks_exactly_its_center_cell() {
        // Center (36, 20) at stride 16 sits in cell (2, 1).
        let t = assign_targets(&[gt_at(36.0, 20.0, 5.0, 4.0)], 4, 4, 16.0);
        for gy in 0..4 {
            for gx in 0..4 {
                let expect = if (gx, gy) == (2, 1) { 1.0 } else { 0.0 };
                assert_eq!(t.obj[gy * 4 + gx], expect);
            }
        }
        assert!(t.boxes[1 * 4 + 2].is_some());
    }

    #[test]
    fn colliding_gts_keep_the_larger() {
        let small = gt_at(36.0, 20.0, 3.0, 3.0);
        let large = gt_at(38.0, 22.0, 7.0, 6.0);
        let t = assign_targets(&[small.clone(), large.clone()], 4, 4, 16.0);
        assert_eq!(t.boxes[6].unwrap(), large.bbox);
        // Order must not matter.
        let t = assign_targets(&[large.clone(), small], 4, 4, 16.0);
        assert_eq!(t.boxes[6].unwrap(), large.bbox);
    }

    #[test]
    fn empty_scene_is_all_negative() {
        let t = assign_targets(&[], 4, 4, 16.0);
        assert!(t.obj.iter().all(|&v| v == 0.0));
        assert!(t.boxes.iter().all(|b| b.is_none()));
    }

    #[test]
    fn decode_matches_hand_computation() {
        let b = decode_cell([0.0, 0.0, 0.0, 0.0], 2, 1, 16.0);
        // sigmoid(0) = 0.5 centers the box in the cell; exp(0) = 1 stride.
        assert_eq!(b.center(), (40.0, 24.0));
        assert_eq!((b.width(), b.height()), (16.0, 16.0));
        let b = decode_cell([0.0, 0.0, (0.25f64).ln(), (0.5f64).ln()], 0, 0, 16.0);
        assert!((b.width() - 4.0).abs() < 1e-12);
        assert!((b.height() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(90);
        use rand::Rng;
        let mut head = FeatureMap::random(&mut rng, 1, HEAD_CHANNELS, 2, 2, -1.0, 1.0);
        let gts = vec![gt_at(20.0, 10.0, 6.0, 5.0), gt_at(40.0, 40.0, 4.0, 7.0)];
        let targets = vec![assign_targets(&gts, 2, 2, 16.0)];
        let reg_cfg = RegLossConfig::new(0.5, 0.5, 6.0).unwrap();
        let (_, _, _, grad) = loss_and_gradient(&head, &targets, &reg_cfg).unwrap();
        let h = 1e-6;
        for _ in 0..30 {
            let i = rng.gen_range(0..head.data.len());
            let saved = head.data[i];
            head.data[i] = saved + h;
            let (lp, _, _, _) = loss_and_gradient(&head, &targets, &reg_cfg).unwrap();
            head.data[i] = saved - h;
            let (lm, _, _, _) = loss_and_gradient(&head, &targets, &reg_cfg).unwrap();
            head.data[i] = saved;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad.data[i] - numeric).abs() < 1e-5,
                "index {i}: {} vs {numeric}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn zero_learning_rate_freezes_weights_and_loss() {
        let scene = SceneConfig::default();
        let dataset = gen_dataset(&scene, 4).unwrap();
        let det_cfg = DetectorConfig::default();
        let mut det = build_detector(&det_cfg, 64, 0).unwrap();
        let before = det.params_flat();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            eval_each_epoch: false,
            ..TrainConfig::default()
        };
        let history = train(&mut det, &dataset, 3, &cfg).unwrap();
        assert_eq!(det.params_flat(), before);
        for v in &history.step_total {
            assert!((v - history.step_total[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_training_is_identical() {
        let scene = SceneConfig::default();
        let dataset = gen_dataset(&scene, 8).unwrap();
        let det_cfg = DetectorConfig::default();
        let cfg = TrainConfig {
            batch_size: 4,
            eval_each_epoch: false,
            ..TrainConfig::default()
        };
        let mut det_a = build_detector(&det_cfg, 64, 0).unwrap();
        let hist_a = train(&mut det_a, &dataset, 2, &cfg).unwrap();
        let mut det_b = build_detector(&det_cfg, 64, 0).unwrap();
        let hist_b = train(&mut det_b, &dataset, 2, &cfg).unwrap();
        assert_eq!(hist_a.determinism_key(), hist_b.determinism_key());
        assert_eq!(det_a.params_flat(), det_b.params_flat());
        assert!(hist_a.all_finite());
    }

    #[test]
    fn all_negative_head_yields_no_detections() {
        let det_cfg = DetectorConfig::default();
        let mut det = build_detector(&det_cfg, 64, 0).unwrap();
        // Freshly built head has a -2 objectness bias; a blank image keeps
        // scores near sigmoid(-2) < 0.25 ... but clamp harder by raising
        // the threshold.
        let image = FeatureMap::zeros(1, 1, 64, 64);
        let dets = predict_and_decode(&mut det, &image, 0, 0.9999, 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn nms_suppresses_the_lower_scored_overlap() {
        // Exercise the NMS stage directly through predict_and_decode by
        // crafting a head map is awkward; check the rule on the kept list
        // logic instead: construct candidates via decode and filter.
        let a = Detection {
            bbox: Box::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            score: 0.9,
            class_id: 1,
            image_id: 0,
        };
        let b = Detection {
            bbox: Box::new(1.0, 1.0, 11.0, 11.0).unwrap(),
            score: 0.8,
            class_id: 1,
            image_id: 0,
        };
        assert!(iou(&a.bbox, &b.bbox) > 0.5);
        let mut kept: Vec<Detection> = Vec::new();
        for cand in [a.clone(), b] {
            if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= 0.5) {
                kept.push(cand);
            }
        }
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }
}
