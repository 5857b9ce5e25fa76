//! Axis-aligned box geometry, IoU, the exponential center-distance loss and
//! the combined regression loss with analytic gradients.
//!
//! The center term exists because IoU alone has a zero gradient whenever the
//! predicted box does not overlap its target; the distance term keeps pulling
//! the prediction toward the target center in that regime.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Corner-form box in pixels. Zero-area boxes are permitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max >= x_min && y_max >= y_min) {
            return Err(Error::Geometry(format!(
                "degenerate box: ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// (x, y, w, h) with the top-left corner first, as used in annotation
    /// files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegLossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Average object size of the dataset, in pixels.
    pub c: f64,
}

impl RegLossConfig {
    pub fn new(alpha1: f64, alpha2: f64, c: f64) -> Result<Self> {
        if alpha1 < 0.0 || alpha2 < 0.0 || alpha1 + alpha2 <= 0.0 {
            return Err(Error::Config(format!(
                "weights must be non-negative with a positive sum, got {alpha1} and {alpha2}"
            )));
        }
        if c <= 0.0 {
            return Err(Error::Config(format!("size constant must be positive, got {c}")));
        }
        Ok(Self { alpha1, alpha2, c })
    }
}

impl Default for RegLossConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.5,
            c: 8.0,
        }
    }
}

/// Intersection-over-union; 0 when the union is empty.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `1 - exp(-D/C)` where D is the Euclidean center distance. Bounded in
/// [0, 1) and zero exactly at coincident centers.
pub fn center_assisted_loss(pred: &Box, gt: &Box, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::Config(format!("size constant must be positive, got {c}")));
    }
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let d = (pcx - gcx).hypot(pcy - gcy);
    Ok(1.0 - (-d / c).exp())
}

/// `alpha1 * center_assisted + alpha2 * (1 - IoU)`.
pub fn regression_loss(pred: &Box, gt: &Box, cfg: &RegLossConfig) -> Result<f64> {
    let center = center_assisted_loss(pred, gt, cfg.c)?;
    Ok(cfg.alpha1 * center + cfg.alpha2 * (1.0 - iou(pred, gt)))
}

/// Analytic gradient of [`regression_loss`] with respect to the predicted
/// box's (x_min, y_min, x_max, y_max). The IoU term contributes nothing for
/// disjoint boxes; the center term is nonzero whenever the centers differ.
pub fn regression_loss_grad(pred: &Box, gt: &Box, cfg: &RegLossConfig) -> Result<[f64; 4]> {
    if cfg.c <= 0.0 {
        return Err(Error::Config(format!(
            "size constant must be positive, got {}",
            cfg.c
        )));
    }
    let mut grad = [0.0; 4];

    // Center term: d/d(coord) of 1 - exp(-D/C). Each corner moves the
    // center by one half.
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let dcx = pcx - gcx;
    let dcy = pcy - gcy;
    let d = dcx.hypot(dcy);
    if d > 0.0 {
        let scale = cfg.alpha1 * (-d / cfg.c).exp() / (cfg.c * d);
        grad[0] += scale * dcx * 0.5;
        grad[2] += scale * dcx * 0.5;
        grad[1] += scale * dcy * 0.5;
        grad[3] += scale * dcy * 0.5;
    }

    // IoU term: -alpha2 * d(IoU)/d(coord), nonzero only with a proper
    // overlap. IoU = I/U with U = area(pred) + area(gt) - I.
    let iw = pred.x_max.min(gt.x_max) - pred.x_min.max(gt.x_min);
    let ih = pred.y_max.min(gt.y_max) - pred.y_min.max(gt.y_min);
    if iw > 0.0 && ih > 0.0 {
        let inter = iw * ih;
        let union = pred.area() + gt.area() - inter;
        if union > 0.0 {
            // dI per predicted coordinate (subgradient 0 at exact ties).
            let di = [
                if pred.x_min > gt.x_min { -ih } else { 0.0 },
                if pred.y_min > gt.y_min { -iw } else { 0.0 },
                if pred.x_max < gt.x_max { ih } else { 0.0 },
                if pred.y_max < gt.y_max { iw } else { 0.0 },
            ];
            let (pw, ph) = (pred.width(), pred.height());
            let da = [-ph, -pw, ph, pw];
            for k in 0..4 {
                let du = da[k] - di[k];
                let diou = (di[k] * union - inter * du) / (union * union);
                grad[k] -= cfg.alpha2 * diou;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> Box {
        Box::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_closed_forms() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // Two 2x2 boxes overlapping in a unit square: 1 / (4 + 4 - 1).
        let c = b(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &c), iou(&c, &a));
        // Two zero-area boxes have an empty union.
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn center_loss_closed_forms() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(center_assisted_loss(&a, &a, 5.0).unwrap(), 0.0);
        // Distance exactly C.
        let shifted = a.translated(3.0, 4.0);
        let loss = center_assisted_loss(&a, &shifted, 5.0).unwrap();
        assert!((loss - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        // Distance C * ln 2 halves the exponential.
        let shifted = a.translated(5.0 * 2.0f64.ln(), 0.0);
        let loss = center_assisted_loss(&a, &shifted, 5.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert!(matches!(
            center_assisted_loss(&a, &a, 0.0),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn center_loss_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let a = b(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(50.0..100.0),
                rng.gen_range(50.0..100.0),
            );
            let c = b(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..50.0),
                rng.gen_range(50.0..100.0),
                rng.gen_range(50.0..100.0),
            );
            let l1 = center_assisted_loss(&a, &c, 8.0).unwrap();
            let l2 = center_assisted_loss(&c, &a, 8.0).unwrap();
            assert!((l1 - l2).abs() < 1e-15);
            assert!((0.0..1.0).contains(&l1));
        }
    }

    #[test]
    fn regression_loss_zero_at_exact_match_and_saturates_when_far() {
        let cfg = RegLossConfig::new(0.5, 0.5, 8.0).unwrap();
        let a = b(2.0, 2.0, 6.0, 6.0);
        assert_eq!(regression_loss(&a, &a, &cfg).unwrap(), 0.0);
        let far = a.translated(1e6, 0.0);
        let loss = regression_loss(&far, &a, &cfg).unwrap();
        assert!((loss - (cfg.alpha1 + cfg.alpha2)).abs() < 1e-9);
    }

    #[test]
    fn degenerate_weights_select_a_single_term() {
        let a = b(0.0, 0.0, 4.0, 4.0);
        let c = b(1.0, 0.0, 5.0, 4.0);
        let iou_only = RegLossConfig::new(0.0, 1.0, 8.0).unwrap();
        let center_only = RegLossConfig::new(1.0, 0.0, 8.0).unwrap();
        assert!(
            (regression_loss(&a, &c, &iou_only).unwrap() - (1.0 - iou(&a, &c))).abs() < 1e-15
        );
        assert!(
            (regression_loss(&a, &c, &center_only).unwrap()
                - center_assisted_loss(&a, &c, 8.0).unwrap())
            .abs()
                < 1e-15
        );
        assert!(RegLossConfig::new(0.0, 0.0, 8.0).is_err());
        assert!(RegLossConfig::new(-0.1, 0.5, 8.0).is_err());
        assert!(RegLossConfig::new(0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn disjoint_iou_term_has_zero_gradient() {
        let pred = b(10.0, 10.0, 12.0, 12.0);
        let gt = b(0.0, 0.0, 2.0, 2.0);
        let cfg = RegLossConfig::new(0.0, 1.0, 8.0).unwrap();
        assert_eq!(regression_loss_grad(&pred, &gt, &cfg).unwrap(), [0.0; 4]);
    }

    #[test]
    fn disjoint_center_term_points_toward_target() {
        // Target sits to the lower-left of the prediction: the loss must
        // decrease when x and y coordinates decrease, i.e. the gradient is
        // positive in all four components.
        let pred = b(10.0, 10.0, 12.0, 12.0);
        let gt = b(0.0, 0.0, 2.0, 2.0);
        let cfg = RegLossConfig::new(1.0, 0.0, 8.0).unwrap();
        let g = regression_loss_grad(&pred, &gt, &cfg).unwrap();
        assert!(g.iter().all(|&v| v > 0.0), "{g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let cfg = RegLossConfig::new(0.6, 0.4, 6.0).unwrap();
        for case in 0..50 {
            let gt = b(10.0, 10.0, 18.0, 16.0);
            // Mix of overlapping and disjoint predictions.
            let (ox, oy) = if case % 2 == 0 {
                (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))
            } else {
                (rng.gen_range(12.0..20.0), rng.gen_range(12.0..20.0))
            };
            let pred = b(
                10.0 + ox + rng.gen_range(-0.4..0.4),
                10.0 + oy + rng.gen_range(-0.4..0.4),
                18.0 + ox + rng.gen_range(-0.4..0.4),
                16.0 + oy + rng.gen_range(-0.4..0.4),
            );
            let analytic = regression_loss_grad(&pred, &gt, &cfg).unwrap();
            let h = 1e-6;
            let coords = [pred.x_min, pred.y_min, pred.x_max, pred.y_max];
            for k in 0..4 {
                let mut plus = coords;
                let mut minus = coords;
                plus[k] += h;
                minus[k] -= h;
                let lp = regression_loss(&b(plus[0], plus[1], plus[2], plus[3]), &gt, &cfg)
                    .unwrap();
                let lm = regression_loss(&b(minus[0], minus[1], minus[2], minus[3]), &gt, &cfg)
                    .unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                assert!(
                    (analytic[k] - numeric).abs() < 1e-6,
                    "case {case} coord {k}: analytic {} vs numeric {}",
                    analytic[k],
                    numeric
                );
            }
        }
    }

    proptest! {
        #[test]
        fn translation_invariance(
            x0 in 0.0..20.0f64, y0 in 0.0..20.0f64,
            w1 in 0.5..10.0f64, h1 in 0.5..10.0f64,
            x2 in 0.0..20.0f64, y2 in 0.0..20.0f64,
            w2 in 0.5..10.0f64, h2 in 0.5..10.0f64,
            dx in -40.0..40.0f64, dy in -40.0..40.0f64,
        ) {
            let a = b(x0, y0, x0 + w1, y0 + h1);
            let c = b(x2, y2, x2 + w2, y2 + h2);
            let cfg = RegLossConfig::default();
            let (at, ct) = (a.translated(dx, dy), c.translated(dx, dy));
            prop_assert!((iou(&a, &c) - iou(&at, &ct)).abs() < 1e-12);
            prop_assert!(
                (center_assisted_loss(&a, &c, cfg.c).unwrap()
                    - center_assisted_loss(&at, &ct, cfg.c).unwrap()).abs() < 1e-12
            );
            prop_assert!(
                (regression_loss(&a, &c, &cfg).unwrap()
                    - regression_loss(&at, &ct, &cfg).unwrap()).abs() < 1e-12
            );
        }

        #[test]
        fn disjoint_distinct_centers_always_supervised(
            shift_x in 12.0..60.0f64, shift_y in -5.0..5.0f64,
        ) {
            let gt = b(0.0, 0.0, 10.0, 10.0);
            let pred = gt.translated(shift_x, shift_y);
            prop_assume!(iou(&pred, &gt) == 0.0);
            let cfg = RegLossConfig::new(0.5, 0.5, 8.0).unwrap();
            let g = regression_loss_grad(&pred, &gt, &cfg).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm > 0.0);
        }
    }
}
