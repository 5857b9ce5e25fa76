//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

/// Finite-difference step on double-precision values.
pub const FD_STEP: f64 = 1e-5;

/// Relative error: |a - n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One named parameter (or input) slot under check.
pub struct GradSlot<'a> {
    pub name: &'a str,
    /// Current values; the slot occupies a contiguous segment of the
    /// flattened vector handed to the eval closure, in declaration order.
    pub values: &'a [f64],
    /// Analytic gradient, same layout as `values`.
    pub analytic: &'a [f64],
    /// Coordinates to perturb; `None` checks every coordinate.
    pub check_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotReport {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub slots: Vec<SlotReport>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn from_slots(slots: Vec<SlotReport>, tolerance: f64) -> Self {
        let max = slots
            .iter()
            .map(|s| s.max_relative_error)
            .fold(0.0f64, f64::max);
        Self {
            slots,
            max_relative_error: max,
            tolerance,
            pass: max <= tolerance,
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` receives the concatenation of all slot values and returns the
/// scalar objective; slots are perturbed one coordinate at a time.
pub fn grad_check(slots: &[GradSlot], tolerance: f64, eval: impl Fn(&[f64]) -> f64) -> GradCheckReport {
    let mut flat: Vec<f64> = Vec::new();
    let mut offsets = Vec::with_capacity(slots.len());
    for slot in slots {
        assert_eq!(slot.values.len(), slot.analytic.len(), "slot {}", slot.name);
        offsets.push(flat.len());
        flat.extend_from_slice(slot.values);
    }
    let mut reports = Vec::with_capacity(slots.len());
    for (slot, &off) in slots.iter().zip(offsets.iter()) {
        let all: Vec<usize>;
        let indices: &[usize] = match &slot.check_indices {
            Some(v) => v,
            None => {
                all = (0..slot.values.len()).collect();
                &all
            }
        };
        let mut max_err = 0.0f64;
        for &i in indices {
            let saved = flat[off + i];
            flat[off + i] = saved + FD_STEP;
            let fp = eval(&flat);
            flat[off + i] = saved - FD_STEP;
            let fm = eval(&flat);
            flat[off + i] = saved;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(slot.analytic[i], numeric));
        }
        reports.push(SlotReport {
            name: slot.name.to_string(),
            checked: indices.len(),
            max_relative_error: max_err,
        });
    }
    GradCheckReport::from_slots(reports, tolerance)
}

/// Deterministic coordinate subsample for large slots: at most `cap`
/// evenly-spaced indices.
pub fn subsample_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{silu_backward, silu_forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let proj: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = silu_backward(&x, &proj);
        let proj_eval = proj.clone();
        let report = grad_check(
            &[GradSlot {
                name: "input",
                values: &x,
                analytic: &analytic,
                check_indices: None,
            }],
            1e-6,
            move |flat| {
                silu_forward(flat)
                    .iter()
                    .zip(proj_eval.iter())
                    .map(|(y, r)| y * r)
                    .sum()
            },
        );
        assert!(report.pass, "max err {}", report.max_relative_error);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = vec![0.7];
        let analytic = vec![123.0];
        let report = grad_check(
            &[GradSlot {
                name: "input",
                values: &x,
                analytic: &analytic,
                check_indices: None,
            }],
            1e-4,
            |flat| flat[0] * flat[0],
        );
        assert!(!report.pass);
    }
}
