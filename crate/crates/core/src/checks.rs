//! Named gradient-check suites: every hand-derived backward pass in the
//! crate is verified against central finite differences through a random
//! scalar projection of the forward output.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csha::{csha_backward, csha_forward_cached, CshaWeights};
use crate::geometry::{regression_loss, regression_loss_grad, Box, RegLossConfig};
use crate::gradcheck::{grad_check, subsample_indices, GradCheckReport, GradSlot};
use crate::grm::{grm_backward, grm_forward_cached, GrmVariant, GrmWeights};
use crate::harness::config::DetectorConfig;
use crate::harness::detector::build_detector;
use crate::harness::sppf::{sppf_backward, sppf_forward_cached, SppfWeights};
use crate::harness::train::{assign_targets, loss_and_gradient, CellTargets};
use crate::ops::{
    bilinear_sample, bilinear_sample_backward, max_pool_backward, max_pool_forward, BatchNorm,
    Conv2d, LayerNorm, Linear,
};
use crate::rhwd::{
    focus_backward, focus_forward_cached, largekernel_backward, largekernel_forward_cached,
    rhwd_backward, rhwd_forward_cached, FocusWeights, RhwdWeights, StemMode,
};
use crate::tensor::{FeatureMap, TokenSequence};
use crate::Result;

/// Which suite of checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckModule {
    /// Every check, including the primitives and the end-to-end detector.
    All,
    Rhwd,
    Grm,
    Csha,
    Losses,
}

impl std::str::FromStr for CheckModule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "rhwd" => Ok(Self::Rhwd),
            "grm" => Ok(Self::Grm),
            "csha" => Ok(Self::Csha),
            "losses" => Ok(Self::Losses),
            other => Err(format!(
                "unknown module '{other}' (expected all|rhwd|grm|csha|losses)"
            )),
        }
    }
}

/// Tolerance for per-operation checks.
pub const UNIT_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end detector check, where error accumulates
/// across the full depth.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn proj_like<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn map_from(flat: &[f64], like: &FeatureMap) -> FeatureMap {
    FeatureMap::from_vec(flat.to_vec(), like.b, like.c, like.h, like.w).expect("layout matches")
}

fn check_conv(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let conv = Conv2d::new(rng, 3, 2, 3, 3, 1, 1);
    let input = FeatureMap::random(rng, 1, 2, 6, 6, -1.0, 1.0);
    let out = conv.forward(&input).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let (gi, gk, gb) = conv.backward(&input, &grad_out);
    let slots = [
        GradSlot { name: "input", values: &input.data, analytic: &gi.data, check_indices: None },
        GradSlot { name: "kernel", values: &conv.kernel, analytic: &gk, check_indices: None },
        GradSlot { name: "bias", values: &conv.bias, analytic: &gb, check_indices: None },
    ];
    let (template, input_t, proj_t) = (conv.clone(), input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut c = template.clone();
        let n_in = input_t.data.len();
        let n_k = c.kernel.len();
        let x = map_from(&flat[..n_in], &input_t);
        c.kernel.copy_from_slice(&flat[n_in..n_in + n_k]);
        c.bias.copy_from_slice(&flat[n_in + n_k..]);
        dot(&c.forward(&x).unwrap().data, &proj_t)
    });
    ("conv2d".into(), report)
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut bn = BatchNorm::new(3, 1e-5).unwrap();
    for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()) {
        *v = rng.gen_range(0.5..1.5);
    }
    let input = FeatureMap::random(rng, 2, 3, 4, 4, -1.0, 1.0);
    let (out, cache) = bn.forward_train(&input).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let (gi, gg, gb) = bn.backward(&input, &cache, &grad_out);
    let slots = [
        GradSlot { name: "input", values: &input.data, analytic: &gi.data, check_indices: None },
        GradSlot { name: "gamma", values: &bn.gamma, analytic: &gg, check_indices: None },
        GradSlot { name: "beta", values: &bn.beta, analytic: &gb, check_indices: None },
    ];
    let (template, input_t, proj_t) = (bn.clone(), input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut b = template.clone();
        let n_in = input_t.data.len();
        let c = b.gamma.len();
        let x = map_from(&flat[..n_in], &input_t);
        b.gamma.copy_from_slice(&flat[n_in..n_in + c]);
        b.beta.copy_from_slice(&flat[n_in + c..]);
        dot(&b.forward_train(&x).unwrap().0.data, &proj_t)
    });
    ("batch_norm".into(), report)
}

fn check_layernorm(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut ln = LayerNorm::new(5, 1e-5).unwrap();
    for v in ln.gamma.iter_mut().chain(ln.beta.iter_mut()) {
        *v = rng.gen_range(0.5..1.5);
    }
    let input = TokenSequence::random(rng, 1, 4, 5, -1.0, 1.0);
    let (out, cache) = ln.forward(&input).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = TokenSequence::from_vec(proj.clone(), out.b, out.t, out.c).unwrap();
    let (gi, gg, gb) = ln.backward(&input, &cache, &grad_out);
    let slots = [
        GradSlot { name: "input", values: &input.data, analytic: &gi.data, check_indices: None },
        GradSlot { name: "gamma", values: &ln.gamma, analytic: &gg, check_indices: None },
        GradSlot { name: "beta", values: &ln.beta, analytic: &gb, check_indices: None },
    ];
    let (template, input_t, proj_t) = (ln.clone(), input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut l = template.clone();
        let n_in = input_t.data.len();
        let c = l.gamma.len();
        let x = TokenSequence::from_vec(flat[..n_in].to_vec(), input_t.b, input_t.t, input_t.c)
            .unwrap();
        l.gamma.copy_from_slice(&flat[n_in..n_in + c]);
        l.beta.copy_from_slice(&flat[n_in + c..]);
        dot(&l.forward(&x).unwrap().0.data, &proj_t)
    });
    ("layer_norm".into(), report)
}

fn check_linear(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let lin = Linear::new(rng, 4, 6);
    let input = TokenSequence::random(rng, 1, 3, 6, -1.0, 1.0);
    let out = lin.forward(&input).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = TokenSequence::from_vec(proj.clone(), out.b, out.t, out.c).unwrap();
    let (gi, gw, gb) = lin.backward(&input, &grad_out);
    let slots = [
        GradSlot { name: "input", values: &input.data, analytic: &gi.data, check_indices: None },
        GradSlot { name: "weight", values: &lin.weight, analytic: &gw, check_indices: None },
        GradSlot { name: "bias", values: &lin.bias, analytic: &gb, check_indices: None },
    ];
    let (template, input_t, proj_t) = (lin.clone(), input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut l = template.clone();
        let n_in = input_t.data.len();
        let n_w = l.weight.len();
        let x = TokenSequence::from_vec(flat[..n_in].to_vec(), input_t.b, input_t.t, input_t.c)
            .unwrap();
        l.weight.copy_from_slice(&flat[n_in..n_in + n_w]);
        l.bias.copy_from_slice(&flat[n_in + n_w..]);
        dot(&l.forward(&x).unwrap().data, &proj_t)
    });
    ("linear".into(), report)
}

fn check_max_pool(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    // Continuous random values keep the argmax stable under the FD step.
    let input = FeatureMap::random(rng, 1, 2, 6, 6, -1.0, 1.0);
    let (out, cache) = max_pool_forward(&input, 5, 1, 2).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let gi = max_pool_backward(&input, &cache, &grad_out);
    let slots = [GradSlot {
        name: "input",
        values: &input.data,
        analytic: &gi.data,
        check_indices: None,
    }];
    let (input_t, proj_t) = (input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let x = map_from(flat, &input_t);
        dot(&max_pool_forward(&x, 5, 1, 2).unwrap().0.data, &proj_t)
    });
    ("max_pool".into(), report)
}

fn check_bilinear(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let map = FeatureMap::random(rng, 1, 3, 5, 5, -1.0, 1.0);
    // Strictly interior, non-integer coordinates keep the sample smooth.
    let points: Vec<Vec<(f64, f64)>> = vec![(0..6)
        .map(|_| (rng.gen_range(0.3..3.7), rng.gen_range(0.3..3.7)))
        .collect()];
    let values = bilinear_sample(&map, &points);
    let grad_out: Vec<Vec<Vec<f64>>> = values
        .iter()
        .map(|pts| pts.iter().map(|v| proj_like(rng, v.len())).collect())
        .collect();
    let (grad_map, grad_points) = bilinear_sample_backward(&map, &points, &grad_out);
    let flat_points: Vec<f64> = points[0].iter().flat_map(|&(x, y)| [x, y]).collect();
    let flat_point_grads: Vec<f64> =
        grad_points[0].iter().flat_map(|&(x, y)| [x, y]).collect();
    let slots = [
        GradSlot { name: "map", values: &map.data, analytic: &grad_map.data, check_indices: None },
        GradSlot {
            name: "coordinates",
            values: &flat_points,
            analytic: &flat_point_grads,
            check_indices: None,
        },
    ];
    let (map_t, grad_out_t) = (map.clone(), grad_out);
    let n_map = map.data.len();
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let m = map_from(&flat[..n_map], &map_t);
        let pts: Vec<Vec<(f64, f64)>> =
            vec![flat[n_map..].chunks(2).map(|c| (c[0], c[1])).collect()];
        let vals = bilinear_sample(&m, &pts);
        vals[0]
            .iter()
            .zip(&grad_out_t[0])
            .map(|(v, g)| dot(v, g))
            .sum()
    });
    ("bilinear_sample".into(), report)
}

fn check_sppf(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let weights = SppfWeights::new(rng, 6);
    let input = FeatureMap::random(rng, 1, 6, 4, 4, -1.0, 1.0);
    let (out, cache) = sppf_forward_cached(&input, &weights).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let grads = sppf_backward(&input, &weights, &cache, &grad_out);
    let slots = [
        GradSlot {
            name: "input",
            values: &input.data,
            analytic: &grads.input.data,
            check_indices: None,
        },
        GradSlot {
            name: "reduce_kernel",
            values: &weights.reduce.kernel,
            analytic: &grads.reduce.0,
            check_indices: None,
        },
        GradSlot {
            name: "reduce_bias",
            values: &weights.reduce.bias,
            analytic: &grads.reduce.1,
            check_indices: None,
        },
        GradSlot {
            name: "expand_kernel",
            values: &weights.expand.kernel,
            analytic: &grads.expand.0,
            check_indices: Some(subsample_indices(weights.expand.kernel.len(), 40)),
        },
        GradSlot {
            name: "expand_bias",
            values: &weights.expand.bias,
            analytic: &grads.expand.1,
            check_indices: None,
        },
    ];
    let (template, input_t, proj_t) = (weights.clone(), input.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = 0;
        let x = map_from(&flat[..input_t.data.len()], &input_t);
        off += input_t.data.len();
        for seg in [
            &mut w.reduce.kernel,
            &mut w.reduce.bias,
            &mut w.expand.kernel,
            &mut w.expand.bias,
        ] {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(&sppf_forward_cached(&x, &w).unwrap().0.data, &proj_t)
    });
    ("sppf".into(), report)
}

fn check_rhwd(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut weights = RhwdWeights::new(rng, 2, 4).unwrap();
    let image = FeatureMap::random(rng, 1, 2, 8, 8, -1.0, 1.0);
    let (out, cache) = rhwd_forward_cached(&image, &mut weights, StemMode::Train).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let g = rhwd_backward(&image, &weights, &cache, &grad_out);
    // A per-channel shift before batch norm is cancelled by the mean
    // subtraction, so the conv bias gradient vanishes identically; finite
    // differences against an exact zero only measure noise.
    assert!(g.global_bias.iter().all(|v| v.abs() < 1e-10));
    let slots = [
        GradSlot {
            name: "image",
            values: &image.data,
            analytic: &g.image.data,
            check_indices: Some(subsample_indices(image.data.len(), 48)),
        },
        GradSlot {
            name: "global_kernel",
            values: &weights.global_conv.kernel,
            analytic: &g.global_kernel,
            check_indices: Some(subsample_indices(weights.global_conv.kernel.len(), 48)),
        },
        GradSlot {
            name: "global_gamma",
            values: &weights.global_bn.gamma,
            analytic: &g.global_gamma,
            check_indices: None,
        },
        GradSlot {
            name: "global_beta",
            values: &weights.global_bn.beta,
            analytic: &g.global_beta,
            check_indices: None,
        },
        GradSlot {
            name: "local_kernel",
            values: &weights.local_conv.kernel,
            analytic: &g.local_kernel,
            check_indices: Some(subsample_indices(weights.local_conv.kernel.len(), 48)),
        },
        GradSlot {
            name: "local_bias",
            values: &weights.local_conv.bias,
            analytic: &g.local_bias,
            check_indices: None,
        },
    ];
    let (template, image_t, proj_t) = (weights.clone(), image.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = image_t.data.len();
        let x = map_from(&flat[..off], &image_t);
        for seg in [
            &mut w.global_conv.kernel,
            &mut w.global_bn.gamma,
            &mut w.global_bn.beta,
            &mut w.local_conv.kernel,
            &mut w.local_conv.bias,
        ] {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(
            &rhwd_forward_cached(&x, &mut w, StemMode::Train).unwrap().0.data,
            &proj_t,
        )
    });
    ("rhwd_stem".into(), report)
}

fn check_largekernel(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut weights = RhwdWeights::new(rng, 2, 4).unwrap();
    let image = FeatureMap::random(rng, 1, 2, 8, 8, -1.0, 1.0);
    let (out, cache) = largekernel_forward_cached(&image, &mut weights, StemMode::Train).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let g = largekernel_backward(&image, &weights, &cache, &grad_out);
    // Same cancellation as in the wavelet stem: bias before batch norm
    // has an identically zero gradient.
    assert!(g.bias.iter().all(|v| v.abs() < 1e-10));
    let slots = [
        GradSlot {
            name: "image",
            values: &image.data,
            analytic: &g.image.data,
            check_indices: Some(subsample_indices(image.data.len(), 48)),
        },
        GradSlot {
            name: "kernel",
            values: &weights.global_conv.kernel,
            analytic: &g.kernel,
            check_indices: Some(subsample_indices(weights.global_conv.kernel.len(), 48)),
        },
        GradSlot {
            name: "gamma",
            values: &weights.global_bn.gamma,
            analytic: &g.gamma,
            check_indices: None,
        },
        GradSlot {
            name: "beta",
            values: &weights.global_bn.beta,
            analytic: &g.beta,
            check_indices: None,
        },
    ];
    let (template, image_t, proj_t) = (weights.clone(), image.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = image_t.data.len();
        let x = map_from(&flat[..off], &image_t);
        for seg in [
            &mut w.global_conv.kernel,
            &mut w.global_bn.gamma,
            &mut w.global_bn.beta,
        ] {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(
            &largekernel_forward_cached(&x, &mut w, StemMode::Train)
                .unwrap()
                .0
                .data,
            &proj_t,
        )
    });
    ("largekernel_stem".into(), report)
}

fn check_focus(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut weights = FocusWeights::new(rng, 2, 4).unwrap();
    let image = FeatureMap::random(rng, 1, 2, 8, 8, -1.0, 1.0);
    let (out, cache) = focus_forward_cached(&image, &mut weights, StemMode::Train).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let g = focus_backward(&image, &weights, &cache, &grad_out);
    assert!(g.bias.iter().all(|v| v.abs() < 1e-10));
    let slots = [
        GradSlot {
            name: "image",
            values: &image.data,
            analytic: &g.image.data,
            check_indices: Some(subsample_indices(image.data.len(), 48)),
        },
        GradSlot {
            name: "kernel",
            values: &weights.conv.kernel,
            analytic: &g.kernel,
            check_indices: Some(subsample_indices(weights.conv.kernel.len(), 48)),
        },
        GradSlot { name: "gamma", values: &weights.bn.gamma, analytic: &g.gamma, check_indices: None },
        GradSlot { name: "beta", values: &weights.bn.beta, analytic: &g.beta, check_indices: None },
    ];
    let (template, image_t, proj_t) = (weights.clone(), image.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = image_t.data.len();
        let x = map_from(&flat[..off], &image_t);
        for seg in [
            &mut w.conv.kernel,
            &mut w.bn.gamma,
            &mut w.bn.beta,
        ] {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(
            &focus_forward_cached(&x, &mut w, StemMode::Train).unwrap().0.data,
            &proj_t,
        )
    });
    ("focus_stem".into(), report)
}

fn check_grm_variant(rng: &mut ChaCha8Rng, variant: GrmVariant) -> (String, GradCheckReport) {
    let weights = GrmWeights::new(rng, 4, 4, 2).unwrap();
    let p5 = FeatureMap::random(rng, 1, 4, 2, 2, -1.0, 1.0);
    let (out, cache) = grm_forward_cached(&p5, &weights, variant).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let g = grm_backward(&p5, &weights, &cache, &grad_out);
    let mut slots = vec![GradSlot {
        name: "p5",
        values: &p5.data,
        analytic: &g.p5.data,
        check_indices: None,
    }];
    if variant == GrmVariant::Grm {
        slots.push(GradSlot {
            name: "e_pos",
            values: &weights.e_pos,
            analytic: &g.e_pos,
            check_indices: None,
        });
        slots.push(GradSlot {
            name: "norm_gamma",
            values: &weights.norm.gamma,
            analytic: &g.gamma,
            check_indices: None,
        });
        slots.push(GradSlot {
            name: "norm_beta",
            values: &weights.norm.beta,
            analytic: &g.beta,
            check_indices: None,
        });
    }
    // A constant shift of every key moves all attention logits of a query
    // equally, which the softmax cancels: the key bias gradient is
    // identically zero, so it is asserted exactly rather than compared
    // against finite-difference noise.
    assert!(g.mhsa.w_k.1.iter().all(|v| v.abs() < 1e-10));
    for (w_name, b_name, lin, grad) in [
        ("w_q_weight", "w_q_bias", &weights.w_q, &g.mhsa.w_q),
        ("w_k_weight", "w_k_bias", &weights.w_k, &g.mhsa.w_k),
        ("w_v_weight", "w_v_bias", &weights.w_v, &g.mhsa.w_v),
        ("w_o_weight", "w_o_bias", &weights.w_o, &g.mhsa.w_o),
    ] {
        slots.push(GradSlot {
            name: w_name,
            values: &lin.weight,
            analytic: &grad.0,
            check_indices: None,
        });
        slots.push(GradSlot {
            name: b_name,
            values: &lin.bias,
            analytic: &grad.1,
            check_indices: if b_name == "w_k_bias" { Some(Vec::new()) } else { None },
        });
    }
    let (template, p5_t, proj_t) = (weights.clone(), p5.clone(), proj);
    let with_pos = variant == GrmVariant::Grm;
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = p5_t.data.len();
        let x = map_from(&flat[..off], &p5_t);
        if with_pos {
            for seg in [&mut w.e_pos, &mut w.norm.gamma, &mut w.norm.beta] {
                let n = seg.len();
                seg.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        for lin in [&mut w.w_q, &mut w.w_k, &mut w.w_v, &mut w.w_o] {
            let n = lin.weight.len();
            lin.weight.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = lin.bias.len();
            lin.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(&grm_forward_cached(&x, &w, variant).unwrap().0.data, &proj_t)
    });
    let name = match variant {
        GrmVariant::Grm => "grm",
        GrmVariant::PlainMhsa => "plain_mhsa",
    };
    (name.into(), report)
}

fn check_csha(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let mut weights = CshaWeights::new(rng, 3, 4, 5, 4, 2, 2).unwrap();
    // The fresh radial initialization places samples exactly on grid
    // lines, where bilinear interpolation has a derivative kink and finite
    // differences are invalid; jitter the offset head off the lattice.
    for v in weights.offset_head.weight.iter_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    for v in weights.offset_head.bias.iter_mut() {
        *v += rng.gen_range(0.13..0.41);
    }
    let p3 = FeatureMap::random(rng, 1, 3, 8, 8, -1.0, 1.0);
    let p4 = FeatureMap::random(rng, 1, 4, 4, 4, -1.0, 1.0);
    let p5 = FeatureMap::random(rng, 1, 5, 2, 2, -1.0, 1.0);
    let (out, cache) = csha_forward_cached(&p3, &p4, &p5, &weights).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_out = map_from(&proj, &out);
    let g = csha_backward(&p3, &p4, &p5, &weights, &cache, &grad_out);
    let slots = [
        GradSlot {
            name: "p3",
            values: &p3.data,
            analytic: &g.p3.data,
            check_indices: Some(subsample_indices(p3.data.len(), 48)),
        },
        GradSlot {
            name: "p4",
            values: &p4.data,
            analytic: &g.p4.data,
            check_indices: Some(subsample_indices(p4.data.len(), 48)),
        },
        GradSlot { name: "p5", values: &p5.data, analytic: &g.p5.data, check_indices: None },
        GradSlot {
            name: "proj3_kernel",
            values: &weights.proj3.kernel,
            analytic: &g.proj3.0,
            check_indices: None,
        },
        GradSlot {
            name: "proj3_bias",
            values: &weights.proj3.bias,
            analytic: &g.proj3.1,
            check_indices: None,
        },
        GradSlot {
            name: "proj4_kernel",
            values: &weights.proj4.kernel,
            analytic: &g.proj4.0,
            check_indices: None,
        },
        GradSlot {
            name: "proj4_bias",
            values: &weights.proj4.bias,
            analytic: &g.proj4.1,
            check_indices: None,
        },
        GradSlot {
            name: "proj5_kernel",
            values: &weights.proj5.kernel,
            analytic: &g.proj5.0,
            check_indices: None,
        },
        GradSlot {
            name: "proj5_bias",
            values: &weights.proj5.bias,
            analytic: &g.proj5.1,
            check_indices: None,
        },
        GradSlot {
            name: "offset_head_weight",
            values: &weights.offset_head.weight,
            analytic: &g.offset_head.0,
            check_indices: Some(subsample_indices(weights.offset_head.weight.len(), 48)),
        },
        GradSlot {
            name: "offset_head_bias",
            values: &weights.offset_head.bias,
            analytic: &g.offset_head.1,
            check_indices: None,
        },
        GradSlot {
            name: "attn_head_weight",
            values: &weights.attn_head.weight,
            analytic: &g.attn_head.0,
            check_indices: Some(subsample_indices(weights.attn_head.weight.len(), 48)),
        },
        GradSlot {
            name: "attn_head_bias",
            values: &weights.attn_head.bias,
            analytic: &g.attn_head.1,
            check_indices: None,
        },
        GradSlot {
            name: "out_proj_weight",
            values: &weights.out_proj.weight,
            analytic: &g.out_proj.0,
            check_indices: None,
        },
        GradSlot {
            name: "out_proj_bias",
            values: &weights.out_proj.bias,
            analytic: &g.out_proj.1,
            check_indices: None,
        },
    ];
    let (template, p3_t, p4_t, p5_t, proj_t) =
        (weights.clone(), p3.clone(), p4.clone(), p5.clone(), proj);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let mut w = template.clone();
        let mut off = 0;
        let x3 = map_from(&flat[off..off + p3_t.data.len()], &p3_t);
        off += p3_t.data.len();
        let x4 = map_from(&flat[off..off + p4_t.data.len()], &p4_t);
        off += p4_t.data.len();
        let x5 = map_from(&flat[off..off + p5_t.data.len()], &p5_t);
        off += p5_t.data.len();
        for seg in [
            &mut w.proj3.kernel,
            &mut w.proj3.bias,
            &mut w.proj4.kernel,
            &mut w.proj4.bias,
            &mut w.proj5.kernel,
            &mut w.proj5.bias,
            &mut w.offset_head.weight,
            &mut w.offset_head.bias,
            &mut w.attn_head.weight,
            &mut w.attn_head.bias,
            &mut w.out_proj.weight,
            &mut w.out_proj.bias,
        ] {
            let n = seg.len();
            seg.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        dot(
            &csha_forward_cached(&x3, &x4, &x5, &w).unwrap().0.data,
            &proj_t,
        )
    });
    ("csha".into(), report)
}

fn check_box_regression(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    // Several overlapping pairs summed into one objective.
    let cfg = RegLossConfig::new(0.5, 0.5, 6.0).unwrap();
    let mut corners = Vec::new();
    let mut analytic = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..6 {
        let gt = Box::from_center(
            rng.gen_range(8.0..24.0),
            rng.gen_range(8.0..24.0),
            rng.gen_range(4.0..9.0),
            rng.gen_range(4.0..9.0),
        )
        .unwrap();
        let pred = gt.translated(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let g = regression_loss_grad(&pred, &gt, &cfg).unwrap();
        corners.extend([pred.x_min, pred.y_min, pred.x_max, pred.y_max]);
        analytic.extend(g);
        gts.push(gt);
    }
    let slots = [GradSlot {
        name: "pred_corners",
        values: &corners,
        analytic: &analytic,
        check_indices: None,
    }];
    let gts_t = gts.clone();
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        flat.chunks(4)
            .zip(&gts_t)
            .map(|(c, gt)| {
                let pred = Box::new(c[0], c[1], c[2], c[3]).unwrap();
                regression_loss(&pred, gt, &cfg).unwrap()
            })
            .sum()
    });
    ("box_regression_loss".into(), report)
}

fn check_training_loss(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    use crate::eval::GroundTruth;
    use crate::harness::detector::{HEAD_CHANNELS, HEAD_STRIDE};
    let head = FeatureMap::random(rng, 1, HEAD_CHANNELS, 2, 2, -1.0, 1.0);
    let gts = vec![
        GroundTruth {
            bbox: Box::from_center(20.0, 10.0, 6.0, 5.0).unwrap(),
            class_id: 1,
            image_id: 0,
        },
        GroundTruth {
            bbox: Box::from_center(40.0, 40.0, 4.0, 7.0).unwrap(),
            class_id: 1,
            image_id: 0,
        },
    ];
    let targets: Vec<CellTargets> = vec![assign_targets(&gts, 2, 2, HEAD_STRIDE as f64)];
    let cfg = RegLossConfig::new(0.5, 0.5, 6.0).unwrap();
    let (_, _, _, grad) = loss_and_gradient(&head, &targets, &cfg).unwrap();
    let slots = [GradSlot {
        name: "head_map",
        values: &head.data,
        analytic: &grad.data,
        check_indices: None,
    }];
    let (head_t, targets_t) = (head.clone(), targets);
    let report = grad_check(&slots, UNIT_TOLERANCE, move |flat| {
        let h = map_from(flat, &head_t);
        loss_and_gradient(&h, &targets_t, &cfg).unwrap().0
    });
    ("training_loss".into(), report)
}

fn check_detector_end_to_end(rng: &mut ChaCha8Rng) -> (String, GradCheckReport) {
    let cfg = DetectorConfig::default();
    let mut detector = build_detector(&cfg, 32, 7).unwrap();
    // Move the cross-scale sampling off the bilinear grid lines, where the
    // interpolation kink would invalidate finite differences.
    if let Some(csha) = detector.csha.as_mut() {
        for v in csha.offset_head.weight.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        for v in csha.offset_head.bias.iter_mut() {
            *v += rng.gen_range(0.13..0.41);
        }
    }
    let images = FeatureMap::random(rng, 1, 1, 32, 32, 0.0, 1.0);
    let (out, cache) = detector.forward_cached(&images, StemMode::Train).unwrap();
    let proj = proj_like(rng, out.data.len());
    let grad_head = map_from(&proj, &out);
    let grads = detector.backward(&images, &cache, &grad_head);
    let analytic: Vec<f64> = grads.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let params = detector.params_flat();
    assert_eq!(params.len(), analytic.len());
    // Coordinates with a structurally zero gradient (for example conv
    // biases cancelled by batch norm) cannot be validated relatively
    // against finite-difference noise; check active coordinates.
    let active: Vec<usize> = (0..params.len())
        .filter(|&i| analytic[i].abs() > 1e-9)
        .collect();
    let picked: Vec<usize> = subsample_indices(active.len(), 160)
        .into_iter()
        .map(|i| active[i])
        .collect();
    let slots = [GradSlot {
        name: "detector_params",
        values: &params,
        analytic: &analytic,
        check_indices: Some(picked),
    }];
    let cell = RefCell::new(detector);
    let (images_t, proj_t) = (images.clone(), proj);
    let report = grad_check(&slots, END_TO_END_TOLERANCE, move |flat| {
        let mut det = cell.borrow_mut();
        det.set_params_flat(flat).unwrap();
        let out = det.forward(&images_t, StemMode::Train).unwrap();
        dot(&out.data, &proj_t)
    });
    ("detector_end_to_end".into(), report)
}

/// Run the selected gradient-check suite with a deterministic seed.
pub fn run_gradcheck(module: CheckModule, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if module == CheckModule::All {
        out.push(check_conv(&mut rng));
        out.push(check_batchnorm(&mut rng));
        out.push(check_layernorm(&mut rng));
        out.push(check_linear(&mut rng));
        out.push(check_max_pool(&mut rng));
        out.push(check_bilinear(&mut rng));
        out.push(check_sppf(&mut rng));
    }
    if matches!(module, CheckModule::All | CheckModule::Rhwd) {
        out.push(check_rhwd(&mut rng));
        out.push(check_largekernel(&mut rng));
        out.push(check_focus(&mut rng));
    }
    if matches!(module, CheckModule::All | CheckModule::Grm) {
        out.push(check_grm_variant(&mut rng, GrmVariant::Grm));
        out.push(check_grm_variant(&mut rng, GrmVariant::PlainMhsa));
    }
    if matches!(module, CheckModule::All | CheckModule::Csha) {
        out.push(check_csha(&mut rng));
    }
    if matches!(module, CheckModule::All | CheckModule::Losses) {
        out.push(check_box_regression(&mut rng));
        out.push(check_training_loss(&mut rng));
    }
    if module == CheckModule::All {
        out.push(check_detector_end_to_end(&mut rng));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_suite_passes() {
        for module in [
            CheckModule::Rhwd,
            CheckModule::Grm,
            CheckModule::Csha,
            CheckModule::Losses,
        ] {
            for (name, report) in run_gradcheck(module, 0).unwrap() {
                assert!(
                    report.pass,
                    "{name}: max relative error {} exceeds {}",
                    report.max_relative_error, report.tolerance
                );
            }
        }
    }

    #[test]
    fn full_suite_passes_including_end_to_end() {
        let reports = run_gradcheck(CheckModule::All, 0).unwrap();
        assert!(reports.iter().any(|(n, _)| n == "detector_end_to_end"));
        for (name, report) in reports {
            assert!(
                report.pass,
                "{name}: max relative error {} exceeds {}",
                report.max_relative_error, report.tolerance
            );
        }
    }
}
