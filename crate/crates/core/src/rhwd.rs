//! Residual Haar wavelet downsampling stem: a large-kernel global branch
//! fused residually with a frequency-domain local branch, plus the two
//! ablation stems (large-kernel only, Focus).

use rand::Rng;

use crate::ops::{silu_backward, silu_forward, BatchNorm, BatchNormCache, Conv2d};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// The four subbands of a single-level orthonormal 2D Haar transform.
#[derive(Debug, Clone)]
pub struct WaveletSubbands {
    pub a: FeatureMap,
    pub h: FeatureMap,
    pub v: FeatureMap,
    pub d: FeatureMap,
}

/// Orthonormal single-level Haar per channel. For each non-overlapping 2x2
/// block [[a,b],[c,d]]: A=(a+b+c+d)/2, H=(a-b+c-d)/2, V=(a+b-c-d)/2,
/// D=(a-b-c+d)/2.
pub fn haar_forward(input: &FeatureMap) -> Result<WaveletSubbands> {
    if input.h % 2 != 0 {
        return Err(Error::Geometry(format!("haar requires even height, got {}", input.h)));
    }
    if input.w % 2 != 0 {
        return Err(Error::Geometry(format!("haar requires even width, got {}", input.w)));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut a = FeatureMap::zeros(input.b, input.c, oh, ow);
    let mut hh = FeatureMap::zeros(input.b, input.c, oh, ow);
    let mut v = FeatureMap::zeros(input.b, input.c, oh, ow);
    let mut d = FeatureMap::zeros(input.b, input.c, oh, ow);
    for bi in 0..input.b {
        for c in 0..input.c {
            for y in 0..oh {
                for x in 0..ow {
                    let p00 = input.at(bi, c, 2 * y, 2 * x);
                    let p01 = input.at(bi, c, 2 * y, 2 * x + 1);
                    let p10 = input.at(bi, c, 2 * y + 1, 2 * x);
                    let p11 = input.at(bi, c, 2 * y + 1, 2 * x + 1);
                    *a.at_mut(bi, c, y, x) = (p00 + p01 + p10 + p11) / 2.0;
                    *hh.at_mut(bi, c, y, x) = (p00 - p01 + p10 - p11) / 2.0;
                    *v.at_mut(bi, c, y, x) = (p00 + p01 - p10 - p11) / 2.0;
                    *d.at_mut(bi, c, y, x) = (p00 - p01 - p10 + p11) / 2.0;
                }
            }
        }
    }
    Ok(WaveletSubbands { a, h: hh, v, d })
}

/// Exact left inverse of [`haar_forward`].
pub fn haar_inverse(sub: &WaveletSubbands) -> FeatureMap {
    let (b, c, oh, ow) = sub.a.shape();
    let mut out = FeatureMap::zeros(b, c, 2 * oh, 2 * ow);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let a = sub.a.at(bi, ci, y, x);
                    let h = sub.h.at(bi, ci, y, x);
                    let v = sub.v.at(bi, ci, y, x);
                    let d = sub.d.at(bi, ci, y, x);
                    *out.at_mut(bi, ci, 2 * y, 2 * x) = (a + h + v + d) / 2.0;
                    *out.at_mut(bi, ci, 2 * y, 2 * x + 1) = (a - h + v - d) / 2.0;
                    *out.at_mut(bi, ci, 2 * y + 1, 2 * x) = (a + h - v - d) / 2.0;
                    *out.at_mut(bi, ci, 2 * y + 1, 2 * x + 1) = (a - h - v + d) / 2.0;
                }
            }
        }
    }
    out
}

/// Concatenate the subbands along channels in (A, H, V, D) order.
fn cat_subbands(sub: &WaveletSubbands) -> FeatureMap {
    let (b, c, h, w) = sub.a.shape();
    let mut out = FeatureMap::zeros(b, 4 * c, h, w);
    let parts = [&sub.a, &sub.h, &sub.v, &sub.d];
    for bi in 0..b {
        for (p, part) in parts.iter().enumerate() {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(bi, p * c + ci, y, x) = part.at(bi, ci, y, x);
                    }
                }
            }
        }
    }
    out
}

fn split_subbands_grad(grad: &FeatureMap, c: usize) -> WaveletSubbands {
    let (b, _, h, w) = grad.shape();
    let mut parts = Vec::with_capacity(4);
    for p in 0..4 {
        let mut m = FeatureMap::zeros(b, c, h, w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *m.at_mut(bi, ci, y, x) = grad.at(bi, p * c + ci, y, x);
                    }
                }
            }
        }
        parts.push(m);
    }
    let d = parts.pop().unwrap();
    let v = parts.pop().unwrap();
    let h_ = parts.pop().unwrap();
    let a = parts.pop().unwrap();
    WaveletSubbands { a, h: h_, v, d }
}

/// Backward through the Haar transform (the transform is linear and
/// orthonormal, so the adjoint is the inverse).
pub fn haar_backward(grad_subbands: &WaveletSubbands) -> FeatureMap {
    haar_inverse(grad_subbands)
}

/// Stem mode: which normalization statistics the global branch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemMode {
    Train,
    Infer,
}

/// Weights for the full RHWD stem; the ablation stems reuse subsets.
#[derive(Debug, Clone)]
pub struct RhwdWeights {
    /// Global branch: 6x6 stride-2 pad-2 convolution to C_out.
    pub global_conv: Conv2d,
    pub global_bn: BatchNorm,
    /// Local branch: 3x3 stride-1 pad-1 projection from 4*C_in to C_out.
    pub local_conv: Conv2d,
}

impl RhwdWeights {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            global_conv: Conv2d::new(rng, out_c, in_c, 6, 6, 2, 2),
            global_bn: BatchNorm::new(out_c, 1e-5)?,
            local_conv: Conv2d::new(rng, out_c, 4 * in_c, 3, 3, 1, 1),
        })
    }
}

/// Saved intermediates for [`rhwd_backward`].
pub struct RhwdCache {
    global_pre_bn: FeatureMap,
    global_bn_cache: Option<BatchNormCache>,
    global_pre_act: FeatureMap,
    local_cat: FeatureMap,
    local_pre_act: FeatureMap,
}

/// Global branch alone: SiLU(BN(Conv6x6 stride 2 pad 2)).
pub fn largekernel_forward(
    image: &FeatureMap,
    weights: &mut RhwdWeights,
    mode: StemMode,
) -> Result<FeatureMap> {
    let conv = weights.global_conv.forward(image)?;
    let bn = match mode {
        StemMode::Train => weights.global_bn.forward_train(&conv)?.0,
        StemMode::Infer => weights.global_bn.forward_infer(&conv)?,
    };
    let mut out = bn.clone();
    out.data = silu_forward(&bn.data);
    Ok(out)
}

pub struct LargekernelCache {
    pub pre_bn: FeatureMap,
    pub bn_cache: Option<BatchNormCache>,
    pub pre_act: FeatureMap,
}

pub fn largekernel_forward_cached(
    image: &FeatureMap,
    weights: &mut RhwdWeights,
    mode: StemMode,
) -> Result<(FeatureMap, LargekernelCache)> {
    let pre_bn = weights.global_conv.forward(image)?;
    let (bn_out, bn_cache) = match mode {
        StemMode::Train => {
            let (o, c) = weights.global_bn.forward_train(&pre_bn)?;
            (o, Some(c))
        }
        StemMode::Infer => (weights.global_bn.forward_infer(&pre_bn)?, None),
    };
    let mut out = bn_out.clone();
    out.data = silu_forward(&bn_out.data);
    Ok((
        out,
        LargekernelCache {
            pre_bn,
            bn_cache,
            pre_act: bn_out,
        },
    ))
}

pub struct LargekernelGrads {
    pub image: FeatureMap,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn largekernel_backward(
    image: &FeatureMap,
    weights: &RhwdWeights,
    cache: &LargekernelCache,
    grad_out: &FeatureMap,
) -> LargekernelGrads {
    let mut grad_bn_out = grad_out.clone();
    grad_bn_out.data = silu_backward(&cache.pre_act.data, &grad_out.data);
    let bn_cache = cache
        .bn_cache
        .as_ref()
        .expect("backward requires a training-mode cache");
    let (grad_conv_out, gamma, beta) =
        weights.global_bn.backward(&cache.pre_bn, bn_cache, &grad_bn_out);
    let (grad_image, kernel, bias) = weights.global_conv.backward(image, &grad_conv_out);
    LargekernelGrads {
        image: grad_image,
        kernel,
        bias,
        gamma,
        beta,
    }
}

/// Full stem: global branch plus Haar local branch, fused by addition.
pub fn rhwd_forward(
    image: &FeatureMap,
    weights: &mut RhwdWeights,
    mode: StemMode,
) -> Result<FeatureMap> {
    rhwd_forward_cached(image, weights, mode).map(|(out, _)| out)
}

pub fn rhwd_forward_cached(
    image: &FeatureMap,
    weights: &mut RhwdWeights,
    mode: StemMode,
) -> Result<(FeatureMap, RhwdCache)> {
    let global_pre_bn = weights.global_conv.forward(image)?;
    let (global_bn_out, global_bn_cache) = match mode {
        StemMode::Train => {
            let (o, c) = weights.global_bn.forward_train(&global_pre_bn)?;
            (o, Some(c))
        }
        StemMode::Infer => (weights.global_bn.forward_infer(&global_pre_bn)?, None),
    };
    let mut global = global_bn_out.clone();
    global.data = silu_forward(&global_bn_out.data);

    let sub = haar_forward(image)?;
    let local_cat = cat_subbands(&sub);
    let local_pre_act = weights.local_conv.forward(&local_cat)?;
    let mut local = local_pre_act.clone();
    local.data = silu_forward(&local_pre_act.data);

    if local.shape() != global.shape() {
        return Err(Error::Geometry(format!(
            "branch shapes disagree: local {:?} vs global {:?}",
            local.shape(),
            global.shape()
        )));
    }
    let mut out = global;
    for (o, l) in out.data.iter_mut().zip(local.data.iter()) {
        *o += l;
    }
    Ok((
        out,
        RhwdCache {
            global_pre_bn,
            global_bn_cache,
            global_pre_act: global_bn_out,
            local_cat,
            local_pre_act,
        },
    ))
}

/// Gradients of the training-mode forward with respect to the image and all
/// stem parameters.
pub struct RhwdGrads {
    pub image: FeatureMap,
    pub global_kernel: Vec<f64>,
    pub global_bias: Vec<f64>,
    pub global_gamma: Vec<f64>,
    pub global_beta: Vec<f64>,
    pub local_kernel: Vec<f64>,
    pub local_bias: Vec<f64>,
}

pub fn rhwd_backward(
    image: &FeatureMap,
    weights: &RhwdWeights,
    cache: &RhwdCache,
    grad_out: &FeatureMap,
) -> RhwdGrads {
    // Global branch.
    let mut grad_bn_out = grad_out.clone();
    grad_bn_out.data = silu_backward(&cache.global_pre_act.data, &grad_out.data);
    let bn_cache = cache
        .global_bn_cache
        .as_ref()
        .expect("backward requires a training-mode cache");
    let (grad_conv_out, grad_gamma, grad_beta) =
        weights
            .global_bn
            .backward(&cache.global_pre_bn, bn_cache, &grad_bn_out);
    let (grad_image_global, global_kernel, global_bias) =
        weights.global_conv.backward(image, &grad_conv_out);

    // Local branch.
    let mut grad_local_pre = grad_out.clone();
    grad_local_pre.data = silu_backward(&cache.local_pre_act.data, &grad_out.data);
    let (grad_cat, local_kernel, local_bias) =
        weights.local_conv.backward(&cache.local_cat, &grad_local_pre);
    let grad_sub = split_subbands_grad(&grad_cat, image.c);
    let grad_image_local = haar_backward(&grad_sub);

    let mut grad_image = grad_image_global;
    for (g, l) in grad_image.data.iter_mut().zip(grad_image_local.data.iter()) {
        *g += l;
    }
    RhwdGrads {
        image: grad_image,
        global_kernel,
        global_bias,
        global_gamma: grad_gamma,
        global_beta: grad_beta,
        local_kernel,
        local_bias,
    }
}

/// Weights for the Focus ablation stem.
#[derive(Debug, Clone)]
pub struct FocusWeights {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl FocusWeights {
    pub fn new<R: Rng>(rng: &mut R, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(rng, out_c, 4 * in_c, 3, 3, 1, 1),
            bn: BatchNorm::new(out_c, 1e-5)?,
        })
    }
}

/// 2x2 pixel-unshuffle: channels x4, extents /2. Channel order is
/// (top-left, top-right, bottom-left, bottom-right) per input channel group.
pub fn space_to_depth(input: &FeatureMap) -> Result<FeatureMap> {
    if input.h % 2 != 0 || input.w % 2 != 0 {
        return Err(Error::Geometry(format!(
            "space_to_depth requires even extents, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = FeatureMap::zeros(input.b, 4 * input.c, oh, ow);
    for b in 0..input.b {
        for c in 0..input.c {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(b, c, y, x) = input.at(b, c, 2 * y, 2 * x);
                    *out.at_mut(b, input.c + c, y, x) = input.at(b, c, 2 * y, 2 * x + 1);
                    *out.at_mut(b, 2 * input.c + c, y, x) = input.at(b, c, 2 * y + 1, 2 * x);
                    *out.at_mut(b, 3 * input.c + c, y, x) = input.at(b, c, 2 * y + 1, 2 * x + 1);
                }
            }
        }
    }
    Ok(out)
}

pub fn space_to_depth_backward(grad_out: &FeatureMap, in_c: usize) -> FeatureMap {
    let (b, _, oh, ow) = grad_out.shape();
    let mut grad = FeatureMap::zeros(b, in_c, 2 * oh, 2 * ow);
    for bi in 0..b {
        for c in 0..in_c {
            for y in 0..oh {
                for x in 0..ow {
                    *grad.at_mut(bi, c, 2 * y, 2 * x) = grad_out.at(bi, c, y, x);
                    *grad.at_mut(bi, c, 2 * y, 2 * x + 1) = grad_out.at(bi, in_c + c, y, x);
                    *grad.at_mut(bi, c, 2 * y + 1, 2 * x) = grad_out.at(bi, 2 * in_c + c, y, x);
                    *grad.at_mut(bi, c, 2 * y + 1, 2 * x + 1) = grad_out.at(bi, 3 * in_c + c, y, x);
                }
            }
        }
    }
    grad
}

pub struct FocusCache {
    pub rearranged: FeatureMap,
    pub pre_bn: FeatureMap,
    pub bn_cache: Option<BatchNormCache>,
    pub pre_act: FeatureMap,
}

/// Focus stem: space-to-depth, then 3x3 conv + BN + SiLU to C_out.
pub fn focus_forward(
    image: &FeatureMap,
    weights: &mut FocusWeights,
    mode: StemMode,
) -> Result<FeatureMap> {
    focus_forward_cached(image, weights, mode).map(|(o, _)| o)
}

pub fn focus_forward_cached(
    image: &FeatureMap,
    weights: &mut FocusWeights,
    mode: StemMode,
) -> Result<(FeatureMap, FocusCache)> {
    let rearranged = space_to_depth(image)?;
    let pre_bn = weights.conv.forward(&rearranged)?;
    let (bn_out, bn_cache) = match mode {
        StemMode::Train => {
            let (o, c) = weights.bn.forward_train(&pre_bn)?;
            (o, Some(c))
        }
        StemMode::Infer => (weights.bn.forward_infer(&pre_bn)?, None),
    };
    let mut out = bn_out.clone();
    out.data = silu_forward(&bn_out.data);
    Ok((
        out,
        FocusCache {
            rearranged,
            pre_bn,
            bn_cache,
            pre_act: bn_out,
        },
    ))
}

pub struct FocusGrads {
    pub image: FeatureMap,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn focus_backward(
    image: &FeatureMap,
    weights: &FocusWeights,
    cache: &FocusCache,
    grad_out: &FeatureMap,
) -> FocusGrads {
    let mut grad_bn_out = grad_out.clone();
    grad_bn_out.data = silu_backward(&cache.pre_act.data, &grad_out.data);
    let bn_cache = cache
        .bn_cache
        .as_ref()
        .expect("backward requires a training-mode cache");
    let (grad_conv_out, gamma, beta) = weights.bn.backward(&cache.pre_bn, bn_cache, &grad_bn_out);
    let (grad_rearranged, kernel, bias) = weights.conv.backward(&cache.rearranged, &grad_conv_out);
    FocusGrads {
        image: space_to_depth_backward(&grad_rearranged, image.c),
        kernel,
        bias,
        gamma,
        beta,
    }
}
