//! Cross-scale hybrid attention: every P4 pixel queries a small set of
//! offset-predicted bilinear samples on the P3/P4/P5 pyramid, aggregated
//! with per-head softmax weights and fused residually into P4.

use rand::Rng;

use crate::ops::{softmax_backward_slice, softmax_slice, Conv2d, Linear};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Number of pyramid levels the module samples (P3, P4, P5).
pub const LEVELS: usize = 3;

#[derive(Debug, Clone)]
pub struct CshaWeights {
    /// Per-level 1x1 projections into the shared d_model space.
    pub proj3: Conv2d,
    pub proj4: Conv2d,
    pub proj5: Conv2d,
    /// (d_model + 2) -> M * L * K * 2; input is the query feature with the
    /// normalized reference point appended as positional encoding.
    pub offset_head: Linear,
    /// (d_model + 2) -> M * L * K.
    pub attn_head: Linear,
    /// d_model -> d_model output projection (C_out equals d_model).
    pub out_proj: Linear,
    pub heads: usize,
    pub points: usize,
    pub d_model: usize,
}

impl CshaWeights {
    /// Offset head starts at zero weights with a fixed radial bias pattern:
    /// K points at angles 2*pi*k/K, radius one pixel, rotated per head by
    /// pi*m/M, shared across levels.
    pub fn new<R: Rng>(
        rng: &mut R,
        c3: usize,
        c4: usize,
        c5: usize,
        d_model: usize,
        heads: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        if points == 0 {
            return Err(Error::Config("points per level must be positive".into()));
        }
        let mlk = heads * LEVELS * points;
        let mut offset_head = Linear::zeros(2 * mlk, d_model + 2);
        for m in 0..heads {
            let rot = std::f64::consts::PI * m as f64 / heads as f64;
            for l in 0..LEVELS {
                for k in 0..points {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / points as f64 + rot;
                    let base = 2 * ((m * LEVELS + l) * points + k);
                    offset_head.bias[base] = angle.cos();
                    offset_head.bias[base + 1] = angle.sin();
                }
            }
        }
        Ok(Self {
            proj3: Conv2d::new(rng, d_model, c3, 1, 1, 1, 0),
            proj4: Conv2d::new(rng, d_model, c4, 1, 1, 1, 0),
            proj5: Conv2d::new(rng, d_model, c5, 1, 1, 1, 0),
            offset_head,
            attn_head: Linear::new(rng, mlk, d_model + 2),
            out_proj: Linear::new(rng, d_model, d_model),
            heads,
            points,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Flat index of the sampling slot for head `m`, level `l`, point `k`.
    #[inline]
    pub fn sample_index(&self, m: usize, l: usize, k: usize) -> usize {
        (m * LEVELS + l) * self.points + k
    }
}

/// Normalized pixel-center reference points for a P4 grid, (x, y) in (0,1)^2,
/// row-major over (y, x).
#[derive(Debug, Clone)]
pub struct ReferenceGrid {
    pub points: Vec<(f64, f64)>,
    pub h: usize,
    pub w: usize,
}

pub fn reference_points(h4: usize, w4: usize) -> ReferenceGrid {
    let mut points = Vec::with_capacity(h4 * w4);
    for y in 0..h4 {
        for x in 0..w4 {
            points.push(((x as f64 + 0.5) / w4 as f64, (y as f64 + 0.5) / h4 as f64));
        }
    }
    ReferenceGrid { points, h: h4, w: w4 }
}

/// Predicted offsets (level-local pixels) and per-head attention simplices
/// for every query.
#[derive(Debug, Clone)]
pub struct OffsetsAndWeights {
    /// (b, q, m, l, k, 2) row-major; last axis is (dx, dy).
    pub offsets: Vec<f64>,
    /// (b, q, m, l*k) row-major softmax probabilities.
    pub attn: Vec<f64>,
    pub queries: usize,
}

/// Run the offset and attention heads over query tokens that already carry
/// the positional encoding (d_model + 2 channels).
pub fn predict_offsets_weights(
    query_tokens: &crate::tensor::TokenSequence,
    weights: &CshaWeights,
) -> Result<OffsetsAndWeights> {
    if query_tokens.c != weights.d_model + 2 {
        return Err(Error::Shape(format!(
            "query tokens have {} channels, expected d_model + 2 = {}",
            query_tokens.c,
            weights.d_model + 2
        )));
    }
    let mlk = weights.heads * LEVELS * weights.points;
    let lk = LEVELS * weights.points;
    let q_total = query_tokens.b * query_tokens.t;
    let mut offsets = vec![0.0; q_total * 2 * mlk];
    let mut attn = vec![0.0; q_total * mlk];
    let mut off_buf = vec![0.0; 2 * mlk];
    let mut logit_buf = vec![0.0; mlk];
    for b in 0..query_tokens.b {
        for t in 0..query_tokens.t {
            let base_in = (b * query_tokens.t + t) * query_tokens.c;
            let x = &query_tokens.data[base_in..base_in + query_tokens.c];
            weights.offset_head.apply(x, &mut off_buf);
            weights.attn_head.apply(x, &mut logit_buf);
            let qi = b * query_tokens.t + t;
            offsets[qi * 2 * mlk..(qi + 1) * 2 * mlk].copy_from_slice(&off_buf);
            for m in 0..weights.heads {
                let probs = softmax_slice(&logit_buf[m * lk..(m + 1) * lk]);
                attn[qi * mlk + m * lk..qi * mlk + (m + 1) * lk].copy_from_slice(&probs);
            }
        }
    }
    Ok(OffsetsAndWeights {
        offsets,
        attn,
        queries: query_tokens.t,
    })
}

fn check_pyramid(p3: &FeatureMap, p4: &FeatureMap, p5: &FeatureMap) -> Result<()> {
    if p3.h != 2 * p4.h || p3.w != 2 * p4.w {
        return Err(Error::Geometry(format!(
            "P3 extents {}x{} are not twice P4 extents {}x{}",
            p3.h, p3.w, p4.h, p4.w
        )));
    }
    if p4.h != 2 * p5.h || p4.w != 2 * p5.w {
        return Err(Error::Geometry(format!(
            "P4 extents {}x{} are not twice P5 extents {}x{}",
            p4.h, p4.w, p5.h, p5.w
        )));
    }
    if p3.b != p4.b || p4.b != p5.b {
        return Err(Error::Shape("pyramid batch sizes disagree".into()));
    }
    Ok(())
}

/// Bilinear sample of a channel range [c0, c1) with zero padding.
fn sample_slice(map: &FeatureMap, b: usize, x: f64, y: f64, c0: usize, c1: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = x - x0;
    let wy = y - y0;
    let corners = [
        (x0 as isize, y0 as isize, (1.0 - wx) * (1.0 - wy)),
        (x0 as isize + 1, y0 as isize, wx * (1.0 - wy)),
        (x0 as isize, y0 as isize + 1, (1.0 - wx) * wy),
        (x0 as isize + 1, y0 as isize + 1, wx * wy),
    ];
    for (cx, cy, weight) in corners {
        if weight == 0.0 || cx < 0 || cy < 0 || cx >= map.w as isize || cy >= map.h as isize {
            continue;
        }
        for c in c0..c1 {
            out[c - c0] += weight * map.at(b, c, cy as usize, cx as usize);
        }
    }
}

/// Backward of [`sample_slice`]: scatter into the map gradient and return
/// the coordinate gradients.
fn sample_slice_backward(
    map: &FeatureMap,
    grad_map: &mut FeatureMap,
    b: usize,
    x: f64,
    y: f64,
    c0: usize,
    c1: usize,
    grad_out: &[f64],
) -> (f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let wx = x - x0;
    let wy = y - y0;
    let corners = [
        (x0 as isize, y0 as isize, (1.0 - wx) * (1.0 - wy), -(1.0 - wy), -(1.0 - wx)),
        (x0 as isize + 1, y0 as isize, wx * (1.0 - wy), 1.0 - wy, -wx),
        (x0 as isize, y0 as isize + 1, (1.0 - wx) * wy, -wy, 1.0 - wx),
        (x0 as isize + 1, y0 as isize + 1, wx * wy, wy, wx),
    ];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (cx, cy, weight, dwdx, dwdy) in corners {
        if cx < 0 || cy < 0 || cx >= map.w as isize || cy >= map.h as isize {
            continue;
        }
        for c in c0..c1 {
            let g = grad_out[c - c0];
            if g == 0.0 {
                continue;
            }
            *grad_map.at_mut(b, c, cy as usize, cx as usize) += g * weight;
            let v = map.at(b, c, cy as usize, cx as usize);
            gx += g * v * dwdx;
            gy += g * v * dwdy;
        }
    }
    (gx, gy)
}

pub struct CshaCache {
    pub proj_maps: [FeatureMap; LEVELS],
    pub grid: ReferenceGrid,
    pub query_inputs: Vec<f64>,
    pub predictions: OffsetsAndWeights,
    /// Aggregated head-concat vectors before the output projection, (b*q, d).
    pub agg: Vec<f64>,
    pub pre_residual: FeatureMap,
}

/// Sampling location on level `l` for query reference point `(px, py)` and a
/// level-local pixel offset.
#[inline]
fn level_coords(px: f64, py: f64, w: f64, h: f64, dx: f64, dy: f64) -> (f64, f64) {
    (px * w - 0.5 + dx, py * h - 0.5 + dy)
}

pub fn csha_forward(
    p3: &FeatureMap,
    p4: &FeatureMap,
    p5: &FeatureMap,
    weights: &CshaWeights,
) -> Result<FeatureMap> {
    csha_forward_cached(p3, p4, p5, weights).map(|(o, _)| o)
}

pub fn csha_forward_cached(
    p3: &FeatureMap,
    p4: &FeatureMap,
    p5: &FeatureMap,
    weights: &CshaWeights,
) -> Result<(FeatureMap, CshaCache)> {
    check_pyramid(p3, p4, p5)?;
    let proj_maps = [
        weights.proj3.forward(p3)?,
        weights.proj4.forward(p4)?,
        weights.proj5.forward(p5)?,
    ];
    let grid = reference_points(p4.h, p4.w);
    let d = weights.d_model;
    let dh = weights.head_dim();
    let nq = grid.points.len();
    // Query tokens: proj4 features with the reference point appended.
    let mut query_inputs = vec![0.0; p4.b * nq * (d + 2)];
    for b in 0..p4.b {
        for (q, &(px, py)) in grid.points.iter().enumerate() {
            let (y, x) = (q / grid.w, q % grid.w);
            let base = (b * nq + q) * (d + 2);
            for c in 0..d {
                query_inputs[base + c] = proj_maps[1].at(b, c, y, x);
            }
            query_inputs[base + d] = px;
            query_inputs[base + d + 1] = py;
        }
    }
    let query_seq =
        crate::tensor::TokenSequence::from_vec(query_inputs.clone(), p4.b, nq, d + 2)?;
    let predictions = predict_offsets_weights(&query_seq, weights)?;

    let mlk = weights.heads * LEVELS * weights.points;
    let mut agg = vec![0.0; p4.b * nq * d];
    let mut sample_buf = vec![0.0; dh];
    for b in 0..p4.b {
        for (q, &(px, py)) in grid.points.iter().enumerate() {
            let qi = b * nq + q;
            let agg_base = qi * d;
            for m in 0..weights.heads {
                for l in 0..LEVELS {
                    let map = &proj_maps[l];
                    let (lw, lh) = (map.w as f64, map.h as f64);
                    for k in 0..weights.points {
                        let s = weights.sample_index(m, l, k);
                        let dx = predictions.offsets[qi * 2 * mlk + 2 * s];
                        let dy = predictions.offsets[qi * 2 * mlk + 2 * s + 1];
                        let a = predictions.attn[qi * mlk + s];
                        let (sx, sy) = level_coords(px, py, lw, lh, dx, dy);
                        sample_slice(map, b, sx, sy, m * dh, (m + 1) * dh, &mut sample_buf);
                        for dd in 0..dh {
                            agg[agg_base + m * dh + dd] += a * sample_buf[dd];
                        }
                    }
                }
            }
        }
    }

    let mut pre_residual = FeatureMap::zeros(p4.b, d, p4.h, p4.w);
    let mut out = FeatureMap::zeros(p4.b, d, p4.h, p4.w);
    let mut out_buf = vec![0.0; d];
    for b in 0..p4.b {
        for q in 0..nq {
            let (y, x) = (q / grid.w, q % grid.w);
            let qi = b * nq + q;
            weights.out_proj.apply(&agg[qi * d..(qi + 1) * d], &mut out_buf);
            for c in 0..d {
                *pre_residual.at_mut(b, c, y, x) = out_buf[c];
                *out.at_mut(b, c, y, x) = out_buf[c] + proj_maps[1].at(b, c, y, x);
            }
        }
    }
    Ok((
        out,
        CshaCache {
            proj_maps,
            grid,
            query_inputs,
            predictions,
            agg,
            pre_residual,
        },
    ))
}

pub struct CshaGrads {
    pub p3: FeatureMap,
    pub p4: FeatureMap,
    pub p5: FeatureMap,
    pub proj3: (Vec<f64>, Vec<f64>),
    pub proj4: (Vec<f64>, Vec<f64>),
    pub proj5: (Vec<f64>, Vec<f64>),
    pub offset_head: (Vec<f64>, Vec<f64>),
    pub attn_head: (Vec<f64>, Vec<f64>),
    pub out_proj: (Vec<f64>, Vec<f64>),
}

pub fn csha_backward(
    p3: &FeatureMap,
    p4: &FeatureMap,
    p5: &FeatureMap,
    weights: &CshaWeights,
    cache: &CshaCache,
    grad_out: &FeatureMap,
) -> CshaGrads {
    let d = weights.d_model;
    let dh = weights.head_dim();
    let nq = cache.grid.points.len();
    let mlk = weights.heads * LEVELS * weights.points;
    let lk = LEVELS * weights.points;

    let mut grad_proj = [
        FeatureMap::zeros(p3.b, d, p3.h, p3.w),
        FeatureMap::zeros(p4.b, d, p4.h, p4.w),
        FeatureMap::zeros(p5.b, d, p5.h, p5.w),
    ];
    let mut g_out_proj_w = vec![0.0; weights.out_proj.weight.len()];
    let mut g_out_proj_b = vec![0.0; weights.out_proj.bias.len()];
    let mut g_offset_w = vec![0.0; weights.offset_head.weight.len()];
    let mut g_offset_b = vec![0.0; weights.offset_head.bias.len()];
    let mut g_attn_w = vec![0.0; weights.attn_head.weight.len()];
    let mut g_attn_b = vec![0.0; weights.attn_head.bias.len()];

    let mut grad_agg = vec![0.0; d];
    let mut grad_query = vec![0.0; d + 2];
    let mut sample_buf = vec![0.0; dh];
    let mut slice_grad = vec![0.0; dh];
    let mut grad_offsets = vec![0.0; 2 * mlk];
    let mut grad_attn_probs = vec![0.0; mlk];
    for b in 0..p4.b {
        for (q, &(px, py)) in cache.grid.points.iter().enumerate() {
            let (y, x) = (q / cache.grid.w, q % cache.grid.w);
            let qi = b * nq + q;
            let g_vec: Vec<f64> = (0..d).map(|c| grad_out.at(b, c, y, x)).collect();

            // Residual path into the P4 projection.
            for c in 0..d {
                *grad_proj[1].at_mut(b, c, y, x) += g_vec[c];
            }
            // Output projection.
            grad_agg.iter_mut().for_each(|v| *v = 0.0);
            weights.out_proj.apply_backward(
                &cache.agg[qi * d..(qi + 1) * d],
                &g_vec,
                &mut grad_agg,
                &mut g_out_proj_w,
                &mut g_out_proj_b,
            );

            // Sampling and attention weights.
            grad_offsets.iter_mut().for_each(|v| *v = 0.0);
            grad_attn_probs.iter_mut().for_each(|v| *v = 0.0);
            for m in 0..weights.heads {
                for l in 0..LEVELS {
                    let map = &cache.proj_maps[l];
                    let (lw, lh) = (map.w as f64, map.h as f64);
                    for k in 0..weights.points {
                        let s = weights.sample_index(m, l, k);
                        let dx = cache.predictions.offsets[qi * 2 * mlk + 2 * s];
                        let dy = cache.predictions.offsets[qi * 2 * mlk + 2 * s + 1];
                        let a = cache.predictions.attn[qi * mlk + s];
                        let (sx, sy) = level_coords(px, py, lw, lh, dx, dy);
                        sample_slice(map, b, sx, sy, m * dh, (m + 1) * dh, &mut sample_buf);
                        let mut dot = 0.0;
                        for dd in 0..dh {
                            let g = grad_agg[m * dh + dd];
                            dot += g * sample_buf[dd];
                            slice_grad[dd] = a * g;
                        }
                        grad_attn_probs[s] = dot;
                        let (gx, gy) = sample_slice_backward(
                            map,
                            &mut grad_proj[l],
                            b,
                            sx,
                            sy,
                            m * dh,
                            (m + 1) * dh,
                            &slice_grad,
                        );
                        grad_offsets[2 * s] = gx;
                        grad_offsets[2 * s + 1] = gy;
                    }
                }
            }
            // Softmax backward per head over the joint L*K axis.
            let mut grad_attn_logits = vec![0.0; mlk];
            for m in 0..weights.heads {
                let probs = &cache.predictions.attn[qi * mlk + m * lk..qi * mlk + (m + 1) * lk];
                let dl = softmax_backward_slice(probs, &grad_attn_probs[m * lk..(m + 1) * lk]);
                grad_attn_logits[m * lk..(m + 1) * lk].copy_from_slice(&dl);
            }

            // Offset and attention heads back to the query input.
            grad_query.iter_mut().for_each(|v| *v = 0.0);
            let q_in = &cache.query_inputs[qi * (d + 2)..(qi + 1) * (d + 2)];
            weights.offset_head.apply_backward(
                q_in,
                &grad_offsets,
                &mut grad_query,
                &mut g_offset_w,
                &mut g_offset_b,
            );
            weights.attn_head.apply_backward(
                q_in,
                &grad_attn_logits,
                &mut grad_query,
                &mut g_attn_w,
                &mut g_attn_b,
            );
            // First d entries flow into the P4 projection; the appended
            // reference point is a constant.
            for c in 0..d {
                *grad_proj[1].at_mut(b, c, y, x) += grad_query[c];
            }
        }
    }

    let (g_p3, k3, b3) = weights.proj3.backward(p3, &grad_proj[0]);
    let (g_p4, k4, b4) = weights.proj4.backward(p4, &grad_proj[1]);
    let (g_p5, k5, b5) = weights.proj5.backward(p5, &grad_proj[2]);
    CshaGrads {
        p3: g_p3,
        p4: g_p4,
        p5: g_p5,
        proj3: (k3, b3),
        proj4: (k4, b4),
        proj5: (k5, b5),
        offset_head: (g_offset_w, g_offset_b),
        attn_head: (g_attn_w, g_attn_b),
        out_proj: (g_out_proj_w, g_out_proj_b),
    }
}

/// Dense alternative used only for verification and complexity comparison:
/// the same per-query weights are materialized onto every pixel of every
/// level (scattering each sample through its bilinear kernel) and the
/// output is aggregated over the full grids.
///
/// Returns the output map and, per (batch, query, head), the dense row sum.
pub fn csha_dense_oracle(
    p3: &FeatureMap,
    p4: &FeatureMap,
    p5: &FeatureMap,
    weights: &CshaWeights,
) -> Result<(FeatureMap, Vec<f64>)> {
    check_pyramid(p3, p4, p5)?;
    let (_, cache) = csha_forward_cached(p3, p4, p5, weights)?;
    let d = weights.d_model;
    let dh = weights.head_dim();
    let nq = cache.grid.points.len();
    let mlk = weights.heads * LEVELS * weights.points;
    let mut out = FeatureMap::zeros(p4.b, d, p4.h, p4.w);
    let mut row_sums = Vec::with_capacity(p4.b * nq * weights.heads);
    let mut out_buf = vec![0.0; d];
    for b in 0..p4.b {
        for (q, &(px, py)) in cache.grid.points.iter().enumerate() {
            let (y, x) = (q / cache.grid.w, q % cache.grid.w);
            let qi = b * nq + q;
            let mut agg = vec![0.0; d];
            for m in 0..weights.heads {
                // Dense weight map per level.
                let mut dense: [Vec<f64>; LEVELS] = [
                    vec![0.0; p3.h * p3.w],
                    vec![0.0; p4.h * p4.w],
                    vec![0.0; p5.h * p5.w],
                ];
                for l in 0..LEVELS {
                    let map = &cache.proj_maps[l];
                    let (lw, lh) = (map.w as f64, map.h as f64);
                    for k in 0..weights.points {
                        let s = weights.sample_index(m, l, k);
                        let dx = cache.predictions.offsets[qi * 2 * mlk + 2 * s];
                        let dy = cache.predictions.offsets[qi * 2 * mlk + 2 * s + 1];
                        let a = cache.predictions.attn[qi * mlk + s];
                        let (sx, sy) = level_coords(px, py, lw, lh, dx, dy);
                        let x0 = sx.floor();
                        let y0 = sy.floor();
                        let wx = sx - x0;
                        let wy = sy - y0;
                        let corners = [
                            (x0 as isize, y0 as isize, (1.0 - wx) * (1.0 - wy)),
                            (x0 as isize + 1, y0 as isize, wx * (1.0 - wy)),
                            (x0 as isize, y0 as isize + 1, (1.0 - wx) * wy),
                            (x0 as isize + 1, y0 as isize + 1, wx * wy),
                        ];
                        for (cx, cy, weight) in corners {
                            if cx >= 0 && cy >= 0 && cx < map.w as isize && cy < map.h as isize {
                                dense[l][cy as usize * map.w + cx as usize] += a * weight;
                            }
                        }
                    }
                }
                let mut row_sum = 0.0;
                for l in 0..LEVELS {
                    let map = &cache.proj_maps[l];
                    for py_i in 0..map.h {
                        for px_i in 0..map.w {
                            let wgt = dense[l][py_i * map.w + px_i];
                            if wgt == 0.0 {
                                continue;
                            }
                            row_sum += wgt;
                            for dd in 0..dh {
                                agg[m * dh + dd] += wgt * map.at(b, m * dh + dd, py_i, px_i);
                            }
                        }
                    }
                }
                row_sums.push(row_sum);
            }
            weights.out_proj.apply(&agg, &mut out_buf);
            for c in 0..d {
                *out.at_mut(b, c, y, x) = out_buf[c] + cache.proj_maps[1].at(b, c, y, x);
            }
        }
    }
    Ok((out, row_sums))
}

/// Pyramid geometry for the analytic FLOP counters.
#[derive(Debug, Clone, Copy)]
pub struct CshaGeometry {
    pub h4: usize,
    pub w4: usize,
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
}

impl CshaGeometry {
    pub fn for_input(size: usize, d_model: usize, heads: usize, points: usize) -> Self {
        Self {
            h4: size / 16,
            w4: size / 16,
            d_model,
            heads,
            points,
        }
    }

    fn queries(&self) -> u64 {
        (self.h4 * self.w4) as u64
    }

    /// Total pixels across P3/P4/P5.
    fn grid_pixels(&self) -> u64 {
        let q = self.h4 as u64 * self.w4 as u64;
        4 * q + q + q / 4
    }

    fn shared_per_query(&self) -> u64 {
        let d = self.d_model as u64;
        let mlk = (self.heads * LEVELS * self.points) as u64;
        // Offset + attention heads, then the output projection; two FLOPs
        // per multiply-accumulate.
        2 * (d + 2) * (2 * mlk) + 2 * (d + 2) * mlk + 2 * d * d
    }

    /// FLOPs of the sparse path: shared heads plus bilinear sampling of
    /// M*L*K points (4 corners) and the per-sample weighting.
    pub fn flops_sparse(&self) -> u64 {
        let dh = (self.d_model / self.heads) as u64;
        let mlk = (self.heads * LEVELS * self.points) as u64;
        let per_query = self.shared_per_query() + mlk * (8 * dh + 2 * dh);
        self.queries() * per_query
    }

    /// FLOPs of the dense alternative: shared heads plus scattering the
    /// weights onto the full grids and aggregating over every pixel of
    /// every level.
    pub fn flops_dense(&self) -> u64 {
        let dh = (self.d_model / self.heads) as u64;
        let mlk = (self.heads * LEVELS * self.points) as u64;
        let scatter = mlk * 8;
        let full_agg = self.grid_pixels() * 2 * dh * self.heads as u64;
        let per_query = self.shared_per_query() + scatter + full_agg;
        self.queries() * per_query
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TokenSequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_pyramid(rng: &mut ChaCha8Rng, b: usize) -> (FeatureMap, FeatureMap, FeatureMap) {
        (
            FeatureMap::random(rng, b, 6, 8, 8, -1.0, 1.0),
            FeatureMap::random(rng, b, 10, 4, 4, -1.0, 1.0),
            FeatureMap::random(rng, b, 12, 2, 2, -1.0, 1.0),
        )
    }

    #[test]
    fn reference_points_pixel_center() {
        let grid = reference_points(2, 2);
        assert_eq!(
            grid.points,
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
        let grid = reference_points(1, 1);
        assert_eq!(grid.points, vec![(0.5, 0.5)]);
        for (h, w) in [(3, 7), (16, 16), (1, 5)] {
            for &(px, py) in &reference_points(h, w).points {
                assert!(px > 0.0 && px < 1.0 && py > 0.0 && py < 1.0);
            }
        }
    }

    #[test]
    fn zeroed_heads_give_zero_offsets_and_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 2, 4).unwrap();
        w.offset_head.bias.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.bias.iter_mut().for_each(|v| *v = 0.0);
        let tokens = TokenSequence::random(&mut rng, 1, 3, 10, -1.0, 1.0);
        let queries = TokenSequence::from_vec(
            {
                let mut data = Vec::new();
                for t in 0..3 {
                    for c in 0..8 {
                        data.push(tokens.at(0, t, c % 10));
                    }
                    data.push(0.3);
                    data.push(0.7);
                }
                data
            },
            1,
            3,
            10,
        )
        .unwrap();
        let pred = predict_offsets_weights(&queries, &w).unwrap();
        assert!(pred.offsets.iter().all(|&v| v == 0.0));
        let lk = (LEVELS * 4) as f64;
        for a in &pred.attn {
            assert!((a - 1.0 / lk).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_a_simplex_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 4, 4).unwrap();
        let (p3, p4, p5) = small_pyramid(&mut rng, 2);
        let (_, cache) = csha_forward_cached(&p3, &p4, &p5, &w).unwrap();
        let mlk = 4 * LEVELS * 4;
        let lk = LEVELS * 4;
        let nq = 16;
        for qi in 0..2 * nq {
            for m in 0..4 {
                let row = &cache.predictions.attn[qi * mlk + m * lk..qi * mlk + (m + 1) * lk];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_equals_p4() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = CshaWeights::new(&mut rng, 32, 64, 128, 64, 8, 4).unwrap();
        let p3 = FeatureMap::random(&mut rng, 1, 32, 16, 16, -1.0, 1.0);
        let p4 = FeatureMap::random(&mut rng, 1, 64, 8, 8, -1.0, 1.0);
        let p5 = FeatureMap::random(&mut rng, 1, 128, 4, 4, -1.0, 1.0);
        let out = csha_forward(&p3, &p4, &p5, &w).unwrap();
        assert_eq!(out.shape(), (1, 64, 8, 8));
    }

    #[test]
    fn pyramid_violation_is_geometry_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 2, 4).unwrap();
        let p3 = FeatureMap::zeros(1, 6, 7, 8);
        let p4 = FeatureMap::zeros(1, 10, 4, 4);
        let p5 = FeatureMap::zeros(1, 12, 2, 2);
        assert!(matches!(
            csha_forward(&p3, &p4, &p5, &w),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn one_hot_center_sample_recovers_projected_p4() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 2, 4).unwrap();
        // Zero offsets; attention one-hot on level index 1 (P4), point 0.
        w.offset_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.offset_head.bias.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.bias.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..2 {
            let s = w.sample_index(m, 1, 0);
            w.attn_head.bias[s] = 1e4;
        }
        let (p3, p4, p5) = small_pyramid(&mut rng, 1);
        let (_, cache) = csha_forward_cached(&p3, &p4, &p5, &w).unwrap();
        // Pre-residual output must equal out_proj(proj4 pixel) everywhere.
        let mut buf = vec![0.0; 8];
        for q in 0..16 {
            let (y, x) = (q / 4, q % 4);
            let z: Vec<f64> = (0..8).map(|c| cache.proj_maps[1].at(0, c, y, x)).collect();
            w.out_proj.apply(&z, &mut buf);
            for c in 0..8 {
                assert!((cache.pre_residual.at(0, c, y, x) - buf[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_offsets_uniform_attention_matches_mean_of_reference_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 2, 4).unwrap();
        w.offset_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.offset_head.bias.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.attn_head.bias.iter_mut().for_each(|v| *v = 0.0);
        let (p3, p4, p5) = small_pyramid(&mut rng, 1);
        let (_, cache) = csha_forward_cached(&p3, &p4, &p5, &w).unwrap();
        let dh = 4;
        // Direct loop oracle: mean over L*K reference-point samples per head.
        for q in 0..16 {
            let (px, py) = cache.grid.points[q];
            let mut expect = vec![0.0; 8];
            let mut buf = vec![0.0; dh];
            for m in 0..2 {
                for l in 0..LEVELS {
                    let map = &cache.proj_maps[l];
                    let (sx, sy) = (px * map.w as f64 - 0.5, py * map.h as f64 - 0.5);
                    sample_slice(map, 0, sx, sy, m * dh, (m + 1) * dh, &mut buf);
                    for dd in 0..dh {
                        // K identical samples per level, uniform 1/(L*K) each.
                        expect[m * dh + dd] += buf[dd] / LEVELS as f64;
                    }
                }
            }
            let qd = &cache.agg[q * 8..(q + 1) * 8];
            for c in 0..8 {
                assert!((qd[c] - expect[c]).abs() < 1e-10, "q={q} c={c}");
            }
        }
    }

    #[test]
    fn dense_oracle_agrees_on_degenerate_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut w = CshaWeights::new(&mut rng, 3, 4, 5, 8, 2, 2).unwrap();
        // Zero offsets keep every bilinear kernel fully in-bounds, so the
        // dense row sums must be exactly the simplex mass.
        w.offset_head.weight.iter_mut().for_each(|v| *v = 0.0);
        w.offset_head.bias.iter_mut().for_each(|v| *v = 0.0);
        let p3 = FeatureMap::random(&mut rng, 1, 3, 4, 4, -1.0, 1.0);
        let p4 = FeatureMap::random(&mut rng, 1, 4, 2, 2, -1.0, 1.0);
        let p5 = FeatureMap::random(&mut rng, 1, 5, 1, 1, -1.0, 1.0);
        let sparse = csha_forward(&p3, &p4, &p5, &w).unwrap();
        let (dense, row_sums) = csha_dense_oracle(&p3, &p4, &p5, &w).unwrap();
        for (a, b) in sparse.data.iter().zip(dense.data.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Boundary queries lose the out-of-bounds share of their bilinear
        // kernels, so the dense rows carry at most the simplex mass.
        for s in row_sums {
            assert!(s > 0.0 && s <= 1.0 + 1e-10);
        }
    }

    #[test]
    fn sparse_flops_below_dense_for_harness_geometries() {
        for size in [64usize, 96, 128, 160, 192, 224, 256] {
            let geom = CshaGeometry::for_input(size, 32, 8, 4);
            assert!(
                geom.flops_sparse() < geom.flops_dense(),
                "size {size}: sparse {} vs dense {}",
                geom.flops_sparse(),
                geom.flops_dense()
            );
        }
    }

    #[test]
    fn translation_consistency_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut w = CshaWeights::new(&mut rng, 6, 10, 12, 8, 2, 4).unwrap();
        // The positional-encoding columns tie predictions to absolute
        // coordinates; zero them so the sampling machinery itself is under
        // test.
        let d = 8;
        for o in 0..w.offset_head.out_c {
            for i in d..d + 2 {
                w.offset_head.weight[o * (d + 2) + i] = 0.0;
            }
        }
        for o in 0..w.attn_head.out_c {
            for i in d..d + 2 {
                w.attn_head.weight[o * (d + 2) + i] = 0.0;
            }
        }
        let p3 = FeatureMap::random(&mut rng, 1, 6, 16, 16, -1.0, 1.0);
        let p4 = FeatureMap::random(&mut rng, 1, 10, 8, 8, -1.0, 1.0);
        let p5 = FeatureMap::random(&mut rng, 1, 12, 4, 4, -1.0, 1.0);
        // Shift every level right by its stride-scaled amount: P4 by 2
        // pixels, P3 by 4, P5 by 1.
        let shift = |m: &FeatureMap, s: usize| {
            let mut out = FeatureMap::zeros(m.b, m.c, m.h, m.w);
            for c in 0..m.c {
                for y in 0..m.h {
                    for x in s..m.w {
                        *out.at_mut(0, c, y, x) = m.at(0, c, y, x - s);
                    }
                }
            }
            out
        };
        let (_, base) = csha_forward_cached(&p3, &p4, &p5, &w).unwrap();
        let (_, shifted) =
            csha_forward_cached(&shift(&p3, 4), &shift(&p4, 2), &shift(&p5, 1), &w).unwrap();
        // Compare queries whose shifted sample footprints stay inside every
        // level. The binding constraint is the 4x4 P5 grid: a query column
        // x needs px*4 - 0.5 + shift + offset-radius to stay below 3, which
        // limits the comparison to x <= 2. Row-direction edge losses are
        // identical on both sides and cancel.
        for c in 0..8 {
            for y in 0..8 {
                for x in 0..3 {
                    let a = base.pre_residual.at(0, c, y, x);
                    let b = shifted.pre_residual.at(0, c, y, x + 2);
                    assert!((a - b).abs() < 1e-6, "c={c} y={y} x={x}: {a} vs {b}");
                }
            }
        }
    }
}
