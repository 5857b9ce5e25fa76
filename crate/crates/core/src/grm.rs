//! Global relation modeling over flattened P5 tokens: learnable positional
//! embedding, layer normalization, multi-head self-attention and a residual
//! connection. A plain-MHSA variant (no embedding, no normalization) covers
//! the ablation axis.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{softmax_backward_slice, softmax_slice, LayerNorm, LayerNormCache, Linear};
use crate::tensor::{FeatureMap, TokenSequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrmVariant {
    /// Positional embedding + layer norm + MHSA + residual.
    Grm,
    /// MHSA + residual only.
    PlainMhsa,
}

#[derive(Debug, Clone)]
pub struct GrmWeights {
    /// (tokens, channels), added to the flattened P5 sequence.
    pub e_pos: Vec<f64>,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub tokens: usize,
    pub channels: usize,
}

impl GrmWeights {
    pub fn new<R: Rng>(rng: &mut R, tokens: usize, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} must be a positive multiple of heads {heads}"
            )));
        }
        let pos = Normal::new(0.0, 0.02).unwrap();
        Ok(Self {
            e_pos: (0..tokens * channels).map(|_| pos.sample(rng)).collect(),
            w_q: Linear::new(rng, channels, channels),
            w_k: Linear::new(rng, channels, channels),
            w_v: Linear::new(rng, channels, channels),
            w_o: Linear::new(rng, channels, channels),
            norm: LayerNorm::new(channels, 1e-5)?,
            heads,
            tokens,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Flatten P5 row-major, add E_pos and layer-normalize.
pub fn flatten_with_pos(p5: &FeatureMap, weights: &GrmWeights) -> Result<TokenSequence> {
    let (seq, _, _) = flatten_with_pos_cached(p5, weights)?;
    Ok(seq)
}

fn flatten_with_pos_cached(
    p5: &FeatureMap,
    weights: &GrmWeights,
) -> Result<(TokenSequence, TokenSequence, LayerNormCache)> {
    let mut seq = p5.to_tokens();
    if seq.t != weights.tokens {
        return Err(Error::Geometry(format!(
            "P5 has {} tokens but E_pos holds {}",
            seq.t, weights.tokens
        )));
    }
    if seq.c != weights.channels {
        return Err(Error::Shape(format!(
            "P5 has {} channels, weights expect {}",
            seq.c, weights.channels
        )));
    }
    for b in 0..seq.b {
        for t in 0..seq.t {
            for c in 0..seq.c {
                *seq.at_mut(b, t, c) += weights.e_pos[t * weights.channels + c];
            }
        }
    }
    let (normed, ln_cache) = weights.norm.forward(&seq)?;
    Ok((normed, seq, ln_cache))
}

/// Intermediates saved by [`mhsa_cached`] for the backward pass.
pub struct MhsaCache {
    pub q: TokenSequence,
    pub k: TokenSequence,
    pub v: TokenSequence,
    /// Per (batch, head): row-major (query, key) attention probabilities.
    pub probs: Vec<Vec<f64>>,
    /// Concatenated head outputs before the output projection.
    pub heads_out: TokenSequence,
}

/// Multi-head self-attention: per head softmax(Q K^T / sqrt(d)) V, heads
/// concatenated then projected by W_O.
pub fn mhsa(seq: &TokenSequence, weights: &GrmWeights) -> Result<TokenSequence> {
    mhsa_cached(seq, weights).map(|(o, _)| o)
}

pub fn mhsa_cached(seq: &TokenSequence, weights: &GrmWeights) -> Result<(TokenSequence, MhsaCache)> {
    let q = weights.w_q.forward(seq)?;
    let k = weights.w_k.forward(seq)?;
    let v = weights.w_v.forward(seq)?;
    let dh = weights.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = seq.t;
    let mut heads_out = TokenSequence::zeros(seq.b, t, seq.c);
    let mut probs = Vec::with_capacity(seq.b * weights.heads);
    for b in 0..seq.b {
        for head in 0..weights.heads {
            let c0 = head * dh;
            let mut head_probs = vec![0.0; t * t];
            for tq in 0..t {
                let mut logits = vec![0.0; t];
                for tk in 0..t {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q.at(b, tq, c0 + d) * k.at(b, tk, c0 + d);
                    }
                    logits[tk] = dot * scale;
                }
                let row = softmax_slice(&logits);
                for tk in 0..t {
                    head_probs[tq * t + tk] = row[tk];
                    for d in 0..dh {
                        *heads_out.at_mut(b, tq, c0 + d) += row[tk] * v.at(b, tk, c0 + d);
                    }
                }
            }
            probs.push(head_probs);
        }
    }
    let out = weights.w_o.forward(&heads_out)?;
    Ok((
        out,
        MhsaCache {
            q,
            k,
            v,
            probs,
            heads_out,
        },
    ))
}

/// Gradients of [`mhsa_cached`] with respect to the input sequence and the
/// four projections.
pub struct MhsaGrads {
    pub seq: TokenSequence,
    pub w_q: (Vec<f64>, Vec<f64>),
    pub w_k: (Vec<f64>, Vec<f64>),
    pub w_v: (Vec<f64>, Vec<f64>),
    pub w_o: (Vec<f64>, Vec<f64>),
}

pub fn mhsa_backward(
    seq: &TokenSequence,
    weights: &GrmWeights,
    cache: &MhsaCache,
    grad_out: &TokenSequence,
) -> MhsaGrads {
    let (grad_heads_out, wo_w, wo_b) = weights.w_o.backward(&cache.heads_out, grad_out);
    let dh = weights.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t = seq.t;
    let mut grad_q = TokenSequence::zeros(seq.b, t, seq.c);
    let mut grad_k = TokenSequence::zeros(seq.b, t, seq.c);
    let mut grad_v = TokenSequence::zeros(seq.b, t, seq.c);
    for b in 0..seq.b {
        for head in 0..weights.heads {
            let c0 = head * dh;
            let probs = &cache.probs[b * weights.heads + head];
            for tq in 0..t {
                let row = &probs[tq * t..(tq + 1) * t];
                // dV and dP.
                let mut dprobs = vec![0.0; t];
                for tk in 0..t {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        let g = grad_heads_out.at(b, tq, c0 + d);
                        *grad_v.at_mut(b, tk, c0 + d) += row[tk] * g;
                        dot += g * cache.v.at(b, tk, c0 + d);
                    }
                    dprobs[tk] = dot;
                }
                let dlogits = softmax_backward_slice(row, &dprobs);
                for tk in 0..t {
                    let dl = dlogits[tk] * scale;
                    for d in 0..dh {
                        *grad_q.at_mut(b, tq, c0 + d) += dl * cache.k.at(b, tk, c0 + d);
                        *grad_k.at_mut(b, tk, c0 + d) += dl * cache.q.at(b, tq, c0 + d);
                    }
                }
            }
        }
    }
    let (gs_q, wq_w, wq_b) = weights.w_q.backward(seq, &grad_q);
    let (gs_k, wk_w, wk_b) = weights.w_k.backward(seq, &grad_k);
    let (gs_v, wv_w, wv_b) = weights.w_v.backward(seq, &grad_v);
    let mut grad_seq = gs_q;
    for (g, (a, b)) in grad_seq
        .data
        .iter_mut()
        .zip(gs_k.data.iter().zip(gs_v.data.iter()))
    {
        *g += a + b;
    }
    MhsaGrads {
        seq: grad_seq,
        w_q: (wq_w, wq_b),
        w_k: (wk_w, wk_b),
        w_v: (wv_w, wv_b),
        w_o: (wo_w, wo_b),
    }
}

pub struct GrmCache {
    variant: GrmVariant,
    /// Tokens entering the attention core (normed for Grm, raw for plain).
    attn_input: TokenSequence,
    /// Tokens after E_pos addition, before layer norm (Grm only).
    with_pos: Option<TokenSequence>,
    ln_cache: Option<LayerNormCache>,
    mhsa_cache: MhsaCache,
}

/// Residual attention block over P5; output shape equals input shape.
pub fn grm_forward(p5: &FeatureMap, weights: &GrmWeights, variant: GrmVariant) -> Result<FeatureMap> {
    grm_forward_cached(p5, weights, variant).map(|(o, _)| o)
}

pub fn grm_forward_cached(
    p5: &FeatureMap,
    weights: &GrmWeights,
    variant: GrmVariant,
) -> Result<(FeatureMap, GrmCache)> {
    let (attn_input, with_pos, ln_cache) = match variant {
        GrmVariant::Grm => {
            let (normed, with_pos, ln_cache) = flatten_with_pos_cached(p5, weights)?;
            (normed, Some(with_pos), Some(ln_cache))
        }
        GrmVariant::PlainMhsa => (p5.to_tokens(), None, None),
    };
    let (attn_out, mhsa_cache) = mhsa_cached(&attn_input, weights)?;
    let mut out = attn_out.to_map(p5.h, p5.w)?;
    for (o, r) in out.data.iter_mut().zip(p5.data.iter()) {
        *o += r;
    }
    Ok((
        out,
        GrmCache {
            variant,
            attn_input,
            with_pos,
            ln_cache,
            mhsa_cache,
        },
    ))
}

pub struct GrmGrads {
    pub p5: FeatureMap,
    pub e_pos: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mhsa: MhsaGrads,
}

pub fn grm_backward(
    p5: &FeatureMap,
    weights: &GrmWeights,
    cache: &GrmCache,
    grad_out: &FeatureMap,
) -> GrmGrads {
    let grad_tokens = grad_out.to_tokens();
    let mhsa_grads = mhsa_backward(&cache.attn_input, weights, &cache.mhsa_cache, &grad_tokens);
    let (grad_pre_attn, e_pos, gamma, beta) = match cache.variant {
        GrmVariant::Grm => {
            let with_pos = cache.with_pos.as_ref().unwrap();
            let ln_cache = cache.ln_cache.as_ref().unwrap();
            let (grad_with_pos, gamma, beta) = weights.norm.backward(with_pos, ln_cache, &mhsa_grads.seq);
            let mut e_pos = vec![0.0; weights.e_pos.len()];
            for b in 0..grad_with_pos.b {
                for t in 0..grad_with_pos.t {
                    for c in 0..grad_with_pos.c {
                        e_pos[t * weights.channels + c] += grad_with_pos.at(b, t, c);
                    }
                }
            }
            (grad_with_pos, e_pos, gamma, beta)
        }
        GrmVariant::PlainMhsa => (
            mhsa_grads.seq.clone(),
            vec![0.0; weights.e_pos.len()],
            vec![0.0; weights.norm.gamma.len()],
            vec![0.0; weights.norm.beta.len()],
        ),
    };
    let mut grad_p5 = grad_pre_attn.to_map(p5.h, p5.w).expect("shape preserved");
    // Residual path.
    for (g, r) in grad_p5.data.iter_mut().zip(grad_out.data.iter()) {
        *g += r;
    }
    GrmGrads {
        p5: grad_p5,
        e_pos,
        gamma,
        beta,
        mhsa: mhsa_grads,
    }
}
