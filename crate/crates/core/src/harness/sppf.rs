//! Spatial-pyramid-pooling-fast block: 1x1 reduce, three chained 5x5
//! stride-1 max pools, concatenation, 1x1 expand. Resolution-preserving.

use rand::Rng;

use crate::ops::{max_pool_backward, max_pool_forward, Conv2d, MaxPoolCache};
use crate::tensor::FeatureMap;
use crate::Result;

#[derive(Debug, Clone)]
pub struct SppfWeights {
    /// 1x1 reduce to half the input channels.
    pub reduce: Conv2d,
    /// 1x1 expand from the 4-way concat back to the output channels.
    pub expand: Conv2d,
}

impl SppfWeights {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        Self {
            reduce: Conv2d::new(rng, mid, channels, 1, 1, 1, 0),
            expand: Conv2d::new(rng, channels, 4 * mid, 1, 1, 1, 0),
        }
    }

    pub fn mid_channels(&self) -> usize {
        self.reduce.out_c
    }
}

pub struct SppfCache {
    pub reduced: FeatureMap,
    pub pools: [FeatureMap; 3],
    pub pool_caches: [MaxPoolCache; 3],
    pub concat: FeatureMap,
}

fn concat_channels(maps: &[&FeatureMap]) -> FeatureMap {
    let (b, h, w) = (maps[0].b, maps[0].h, maps[0].w);
    let c_total: usize = maps.iter().map(|m| m.c).sum();
    let mut out = FeatureMap::zeros(b, c_total, h, w);
    for bi in 0..b {
        let mut c_off = 0;
        for m in maps {
            for c in 0..m.c {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(bi, c_off + c, y, x) = m.at(bi, c, y, x);
                    }
                }
            }
            c_off += m.c;
        }
    }
    out
}

pub fn sppf_forward(input: &FeatureMap, weights: &SppfWeights) -> Result<FeatureMap> {
    sppf_forward_cached(input, weights).map(|(o, _)| o)
}

pub fn sppf_forward_cached(
    input: &FeatureMap,
    weights: &SppfWeights,
) -> Result<(FeatureMap, SppfCache)> {
    let reduced = weights.reduce.forward(input)?;
    let (p1, c1) = max_pool_forward(&reduced, 5, 1, 2)?;
    let (p2, c2) = max_pool_forward(&p1, 5, 1, 2)?;
    let (p3, c3) = max_pool_forward(&p2, 5, 1, 2)?;
    let concat = concat_channels(&[&reduced, &p1, &p2, &p3]);
    let out = weights.expand.forward(&concat)?;
    Ok((
        out,
        SppfCache {
            reduced,
            pools: [p1, p2, p3],
            pool_caches: [c1, c2, c3],
            concat,
        },
    ))
}

pub struct SppfGrads {
    pub input: FeatureMap,
    pub reduce: (Vec<f64>, Vec<f64>),
    pub expand: (Vec<f64>, Vec<f64>),
}

pub fn sppf_backward(
    input: &FeatureMap,
    weights: &SppfWeights,
    cache: &SppfCache,
    grad_out: &FeatureMap,
) -> SppfGrads {
    let (grad_concat, expand_k, expand_b) = weights.expand.backward(&cache.concat, grad_out);
    let mid = weights.mid_channels();
    let (b, h, w) = (input.b, input.h, input.w);
    // Split the concat gradient back into the four branches.
    let mut grads = [
        FeatureMap::zeros(b, mid, h, w),
        FeatureMap::zeros(b, mid, h, w),
        FeatureMap::zeros(b, mid, h, w),
        FeatureMap::zeros(b, mid, h, w),
    ];
    for bi in 0..b {
        for (part, g) in grads.iter_mut().enumerate() {
            for c in 0..mid {
                for y in 0..h {
                    for x in 0..w {
                        *g.at_mut(bi, c, y, x) = grad_concat.at(bi, part * mid + c, y, x);
                    }
                }
            }
        }
    }
    let [g0, g1, g2, g3] = grads;
    // Walk the pooling chain backwards, accumulating the skip gradients.
    let gp = max_pool_backward(&cache.pools[1], &cache.pool_caches[2], &g3);
    let mut grad_p2 = g2;
    for (a, b) in grad_p2.data.iter_mut().zip(gp.data.iter()) {
        *a += b;
    }
    let gp = max_pool_backward(&cache.pools[0], &cache.pool_caches[1], &grad_p2);
    let mut grad_p1 = g1;
    for (a, b) in grad_p1.data.iter_mut().zip(gp.data.iter()) {
        *a += b;
    }
    let gp = max_pool_backward(&cache.reduced, &cache.pool_caches[0], &grad_p1);
    let mut grad_reduced = g0;
    for (a, b) in grad_reduced.data.iter_mut().zip(gp.data.iter()) {
        *a += b;
    }
    let (grad_input, reduce_k, reduce_b) = weights.reduce.backward(input, &grad_reduced);
    SppfGrads {
        input: grad_input,
        reduce: (reduce_k, reduce_b),
        expand: (expand_k, expand_b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let w = SppfWeights::new(&mut rng, 24);
        let input = FeatureMap::random(&mut rng, 2, 24, 4, 4, -1.0, 1.0);
        let out = sppf_forward(&input, &w).unwrap();
        assert_eq!(out.shape(), input.shape());
    }

    #[test]
    fn constant_input_stays_constant_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let w = SppfWeights::new(&mut rng, 8);
        let input = FeatureMap::filled(1, 8, 4, 4, 0.7);
        let out = sppf_forward(&input, &w).unwrap();
        for c in 0..8 {
            let v = out.at(0, c, 0, 0);
            for y in 0..4 {
                for x in 0..4 {
                    assert!((out.at(0, c, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let w = SppfWeights::new(&mut rng, 6);
        let input = FeatureMap::random(&mut rng, 1, 6, 4, 4, -1.0, 1.0);
        let out = sppf_forward(&input, &w).unwrap();
        // Independent composition of the five primitives.
        let reduced = w.reduce.forward(&input).unwrap();
        let (p1, _) = max_pool_forward(&reduced, 5, 1, 2).unwrap();
        let (p2, _) = max_pool_forward(&p1, 5, 1, 2).unwrap();
        let (p3, _) = max_pool_forward(&p2, 5, 1, 2).unwrap();
        let mut concat = FeatureMap::zeros(1, 12, 4, 4);
        for (part, m) in [&reduced, &p1, &p2, &p3].iter().enumerate() {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        *concat.at_mut(0, part * 3 + c, y, x) = m.at(0, c, y, x);
                    }
                }
            }
        }
        let expect = w.expand.forward(&concat).unwrap();
        for (a, b) in out.data.iter().zip(expect.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
