use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Argmax indices saved for the backward scatter.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub argmax: Vec<usize>,
}

/// Max pooling with zero-padded borders treated as -inf (padding cells never
/// win unless the window contains no valid cell, which the geometry check
/// forbids). Output extents must divide exactly, as for conv2d.
pub fn max_pool_forward(
    input: &FeatureMap,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(FeatureMap, MaxPoolCache)> {
    let span_h = input.h + 2 * padding;
    let span_w = input.w + 2 * padding;
    if span_h < k || span_w < k {
        return Err(Error::Config(format!(
            "pool window {k} exceeds padded extents {span_h}x{span_w}"
        )));
    }
    if (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
        return Err(Error::Config(format!(
            "pool geometry not exactly divisible: extents {}x{}, k={k}, stride={stride}, padding={padding}",
            input.h, input.w
        )));
    }
    let oh = (span_h - k) / stride + 1;
    let ow = (span_w - k) / stride + 1;
    let mut out = FeatureMap::zeros(input.b, input.c, oh, ow);
    let mut argmax = vec![usize::MAX; input.b * input.c * oh * ow];
    let pad = padding as isize;
    for b in 0..input.b {
        for c in 0..input.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            let i = input.idx(b, c, iy as usize, ix as usize);
                            if input.data[i] > best {
                                best = input.data[i];
                                best_i = i;
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(Error::Config(format!(
                            "pool window at ({oy},{ox}) covers only padding"
                        )));
                    }
                    let o = out.idx(b, c, oy, ox);
                    out.data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
    Ok((out, MaxPoolCache { argmax }))
}

pub fn max_pool_backward(
    input: &FeatureMap,
    cache: &MaxPoolCache,
    grad_out: &FeatureMap,
) -> FeatureMap {
    let mut grad_input = FeatureMap::zeros(input.b, input.c, input.h, input.w);
    for (o, &i) in cache.argmax.iter().enumerate() {
        grad_input.data[i] += grad_out.data[o];
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_stays_constant() {
        let input = FeatureMap::filled(1, 2, 4, 4, 3.5);
        let (out, _) = max_pool_forward(&input, 2, 2, 0).unwrap();
        assert!(out.data.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn two_by_two_max() {
        let input = FeatureMap::from_vec(vec![1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2).unwrap();
        let (out, _) = max_pool_forward(&input, 2, 2, 0).unwrap();
        assert_eq!(out.data, vec![4.0]);
    }

    #[test]
    fn matches_loop_oracle_k5() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = FeatureMap::random(&mut rng, 1, 2, 6, 6, -2.0, 2.0);
        let (out, _) = max_pool_forward(&input, 5, 1, 2).unwrap();
        assert_eq!(out.shape(), (1, 2, 6, 6));
        for c in 0..2 {
            for oy in 0..6isize {
                for ox in 0..6isize {
                    let mut best = f64::NEG_INFINITY;
                    for dy in -2..=2isize {
                        for dx in -2..=2isize {
                            let (y, x) = (oy + dy, ox + dx);
                            if y >= 0 && y < 6 && x >= 0 && x < 6 {
                                best = best.max(input.at(0, c, y as usize, x as usize));
                            }
                        }
                    }
                    assert_eq!(out.at(0, c, oy as usize, ox as usize), best);
                }
            }
        }
    }
}
