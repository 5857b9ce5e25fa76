//! Dense rank-4 feature maps and rank-3 token sequences, stored as flat
//! `Vec<f64>` in row-major order.

use rand::Rng;

use crate::{Error, Result};

/// A dense (batch, channel, row, col) feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Vec<f64>,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn filled(b: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            data: vec![value; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != b * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}x{}",
                data.len(),
                b,
                c,
                h,
                w
            )));
        }
        Ok(Self { data, b, c, h, w })
    }

    /// Uniform random values in [lo, hi).
    pub fn random<R: Rng>(rng: &mut R, b: usize, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Self {
        let data = (0..b * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Self { data, b, c, h, w }
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.b, self.c, self.h, self.w)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flatten to (b, h*w, c) tokens, row-major over (y, x).
    pub fn to_tokens(&self) -> TokenSequence {
        let t = self.h * self.w;
        let mut data = vec![0.0; self.b * t * self.c];
        for b in 0..self.b {
            for y in 0..self.h {
                for x in 0..self.w {
                    let tok = y * self.w + x;
                    for c in 0..self.c {
                        data[(b * t + tok) * self.c + c] = self.at(b, c, y, x);
                    }
                }
            }
        }
        TokenSequence {
            data,
            b: self.b,
            t,
            c: self.c,
        }
    }
}

/// A dense (batch, token, channel) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub data: Vec<f64>,
    pub b: usize,
    pub t: usize,
    pub c: usize,
}

impl TokenSequence {
    pub fn zeros(b: usize, t: usize, c: usize) -> Self {
        Self {
            data: vec![0.0; b * t * c],
            b,
            t,
            c,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, t: usize, c: usize) -> Result<Self> {
        if data.len() != b * t * c {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                b,
                t,
                c
            )));
        }
        Ok(Self { data, b, t, c })
    }

    pub fn random<R: Rng>(rng: &mut R, b: usize, t: usize, c: usize, lo: f64, hi: f64) -> Self {
        let data = (0..b * t * c).map(|_| rng.gen_range(lo..hi)).collect();
        Self { data, b, t, c }
    }

    #[inline]
    pub fn idx(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.t + t) * self.c + c
    }

    #[inline]
    pub fn at(&self, b: usize, t: usize, c: usize) -> f64 {
        self.data[self.idx(b, t, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, t: usize, c: usize) -> &mut f64 {
        let i = self.idx(b, t, c);
        &mut self.data[i]
    }

    /// Inverse of [`FeatureMap::to_tokens`] for a known spatial extent.
    pub fn to_map(&self, h: usize, w: usize) -> Result<FeatureMap> {
        if h * w != self.t {
            return Err(Error::Geometry(format!(
                "token count {} does not match {}x{}",
                self.t, h, w
            )));
        }
        let mut out = FeatureMap::zeros(self.b, self.c, h, w);
        for b in 0..self.b {
            for y in 0..h {
                for x in 0..w {
                    let tok = y * w + x;
                    for c in 0..self.c {
                        *out.at_mut(b, c, y, x) = self.at(b, tok, c);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Glorot-uniform draw for a weight tensor of `n` values.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_roundtrip_recovers_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = FeatureMap::random(&mut rng, 2, 3, 4, 5, -1.0, 1.0);
        let back = map.to_tokens().to_map(4, 5).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn flatten_order_is_row_major() {
        // 1x2x2x2 map: tokens must appear in order (0,0),(0,1),(1,0),(1,1).
        let mut map = FeatureMap::zeros(1, 2, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                *map.at_mut(0, 0, y, x) = (y * 2 + x) as f64;
                *map.at_mut(0, 1, y, x) = 10.0 + (y * 2 + x) as f64;
            }
        }
        let seq = map.to_tokens();
        for tok in 0..4 {
            assert_eq!(seq.at(0, tok, 0), tok as f64);
            assert_eq!(seq.at(0, tok, 1), 10.0 + tok as f64);
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(FeatureMap::from_vec(vec![0.0; 5], 1, 1, 2, 3).is_err());
    }
}
