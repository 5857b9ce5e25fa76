use rand::Rng;

use crate::tensor::{xavier_uniform, TokenSequence};
use crate::{Error, Result};

/// Token-wise affine map: out = W x + b with W of shape (out_c, in_c).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_c: usize,
    pub in_c: usize,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, out_c: usize, in_c: usize) -> Self {
        Self {
            weight: xavier_uniform(rng, in_c, out_c, out_c * in_c),
            bias: vec![0.0; out_c],
            out_c,
            in_c,
        }
    }

    pub fn zeros(out_c: usize, in_c: usize) -> Self {
        Self {
            weight: vec![0.0; out_c * in_c],
            bias: vec![0.0; out_c],
            out_c,
            in_c,
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut l = Self::zeros(c, c);
        for i in 0..c {
            l.weight[i * c + i] = 1.0;
        }
        l
    }

    /// Apply to a single vector.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.out_c {
            let mut acc = self.bias[o];
            let row = &self.weight[o * self.in_c..(o + 1) * self.in_c];
            for (w, v) in row.iter().zip(x.iter()) {
                acc += w * v;
            }
            out[o] = acc;
        }
    }

    /// Accumulate gradients for a single vector application.
    pub fn apply_backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad_x: &mut [f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) {
        for o in 0..self.out_c {
            let g = grad_out[o];
            if g == 0.0 {
                continue;
            }
            grad_bias[o] += g;
            let row = &self.weight[o * self.in_c..(o + 1) * self.in_c];
            let grow = &mut grad_weight[o * self.in_c..(o + 1) * self.in_c];
            for i in 0..self.in_c {
                grow[i] += g * x[i];
                grad_x[i] += g * row[i];
            }
        }
    }

    pub fn forward(&self, input: &TokenSequence) -> Result<TokenSequence> {
        if input.c != self.in_c {
            return Err(Error::Shape(format!(
                "linear expects {} input channels, got {}",
                self.in_c, input.c
            )));
        }
        let mut out = TokenSequence::zeros(input.b, input.t, self.out_c);
        for b in 0..input.b {
            for t in 0..input.t {
                let base_in = (b * input.t + t) * input.c;
                let base_out = (b * input.t + t) * self.out_c;
                self.apply(
                    &input.data[base_in..base_in + input.c],
                    &mut out.data[base_out..base_out + self.out_c],
                );
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &TokenSequence,
        grad_out: &TokenSequence,
    ) -> (TokenSequence, Vec<f64>, Vec<f64>) {
        let mut grad_input = TokenSequence::zeros(input.b, input.t, input.c);
        let mut grad_weight = vec![0.0; self.weight.len()];
        let mut grad_bias = vec![0.0; self.out_c];
        for b in 0..input.b {
            for t in 0..input.t {
                let base_in = (b * input.t + t) * input.c;
                let base_out = (b * input.t + t) * self.out_c;
                self.apply_backward(
                    &input.data[base_in..base_in + input.c],
                    &grad_out.data[base_out..base_out + self.out_c],
                    &mut grad_input.data[base_in..base_in + input.c],
                    &mut grad_weight,
                    &mut grad_bias,
                );
            }
        }
        (grad_input, grad_weight, grad_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = TokenSequence::random(&mut rng, 2, 3, 4, -1.0, 1.0);
        let lin = Linear::identity(4);
        let out = lin.forward(&input).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut lin = Linear::zeros(2, 3);
        lin.bias = vec![1.5, -0.5];
        let input = TokenSequence::from_vec(vec![1.0, 2.0, 3.0], 1, 1, 3).unwrap();
        let out = lin.forward(&input).unwrap();
        assert_eq!(out.data, vec![1.5, -0.5]);
    }

    #[test]
    fn matches_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = TokenSequence::random(&mut rng, 1, 4, 5, -1.0, 1.0);
        let mut lin = Linear::new(&mut rng, 3, 5);
        for b in lin.bias.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        let out = lin.forward(&input).unwrap();
        for t in 0..4 {
            for o in 0..3 {
                let mut acc = lin.bias[o];
                for i in 0..5 {
                    acc += lin.weight[o * 5 + i] * input.at(0, t, i);
                }
                assert!((out.at(0, t, o) - acc).abs() < 1e-10);
            }
        }
    }
}
