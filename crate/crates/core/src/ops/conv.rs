use rand::Rng;

use crate::tensor::{xavier_uniform, FeatureMap};
use crate::{Error, Result};

/// 2D cross-correlation (deep-learning "convolution", no kernel flip) with a
/// per-output-channel bias. Output extents must divide exactly:
/// `(H + 2*padding - kh)` must be a positive multiple of `stride`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_c, in_c, kh, kw), row-major.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_c * kh * kw;
        let fan_out = out_c * kh * kw;
        Self {
            kernel: xavier_uniform(rng, fan_in, fan_out, out_c * in_c * kh * kw),
            bias: vec![0.0; out_c],
            out_c,
            in_c,
            kh,
            kw,
            stride,
            padding,
        }
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: vec![0.0; out_c * in_c * kh * kw],
            bias: vec![0.0; out_c],
            out_c,
            in_c,
            kh,
            kw,
            stride,
            padding,
        }
    }

    #[inline]
    fn kidx(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_c + ic) * self.kh + ky) * self.kw + kx
    }

    pub fn out_extent(&self, extent: usize, kernel: usize) -> Result<usize> {
        let span = extent + 2 * self.padding;
        if span < kernel {
            return Err(Error::Config(format!(
                "input extent {extent} with padding {} is smaller than kernel {kernel}",
                self.padding
            )));
        }
        let num = span - kernel;
        if num % self.stride != 0 {
            return Err(Error::Config(format!(
                "extent {extent}: ({extent} + 2*{} - {kernel}) is not divisible by stride {}",
                self.padding, self.stride
            )));
        }
        Ok(num / self.stride + 1)
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        if input.c != self.in_c {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {}",
                self.in_c, input.c
            )));
        }
        let oh = self.out_extent(input.h, self.kh)?;
        let ow = self.out_extent(input.w, self.kw)?;
        let mut out = FeatureMap::zeros(input.b, self.out_c, oh, ow);
        let pad = self.padding as isize;
        for b in 0..input.b {
            for oc in 0..self.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.bias[oc];
                        let y0 = (oy * self.stride) as isize - pad;
                        let x0 = (ox * self.stride) as isize - pad;
                        for ic in 0..self.in_c {
                            for ky in 0..self.kh {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= input.h as isize {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= input.w as isize {
                                        continue;
                                    }
                                    acc += self.kernel[self.kidx(oc, ic, ky, kx)]
                                        * input.at(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients with respect to input, kernel and bias given the upstream
    /// gradient on the output.
    pub fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let mut grad_input = FeatureMap::zeros(input.b, input.c, input.h, input.w);
        let mut grad_kernel = vec![0.0; self.kernel.len()];
        let mut grad_bias = vec![0.0; self.out_c];
        let pad = self.padding as isize;
        for b in 0..input.b {
            for oc in 0..self.out_c {
                for oy in 0..grad_out.h {
                    for ox in 0..grad_out.w {
                        let g = grad_out.at(b, oc, oy, ox);
                        if g == 0.0 {
                            continue;
                        }
                        grad_bias[oc] += g;
                        let y0 = (oy * self.stride) as isize - pad;
                        let x0 = (ox * self.stride) as isize - pad;
                        for ic in 0..self.in_c {
                            for ky in 0..self.kh {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= input.h as isize {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= input.w as isize {
                                        continue;
                                    }
                                    let v = input.at(b, ic, iy as usize, ix as usize);
                                    grad_kernel[self.kidx(oc, ic, ky, kx)] += g * v;
                                    *grad_input.at_mut(b, ic, iy as usize, ix as usize) +=
                                        g * self.kernel[self.kidx(oc, ic, ky, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
        (grad_input, grad_kernel, grad_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference, written independently of `forward`.
    fn conv_reference(input: &FeatureMap, conv: &Conv2d, oh: usize, ow: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(input.b, conv.out_c, oh, ow);
        for b in 0..input.b {
            for oc in 0..conv.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[oc];
                        for ic in 0..conv.in_c {
                            for ky in 0..conv.kh {
                                for kx in 0..conv.kw {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0
                                        && (iy as usize) < input.h
                                        && ix >= 0
                                        && (ix as usize) < input.w
                                    {
                                        acc += conv.kernel
                                            [((oc * conv.in_c + ic) * conv.kh + ky) * conv.kw + kx]
                                            * input.at(b, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = FeatureMap::filled(1, 1, 3, 3, 1.0);
        let mut conv = Conv2d::zeros(1, 1, 1, 1, 1, 0);
        conv.kernel[0] = 1.0;
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn averaging_kernel_on_constant_input() {
        let input = FeatureMap::filled(1, 1, 4, 4, 2.0);
        let mut conv = Conv2d::zeros(1, 1, 2, 2, 2, 0);
        conv.kernel.iter_mut().for_each(|k| *k = 0.25);
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.shape(), (1, 1, 2, 2));
        for v in &out.data {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_reference_on_random_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = FeatureMap::random(&mut rng, 1, 2, 5, 5, -1.0, 1.0);
        let mut conv = Conv2d::new(&mut rng, 3, 2, 3, 3, 1, 1);
        for b in conv.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let out = conv.forward(&input).unwrap();
        let reference = conv_reference(&input, &conv, out.h, out.w);
        for (a, r) in out.data.iter().zip(reference.data.iter()) {
            assert!((a - r).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_inexact_divisibility() {
        let input = FeatureMap::filled(1, 1, 4, 4, 0.0);
        let conv = Conv2d::zeros(1, 1, 3, 3, 2, 1);
        // (4 + 2 - 3) = 3 is not divisible by 2.
        assert!(matches!(conv.forward(&input), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = FeatureMap::filled(1, 3, 4, 4, 0.0);
        let conv = Conv2d::zeros(1, 2, 1, 1, 1, 0);
        assert!(matches!(conv.forward(&input), Err(Error::Shape(_))));
    }
}
