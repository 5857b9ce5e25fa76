use crate::tensor::{FeatureMap, TokenSequence};
use crate::{Error, Result};

/// Per-channel batch normalization over the (batch, row, col) axes.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics saved by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub x_hat: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum: 0.1,
        })
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if self.gamma.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm has {} channels, input has {c}",
                self.gamma.len()
            )));
        }
        Ok(())
    }

    /// Training mode: standardize with batch statistics and update the
    /// running statistics in place.
    pub fn forward_train(&mut self, input: &FeatureMap) -> Result<(FeatureMap, BatchNormCache)> {
        self.check_channels(input.c)?;
        let n = (input.b * input.h * input.w) as f64;
        let mut mean = vec![0.0; input.c];
        let mut var = vec![0.0; input.c];
        for b in 0..input.b {
            for c in 0..input.c {
                for y in 0..input.h {
                    for x in 0..input.w {
                        mean[c] += input.at(b, c, y, x);
                    }
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for b in 0..input.b {
            for c in 0..input.c {
                for y in 0..input.h {
                    for x in 0..input.w {
                        let d = input.at(b, c, y, x) - mean[c];
                        var[c] += d * d;
                    }
                }
            }
        }
        for v in var.iter_mut() {
            *v /= n;
        }
        for c in 0..input.c {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
        }
        let mut out = FeatureMap::zeros(input.b, input.c, input.h, input.w);
        let mut x_hat = vec![0.0; input.data.len()];
        for b in 0..input.b {
            for c in 0..input.c {
                let inv_std = 1.0 / (var[c] + self.eps).sqrt();
                for y in 0..input.h {
                    for x in 0..input.w {
                        let i = input.idx(b, c, y, x);
                        let xh = (input.data[i] - mean[c]) * inv_std;
                        x_hat[i] = xh;
                        out.data[i] = self.gamma[c] * xh + self.beta[c];
                    }
                }
            }
        }
        Ok((out, BatchNormCache { mean, var, x_hat }))
    }

    /// Inference mode: standardize with running statistics.
    pub fn forward_infer(&self, input: &FeatureMap) -> Result<FeatureMap> {
        self.check_channels(input.c)?;
        let mut out = FeatureMap::zeros(input.b, input.c, input.h, input.w);
        for b in 0..input.b {
            for c in 0..input.c {
                let inv_std = 1.0 / (self.running_var[c] + self.eps).sqrt();
                for y in 0..input.h {
                    for x in 0..input.w {
                        let i = input.idx(b, c, y, x);
                        out.data[i] =
                            self.gamma[c] * (input.data[i] - self.running_mean[c]) * inv_std
                                + self.beta[c];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Backward through the training-mode forward.
    pub fn backward(
        &self,
        input: &FeatureMap,
        cache: &BatchNormCache,
        grad_out: &FeatureMap,
    ) -> (FeatureMap, Vec<f64>, Vec<f64>) {
        let n = (input.b * input.h * input.w) as f64;
        let mut grad_gamma = vec![0.0; input.c];
        let mut grad_beta = vec![0.0; input.c];
        let mut sum_dy = vec![0.0; input.c];
        let mut sum_dy_xhat = vec![0.0; input.c];
        for b in 0..input.b {
            for c in 0..input.c {
                for y in 0..input.h {
                    for x in 0..input.w {
                        let i = input.idx(b, c, y, x);
                        let dy = grad_out.data[i];
                        grad_beta[c] += dy;
                        grad_gamma[c] += dy * cache.x_hat[i];
                        sum_dy[c] += dy;
                        sum_dy_xhat[c] += dy * cache.x_hat[i];
                    }
                }
            }
        }
        let mut grad_input = FeatureMap::zeros(input.b, input.c, input.h, input.w);
        for b in 0..input.b {
            for c in 0..input.c {
                let inv_std = 1.0 / (cache.var[c] + self.eps).sqrt();
                let scale = self.gamma[c] * inv_std;
                for y in 0..input.h {
                    for x in 0..input.w {
                        let i = input.idx(b, c, y, x);
                        let dy = grad_out.data[i];
                        grad_input.data[i] = scale
                            * (dy - sum_dy[c] / n - cache.x_hat[i] * sum_dy_xhat[c] / n);
                    }
                }
            }
        }
        (grad_input, grad_gamma, grad_beta)
    }
}

/// Per-token layer normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub inv_std: Vec<f64>,
    pub x_hat: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        })
    }

    pub fn forward(&self, input: &TokenSequence) -> Result<(TokenSequence, LayerNormCache)> {
        if self.gamma.len() != input.c {
            return Err(Error::Shape(format!(
                "layer_norm has {} channels, input has {}",
                self.gamma.len(),
                input.c
            )));
        }
        let n = input.c as f64;
        let mut out = TokenSequence::zeros(input.b, input.t, input.c);
        let mut inv_stds = vec![0.0; input.b * input.t];
        let mut x_hat = vec![0.0; input.data.len()];
        for b in 0..input.b {
            for t in 0..input.t {
                let base = (b * input.t + t) * input.c;
                let row = &input.data[base..base + input.c];
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + self.eps).sqrt();
                inv_stds[b * input.t + t] = inv_std;
                for c in 0..input.c {
                    let xh = (row[c] - mean) * inv_std;
                    x_hat[base + c] = xh;
                    out.data[base + c] = self.gamma[c] * xh + self.beta[c];
                }
            }
        }
        Ok((
            out,
            LayerNormCache {
                inv_std: inv_stds,
                x_hat,
            },
        ))
    }

    pub fn backward(
        &self,
        input: &TokenSequence,
        cache: &LayerNormCache,
        grad_out: &TokenSequence,
    ) -> (TokenSequence, Vec<f64>, Vec<f64>) {
        let n = input.c as f64;
        let mut grad_input = TokenSequence::zeros(input.b, input.t, input.c);
        let mut grad_gamma = vec![0.0; input.c];
        let mut grad_beta = vec![0.0; input.c];
        for b in 0..input.b {
            for t in 0..input.t {
                let base = (b * input.t + t) * input.c;
                let inv_std = cache.inv_std[b * input.t + t];
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for c in 0..input.c {
                    let dy = grad_out.data[base + c];
                    grad_gamma[c] += dy * cache.x_hat[base + c];
                    grad_beta[c] += dy;
                    let dyh = dy * self.gamma[c];
                    sum_dy += dyh;
                    sum_dy_xhat += dyh * cache.x_hat[base + c];
                }
                for c in 0..input.c {
                    let dyh = grad_out.data[base + c] * self.gamma[c];
                    grad_input.data[base + c] = inv_std
                        * (dyh - sum_dy / n - cache.x_hat[base + c] * sum_dy_xhat / n);
                }
            }
        }
        (grad_input, grad_gamma, grad_beta)
    }
}
