#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation x * sigmoid(x), applied elementwise.
pub fn silu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| x * sigmoid(x)).collect()
}

/// d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out.iter())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect()
}

/// Numerically stable softmax over one slice.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward through softmax: dx = y .* (dy - sum(dy .* y)).
pub fn softmax_backward_slice(probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_out.iter()).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_out.iter())
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}
