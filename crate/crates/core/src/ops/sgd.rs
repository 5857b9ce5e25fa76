/// In-place SGD update: w <- w - lr * (g + weight_decay * w).
pub fn sgd_step(weights: &mut [f64], gradients: &[f64], lr: f64, weight_decay: f64) {
    debug_assert_eq!(weights.len(), gradients.len());
    for (w, g) in weights.iter_mut().zip(gradients.iter()) {
        *w -= lr * (g + weight_decay * *w);
    }
}
