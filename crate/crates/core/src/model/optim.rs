//! Learning-rate schedule and Nesterov SGD.

/// `lr0 · (1 − epoch/epochs)^power`, clamped at zero past the end.
pub fn poly_lr(lr0: f64, epoch: usize, epochs: usize, power: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / epochs as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// One Nesterov step: `v ← μv − lr·g`, then `p ← p + μv − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += momentum * *v - lr * g;
    }
}
