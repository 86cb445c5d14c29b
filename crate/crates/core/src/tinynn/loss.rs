//! Scalar losses returning `(value, d value / d pred)`.

/// `Σ (p - t)²`.
pub fn sum_squared_error(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let grad: Vec<f64> = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t)).collect();
    let value = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (value, grad)
}

/// Mean squared error.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let (v, mut g) = sum_squared_error(pred, target);
    g.iter_mut().for_each(|x| *x /= n);
    (v / n, g)
}

/// `Σ |p - t|`, with subgradient 0 at a tie.
pub fn l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let value = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (value, grad)
}

/// Huber penalty: `r²/2` inside `|r| <= δ`, `δ(|r| - δ/2)` outside.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: returns `d L / d logits` given the
/// softmax output `p` and `g = d L / d p`.
pub fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}
