//! Combined soft-Dice + binary cross-entropy loss on logits.
//!
//! loss = 0.5 * (1 - softDice(sigma(z), t; smooth = 1)) + 0.5 * mean BCE(z, t)
//!
//! Soft Dice is computed globally over all elements of the tensor; BCE uses
//! the numerically stable log-sum-exp form. Reductions accumulate in f64.

use super::Tensor;

const SMOOTH: f64 = 1.0;

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()
}

/// Scalar loss value.
pub fn dice_bce_loss(logits: &Tensor, target: &[f32]) -> f64 {
    assert_eq!(logits.numel(), target.len(), "loss shape mismatch");
    let m = target.len() as f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    let mut sum_pt = 0.0f64;
    let mut bce = 0.0f64;
    for (&z, &t) in logits.data.iter().zip(target) {
        let z = z as f64;
        let t = t as f64;
        let p = sigmoid64(z);
        sum_p += p;
        sum_t += t;
        sum_pt += p * t;
        bce += bce_term(z, t);
    }
    let dice = (2.0 * sum_pt + SMOOTH) / (sum_p + sum_t + SMOOTH);
    0.5 * (1.0 - dice) + 0.5 * bce / m
}

/// Loss and gradient with respect to the logits.
pub fn dice_bce_loss_grad(logits: &Tensor, target: &[f32]) -> (f64, Vec<f32>) {
    assert_eq!(logits.numel(), target.len(), "loss shape mismatch");
    let m = target.len() as f64;
    let mut sum_p = 0.0f64;
    let mut sum_t = 0.0f64;
    let mut sum_pt = 0.0f64;
    let mut bce = 0.0f64;
    let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid64(z as f64)).collect();
    for ((&z, &t), &p) in logits.data.iter().zip(target).zip(&probs) {
        let t = t as f64;
        sum_p += p;
        sum_t += t;
        sum_pt += p * t;
        bce += bce_term(z as f64, t);
    }
    let den = sum_p + sum_t + SMOOTH;
    let num = 2.0 * sum_pt + SMOOTH;
    let loss = 0.5 * (1.0 - num / den) + 0.5 * bce / m;
    // d(1 - dice)/dp_i = -(2 t_i den - num) / den^2; dp/dz = p (1 - p)
    let grad: Vec<f32> = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let t = t as f64;
            let d_dice = -(2.0 * t * den - num) / (den * den);
            let d_bce = (p - t) / m;
            (0.5 * d_dice * p * (1.0 - p) + 0.5 * d_bce) as f32
        })
        .collect();
    (loss, grad)
}
