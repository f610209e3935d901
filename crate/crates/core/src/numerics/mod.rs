//! Dense networks, reverse-mode gradients, Adam and finite-difference checks.
//!
//! Only what the pipeline needs: fully connected stacks with a smooth hidden
//! nonlinearity, evaluated in double precision.

mod adam;
mod gradcheck;
mod net;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{central_difference, grad_check, gradient_relative_error, GRADCHECK_STEP};
pub use net::{Activation, DenseNet, Trace};

/// Squared-error loss `sum (pred - target)^2` and its gradient w.r.t. `pred`.
pub fn squared_error(pred: &[f64], target: &[f64]) -> (f64, alloc::vec::Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r
        })
        .collect();
    (loss, grad)
}

/// Softmax cross-entropy of `logits` against class `label`, with its gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, alloc::vec::Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: alloc::vec::Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    let loss = libm::log(sum) - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}
