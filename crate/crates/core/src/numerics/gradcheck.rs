use alloc::vec::Vec;

use super::DenseNet;
use crate::Result;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator; keeps components whose true
/// gradient is zero from turning rounding noise into a large ratio.
const DENOM_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_difference<F>(x: &[f64], mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + GRADCHECK_STEP;
            let plus = f(&probe);
            probe[i] = orig - GRADCHECK_STEP;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * GRADCHECK_STEP)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the backward pass of `net` against central differences for the
/// scalar loss `loss(output) -> (value, d value / d output)` at `input`.
pub fn grad_check<L>(net: &DenseNet, input: &[f64], loss: L) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let out = net.forward(input)?;
    let (_, upstream) = loss(&out);
    let analytic = net.backward(input, &upstream)?;
    let mut probe = net.clone();
    let numeric = central_difference(net.params(), |p| {
        probe.params_mut().copy_from_slice(p);
        loss(&probe.forward(input).expect("shape checked above")).0
    });
    Ok(gradient_relative_error(&analytic, &numeric))
}
