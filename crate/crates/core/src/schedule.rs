//! Cosine noise schedule and DDIM timestep subsequences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{s <= t} alpha_s`.
///
/// `alpha_bar` carries an explicit entry for `t = 0` equal to one, so a DDIM
/// step that lands on `t = 0` needs no special case.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Improved-DDPM cosine schedule:
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, `beta_t = 1 - f(t)/f(t-1)`
    /// clipped to [`MAX_BETA`]. `alpha_bar` is the running product of the
    /// clipped alphas, so it is exactly consistent with `betas`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::Config(format!("cosine offset must lie in (0, 1), got {offset}")));
        }
        let f = |t: usize| {
            let c = libm::cos(((t as f64 / steps as f64 + offset) / (1.0 + offset)) * core::f64::consts::FRAC_PI_2);
            c * c
        };
        let mut betas = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut alpha_bars = vec![1.0];
        let mut prev = f(0);
        let mut running = 1.0;
        for t in 1..=steps {
            let cur = f(t);
            let beta = (1.0 - cur / prev).min(MAX_BETA);
            prev = cur;
            let alpha = 1.0 - beta;
            running *= alpha;
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(running);
        }
        Ok(Self {
            steps,
            offset,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Timestep { t, max: self.steps });
        }
        Ok(())
    }
}

/// Strictly decreasing, uniformly strided timesteps from `steps` to 1.
pub fn subsample_timesteps(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > steps {
        return Err(Error::Config(format!(
            "sampling steps must lie in 1..={steps}, got {count}"
        )));
    }
    if count == 1 {
        return Ok(vec![steps]);
    }
    let span = steps - 1;
    let gaps = count - 1;
    Ok((0..count)
        .map(|i| steps - (i * span + gaps / 2) / gaps)
        .collect())
}
