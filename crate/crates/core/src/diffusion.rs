//! Forward noising, the noise-prediction objective, the deterministic DDIM
//! reverse step and base-session training of the conditional denoiser.
//!
//! The denoiser predicts the injected noise from the concatenation of the
//! noisy sample, a sinusoidal embedding of the timestep, and an affine
//! projection of the class condition vector. The projection is trained
//! jointly with the network and frozen with it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::checksum::Checksum;
use crate::embedding::ConditionTable;
use crate::numerics::{Adam, AdamConfig, Activation, DenseNet};
use crate::rng::{self, standard_normal_vec};
use crate::schedule::{subsample_timesteps, NoiseSchedule};
use crate::{ClassId, Error, Result};

/// A point in sample space tagged with how many noising steps it carries.
/// `timestep == 0` marks a clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub values: Vec<f64>,
    pub timestep: usize,
}

impl ImageSample {
    pub fn clean(values: Vec<f64>) -> Self {
        Self { values, timestep: 0 }
    }

    pub fn is_clean(&self) -> bool {
        self.timestep == 0
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Sinusoidal embedding of `t`: `width / 2` sines followed by the matching
/// cosines, frequencies geometrically spaced from 1 down to 1/10000.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half.max(1) as f64);
        let arg = t as f64 * freq;
        out[k] = libm::sin(arg);
        out[half + k] = libm::cos(arg);
    }
    out
}

/// `v_t = sqrt(alpha_bar_t) v0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(v0: &ImageSample, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<ImageSample> {
    if !v0.is_clean() {
        return Err(Error::Config(format!(
            "forward noising expects a clean sample, got timestep {}",
            v0.timestep
        )));
    }
    schedule.check_timestep(t)?;
    check_len("noise", v0.dim(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(ImageSample {
        values: v0.values.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect(),
        timestep: t,
    })
}

/// One deterministic DDIM update from `t` to `t_prev`:
///
/// `v_prev = sqrt(ab_prev) (v_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t) + sqrt(1 - ab_prev) eps_hat`
pub fn ddim_step(
    v_t: &ImageSample,
    t_prev: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<ImageSample> {
    let t = v_t.timestep;
    if t <= t_prev {
        return Err(Error::Config(format!("DDIM step must decrease the timestep, got {t} -> {t_prev}")));
    }
    schedule.check_timestep(t)?;
    check_len("predicted noise", v_t.dim(), eps_hat.len())?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (sqrt_ab, sqrt_one_minus) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let (sqrt_ab_prev, sqrt_one_minus_prev) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
    let values = v_t
        .values
        .iter()
        .zip(eps_hat)
        .map(|(v, e)| {
            let x0 = (v - sqrt_one_minus * e) / sqrt_ab;
            sqrt_ab_prev * x0 + sqrt_one_minus_prev * e
        })
        .collect();
    Ok(ImageSample {
        values,
        timestep: t_prev,
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { what, expected, got });
    }
    Ok(())
}

/// Anything that predicts the noise in `v_t` given the timestep and the raw
/// class condition vector.
pub trait NoisePredictor {
    fn sample_dim(&self) -> usize;

    fn predict_noise(&self, v_t: &[f64], t: usize, condition: &[f64]) -> Result<Vec<f64>>;
}

/// Runs the DDIM sampler from `v_T ~ N(0, I)` drawn with `seed` along the
/// uniformly strided subsequence of `sampling_steps` timesteps down to a clean
/// sample. No clipping is applied to intermediate values.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    condition: &[f64],
    schedule: &NoiseSchedule,
    sampling_steps: usize,
    seed: u64,
) -> Result<ImageSample> {
    let timesteps = subsample_timesteps(schedule.steps(), sampling_steps)?;
    let mut v = ImageSample {
        values: standard_normal_vec(&mut rng::seeded(seed), predictor.sample_dim()),
        timestep: schedule.steps(),
    };
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps_hat = predictor.predict_noise(&v.values, t, condition)?;
        v = ddim_step(&v, t_prev, &eps_hat, schedule)?;
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("DDIM sample at timestep {t_prev} (seed {seed})")));
        }
    }
    Ok(v)
}

/// How the network output is turned into a noise prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// `eps_hat = F`.
    Epsilon,
    /// `eps_hat = sqrt(1 - ab_t) v_t + sqrt(ab_t) F`, i.e. `F` estimates the
    /// velocity `sqrt(ab_t) eps - sqrt(1 - ab_t) v0`. The implied clean-sample
    /// estimate `sqrt(ab_t) v_t - sqrt(1 - ab_t) F` never divides by
    /// `sqrt(ab_t)`, so errors in `F` are not blown up by the first sampling
    /// step, where `ab_T` is of order 1e-9.
    Velocity,
}

impl OutputHead {
    pub fn tag(self) -> u8 {
        match self {
            OutputHead::Epsilon => 0,
            OutputHead::Velocity => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(OutputHead::Epsilon),
            1 => Some(OutputHead::Velocity),
            _ => None,
        }
    }

    /// `(skip, scale)` with `eps_hat = skip * v_t + scale * F`.
    fn coefficients(self, alpha_bar: f64) -> (f64, f64) {
        match self {
            OutputHead::Epsilon => (0.0, 1.0),
            OutputHead::Velocity => (libm::sqrt(1.0 - alpha_bar), libm::sqrt(alpha_bar)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub sample_dim: usize,
    pub condition_dim: usize,
    pub time_width: usize,
    pub condition_width: usize,
    pub hidden: Vec<usize>,
    pub head: OutputHead,
    pub schedule_steps: usize,
    pub cosine_offset: f64,
}

impl DenoiserConfig {
    pub fn input_width(&self) -> usize {
        self.sample_dim + self.time_width + self.condition_width
    }

    fn validate(&self) -> Result<()> {
        if self.sample_dim == 0 || self.condition_dim == 0 || self.condition_width == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if !self.time_width.is_multiple_of(2) {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        Ok(())
    }

    fn net_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_width()];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.sample_dim);
        dims
    }
}

/// Trainable conditional noise predictor: condition projection plus MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    projection: DenseNet,
    net: DenseNet,
}

/// Parameter gradients of a [`Denoiser`], laid out like its two networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserGrads {
    pub projection: Vec<f64>,
    pub net: Vec<f64>,
}

impl DenoiserGrads {
    fn scale(&mut self, factor: f64) {
        self.projection.iter_mut().chain(&mut self.net).for_each(|g| *g *= factor);
    }
}

impl Denoiser {
    pub fn seeded<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::cosine(config.schedule_steps, config.cosine_offset)?;
        let projection = DenseNet::seeded(&[config.condition_dim, config.condition_width], Activation::Identity, rng)?;
        let net = DenseNet::seeded(&config.net_dims(), Activation::Silu, rng)?;
        Ok(Self {
            config,
            schedule,
            projection,
            net,
        })
    }

    pub fn from_nets(config: DenoiserConfig, projection: DenseNet, net: DenseNet) -> Result<Self> {
        config.validate()?;
        if projection.dims() != [config.condition_dim, config.condition_width] {
            return Err(Error::Config("condition projection does not match the denoiser config".into()));
        }
        if net.dims() != config.net_dims().as_slice() {
            return Err(Error::Config("denoiser network does not match the denoiser config".into()));
        }
        let schedule = NoiseSchedule::cosine(config.schedule_steps, config.cosine_offset)?;
        Ok(Self {
            config,
            schedule,
            projection,
            net,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn projection(&self) -> &DenseNet {
        &self.projection
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// The schedule the output head was built for.
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn zero_grads(&self) -> DenoiserGrads {
        DenoiserGrads {
            projection: vec![0.0; self.projection.num_params()],
            net: vec![0.0; self.net.num_params()],
        }
    }

    pub fn checksum(&self) -> Checksum {
        Checksum::of_f64s([self.projection.params(), self.net.params()])
    }

    /// `(projection params, net params)` for finite-difference probes and optimizers.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.projection.params_mut(), self.net.params_mut())
    }

    fn net_input(&self, v_t: &[f64], t: usize, condition: &[f64]) -> Result<Vec<f64>> {
        check_len("noisy sample", self.config.sample_dim, v_t.len())?;
        self.schedule.check_timestep(t)?;
        let projected = self.projection.forward(condition)?;
        let mut input = Vec::with_capacity(self.config.input_width());
        input.extend_from_slice(v_t);
        input.extend(time_embedding(t, self.config.time_width));
        input.extend(projected);
        Ok(input)
    }

    /// `||eps - eps_theta(v_t, t, phi(p_c))||^2` with `v_t` built from `v0` and
    /// `eps`. Gradients are accumulated into `grads`; the condition vector and
    /// the clean sample receive none.
    pub fn loss_and_grad(
        &self,
        v0: &ImageSample,
        condition: &[f64],
        t: usize,
        eps: &[f64],
        schedule: &NoiseSchedule,
        grads: &mut DenoiserGrads,
    ) -> Result<f64> {
        let v_t = forward_noise(v0, t, eps, schedule)?;
        let input = self.net_input(&v_t.values, t, condition)?;
        let trace = self.net.forward_trace(&input)?;
        let (skip, scale) = self.config.head.coefficients(self.schedule.alpha_bar(t));
        let mut loss = 0.0;
        let upstream: Vec<f64> = trace
            .output()
            .iter()
            .zip(&v_t.values)
            .zip(eps)
            .map(|((f, v), e)| {
                let r = skip * v + scale * f - e;
                loss += r * r;
                2.0 * r * scale
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("diffusion loss at timestep {t}")));
        }
        let input_grad = self.net.backward_trace(&trace, &upstream, &mut grads.net)?;
        let offset = self.config.sample_dim + self.config.time_width;
        let proj_trace = self.projection.forward_trace(condition)?;
        self.projection
            .backward_trace(&proj_trace, &input_grad[offset..], &mut grads.projection)?;
        Ok(loss)
    }

    pub fn loss(&self, v0: &ImageSample, condition: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<f64> {
        let v_t = forward_noise(v0, t, eps, schedule)?;
        let pred = self.predict_noise(&v_t.values, t, condition)?;
        Ok(pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum())
    }
}

impl NoisePredictor for Denoiser {
    fn sample_dim(&self) -> usize {
        self.config.sample_dim
    }

    fn predict_noise(&self, v_t: &[f64], t: usize, condition: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.net_input(v_t, t, condition)?)?;
        let (skip, scale) = self.config.head.coefficients(self.schedule.alpha_bar(t));
        Ok(match self.config.head {
            OutputHead::Epsilon => out,
            OutputHead::Velocity => out.iter().zip(v_t).map(|(f, v)| skip * v + scale * f).collect(),
        })
    }
}

/// A denoiser whose parameters can no longer change. There is no mutable
/// access path; only sampling and inspection remain.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDenoiser {
    inner: Denoiser,
    optimizer_steps: u64,
}

impl FrozenDenoiser {
    pub fn freeze(inner: Denoiser, optimizer_steps: u64) -> Self {
        Self { inner, optimizer_steps }
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.inner
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.inner.config
    }

    pub fn checksum(&self) -> Checksum {
        self.inner.checksum()
    }

    /// Optimizer updates applied before freezing.
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }
}

impl NoisePredictor for FrozenDenoiser {
    fn sample_dim(&self) -> usize {
        self.inner.sample_dim()
    }

    fn predict_noise(&self, v_t: &[f64], t: usize, condition: &[f64]) -> Result<Vec<f64>> {
        self.inner.predict_noise(v_t, t, condition)
    }
}

/// Minibatch optimization settings shared by the encoder and the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minibatch updates per epoch; 0 means one pass worth of the data.
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            iters_per_epoch: 0,
            batch_size: 64,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optimizer.validate()
    }

    pub(crate) fn iterations(&self, dataset_len: usize) -> usize {
        if self.iters_per_epoch > 0 {
            self.iters_per_epoch
        } else {
            dataset_len.div_ceil(self.batch_size).max(1)
        }
    }
}

/// Output of [`train_denoiser`].
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub frozen: FrozenDenoiser,
    /// Mean per-sample loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Minimizes the noise-prediction loss over uniformly drawn timesteps and
/// minibatches (drawn with replacement), then freezes the result.
pub fn train_denoiser(
    mut denoiser: Denoiser,
    data: &[(ImageSample, ClassId)],
    conditions: &ConditionTable,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    for (sample, class) in data {
        conditions.get(*class)?;
        check_len("training sample", denoiser.config.sample_dim, sample.dim())?;
    }
    if conditions.dim() != denoiser.config.condition_dim {
        return Err(Error::Shape {
            what: "condition vectors",
            expected: denoiser.config.condition_dim,
            got: conditions.dim(),
        });
    }
    if schedule != denoiser.schedule() {
        return Err(Error::Config("training schedule differs from the denoiser's own schedule".into()));
    }
    if config.epochs > 0 && data.is_empty() {
        return Err(Error::Empty("denoiser training set"));
    }

    let mut rng = rng::seeded(seed);
    let mut proj_opt = Adam::new(config.optimizer, denoiser.projection.num_params())?;
    let mut net_opt = Adam::new(config.optimizer, denoiser.net.num_params())?;
    let iterations = config.iterations(data.len());
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..iterations {
            let mut grads = denoiser.zero_grads();
            let mut batch_loss = 0.0;
            for _ in 0..config.batch_size {
                let (v0, class) = &data[rng.random_range(0..data.len())];
                let t = rng.random_range(1..=schedule.steps());
                let eps = standard_normal_vec(&mut rng, v0.dim());
                let condition = &conditions.get(*class)?.values;
                batch_loss += denoiser.loss_and_grad(v0, condition, t, &eps, schedule, &mut grads)?;
            }
            grads.scale(1.0 / config.batch_size as f64);
            proj_opt
                .step(denoiser.projection.params_mut(), &grads.projection)
                .map_err(|e| annotate(e, epoch))?;
            net_opt
                .step(denoiser.net.params_mut(), &grads.net)
                .map_err(|e| annotate(e, epoch))?;
            epoch_loss += batch_loss / config.batch_size as f64;
        }
        loss_curve.push(epoch_loss / iterations as f64);
    }

    Ok(TrainedDenoiser {
        frozen: FrozenDenoiser::freeze(denoiser, net_opt.steps()),
        loss_curve,
    })
}

fn annotate(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (denoiser epoch {epoch})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ConditionSource, ConditionVec};
    use crate::numerics::{central_difference, gradient_relative_error};
    use crate::rng::seeded;
    use crate::schedule::DEFAULT_OFFSET;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::cosine(1000, DEFAULT_OFFSET).unwrap()
    }

    /// Predicts the true noise of a planted trajectory `v_t = a v0 + b eps`.
    struct PlantedOracle<'a> {
        v0: &'a [f64],
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for PlantedOracle<'_> {
        fn sample_dim(&self) -> usize {
            self.v0.len()
        }

        fn predict_noise(&self, v_t: &[f64], t: usize, _: &[f64]) -> Result<Vec<f64>> {
            let ab = self.schedule.alpha_bar(t);
            Ok(v_t
                .iter()
                .zip(self.v0)
                .map(|(v, x)| (v - libm::sqrt(ab) * x) / libm::sqrt(1.0 - ab))
                .collect())
        }
    }

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            sample_dim: 3,
            condition_dim: 2,
            time_width: 4,
            condition_width: 3,
            hidden: vec![6, 5],
            head: OutputHead::Velocity,
            schedule_steps: 1000,
            cosine_offset: DEFAULT_OFFSET,
        }
    }

    #[test]
    fn forward_noise_hand_values() {
        let s = NoiseSchedule::cosine(1000, DEFAULT_OFFSET).unwrap();
        let t = (1..=1000).find(|&t| s.alpha_bar(t) < 0.25).unwrap();
        let ab = s.alpha_bar(t);
        let v = forward_noise(&ImageSample::clean(vec![1.0, 0.0]), t, &[0.0, 1.0], &s).unwrap();
        assert_eq!(v.values, vec![libm::sqrt(ab), libm::sqrt(1.0 - ab)]);
        assert_eq!(v.timestep, t);
    }

    #[test]
    fn forward_noise_quarter_alpha_bar() {
        // alpha_bar = 0.25 gives mean factor 0.5 and std sqrt(0.75).
        let (a, b) = (libm::sqrt(0.25), libm::sqrt(0.75));
        assert_eq!((a * 1.0 + b * 0.0, a * 0.0 + b * 1.0), (0.5, 0.866_025_403_784_438_6));
    }

    #[test]
    fn forward_noise_rejects_bad_timestep() {
        let s = schedule();
        let v0 = ImageSample::clean(vec![1.0]);
        assert!(matches!(forward_noise(&v0, 0, &[0.0], &s), Err(Error::Timestep { .. })));
        assert!(matches!(forward_noise(&v0, 1001, &[0.0], &s), Err(Error::Timestep { .. })));
    }

    #[test]
    fn ddim_exact_noise_property() {
        let s = schedule();
        let v0 = ImageSample::clean(vec![0.7, -1.2, 2.5]);
        let eps = [0.3, 1.1, -0.4];
        let v_t = forward_noise(&v0, 600, &eps, &s).unwrap();
        let out = ddim_step(&v_t, 420, &eps, &s).unwrap();
        let expect = forward_noise(&v0, 420, &eps, &s).unwrap();
        for (a, b) in out.values.iter().zip(&expect.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let clean = ddim_step(&v_t, 0, &eps, &s).unwrap();
        assert_eq!(clean.timestep, 0);
        for (a, b) in clean.values.iter().zip(&v0.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_with_zero_noise_rescales() {
        let s = schedule();
        let v_t = ImageSample { values: vec![1.0, -2.0], timestep: 300 };
        let out = ddim_step(&v_t, 100, &[0.0, 0.0], &s).unwrap();
        let ratio = libm::sqrt(s.alpha_bar(100)) / libm::sqrt(s.alpha_bar(300));
        assert!((out.values[0] - ratio).abs() < 1e-14);
        assert!((out.values[1] + 2.0 * ratio).abs() < 1e-14);
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = schedule();
        let v_t = ImageSample { values: vec![1.0], timestep: 10 };
        assert!(ddim_step(&v_t, 10, &[0.0], &s).is_err());
        assert!(ddim_step(&v_t, 11, &[0.0], &s).is_err());
    }

    #[test]
    fn sampler_recovers_planted_sample() {
        let s = schedule();
        let v0 = [0.4, -3.0, 1.25, 0.0];
        let oracle = PlantedOracle { v0: &v0, schedule: &s };
        for steps in [1, 7, 50, 1000] {
            let out = sample(&oracle, &[], &s, steps, 99).unwrap();
            assert_eq!(out.timestep, 0);
            for (a, b) in out.values.iter().zip(&v0) {
                assert!((a - b).abs() < 1e-8, "steps {steps}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let d = Denoiser::seeded(small_config(), &mut seeded(5)).unwrap();
        let s = schedule();
        let a = sample(&d, &[0.5, -0.5], &s, 50, 17).unwrap();
        let b = sample(&d, &[0.5, -0.5], &s, 50, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&d, &[0.5, -0.5], &s, 50, 18).unwrap());
    }

    /// Always returns a fixed vector; used to pin the loss formula.
    fn fixed_output_denoiser(out: &[f64]) -> Denoiser {
        let cfg = DenoiserConfig {
            sample_dim: out.len(),
            condition_dim: 1,
            time_width: 2,
            condition_width: 1,
            hidden: vec![],
            head: OutputHead::Epsilon,
            schedule_steps: 1000,
            cosine_offset: DEFAULT_OFFSET,
        };
        let projection = DenseNet::zeros(&[1, 1], Activation::Identity).unwrap();
        let mut params = vec![0.0; (out.len() + 3) * out.len()];
        params.extend_from_slice(out);
        let net = DenseNet::from_params(&[out.len() + 3, out.len()], Activation::Silu, params).unwrap();
        Denoiser::from_nets(cfg, projection, net).unwrap()
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let eps = [0.3, -1.0];
        let d = fixed_output_denoiser(&eps);
        let loss = d.loss(&ImageSample::clean(vec![1.0, 2.0]), &[0.0], 10, &eps, &schedule()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_of_zero_predictor_averages_sample_dim() {
        let dim = 8;
        let d = fixed_output_denoiser(&vec![0.0; dim]);
        let s = schedule();
        let mut rng = seeded(21);
        let draws = 20_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let eps = standard_normal_vec(&mut rng, dim);
            total += d.loss(&ImageSample::clean(vec![0.5; dim]), &[0.0], 500, &eps, &s).unwrap();
        }
        // chi-square with 8 dof: mean 8, variance 16 -> standard error 0.028.
        assert!((total / draws as f64 - dim as f64).abs() < 3.0 * 4.0 / libm::sqrt(draws as f64));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = schedule();
        for seed in 0..5 {
            let mut d = Denoiser::seeded(small_config(), &mut seeded(seed)).unwrap();
            let mut rng = seeded(seed + 100);
            let v0 = ImageSample::clean(standard_normal_vec(&mut rng, 3));
            let eps = standard_normal_vec(&mut rng, 3);
            let cond = [0.8, -0.3];
            let t = 1 + (seed as usize * 173) % 1000;
            let mut grads = d.zero_grads();
            d.loss_and_grad(&v0, &cond, t, &eps, &s, &mut grads).unwrap();

            let proj = d.projection.params().to_vec();
            let numeric_proj = central_difference(&proj, |p| {
                d.params_mut().0.copy_from_slice(p);
                d.loss(&v0, &cond, t, &eps, &s).unwrap()
            });
            d.params_mut().0.copy_from_slice(&proj);
            let net = d.net.params().to_vec();
            let numeric_net = central_difference(&net, |p| {
                d.params_mut().1.copy_from_slice(p);
                d.loss(&v0, &cond, t, &eps, &s).unwrap()
            });
            assert!(gradient_relative_error(&grads.projection, &numeric_proj) < 1e-4);
            assert!(gradient_relative_error(&grads.net, &numeric_net) < 1e-4);
        }
    }

    fn one_class_table(values: Vec<f64>) -> ConditionTable {
        ConditionTable::new([ConditionVec {
            class_id: 0,
            values,
            source: ConditionSource::Learned,
        }])
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let cfg = small_config();
        let init = Denoiser::seeded(cfg.clone(), &mut seeded(3)).unwrap();
        let data = vec![(ImageSample::clean(vec![1.0, 2.0, 3.0]), 0)];
        let trained = train_denoiser(
            init.clone(),
            &data,
            &one_class_table(vec![1.0, 0.0]),
            &schedule(),
            &TrainConfig { epochs: 0, ..TrainConfig::default() },
            1,
        )
        .unwrap();
        assert!(trained.loss_curve.is_empty());
        assert_eq!(trained.frozen.denoiser(), &init);
        assert_eq!(trained.frozen.optimizer_steps(), 0);
    }

    #[test]
    fn missing_condition_rejected_before_training() {
        let init = Denoiser::seeded(small_config(), &mut seeded(3)).unwrap();
        let data = vec![(ImageSample::clean(vec![1.0, 2.0, 3.0]), 4)];
        let err = train_denoiser(init, &data, &one_class_table(vec![1.0, 0.0]), &schedule(), &TrainConfig::default(), 1)
            .unwrap_err();
        assert_eq!(err, Error::MissingCondition(4));
    }

    fn toy_training(seed: u64, epochs: usize) -> TrainedDenoiser {
        let cfg = DenoiserConfig {
            sample_dim: 1,
            condition_dim: 1,
            time_width: 8,
            condition_width: 2,
            hidden: vec![16, 16],
            head: OutputHead::Velocity,
            schedule_steps: 1000,
            cosine_offset: DEFAULT_OFFSET,
        };
        let mut data_rng = seeded(seed ^ 0xdada);
        let data: Vec<_> = (0..64)
            .map(|_| (ImageSample::clean(vec![2.0 + 0.1 * standard_normal_vec(&mut data_rng, 1)[0]]), 0))
            .collect();
        let train = TrainConfig {
            epochs,
            iters_per_epoch: 40,
            batch_size: 32,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
        };
        let init = Denoiser::seeded(cfg, &mut seeded(seed)).unwrap();
        train_denoiser(init, &data, &one_class_table(vec![1.0]), &schedule(), &train, seed).unwrap()
    }

    #[test]
    fn toy_loss_decreases_over_first_epochs() {
        for seed in 0..10 {
            let curve = toy_training(seed, 5).loss_curve;
            assert!(curve.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {curve:?}");
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let a = toy_training(4, 2);
        let b = toy_training(4, 2);
        assert_eq!(a.frozen, b.frozen);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.frozen.checksum(), b.frozen.checksum());
    }
}
