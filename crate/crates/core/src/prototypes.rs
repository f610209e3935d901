//! Training-free prototype synthesis.
//!
//! A class prototype blends two estimates of the class's mean feature:
//!
//! - generative: the mean encoding of `N` exemplars sampled from the frozen
//!   denoiser under the class condition vector;
//! - real: the mean encoding of the available real samples (the `K` shots of
//!   a novel class, or all training samples of a base class).
//!
//! `fused = (1 - alpha) * generative + alpha * real`. Records are write-once:
//! a class's record is never recomputed after the session that created it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::checksum::Checksum;
use crate::diffusion::{sample, ImageSample, NoisePredictor};
use crate::embedding::{ConditionVec, FeatureVec, FrozenEncoder};
use crate::rng::{derive_seed, stage};
use crate::schedule::NoiseSchedule;
use crate::{ClassId, Error, Result};

/// Produces one clean exemplar for a condition vector from a seed.
pub trait ExemplarSampler {
    fn draw(&self, condition: &[f64], seed: u64) -> Result<ImageSample>;
}

/// The deterministic DDIM sampler over a frozen noise predictor.
pub struct DdimSampler<'a, P: ?Sized> {
    pub predictor: &'a P,
    pub schedule: &'a NoiseSchedule,
    pub sampling_steps: usize,
}

impl<P: NoisePredictor + ?Sized> ExemplarSampler for DdimSampler<'_, P> {
    fn draw(&self, condition: &[f64], seed: u64) -> Result<ImageSample> {
        sample(self.predictor, condition, self.schedule, self.sampling_steps, seed)
    }
}

/// Seed of exemplar `index` of `class`; independent of generation order.
pub fn exemplar_seed(master: u64, class: ClassId, index: usize) -> u64 {
    derive_seed(master, &[stage::GENERATION, class as u64, index as u64])
}

/// Mean encoded feature of `n` generated exemplars, summed in ascending
/// exemplar index. Returns the exemplars as well.
pub fn generative_prototype<S: ExemplarSampler + ?Sized>(
    sampler: &S,
    encoder: &FrozenEncoder,
    condition: &ConditionVec,
    n: usize,
    master_seed: u64,
) -> Result<(FeatureVec, Vec<ImageSample>)> {
    if n == 0 {
        return Err(Error::Config(format!(
            "generative prototype of class {} needs at least one exemplar",
            condition.class_id
        )));
    }
    let exemplars = (0..n)
        .map(|i| sampler.draw(&condition.values, exemplar_seed(master_seed, condition.class_id, i)))
        .collect::<Result<Vec<_>>>()?;
    let features = encoder.encode_batch(&exemplars)?;
    Ok((FeatureVec::mean(&features)?, exemplars))
}

/// Mean encoded feature of real samples, in the given order.
pub fn real_prototype(encoder: &FrozenEncoder, shots: &[ImageSample]) -> Result<FeatureVec> {
    if shots.is_empty() {
        return Err(Error::Empty("real prototype shots"));
    }
    FeatureVec::mean(&encoder.encode_batch(shots)?)
}

/// `(1 - alpha) * gen + alpha * real`. With no real estimate the generative
/// one is returned unchanged; the endpoints `alpha = 0` and `alpha = 1`
/// return the corresponding input bit for bit.
pub fn fuse(gen: &FeatureVec, real: Option<&FeatureVec>, alpha: f64) -> Result<FeatureVec> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight must lie in [0, 1], got {alpha}")));
    }
    let Some(real) = real else {
        return Ok(gen.clone());
    };
    if real.dim() != gen.dim() {
        return Err(Error::Shape {
            what: "real prototype",
            expected: gen.dim(),
            got: real.dim(),
        });
    }
    if alpha == 0.0 {
        return Ok(gen.clone());
    }
    if alpha == 1.0 {
        return Ok(real.clone());
    }
    Ok(FeatureVec(
        gen.0
            .iter()
            .zip(&real.0)
            .map(|(g, r)| (1.0 - alpha) * g + alpha * r)
            .collect(),
    ))
}

/// Which estimates enter the final prototype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrototypeMode {
    Fused { alpha: f64 },
    /// Real samples only; no exemplars are generated.
    RealOnly,
    /// Generated exemplars only; real samples are ignored.
    GenerativeOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeConfig {
    pub n_generated: usize,
    pub mode: PrototypeMode,
    /// Whether base classes also blend in a generative estimate. When off,
    /// base prototypes are plain class means of the base training data.
    pub base_fusion: bool,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            n_generated: 64,
            mode: PrototypeMode::Fused { alpha: 0.5 },
            base_fusion: true,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if let PrototypeMode::Fused { alpha } = self.mode {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
            }
        }
        if self.n_generated == 0 && !matches!(self.mode, PrototypeMode::RealOnly) {
            return Err(Error::Config("n_generated must be positive unless prototypes are real-only".into()));
        }
        Ok(())
    }

    /// Whether a class created in session `session` needs generated exemplars.
    pub fn needs_generation(&self, session: usize) -> bool {
        match self.mode {
            PrototypeMode::RealOnly => false,
            PrototypeMode::GenerativeOnly => true,
            PrototypeMode::Fused { .. } => session > 0 || self.base_fusion,
        }
    }

    pub fn real_only() -> Self {
        Self {
            n_generated: 0,
            mode: PrototypeMode::RealOnly,
            base_fusion: false,
        }
    }

    pub fn generative_only(n_generated: usize) -> Self {
        Self {
            n_generated,
            mode: PrototypeMode::GenerativeOnly,
            base_fusion: true,
        }
    }
}

/// Both estimates for one class before a fusion rule is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEstimate {
    pub class_id: ClassId,
    pub generative: Option<FeatureVec>,
    pub n_generated: usize,
    pub real: Option<FeatureVec>,
    pub n_real: usize,
}

impl ClassEstimate {
    /// Applies `config` to these estimates for a class created in `session`.
    pub fn into_record(&self, config: &PrototypeConfig, session: usize) -> Result<PrototypeRecord> {
        let use_gen = config.needs_generation(session);
        let use_real = !matches!(config.mode, PrototypeMode::GenerativeOnly);
        let generative = if use_gen {
            Some(self.generative.clone().ok_or_else(|| {
                Error::Config(format!("class {} has no generative estimate", self.class_id))
            })?)
        } else {
            None
        };
        let real = if use_real { self.real.clone() } else { None };
        let (fused, alpha) = match (&generative, &real) {
            (Some(g), Some(r)) => {
                let alpha = match config.mode {
                    PrototypeMode::Fused { alpha } => alpha,
                    _ => unreachable!("only fused mode keeps both estimates"),
                };
                (fuse(g, Some(r), alpha)?, alpha)
            }
            (Some(g), None) => (g.clone(), 0.0),
            (None, Some(r)) => (r.clone(), 1.0),
            (None, None) => return Err(Error::MissingShots(self.class_id)),
        };
        Ok(PrototypeRecord {
            class_id: self.class_id,
            session_created: session,
            n_generated: if generative.is_some() { self.n_generated } else { 0 },
            n_real: if real.is_some() { self.n_real } else { 0 },
            gen_proto: generative,
            real_proto: real,
            fused_proto: fused,
            alpha,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeRecord {
    pub class_id: ClassId,
    pub session_created: usize,
    pub gen_proto: Option<FeatureVec>,
    pub real_proto: Option<FeatureVec>,
    pub fused_proto: FeatureVec,
    pub n_generated: usize,
    pub n_real: usize,
    pub alpha: f64,
}

impl PrototypeRecord {
    pub fn checksum(&self) -> Checksum {
        let header = [
            self.class_id as f64,
            self.session_created as f64,
            self.alpha,
            self.n_generated as f64,
            self.n_real as f64,
        ];
        let empty: &[f64] = &[];
        Checksum::of_f64s([
            &header[..],
            self.gen_proto.as_ref().map_or(empty, |f| f.as_slice()),
            self.real_proto.as_ref().map_or(empty, |f| f.as_slice()),
            self.fused_proto.as_slice(),
        ])
    }
}

/// Write-once map from class to prototype record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeStore {
    records: BTreeMap<ClassId, (PrototypeRecord, Checksum)>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserting a class twice is a contract violation.
    pub fn insert(&mut self, record: PrototypeRecord) -> Result<()> {
        if self.records.contains_key(&record.class_id) {
            return Err(Error::Contract(format!(
                "prototype of class {} already exists and cannot be recomputed",
                record.class_id
            )));
        }
        let sum = record.checksum();
        self.records.insert(record.class_id, (record, sum));
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> Option<&PrototypeRecord> {
        self.records.get(&class).map(|(r, _)| r)
    }

    /// Records in ascending class order.
    pub fn records(&self) -> impl Iterator<Item = &PrototypeRecord> {
        self.records.values().map(|(r, _)| r)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.records.contains_key(&class)
    }

    /// Checksums taken when each record was inserted.
    pub fn insertion_checksums(&self) -> BTreeMap<ClassId, Checksum> {
        self.records.iter().map(|(c, (_, s))| (*c, *s)).collect()
    }

    /// Recomputes every record checksum and compares with the one taken at
    /// insertion.
    pub fn verify(&self) -> Result<()> {
        for (class, (record, sum)) in &self.records {
            if record.checksum() != *sum {
                return Err(Error::Contract(format!("prototype of class {class} changed after creation")));
            }
        }
        Ok(())
    }
}

/// Real samples available for each class of a session.
pub type RealSamples<'a> = BTreeMap<ClassId, &'a [ImageSample]>;

/// Estimates for one class: the generative path when `n_generated > 0`, and
/// the real path over `real` when it is non-empty.
pub fn estimate_class<S: ExemplarSampler + ?Sized>(
    sampler: &S,
    encoder: &FrozenEncoder,
    condition: &ConditionVec,
    real: &[ImageSample],
    n_generated: usize,
    master_seed: u64,
) -> Result<ClassEstimate> {
    let generative = if n_generated > 0 {
        Some(generative_prototype(sampler, encoder, condition, n_generated, master_seed)?.0)
    } else {
        None
    };
    let real_proto = if real.is_empty() {
        None
    } else {
        Some(real_prototype(encoder, real)?)
    };
    Ok(ClassEstimate {
        class_id: condition.class_id,
        generative,
        n_generated,
        real: real_proto,
        n_real: real.len(),
    })
}

/// Builds and inserts records for `classes`, created in `session`. Records of
/// classes already in `store` are left untouched; asking for one again is an
/// error.
#[allow(clippy::too_many_arguments)]
pub fn build_session_prototypes<S: ExemplarSampler + ?Sized>(
    store: &mut PrototypeStore,
    session: usize,
    classes: &[ClassId],
    real: &RealSamples<'_>,
    conditions: &crate::embedding::ConditionTable,
    sampler: &S,
    encoder: &FrozenEncoder,
    config: &PrototypeConfig,
    master_seed: u64,
) -> Result<()> {
    config.validate()?;
    conditions.require(classes.iter().copied())?;
    for &class in classes {
        if store.contains(class) {
            return Err(Error::Contract(format!("class {class} already has a prototype")));
        }
    }
    let mut records = Vec::with_capacity(classes.len());
    for &class in classes {
        let shots = real.get(&class).copied().unwrap_or(&[]);
        let needs_real = !matches!(config.mode, PrototypeMode::GenerativeOnly);
        if needs_real && shots.is_empty() {
            return Err(Error::MissingShots(class));
        }
        let n = if config.needs_generation(session) { config.n_generated } else { 0 };
        let estimate = estimate_class(sampler, encoder, conditions.get(class)?, shots, n, master_seed)?;
        records.push(estimate.into_record(config, session)?);
    }
    for r in records {
        store.insert(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ConditionSource, ConditionTable};
    use crate::numerics::{Activation, DenseNet};
    use crate::rng::{seeded, standard_normal_vec};
    use alloc::vec;

    /// Identity on the first `d` coordinates of a `d_v`-dimensional sample.
    fn truncating_encoder(d_v: usize, d: usize) -> FrozenEncoder {
        let mut params = vec![0.0; d * d_v + d];
        for i in 0..d {
            params[i * d_v + i] = 1.0;
        }
        FrozenEncoder::freeze(DenseNet::from_params(&[d_v, d], Activation::Silu, params).unwrap(), 0)
    }

    struct Constant(Vec<f64>);

    impl ExemplarSampler for Constant {
        fn draw(&self, _: &[f64], _: u64) -> Result<ImageSample> {
            Ok(ImageSample::clean(self.0.clone()))
        }
    }

    /// Returns the condition plus seeded Gaussian noise, so each exemplar differs.
    struct NoisyCondition;

    impl ExemplarSampler for NoisyCondition {
        fn draw(&self, condition: &[f64], seed: u64) -> Result<ImageSample> {
            let noise = standard_normal_vec(&mut seeded(seed), condition.len());
            Ok(ImageSample::clean(condition.iter().zip(noise).map(|(c, n)| c + n).collect()))
        }
    }

    fn condition(class_id: ClassId, values: Vec<f64>) -> ConditionVec {
        ConditionVec {
            class_id,
            values,
            source: ConditionSource::File,
        }
    }

    #[test]
    fn constant_sampler_gives_truncated_constant() {
        let enc = truncating_encoder(4, 2);
        let (proto, exemplars) =
            generative_prototype(&Constant(vec![1.0, 2.0, 3.0, 4.0]), &enc, &condition(0, vec![0.0]), 5, 1).unwrap();
        assert_eq!(proto.0, vec![1.0, 2.0]);
        assert_eq!(exemplars.len(), 5);
    }

    #[test]
    fn single_exemplar_prototype_is_its_encoding() {
        let enc = truncating_encoder(3, 3);
        let cond = condition(4, vec![0.5, -0.5, 2.0]);
        let (proto, exemplars) = generative_prototype(&NoisyCondition, &enc, &cond, 1, 9).unwrap();
        assert_eq!(proto, enc.encode(&exemplars[0]).unwrap());
    }

    #[test]
    fn generative_mean_matches_independent_recomputation() {
        let enc = FrozenEncoder::freeze(DenseNet::seeded(&[3, 6, 2], Activation::Silu, &mut seeded(1)).unwrap(), 0);
        let cond = condition(7, vec![1.0, 0.0, -1.0]);
        let (proto, _) = generative_prototype(&NoisyCondition, &enc, &cond, 8, 33).unwrap();
        let mut sum = [0.0; 2];
        for i in 0..8 {
            let ex = NoisyCondition.draw(&cond.values, exemplar_seed(33, 7, i)).unwrap();
            let f = enc.net().forward(&ex.values).unwrap();
            sum[0] += f[0];
            sum[1] += f[1];
        }
        assert_eq!(proto.0, vec![sum[0] / 8.0, sum[1] / 8.0]);
    }

    #[test]
    fn zero_exemplars_rejected() {
        let enc = truncating_encoder(2, 2);
        assert!(generative_prototype(&Constant(vec![0.0, 0.0]), &enc, &condition(0, vec![1.0]), 0, 0).is_err());
    }

    #[test]
    fn real_prototype_cases() {
        let enc = truncating_encoder(2, 2);
        let one = [ImageSample::clean(vec![3.0, -1.0])];
        assert_eq!(real_prototype(&enc, &one).unwrap().0, vec![3.0, -1.0]);
        let two = [ImageSample::clean(vec![1.0, 0.0]), ImageSample::clean(vec![0.0, 1.0])];
        assert_eq!(real_prototype(&enc, &two).unwrap().0, vec![0.5, 0.5]);
        assert_eq!(real_prototype(&enc, &[]).unwrap_err(), Error::Empty("real prototype shots"));

        let enc = FrozenEncoder::freeze(DenseNet::seeded(&[2, 4, 3], Activation::Silu, &mut seeded(2)).unwrap(), 0);
        let shots: Vec<_> = (0..5).map(|i| ImageSample::clean(standard_normal_vec(&mut seeded(i), 2))).collect();
        let proto = real_prototype(&enc, &shots).unwrap();
        let mut sum = vec![0.0; 3];
        for s in &shots {
            for (acc, v) in sum.iter_mut().zip(enc.net().forward(&s.values).unwrap()) {
                *acc += v;
            }
        }
        assert_eq!(proto.0, sum.iter().map(|s| s / 5.0).collect::<Vec<_>>());
    }

    #[test]
    fn fuse_boundaries_and_midpoint() {
        let g = FeatureVec(vec![1.0, 0.0]);
        let r = FeatureVec(vec![0.0, 1.0]);
        assert_eq!(fuse(&g, Some(&r), 0.0).unwrap(), g);
        assert_eq!(fuse(&g, Some(&r), 1.0).unwrap(), r);
        assert_eq!(fuse(&g, Some(&r), 0.5).unwrap().0, vec![0.5, 0.5]);
        assert_eq!(fuse(&g, None, 0.7).unwrap(), g);
        assert!(fuse(&g, Some(&r), 1.5).is_err());
        assert!(fuse(&g, Some(&r), -0.1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fusion_symmetry_and_affinity(
            g in proptest::collection::vec(-5.0f64..5.0, 4),
            r in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (g, r) = (FeatureVec(g), FeatureVec(r));
            let x = fuse(&g, Some(&r), a).unwrap();
            let y = fuse(&r, Some(&g), 1.0 - a).unwrap();
            for (p, q) in x.0.iter().zip(&y.0) {
                proptest::prop_assert!((p - q).abs() <= 1e-12);
            }
            // affine in alpha: the midpoint of two fusions is the fusion at the mid weight
            let fa = fuse(&g, Some(&r), a).unwrap();
            let fb = fuse(&g, Some(&r), b).unwrap();
            let fm = fuse(&g, Some(&r), 0.5 * (a + b)).unwrap();
            for ((p, q), m) in fa.0.iter().zip(&fb.0).zip(&fm.0) {
                proptest::prop_assert!((0.5 * (p + q) - m).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn record_reductions() {
        let est = ClassEstimate {
            class_id: 3,
            generative: Some(FeatureVec(vec![1.0, 2.0])),
            n_generated: 8,
            real: Some(FeatureVec(vec![3.0, 0.0])),
            n_real: 5,
        };
        let real_only = est.into_record(&PrototypeConfig::real_only(), 1).unwrap();
        assert_eq!((real_only.alpha, real_only.n_generated, real_only.n_real), (1.0, 0, 5));
        assert_eq!(real_only.fused_proto, FeatureVec(vec![3.0, 0.0]));
        let gen_only = est.into_record(&PrototypeConfig::generative_only(8), 1).unwrap();
        assert_eq!((gen_only.alpha, gen_only.n_generated, gen_only.n_real), (0.0, 8, 0));
        assert_eq!(gen_only.fused_proto, FeatureVec(vec![1.0, 2.0]));
        let half = est.into_record(&PrototypeConfig::default(), 1).unwrap();
        assert_eq!(half.fused_proto.0, vec![2.0, 1.0]);
    }

    fn session_fixture() -> (ConditionTable, Vec<Vec<ImageSample>>) {
        let conditions = ConditionTable::new((0..4).map(|c| condition(c, vec![c as f64, 1.0]))).unwrap();
        let shots = (0..4)
            .map(|c| {
                (0..5)
                    .map(|i| ImageSample::clean(vec![c as f64 + 0.1 * i as f64, 1.0]))
                    .collect()
            })
            .collect();
        (conditions, shots)
    }

    #[test]
    fn later_sessions_do_not_touch_earlier_records() {
        let (conditions, shots) = session_fixture();
        let enc = truncating_encoder(2, 2);
        let cfg = PrototypeConfig { n_generated: 4, ..PrototypeConfig::default() };
        let mut store = PrototypeStore::new();
        let real: RealSamples = (0..4).map(|c| (c, shots[c as usize].as_slice())).collect();
        build_session_prototypes(&mut store, 0, &[0, 1], &real, &conditions, &NoisyCondition, &enc, &cfg, 5).unwrap();
        let before = store.clone();
        build_session_prototypes(&mut store, 1, &[], &real, &conditions, &NoisyCondition, &enc, &cfg, 5).unwrap();
        assert_eq!(store, before);
        build_session_prototypes(&mut store, 1, &[2, 3], &real, &conditions, &NoisyCondition, &enc, &cfg, 5).unwrap();
        assert_eq!(store.len(), 4);
        for c in [0, 1] {
            assert_eq!(store.get(c), before.get(c));
        }
        store.verify().unwrap();
        let err = build_session_prototypes(&mut store, 2, &[1], &real, &conditions, &NoisyCondition, &enc, &cfg, 5);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn missing_shots_and_conditions_are_errors() {
        let (conditions, shots) = session_fixture();
        let enc = truncating_encoder(2, 2);
        let cfg = PrototypeConfig { n_generated: 2, ..PrototypeConfig::default() };
        let real: RealSamples = [(0, shots[0].as_slice())].into_iter().collect();
        let mut store = PrototypeStore::new();
        let err = build_session_prototypes(&mut store, 1, &[0, 1], &real, &conditions, &NoisyCondition, &enc, &cfg, 1);
        assert_eq!(err.unwrap_err(), Error::MissingShots(1));
        let err = build_session_prototypes(&mut store, 1, &[9], &real, &conditions, &NoisyCondition, &enc, &cfg, 1);
        assert_eq!(err.unwrap_err(), Error::MissingCondition(9));
    }
}
