//! Session driver for the few-shot class-incremental protocol.
//!
//! Session 0 trains the encoder, then the denoiser, and freezes both. Every
//! later session only adds prototypes for its new classes and evaluates over
//! all classes seen so far. Parameter checksums and the optimizer-step count
//! are compared against their values at freeze time on every session; any
//! drift aborts the run.
//!
//! Several prototype rules ("tracks") can be driven over the same frozen
//! models and the same recorded shots, which is how baselines and alpha
//! sweeps stay paired.

mod synthetic;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

pub use synthetic::{attribute_basis, class_mixtures, generate_dataset, mixture_mean, SyntheticData, SyntheticSpec};

use crate::checksum::Checksum;
use crate::classifier::{evaluate_session, SessionReport};
use crate::diffusion::{train_denoiser, Denoiser, DenoiserConfig, FrozenDenoiser, ImageSample, OutputHead, TrainConfig};
use crate::embedding::{train_encoder, ConditionTable, EncoderConfig, FeatureVec, FrozenEncoder};
use crate::numerics::AdamConfig;
use crate::prototypes::{estimate_class, ClassEstimate, DdimSampler, PrototypeConfig, PrototypeStore};
use crate::rng::{self, stage};
use crate::schedule::{subsample_timesteps, NoiseSchedule, DEFAULT_OFFSET};
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionShape {
    pub ways: usize,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub num_base_classes: usize,
    /// Incremental sessions, in order.
    pub sessions: Vec<SessionShape>,
    pub train_per_base_class: usize,
    pub eval_per_class: usize,
}

impl Default for ProtocolSpec {
    /// Desk-scale protocol: 10 base classes and four 2-way 5-shot sessions.
    fn default() -> Self {
        Self {
            num_base_classes: 10,
            sessions: vec![SessionShape { ways: 2, shots: 5 }; 4],
            train_per_base_class: 200,
            eval_per_class: 100,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_base_classes < 2 {
            return Err(Error::Config("the base session needs at least 2 classes".into()));
        }
        if self.train_per_base_class == 0 || self.eval_per_class == 0 {
            return Err(Error::Config("per-class train and eval counts must be positive".into()));
        }
        if let Some(i) = self.sessions.iter().position(|s| s.shots == 0) {
            return Err(Error::Config(format!("incremental session {} has zero shots", i + 1)));
        }
        Ok(())
    }

    /// Base session plus incremental sessions.
    pub fn num_sessions(&self) -> usize {
        1 + self.sessions.len()
    }

    pub fn total_classes(&self) -> usize {
        self.num_base_classes + self.sessions.iter().map(|s| s.ways).sum::<usize>()
    }

    /// Classes introduced in `session`.
    pub fn session_classes(&self, session: usize) -> Range<ClassId> {
        let start = if session == 0 {
            0
        } else {
            self.num_base_classes + self.sessions[..session - 1].iter().map(|s| s.ways).sum::<usize>()
        };
        let ways = if session == 0 {
            self.num_base_classes
        } else {
            self.sessions[session - 1].ways
        };
        start as ClassId..(start + ways) as ClassId
    }

    /// All classes seen up to and including `session`.
    pub fn seen_classes(&self, session: usize) -> Range<ClassId> {
        0..self.session_classes(session).end
    }

    pub fn session_of(&self, class: ClassId) -> Option<usize> {
        (0..self.num_sessions()).find(|&s| self.session_classes(s).contains(&class))
    }
}

/// Samples of every class: training data for base classes, the recorded
/// shots for novel ones, plus evaluation samples and condition vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_dim: usize,
    pub conditions: ConditionTable,
    pub train: BTreeMap<ClassId, Vec<ImageSample>>,
    pub eval: Vec<(ImageSample, ClassId)>,
}

impl Dataset {
    /// Checks the dataset against the protocol before any work starts.
    pub fn validate(&self, protocol: &ProtocolSpec) -> Result<()> {
        protocol.validate()?;
        let total = protocol.total_classes() as ClassId;
        self.conditions.require(0..total)?;
        for class in 0..total {
            let n = self.train.get(&class).map_or(0, Vec::len);
            if n == 0 {
                return Err(if class < protocol.num_base_classes as ClassId {
                    Error::Config(format!("base class {class} has no training samples"))
                } else {
                    Error::MissingShots(class)
                });
            }
        }
        if let Some(extra) = self.train.keys().find(|&&c| c >= total) {
            return Err(Error::Config(format!("training data contains class {extra} outside the protocol")));
        }
        for (samples, what) in self
            .train
            .values()
            .flat_map(|v| v.iter())
            .map(|s| (s, "training sample"))
            .chain(self.eval.iter().map(|(s, _)| (s, "evaluation sample")))
        {
            if samples.dim() != self.sample_dim {
                return Err(Error::Shape {
                    what,
                    expected: self.sample_dim,
                    got: samples.dim(),
                });
            }
        }
        if let Some((_, c)) = self.eval.iter().find(|(_, c)| *c >= total) {
            return Err(Error::Config(format!("evaluation data contains class {c} outside the protocol")));
        }
        Ok(())
    }

    /// Labelled base-session training pairs in ascending class order.
    pub fn base_pairs(&self, protocol: &ProtocolSpec) -> Vec<(ImageSample, ClassId)> {
        protocol
            .session_classes(0)
            .flat_map(|c| self.train.get(&c).into_iter().flatten().map(move |s| (s.clone(), c)))
            .collect()
    }
}

/// Architecture and optimization settings of the base session.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub schedule_steps: usize,
    pub cosine_offset: f64,
    pub sampling_steps: usize,
    pub feature_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub time_width: usize,
    pub condition_width: usize,
    pub denoiser_hidden: Vec<usize>,
    pub denoiser_head: OutputHead,
    pub encoder_train: TrainConfig,
    pub denoiser_train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schedule_steps: 1000,
            cosine_offset: DEFAULT_OFFSET,
            sampling_steps: 50,
            feature_dim: 16,
            encoder_hidden: vec![64],
            time_width: 16,
            condition_width: 16,
            denoiser_hidden: vec![128, 128],
            denoiser_head: OutputHead::Velocity,
            encoder_train: TrainConfig {
                epochs: 30,
                iters_per_epoch: 0,
                batch_size: 64,
                optimizer: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
            },
            denoiser_train: TrainConfig {
                epochs: 30,
                iters_per_epoch: 200,
                batch_size: 64,
                optimizer: AdamConfig {
                    learning_rate: 1e-3,
                    ..AdamConfig::default()
                },
            },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        subsample_timesteps(self.schedule_steps, self.sampling_steps)?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.encoder_hidden.contains(&0) || self.denoiser_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        self.encoder_train.validate()?;
        self.denoiser_train.validate()?;
        NoiseSchedule::cosine(self.schedule_steps, self.cosine_offset).map(|_| ())
    }
}

/// Everything the incremental sessions are allowed to use. Nothing in here
/// can be mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModels {
    pub encoder: FrozenEncoder,
    pub denoiser: FrozenDenoiser,
    pub schedule: NoiseSchedule,
    pub sampling_steps: usize,
}

impl FrozenModels {
    pub fn sampler(&self) -> DdimSampler<'_, FrozenDenoiser> {
        DdimSampler {
            predictor: &self.denoiser,
            schedule: &self.schedule,
            sampling_steps: self.sampling_steps,
        }
    }

    pub fn checksums(&self) -> ModelChecksums {
        ModelChecksums {
            encoder: self.encoder.checksum(),
            denoiser: self.denoiser.checksum(),
        }
    }

    /// Optimizer updates that produced these parameters.
    pub fn optimizer_steps(&self) -> u64 {
        self.encoder.optimizer_steps() + self.denoiser.optimizer_steps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelChecksums {
    pub encoder: Checksum,
    pub denoiser: Checksum,
}

/// Loss curves and diagnostics of the base-session training.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseTraining {
    pub encoder_loss: Vec<f64>,
    pub encoder_train_accuracy: f64,
    pub denoiser_loss: Vec<f64>,
}

/// Trains the encoder on the base classes, freezes it, then trains the
/// denoiser on the same data and freezes it.
pub fn train_base_models(
    dataset: &Dataset,
    protocol: &ProtocolSpec,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(FrozenModels, BaseTraining)> {
    config.validate()?;
    dataset.validate(protocol)?;
    let pairs = dataset.base_pairs(protocol);
    let schedule = NoiseSchedule::cosine(config.schedule_steps, config.cosine_offset)?;

    let encoder_cfg = EncoderConfig {
        sample_dim: dataset.sample_dim,
        feature_dim: config.feature_dim,
        hidden: config.encoder_hidden.clone(),
    };
    let encoder = train_encoder(
        &encoder_cfg,
        &pairs,
        protocol.num_base_classes,
        &config.encoder_train,
        rng::derive_seed(seed, &[stage::ENCODER]),
    )?;

    let denoiser_cfg = DenoiserConfig {
        sample_dim: dataset.sample_dim,
        condition_dim: dataset.conditions.dim(),
        time_width: config.time_width,
        condition_width: config.condition_width,
        hidden: config.denoiser_hidden.clone(),
        head: config.denoiser_head,
        schedule_steps: config.schedule_steps,
        cosine_offset: config.cosine_offset,
    };
    let denoiser_seed = rng::derive_seed(seed, &[stage::DENOISER]);
    let init = Denoiser::seeded(denoiser_cfg, &mut rng::seeded(denoiser_seed))?;
    let denoiser = train_denoiser(
        init,
        &pairs,
        &dataset.conditions,
        &schedule,
        &config.denoiser_train,
        rng::derive_seed(denoiser_seed, &[1]),
    )?;

    Ok((
        FrozenModels {
            encoder: encoder.frozen,
            denoiser: denoiser.frozen,
            schedule,
            sampling_steps: config.sampling_steps,
        },
        BaseTraining {
            encoder_loss: encoder.loss_curve,
            encoder_train_accuracy: encoder.train_accuracy,
            denoiser_loss: denoiser.loss_curve,
        },
    ))
}

/// One prototype rule driven through the sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub config: PrototypeConfig,
    pub store: PrototypeStore,
    pub reports: Vec<SessionReport>,
}

impl Track {
    pub fn new(config: PrototypeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            store: PrototypeStore::new(),
            reports: Vec::new(),
        })
    }

    /// Index of the next session this track will run.
    pub fn next_session(&self) -> usize {
        self.reports.len()
    }
}

/// Frozen models bound to a dataset and protocol; the state shared by all
/// sessions and tracks.
pub struct Pipeline<'d> {
    dataset: &'d Dataset,
    protocol: ProtocolSpec,
    models: FrozenModels,
    generation_seed: u64,
    eval_features: Vec<(FeatureVec, ClassId)>,
    frozen_checksums: ModelChecksums,
    frozen_optimizer_steps: u64,
}

impl<'d> Pipeline<'d> {
    /// Binds frozen models. Checksums taken here are the reference for the
    /// training-free checks of every later session.
    pub fn new(dataset: &'d Dataset, protocol: ProtocolSpec, models: FrozenModels, seed: u64) -> Result<Self> {
        dataset.validate(&protocol)?;
        if models.encoder.net().input_dim() != dataset.sample_dim || models.denoiser.config().sample_dim != dataset.sample_dim {
            return Err(Error::Config("model sample dimension does not match the dataset".into()));
        }
        if models.denoiser.config().condition_dim != dataset.conditions.dim() {
            return Err(Error::Config("denoiser condition dimension does not match the condition table".into()));
        }
        let eval_features = dataset
            .eval
            .iter()
            .map(|(s, c)| Ok((models.encoder.encode(s)?, *c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            frozen_checksums: models.checksums(),
            frozen_optimizer_steps: models.optimizer_steps(),
            generation_seed: rng::derive_seed(seed, &[stage::GENERATION]),
            protocol,
            models,
            eval_features,
        })
    }

    pub fn models(&self) -> &FrozenModels {
        &self.models
    }

    pub fn protocol(&self) -> &ProtocolSpec {
        &self.protocol
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn frozen_checksums(&self) -> ModelChecksums {
        self.frozen_checksums
    }

    /// Master seed of exemplar generation; see [`crate::prototypes::exemplar_seed`].
    pub fn generation_seed(&self) -> u64 {
        self.generation_seed
    }

    /// Estimates for one class; `n_generated == 0` skips the generative path.
    /// Pure in `&self`, so classes can be estimated in any order or in
    /// parallel with identical results.
    pub fn estimate(&self, class: ClassId, n_generated: usize) -> Result<ClassEstimate> {
        let real = self.dataset.train.get(&class).map_or(&[][..], Vec::as_slice);
        estimate_class(
            &self.models.sampler(),
            &self.models.encoder,
            self.dataset.conditions.get(class)?,
            real,
            n_generated,
            self.generation_seed,
        )
    }

    /// Estimates for every class of `session`, as needed by `config`.
    pub fn session_estimates(&self, session: usize, config: &PrototypeConfig) -> Result<Vec<ClassEstimate>> {
        let n = if config.needs_generation(session) { config.n_generated } else { 0 };
        self.protocol
            .session_classes(session)
            .map(|c| self.estimate(c, n))
            .collect()
    }

    /// Verifies that nothing trainable moved since freezing.
    pub fn check_contract(&self, track: &Track) -> Result<u64> {
        let now = self.models.checksums();
        if now.encoder != self.frozen_checksums.encoder {
            return Err(Error::Contract("encoder parameters changed after the base session".into()));
        }
        if now.denoiser != self.frozen_checksums.denoiser {
            return Err(Error::Contract("denoiser parameters changed after the base session".into()));
        }
        let steps = self.models.optimizer_steps() - self.frozen_optimizer_steps;
        if steps != 0 {
            return Err(Error::Contract(format!("{steps} optimizer steps after the base session")));
        }
        track.store.verify()?;
        Ok(steps)
    }

    /// Adds the records of the next session of `track` from precomputed
    /// estimates and evaluates over all seen classes.
    pub fn apply_session(&self, track: &mut Track, estimates: &[ClassEstimate]) -> Result<()> {
        let session = track.next_session();
        if session >= self.protocol.num_sessions() {
            return Err(Error::Config(format!("protocol has only {} sessions", self.protocol.num_sessions())));
        }
        self.check_contract(track)?;
        let classes = self.protocol.session_classes(session);
        self.dataset.conditions.require(classes.clone())?;
        let given: Vec<ClassId> = estimates.iter().map(|e| e.class_id).collect();
        if !given.iter().copied().eq(classes.clone()) {
            return Err(Error::Config(format!(
                "session {session} expects estimates for classes {classes:?}, got {given:?}"
            )));
        }
        let expected_n = if track.config.needs_generation(session) { track.config.n_generated } else { 0 };
        let mut records = Vec::with_capacity(estimates.len());
        for e in estimates {
            if expected_n > 0 && (e.generative.is_none() || e.n_generated != expected_n) {
                return Err(Error::Config(format!(
                    "class {} was estimated with {} exemplars, track needs {expected_n}",
                    e.class_id, e.n_generated
                )));
            }
            records.push(e.into_record(&track.config, session)?);
        }
        for r in records {
            track.store.insert(r)?;
        }
        let seen = self.protocol.seen_classes(session);
        let prototypes: Vec<_> = track.store.records().filter(|r| seen.contains(&r.class_id)).collect();
        let queries: Vec<(FeatureVec, ClassId)> = self
            .eval_features
            .iter()
            .filter(|(_, c)| seen.contains(c))
            .cloned()
            .collect();
        let report = evaluate_session(session, &prototypes, &queries, self.protocol.num_base_classes as ClassId)?;
        self.check_contract(track)?;
        track.reports.push(report);
        Ok(())
    }

    /// Runs the next session of `track`, computing estimates serially.
    pub fn run_session(&self, track: &mut Track) -> Result<()> {
        let estimates = self.session_estimates(track.next_session(), &track.config)?;
        self.apply_session(track, &estimates)
    }

    /// Runs every remaining session of a fresh track.
    pub fn run_track(&self, config: PrototypeConfig) -> Result<Track> {
        let mut track = Track::new(config)?;
        while track.next_session() < self.protocol.num_sessions() {
            self.run_session(&mut track)?;
        }
        Ok(track)
    }
}

/// Base session end to end: train and freeze both models, build the base
/// prototypes and report on them.
pub fn run_base_session<'d>(
    dataset: &'d Dataset,
    protocol: &ProtocolSpec,
    config: &PipelineConfig,
    prototypes: PrototypeConfig,
    seed: u64,
) -> Result<(Pipeline<'d>, Track, BaseTraining)> {
    let (models, training) = train_base_models(dataset, protocol, config, seed)?;
    let pipeline = Pipeline::new(dataset, protocol.clone(), models, seed)?;
    let mut track = Track::new(prototypes)?;
    pipeline.run_session(&mut track)?;
    Ok((pipeline, track, training))
}
