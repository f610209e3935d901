//! Run configuration: a TOML file with one section per stage.
//!
//! Every key has a default, unknown keys are rejected, and all values are
//! range-checked before any work starts. The fully resolved configuration is
//! echoed into every run directory.

use std::path::{Path, PathBuf};

use fscil_core::diffusion::{OutputHead, TrainConfig};
use fscil_core::numerics::AdamConfig;
use fscil_core::protocol::{PipelineConfig, ProtocolSpec, SessionShape, SyntheticSpec};
use fscil_core::prototypes::{PrototypeConfig, PrototypeMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream of a run is derived from it.
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub dims: DimsSection,
    pub data: DataSection,
    pub protocol: ProtocolSection,
    pub encoder: EncoderSection,
    pub denoiser: DenoiserSection,
    pub prototypes: PrototypeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub offset: f64,
    pub sampling_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsSection {
    pub sample_dim: usize,
    pub feature_dim: usize,
    pub condition_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory with `train.csv`, `eval.csv` and `conditions.csv` when
    /// `source = "file"`.
    pub dir: Option<PathBuf>,
    pub sigma: f64,
    pub min_attributes: usize,
    pub max_attributes: usize,
    pub weight_low: f64,
    pub weight_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub ways: usize,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub base_classes: usize,
    pub train_per_base_class: usize,
    pub eval_per_class: usize,
    pub sessions: Vec<SessionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Epsilon,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub hidden: Vec<usize>,
    pub time_width: usize,
    pub condition_width: usize,
    pub head: HeadKind,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeSection {
    pub n_generated: usize,
    pub alpha: f64,
    pub base_fusion: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            offset: fscil_core::schedule::DEFAULT_OFFSET,
            sampling_steps: 50,
        }
    }
}

impl Default for DimsSection {
    fn default() -> Self {
        Self {
            sample_dim: 64,
            feature_dim: 16,
            condition_dim: 8,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            sigma: 1.5,
            min_attributes: 2,
            max_attributes: 3,
            weight_low: 0.5,
            weight_high: 1.0,
        }
    }
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            base_classes: 10,
            train_per_base_class: 200,
            eval_per_class: 100,
            sessions: vec![SessionEntry { ways: 2, shots: 5 }; 4],
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            epochs: 30,
            iters_per_epoch: 0,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
        }
    }
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            time_width: 16,
            condition_width: 16,
            head: HeadKind::Velocity,
            epochs: 30,
            iters_per_epoch: 200,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
        }
    }
}

impl Default for PrototypeSection {
    fn default() -> Self {
        Self {
            n_generated: 64,
            alpha: 0.5,
            base_fusion: true,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks for every key.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        check(s.steps >= 1, || "schedule.steps must be at least 1".into())?;
        check(s.offset > 0.0 && s.offset < 1.0, || format!("schedule.offset must lie in (0, 1), got {}", s.offset))?;
        check(s.sampling_steps >= 1 && s.sampling_steps <= s.steps, || {
            format!("schedule.sampling_steps must lie in 1..={}, got {}", s.steps, s.sampling_steps)
        })?;

        let d = &self.dims;
        check(d.sample_dim >= 1 && d.feature_dim >= 1 && d.condition_dim >= 1, || {
            "dims.sample_dim, dims.feature_dim and dims.condition_dim must be positive".into()
        })?;
        check(d.condition_dim <= d.sample_dim, || {
            format!(
                "dims.condition_dim ({}) must not exceed dims.sample_dim ({})",
                d.condition_dim, d.sample_dim
            )
        })?;

        let data = &self.data;
        if data.source == DataSource::File {
            check(data.dir.is_some(), || "data.dir is required when data.source = \"file\"".into())?;
        }
        check(data.sigma >= 0.0 && data.sigma.is_finite(), || format!("data.sigma must be non-negative, got {}", data.sigma))?;
        check(
            data.min_attributes >= 1 && data.min_attributes <= data.max_attributes && data.max_attributes <= d.condition_dim,
            || "need 1 <= data.min_attributes <= data.max_attributes <= dims.condition_dim".into(),
        )?;
        check(data.weight_low > 0.0 && data.weight_low <= data.weight_high, || {
            "need 0 < data.weight_low <= data.weight_high".into()
        })?;

        let p = &self.protocol;
        check(p.base_classes >= 2, || "protocol.base_classes must be at least 2".into())?;
        check(p.train_per_base_class >= 1 && p.eval_per_class >= 1, || {
            "protocol.train_per_base_class and protocol.eval_per_class must be positive".into()
        })?;
        for (i, sess) in p.sessions.iter().enumerate() {
            check(sess.shots >= 1, || format!("protocol.sessions[{i}].shots must be at least 1"))?;
        }

        let e = &self.encoder;
        check(!e.hidden.contains(&0), || "encoder.hidden widths must be positive".into())?;
        check(e.batch_size >= 1, || "encoder.batch_size must be positive".into())?;
        check(e.lr > 0.0 && e.lr.is_finite(), || "encoder.lr must be positive".into())?;
        check(e.weight_decay >= 0.0, || "encoder.weight_decay must be non-negative".into())?;

        let n = &self.denoiser;
        check(!n.hidden.contains(&0), || "denoiser.hidden widths must be positive".into())?;
        check(n.time_width.is_multiple_of(2), || "denoiser.time_width must be even".into())?;
        check(n.condition_width >= 1, || "denoiser.condition_width must be positive".into())?;
        check(n.batch_size >= 1, || "denoiser.batch_size must be positive".into())?;
        check(n.lr > 0.0 && n.lr.is_finite(), || "denoiser.lr must be positive".into())?;
        check(n.weight_decay >= 0.0, || "denoiser.weight_decay must be non-negative".into())?;

        let pr = &self.prototypes;
        check((0.0..=1.0).contains(&pr.alpha), || format!("prototypes.alpha must lie in [0, 1], got {}", pr.alpha))?;
        check(pr.n_generated >= 1, || "prototypes.n_generated must be positive".into())?;
        Ok(())
    }

    pub fn protocol_spec(&self) -> ProtocolSpec {
        ProtocolSpec {
            num_base_classes: self.protocol.base_classes,
            sessions: self
                .protocol
                .sessions
                .iter()
                .map(|s| SessionShape { ways: s.ways, shots: s.shots })
                .collect(),
            train_per_base_class: self.protocol.train_per_base_class,
            eval_per_class: self.protocol.eval_per_class,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            sample_dim: self.dims.sample_dim,
            condition_dim: self.dims.condition_dim,
            sigma: self.data.sigma,
            min_attributes: self.data.min_attributes,
            max_attributes: self.data.max_attributes,
            weight_low: self.data.weight_low,
            weight_high: self.data.weight_high,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let train = |epochs, iters_per_epoch, batch_size, lr, weight_decay| TrainConfig {
            epochs,
            iters_per_epoch,
            batch_size,
            optimizer: AdamConfig {
                learning_rate: lr,
                weight_decay,
                ..AdamConfig::default()
            },
        };
        let e = &self.encoder;
        let n = &self.denoiser;
        PipelineConfig {
            schedule_steps: self.schedule.steps,
            cosine_offset: self.schedule.offset,
            sampling_steps: self.schedule.sampling_steps,
            feature_dim: self.dims.feature_dim,
            encoder_hidden: e.hidden.clone(),
            time_width: n.time_width,
            condition_width: n.condition_width,
            denoiser_hidden: n.hidden.clone(),
            denoiser_head: match n.head {
                HeadKind::Epsilon => OutputHead::Epsilon,
                HeadKind::Velocity => OutputHead::Velocity,
            },
            encoder_train: train(e.epochs, e.iters_per_epoch, e.batch_size, e.lr, e.weight_decay),
            denoiser_train: train(n.epochs, n.iters_per_epoch, n.batch_size, n.lr, n.weight_decay),
        }
    }

    pub fn prototype_config(&self) -> PrototypeConfig {
        self.prototype_config_for(self.prototypes.alpha)
    }

    pub fn prototype_config_for(&self, alpha: f64) -> PrototypeConfig {
        PrototypeConfig {
            n_generated: self.prototypes.n_generated,
            mode: PrototypeMode::Fused { alpha },
            base_fusion: self.prototypes.base_fusion,
        }
    }

    pub fn real_only_config(&self) -> PrototypeConfig {
        PrototypeConfig::real_only()
    }

    pub fn generative_only_config(&self) -> PrototypeConfig {
        PrototypeConfig {
            base_fusion: self.prototypes.base_fusion,
            ..PrototypeConfig::generative_only(self.prototypes.n_generated)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.schedule.sampling_steps, 50);
        assert_eq!(cfg.denoiser.weight_decay, 5e-4);
        assert_eq!(cfg.pipeline_config(), PipelineConfig::default());
        assert_eq!(cfg.synthetic_spec(), SyntheticSpec::default());
        assert_eq!(cfg.protocol_spec(), ProtocolSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[schedule]\nstepz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("stepz")), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn range_violations_name_the_key() {
        let err = RunConfig::from_toml_str("[dims]\nsample_dim = 4\ncondition_dim = 8\n").unwrap_err();
        assert!(err.to_string().contains("condition_dim"), "{err}");
        let err = RunConfig::from_toml_str("[prototypes]\nalpha = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("alpha"));
        let err = RunConfig::from_toml_str("[schedule]\nsteps = 10\nsampling_steps = 11\n").unwrap_err();
        assert!(err.to_string().contains("sampling_steps"));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 77;
        cfg.protocol.sessions = vec![SessionEntry { ways: 5, shots: 5 }; 8];
        cfg.prototypes.alpha = 0.25;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sessions_parse_as_inline_tables() {
        let cfg = RunConfig::from_toml_str("[protocol]\nbase_classes = 6\nsessions = [{ ways = 3, shots = 1 }]\n").unwrap();
        let spec = cfg.protocol_spec();
        assert_eq!(spec.num_base_classes, 6);
        assert_eq!(spec.sessions, vec![SessionShape { ways: 3, shots: 1 }]);
    }
}
