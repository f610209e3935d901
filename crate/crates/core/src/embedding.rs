//! Frozen feature encoder and per-class condition vectors.
//!
//! The encoder is trained once on the base classes with a temporary linear
//! classification head, then frozen; the head is discarded. Condition vectors
//! are supplied externally and are the only channel through which a novel
//! class's identity reaches the generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::checksum::Checksum;
use crate::diffusion::{ImageSample, TrainConfig};
use crate::numerics::{softmax_cross_entropy, Activation, Adam, DenseNet};
use crate::rng;
use crate::{ClassId, Error, Result};

/// Point in the encoder's feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }

    /// Arithmetic mean accumulated in iteration order.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a FeatureVec>) -> Result<FeatureVec> {
        let mut iter = items.into_iter();
        let first = iter.next().ok_or(Error::Empty("feature mean"))?;
        let mut sum = first.0.clone();
        let mut count = 1usize;
        for f in iter {
            if f.dim() != sum.len() {
                return Err(Error::Shape {
                    what: "feature vector",
                    expected: sum.len(),
                    got: f.dim(),
                });
            }
            for (s, v) in sum.iter_mut().zip(&f.0) {
                *s += v;
            }
            count += 1;
        }
        let n = count as f64;
        Ok(FeatureVec(sum.into_iter().map(|s| s / n).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSource {
    File,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVec {
    pub class_id: ClassId,
    pub values: Vec<f64>,
    pub source: ConditionSource,
}

/// One condition vector per class, all of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTable {
    dim: usize,
    rows: BTreeMap<ClassId, ConditionVec>,
}

impl ConditionTable {
    pub fn new(rows: impl IntoIterator<Item = ConditionVec>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut dim = None;
        for row in rows {
            let expected = *dim.get_or_insert(row.values.len());
            if row.values.len() != expected {
                return Err(Error::Shape {
                    what: "condition vector",
                    expected,
                    got: row.values.len(),
                });
            }
            if row.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("condition vector of class {}", row.class_id)));
            }
            let id = row.class_id;
            if map.insert(id, row).is_some() {
                return Err(Error::DuplicateClass(id));
            }
        }
        let dim = dim.ok_or(Error::Empty("condition table"))?;
        if dim == 0 {
            return Err(Error::Config("condition vectors must be non-empty".into()));
        }
        Ok(Self { dim, rows: map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Result<&ConditionVec> {
        self.rows.get(&class).ok_or(Error::MissingCondition(class))
    }

    /// Fails on the first class (in ascending order) without a vector.
    pub fn require(&self, classes: impl IntoIterator<Item = ClassId>) -> Result<()> {
        classes.into_iter().try_for_each(|c| self.get(c).map(|_| ()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConditionVec> {
        self.rows.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub sample_dim: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
}

impl EncoderConfig {
    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.sample_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.feature_dim);
        dims
    }
}

/// Encoder with no mutable access path.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    net: DenseNet,
    optimizer_steps: u64,
}

impl FrozenEncoder {
    pub fn freeze(net: DenseNet, optimizer_steps: u64) -> Self {
        Self { net, optimizer_steps }
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }

    pub fn checksum(&self) -> Checksum {
        Checksum::of_f64s([self.net.params()])
    }

    /// Refuses noisy samples: encoding one means the pipeline skipped sampling.
    pub fn encode(&self, sample: &ImageSample) -> Result<FeatureVec> {
        if !sample.is_clean() {
            return Err(Error::NoisySample(sample.timestep));
        }
        Ok(FeatureVec(self.net.forward(&sample.values)?))
    }

    pub fn encode_batch<'a>(&self, samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<Vec<FeatureVec>> {
        samples.into_iter().map(|s| self.encode(s)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub frozen: FrozenEncoder,
    pub loss_curve: Vec<f64>,
    /// Accuracy of encoder + temporary head on the training set, before the
    /// head is dropped.
    pub train_accuracy: f64,
}

/// Cross-entropy training of the encoder through a temporary linear head over
/// `num_base_classes` outputs. Labels must lie in `0..num_base_classes`.
pub fn train_encoder(
    config: &EncoderConfig,
    data: &[(ImageSample, ClassId)],
    num_base_classes: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainedEncoder> {
    if num_base_classes < 2 {
        return Err(Error::Config(format!(
            "encoder training needs at least 2 base classes, got {num_base_classes}"
        )));
    }
    train.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("encoder training set"));
    }
    for (sample, class) in data {
        if *class as usize >= num_base_classes {
            return Err(Error::Config(format!("class {class} is not a base class")));
        }
        if !sample.is_clean() {
            return Err(Error::NoisySample(sample.timestep));
        }
    }

    let mut rng = rng::seeded(seed);
    let mut net = DenseNet::seeded(&config.dims(), Activation::Silu, &mut rng)?;
    let mut head = DenseNet::seeded(&[config.feature_dim, num_base_classes], Activation::Identity, &mut rng)?;
    let mut net_opt = Adam::new(train.optimizer, net.num_params())?;
    let mut head_opt = Adam::new(train.optimizer, head.num_params())?;
    let iterations = train.iterations(data.len());
    let mut loss_curve = Vec::with_capacity(train.epochs);

    for _ in 0..train.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..iterations {
            let mut net_grads = vec![0.0; net.num_params()];
            let mut head_grads = vec![0.0; head.num_params()];
            let mut batch_loss = 0.0;
            for _ in 0..train.batch_size {
                let (sample, class) = &data[rng.random_range(0..data.len())];
                let trace = net.forward_trace(&sample.values)?;
                let head_trace = head.forward_trace(trace.output())?;
                let (loss, upstream) = softmax_cross_entropy(head_trace.output(), *class as usize);
                batch_loss += loss;
                let feature_grad = head.backward_trace(&head_trace, &upstream, &mut head_grads)?;
                net.backward_trace(&trace, &feature_grad, &mut net_grads)?;
            }
            let scale = 1.0 / train.batch_size as f64;
            net_grads.iter_mut().chain(&mut head_grads).for_each(|g| *g *= scale);
            net_opt.step(net.params_mut(), &net_grads)?;
            head_opt.step(head.params_mut(), &head_grads)?;
            epoch_loss += batch_loss * scale;
        }
        loss_curve.push(epoch_loss / iterations as f64);
    }

    let mut correct = 0usize;
    for (sample, class) in data {
        let logits = head.forward(&net.forward(&sample.values)?)?;
        if argmax(&logits) == *class as usize {
            correct += 1;
        }
    }

    Ok(TrainedEncoder {
        frozen: FrozenEncoder::freeze(net, net_opt.steps()),
        loss_curve,
        train_accuracy: correct as f64 / data.len() as f64,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
