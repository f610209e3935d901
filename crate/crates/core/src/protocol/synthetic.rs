//! Procedural stand-in for an image benchmark.
//!
//! Sample space carries `condition_dim` orthogonal attribute patterns. Each
//! class is a weighted mixture of a few attributes; its condition vector is
//! exactly that weight vector, and its clean samples are Gaussian around the
//! mixed pattern. Novel classes recombine attributes that already occur in
//! base classes, so a generator trained on base classes can in principle
//! reach them through the condition vector alone.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Dataset, ProtocolSpec};
use crate::diffusion::ImageSample;
use crate::embedding::{ConditionSource, ConditionTable, ConditionVec};
use crate::rng::{self, stage, standard_normal_vec};
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub sample_dim: usize,
    pub condition_dim: usize,
    /// Isotropic standard deviation of clean samples around the class mean.
    pub sigma: f64,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Mixture weights are drawn uniformly from `[weight_low, weight_high]`.
    pub weight_low: f64,
    pub weight_high: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sample_dim: 64,
            condition_dim: 8,
            sigma: 1.5,
            min_attributes: 2,
            max_attributes: 3,
            weight_low: 0.5,
            weight_high: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.condition_dim > self.sample_dim {
            return Err(Error::Config(format!(
                "condition_dim ({}) must not exceed sample_dim ({}): the attribute basis must be orthogonal",
                self.condition_dim, self.sample_dim
            )));
        }
        if self.condition_dim == 0 {
            return Err(Error::Config("condition_dim must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.min_attributes == 0 || self.min_attributes > self.max_attributes || self.max_attributes > self.condition_dim {
            return Err(Error::Config(format!(
                "need 1 <= min_attributes <= max_attributes <= condition_dim, got {}..={} of {}",
                self.min_attributes, self.max_attributes, self.condition_dim
            )));
        }
        if !(self.weight_low > 0.0 && self.weight_low <= self.weight_high) {
            return Err(Error::Config("need 0 < weight_low <= weight_high".into()));
        }
        Ok(())
    }
}

/// Generated dataset plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Orthogonal attribute patterns, each of norm `sqrt(sample_dim)`.
    pub basis: Vec<Vec<f64>>,
    pub class_means: BTreeMap<ClassId, Vec<f64>>,
}

/// Gram-Schmidt on seeded Gaussian vectors, rescaled to unit RMS per coordinate.
pub fn attribute_basis(sample_dim: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count > sample_dim {
        return Err(Error::Config(format!(
            "cannot build {count} orthogonal patterns in {sample_dim} dimensions"
        )));
    }
    let mut rng = rng::derived(seed, &[stage::BASIS]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = standard_normal_vec(&mut rng, sample_dim);
        // two passes keep the result orthogonal to rounding level
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    let scale = libm::sqrt(sample_dim as f64);
    Ok(basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect())
}

fn draw_subset<R: Rng>(
    rng: &mut R,
    pool: &[usize],
    forced: Option<usize>,
    spec: &SyntheticSpec,
    taken: &BTreeSet<Vec<usize>>,
) -> Option<Vec<usize>> {
    for _ in 0..1000 {
        let size = rng.random_range(spec.min_attributes..=spec.max_attributes).min(pool.len());
        let mut set: BTreeSet<usize> = forced.into_iter().collect();
        while set.len() < size {
            set.insert(pool[rng.random_range(0..pool.len())]);
        }
        let subset: Vec<usize> = set.into_iter().collect();
        if !taken.contains(&subset) {
            return Some(subset);
        }
    }
    None
}

/// Attribute weights (= condition vectors) for every class of the protocol.
pub fn class_mixtures(spec: &SyntheticSpec, protocol: &ProtocolSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::derived(seed, &[stage::CONDITIONS]);
    let mut taken = BTreeSet::new();
    let mut mixtures = Vec::with_capacity(protocol.total_classes());
    let all: Vec<usize> = (0..spec.condition_dim).collect();
    let mut covered = BTreeSet::new();
    for class in 0..protocol.total_classes() {
        let is_base = class < protocol.num_base_classes;
        let subset = if is_base {
            // cycle a forced attribute so base classes cover the whole basis
            draw_subset(&mut rng, &all, Some(class % spec.condition_dim), spec, &taken)
        } else {
            let pool: Vec<usize> = covered.iter().copied().collect();
            draw_subset(&mut rng, &pool, None, spec, &taken)
        }
        .ok_or_else(|| Error::Config(format!("could not draw a distinct attribute mixture for class {class}")))?;
        let mut weights = vec![0.0; spec.condition_dim];
        for &a in &subset {
            weights[a] = rng.random_range(spec.weight_low..=spec.weight_high);
            if is_base {
                covered.insert(a);
            }
        }
        taken.insert(subset);
        mixtures.push(weights);
    }
    Ok(mixtures)
}

/// Mean pattern of a class: `sum_j weight_j * basis_j`.
pub fn mixture_mean(basis: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; basis.first().map_or(0, Vec::len)];
    for (b, w) in basis.iter().zip(weights) {
        for (m, x) in mean.iter_mut().zip(b) {
            *m += w * x;
        }
    }
    mean
}

fn draw_samples(mean: &[f64], sigma: f64, count: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = rng::seeded(seed);
    (0..count)
        .map(|_| {
            let noise = standard_normal_vec(&mut rng, mean.len());
            ImageSample::clean(mean.iter().zip(noise).map(|(m, n)| m + sigma * n).collect())
        })
        .collect()
}

/// Builds the full dataset: base training samples, the recorded K shots of
/// every novel class, and evaluation samples for every class.
pub fn generate_dataset(spec: &SyntheticSpec, protocol: &ProtocolSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    protocol.validate()?;
    let basis = attribute_basis(spec.sample_dim, spec.condition_dim, seed)?;
    let mixtures = class_mixtures(spec, protocol, seed)?;
    let mut train = BTreeMap::new();
    let mut eval = Vec::new();
    let mut class_means = BTreeMap::new();
    let mut conditions = Vec::new();
    for (class, weights) in mixtures.into_iter().enumerate() {
        let id = class as ClassId;
        let mean = mixture_mean(&basis, &weights);
        let session = protocol.session_of(id).expect("class belongs to the protocol");
        let (count, tag) = if session == 0 {
            (protocol.train_per_base_class, stage::DATA)
        } else {
            (protocol.sessions[session - 1].shots, stage::SHOTS)
        };
        train.insert(id, draw_samples(&mean, spec.sigma, count, rng::derive_seed(seed, &[tag, id as u64])));
        let eval_seed = rng::derive_seed(seed, &[stage::DATA, id as u64, 1]);
        eval.extend(
            draw_samples(&mean, spec.sigma, protocol.eval_per_class, eval_seed)
                .into_iter()
                .map(|s| (s, id)),
        );
        class_means.insert(id, mean);
        conditions.push(ConditionVec {
            class_id: id,
            values: weights,
            source: ConditionSource::File,
        });
    }
    Ok(SyntheticData {
        dataset: Dataset {
            sample_dim: spec.sample_dim,
            conditions: ConditionTable::new(conditions)?,
            train,
            eval,
        },
        basis,
        class_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::SessionShape;

    fn small_protocol() -> ProtocolSpec {
        ProtocolSpec {
            num_base_classes: 4,
            sessions: vec![SessionShape { ways: 2, shots: 3 }],
            train_per_base_class: 10,
            eval_per_class: 5,
        }
    }

    #[test]
    fn basis_is_orthogonal() {
        let basis = attribute_basis(16, 8, 3).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 16.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "{i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn too_many_attributes_rejected() {
        let spec = SyntheticSpec { sample_dim: 4, condition_dim: 5, max_attributes: 3, ..SyntheticSpec::default() };
        let err = generate_dataset(&spec, &small_protocol(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("condition_dim")));
    }

    #[test]
    fn noiseless_samples_equal_class_mean() {
        let spec = SyntheticSpec { sample_dim: 12, condition_dim: 4, sigma: 0.0, ..SyntheticSpec::default() };
        let data = generate_dataset(&spec, &small_protocol(), 5).unwrap();
        for (class, samples) in &data.dataset.train {
            for s in samples {
                assert_eq!(&s.values, &data.class_means[class]);
            }
        }
    }

    #[test]
    fn single_attribute_classes_are_orthogonal() {
        let basis = attribute_basis(10, 3, 1).unwrap();
        let a = mixture_mean(&basis, &[0.8, 0.0, 0.0]);
        let b = mixture_mean(&basis, &[0.0, 0.0, 0.6]);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(dot.abs() < 1e-10);
    }

    #[test]
    fn novel_classes_reuse_base_attributes_and_mixtures_are_distinct() {
        let spec = SyntheticSpec::default();
        let protocol = ProtocolSpec::default();
        let mixtures = class_mixtures(&spec, &protocol, 11).unwrap();
        let support = |w: &Vec<f64>| -> Vec<usize> { (0..w.len()).filter(|&i| w[i] != 0.0).collect() };
        let base_attrs: BTreeSet<usize> = mixtures[..protocol.num_base_classes].iter().flat_map(support).collect();
        assert_eq!(base_attrs.len(), spec.condition_dim);
        for w in &mixtures[protocol.num_base_classes..] {
            assert!(support(w).iter().all(|a| base_attrs.contains(a)));
        }
        let distinct: BTreeSet<Vec<usize>> = mixtures.iter().map(support).collect();
        assert_eq!(distinct.len(), mixtures.len());
    }

    #[test]
    fn monte_carlo_mean_matches_class_mean() {
        let mean = vec![1.0, -2.0, 0.5];
        let sigma = 0.7;
        let n = 10_000;
        let samples = draw_samples(&mean, sigma, n, 42);
        let se = sigma / libm::sqrt(n as f64);
        for d in 0..3 {
            let m: f64 = samples.iter().map(|s| s.values[d]).sum::<f64>() / n as f64;
            assert!((m - mean[d]).abs() < 3.0 * se, "coordinate {d}: {m}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let spec = SyntheticSpec { sample_dim: 12, condition_dim: 4, ..SyntheticSpec::default() };
        let a = generate_dataset(&spec, &small_protocol(), 9).unwrap();
        assert_eq!(a, generate_dataset(&spec, &small_protocol(), 9).unwrap());
        assert_ne!(a.dataset, generate_dataset(&spec, &small_protocol(), 10).unwrap().dataset);
        assert_eq!(a.dataset.train[&0].len(), 10);
        assert_eq!(a.dataset.train[&5].len(), 3);
        assert_eq!(a.dataset.eval.len(), 6 * 5);
        assert_eq!(a.dataset.conditions.len(), 6);
        a.dataset.validate(&small_protocol()).unwrap();
    }
}
