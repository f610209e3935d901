//! Parallel prototype estimation.
//!
//! Every exemplar has its own seed, so the (class, exemplar) pairs of a
//! session can be drawn in any order. Results are put back in index order
//! before averaging, which makes the output bit-identical to the serial path.

use fscil_core::embedding::FeatureVec;
use fscil_core::prototypes::{exemplar_seed, real_prototype, ClassEstimate, ExemplarSampler};
use fscil_core::protocol::Pipeline;
use fscil_core::{ClassId, Result};
use rayon::prelude::*;

/// Estimates for every class of `session`, with `n_generated` exemplars per
/// class (0 skips generation).
pub fn session_estimates(pipeline: &Pipeline<'_>, session: usize, n_generated: usize) -> Result<Vec<ClassEstimate>> {
    let classes: Vec<ClassId> = pipeline.protocol().session_classes(session).collect();
    let dataset = pipeline.dataset();
    let models = pipeline.models();
    let sampler = models.sampler();
    let master = pipeline.generation_seed();

    let pairs: Vec<(ClassId, usize)> = classes
        .iter()
        .flat_map(|&c| (0..n_generated).map(move |i| (c, i)))
        .collect();
    let features: Vec<FeatureVec> = pairs
        .par_iter()
        .map(|&(class, i)| {
            let condition = dataset.conditions.get(class)?;
            let exemplar = sampler.draw(&condition.values, exemplar_seed(master, class, i))?;
            models.encoder.encode(&exemplar)
        })
        .collect::<Result<_>>()?;

    classes
        .par_iter()
        .enumerate()
        .map(|(k, &class)| {
            let generative = if n_generated > 0 {
                Some(FeatureVec::mean(&features[k * n_generated..(k + 1) * n_generated])?)
            } else {
                None
            };
            let shots = dataset.train.get(&class).map_or(&[][..], Vec::as_slice);
            let real = if shots.is_empty() {
                None
            } else {
                Some(real_prototype(&models.encoder, shots)?)
            };
            Ok(ClassEstimate {
                class_id: class,
                generative,
                n_generated,
                real,
                n_real: shots.len(),
            })
        })
        .collect()
}
