//! Cosine nearest-prototype classification and session metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::embedding::FeatureVec;
use crate::prototypes::PrototypeRecord;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: ClassId,
    /// `(class, cosine)` in ascending class order.
    pub scores: Vec<(ClassId, f64)>,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// `argmax_c cos(query, prototype_c)`; exact ties go to the lowest class id,
/// so the answer does not depend on the order of `prototypes`.
pub fn classify<'a>(query: &FeatureVec, prototypes: impl IntoIterator<Item = &'a PrototypeRecord>) -> Result<Prediction> {
    let query_norm = query.norm();
    if query_norm == 0.0 || !query_norm.is_finite() {
        return Err(Error::Degenerate("query feature".into()));
    }
    let mut scores = Vec::new();
    for record in prototypes {
        let p = record.fused_proto.as_slice();
        if p.len() != query.dim() {
            return Err(Error::Shape {
                what: "prototype",
                expected: query.dim(),
                got: p.len(),
            });
        }
        let pn = norm(p);
        if pn == 0.0 || !pn.is_finite() {
            return Err(Error::Degenerate(format!("prototype of class {}", record.class_id)));
        }
        let dot: f64 = query.as_slice().iter().zip(p).map(|(x, y)| x * y).sum();
        scores.push((record.class_id, dot / (query_norm * pn)));
    }
    if scores.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    scores.sort_by_key(|(c, _)| *c);
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(Prediction {
        class_id: best.0,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    /// Percentage, or `None` for an empty tally.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += hit as usize;
    }
}

/// Top-1 accuracy over all seen classes after one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub session: usize,
    pub total_acc: f64,
    /// Absent when no base-class query was evaluated.
    pub base_acc: Option<f64>,
    /// Absent until a novel class exists.
    pub new_acc: Option<f64>,
    pub total: Tally,
    pub base: Tally,
    pub new: Tally,
    pub per_class: BTreeMap<ClassId, Tally>,
    /// Predicted class of every query, in evaluation order.
    pub predictions: Vec<ClassId>,
}

/// Classifies every `(feature, label)` query against `prototypes`. Classes
/// below `num_base_classes` count as base, the rest as new.
pub fn evaluate_session(
    session: usize,
    prototypes: &[&PrototypeRecord],
    queries: &[(FeatureVec, ClassId)],
    num_base_classes: ClassId,
) -> Result<SessionReport> {
    let seen: alloc::collections::BTreeSet<ClassId> = prototypes.iter().map(|r| r.class_id).collect();
    let mut total = Tally::default();
    let mut base = Tally::default();
    let mut new = Tally::default();
    let mut per_class: BTreeMap<ClassId, Tally> = seen.iter().map(|c| (*c, Tally::default())).collect();
    let mut predictions = Vec::with_capacity(queries.len());
    for (feature, label) in queries {
        if !seen.contains(label) {
            return Err(Error::UnseenLabel(*label));
        }
        let predicted = classify(feature, prototypes.iter().copied())?.class_id;
        let hit = predicted == *label;
        total.add(hit);
        if *label < num_base_classes {
            base.add(hit);
        } else {
            new.add(hit);
        }
        per_class.get_mut(label).expect("seen").add(hit);
        predictions.push(predicted);
    }
    Ok(SessionReport {
        session,
        total_acc: total.accuracy().ok_or(Error::Empty("evaluation queries"))?,
        base_acc: base.accuracy(),
        new_acc: new.accuracy(),
        total,
        base,
        new,
        per_class,
        predictions,
    })
}

/// Run-level aggregates over session total accuracies.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub session_totals: Vec<f64>,
    /// Unweighted mean of the session totals.
    pub avg: f64,
    pub last: f64,
    /// Own last-session total minus the baseline's, when one is given.
    pub last_improvement: Option<f64>,
}

pub fn aggregate_totals(totals: &[f64], baseline: Option<&[f64]>) -> Result<RunSummary> {
    let last = *totals.last().ok_or(Error::Empty("session reports"))?;
    let last_improvement = match baseline {
        Some(b) if b.len() != totals.len() => {
            return Err(Error::Shape {
                what: "baseline sessions",
                expected: totals.len(),
                got: b.len(),
            })
        }
        Some(b) => Some(last - b[b.len() - 1]),
        None => None,
    };
    Ok(RunSummary {
        session_totals: totals.to_vec(),
        avg: totals.iter().sum::<f64>() / totals.len() as f64,
        last,
        last_improvement,
    })
}

pub fn aggregate_run(reports: &[SessionReport], baseline: Option<&[SessionReport]>) -> Result<RunSummary> {
    let totals: Vec<f64> = reports.iter().map(|r| r.total_acc).collect();
    let base: Option<Vec<f64>> = baseline.map(|b| b.iter().map(|r| r.total_acc).collect());
    aggregate_totals(&totals, base.as_deref())
}
