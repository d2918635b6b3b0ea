//! Hard and soft voting over the query predictions of several models.
//!
//! Hard voting picks the most frequent label. When several labels share the
//! top count, the tied label with the highest mean probability wins, and any
//! remaining tie goes to the lowest position in the class order. Soft voting
//! picks the argmax of the mean probability vector, lowest position first on
//! ties. All aggregation is done in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numeric::argmax;

/// Probability vectors are accepted when they sum to 1 within this bound.
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub sample_id: String,
    pub true_class: usize,
    /// Over the episode's class order.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePredictions {
    /// Global class ids in the order used by every `probs` vector.
    pub classes: Vec<usize>,
    pub queries: Vec<QueryRecord>,
}

/// Everything one model predicted over an evaluation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPredictions {
    pub model_id: String,
    /// Names of the global classes.
    pub classes: Vec<String>,
    pub episodes: Vec<EpisodePredictions>,
}

impl ModelPredictions {
    pub fn n_queries(&self) -> usize {
        self.episodes.iter().map(|e| e.queries.len()).sum()
    }
}

/// The `k` models' votes for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryVotes {
    pub sample_id: String,
    pub true_class: usize,
    pub class_order: Vec<usize>,
    /// One vector per model.
    pub probs: Vec<Vec<f64>>,
    /// One label per model, as a position in `class_order`.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub models: Vec<String>,
    pub classes: Vec<String>,
    pub queries: Vec<QueryVotes>,
}

fn check_probs(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::Invalid(format!(
            "{what}: probabilities must be >= 0 and sum to 1, got sum {sum}"
        )));
    }
    Ok(())
}

impl PredictionMatrix {
    /// Aligns per-model predictions query by query. All models must have been
    /// evaluated on the same episode stream.
    pub fn from_models(models: &[ModelPredictions]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Invalid("ensemble needs at least one model".into()))?;
        for m in &models[1..] {
            if m.classes != first.classes {
                return Err(Error::Misaligned(format!(
                    "model `{}` uses a different class table",
                    m.model_id
                )));
            }
            if m.episodes.len() != first.episodes.len() || m.n_queries() != first.n_queries() {
                return Err(Error::Misaligned(format!(
                    "model `{}` has {} episodes / {} queries, expected {} / {}",
                    m.model_id,
                    m.episodes.len(),
                    m.n_queries(),
                    first.episodes.len(),
                    first.n_queries()
                )));
            }
        }

        let mut queries = Vec::with_capacity(first.n_queries());
        for (e, episode) in first.episodes.iter().enumerate() {
            for m in models {
                let other = &m.episodes[e];
                if other.classes != episode.classes || other.queries.len() != episode.queries.len() {
                    return Err(Error::Misaligned(format!(
                        "episode {e} differs for model `{}`",
                        m.model_id
                    )));
                }
            }
            for (q, query) in episode.queries.iter().enumerate() {
                let mut probs = Vec::with_capacity(models.len());
                for m in models {
                    let rec = &m.episodes[e].queries[q];
                    if rec.sample_id != query.sample_id || rec.true_class != query.true_class {
                        return Err(Error::Misaligned(format!(
                            "episode {e} query {q}: `{}` vs `{}` in model `{}`",
                            query.sample_id, rec.sample_id, m.model_id
                        )));
                    }
                    if rec.probs.len() != episode.classes.len() {
                        return Err(Error::Misaligned(format!(
                            "episode {e} query {q}: {} probabilities for {} classes",
                            rec.probs.len(),
                            episode.classes.len()
                        )));
                    }
                    check_probs(&rec.probs, &m.model_id)?;
                    probs.push(rec.probs.clone());
                }
                queries.push(QueryVotes {
                    sample_id: query.sample_id.clone(),
                    true_class: query.true_class,
                    class_order: episode.classes.clone(),
                    labels: probs.iter().map(|p| argmax(p)).collect(),
                    probs,
                });
            }
        }
        Ok(Self {
            models: models.iter().map(|m| m.model_id.clone()).collect(),
            classes: first.classes.clone(),
            queries,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardVote {
    pub label: usize,
    pub tie: bool,
}

/// Majority vote over `labels`. `tie_scores` has one entry per class (the
/// mean probabilities) and settles ties among the most-voted labels.
pub fn hard_vote(labels: &[usize], tie_scores: &[f64]) -> Result<HardVote> {
    if labels.is_empty() {
        return Err(Error::Invalid("hard vote needs at least one model".into()));
    }
    let mut counts = vec![0usize; tie_scores.len()];
    for &l in labels {
        *counts.get_mut(l).ok_or(Error::LabelOutOfRange {
            label: l,
            n_classes: tie_scores.len(),
        })? += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
    let mut label = tied[0];
    for &c in &tied[1..] {
        if tie_scores[c] > tie_scores[label] {
            label = c;
        }
    }
    Ok(HardVote {
        label,
        tie: tied.len() > 1,
    })
}

/// Mean of the probability vectors and its argmax.
pub fn soft_vote(vectors: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Invalid("soft vote needs at least one model".into()))?;
    let n = first.len();
    let mut mean = vec![0.0; n];
    for v in vectors {
        if v.len() != n {
            return Err(crate::error::shape_err(
                "soft_vote",
                format!("vector of length {} among length {n}", v.len()),
            ));
        }
        for (m, &p) in mean.iter_mut().zip(v) {
            *m += p;
        }
    }
    let k = vectors.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Ok((argmax(&mean), mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub hard: usize,
    pub soft: usize,
    pub mean_probs: Vec<f64>,
    pub tie: bool,
}

pub fn decide(query: &QueryVotes) -> Result<EnsembleDecision> {
    let (soft, mean_probs) = soft_vote(&query.probs)?;
    let hv = hard_vote(&query.labels, &mean_probs)?;
    Ok(EnsembleDecision {
        hard: hv.label,
        soft,
        mean_probs,
        tie: hv.tie,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub models: Vec<String>,
    pub hard: MetricsReport,
    pub soft: MetricsReport,
    pub hard_ties: usize,
}

/// Per-query decisions and the HV / SV metric reports.
pub fn ensemble_evaluate(matrix: &PredictionMatrix) -> Result<(EnsembleReport, Vec<EnsembleDecision>)> {
    let decisions = matrix.queries.iter().map(decide).collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = matrix.queries.iter().map(|q| q.true_class).collect();
    let hard: Vec<usize> = matrix
        .queries
        .iter()
        .zip(&decisions)
        .map(|(q, d)| q.class_order[d.hard])
        .collect();
    let soft: Vec<usize> = matrix
        .queries
        .iter()
        .zip(&decisions)
        .map(|(q, d)| q.class_order[d.soft])
        .collect();
    let report = EnsembleReport {
        models: matrix.models.clone(),
        hard: metrics::evaluate_labels(&truth, &hard, &matrix.classes)?,
        soft: metrics::evaluate_labels(&truth, &soft, &matrix.classes)?,
        hard_ties: decisions.iter().filter(|d| d.tie).count(),
    };
    Ok((report, decisions))
}

/// Shorthand for aligning model outputs and evaluating both voting rules.
pub fn ensemble_from_models(models: &[ModelPredictions]) -> Result<EnsembleReport> {
    Ok(ensemble_evaluate(&PredictionMatrix::from_models(models)?)?.0)
}
