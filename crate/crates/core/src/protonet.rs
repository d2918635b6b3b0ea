//! Prototype classification head.
//!
//! Prototypes are per-class means of support embeddings. Queries are scored
//! with `softmax(-d)` where `d` is the squared Euclidean distance to each
//! prototype, and the loss is the mean negative log-probability of the true
//! class, with the probability floored at [`LOG_FLOOR`].

use crate::error::{shape_err, Error, Result};
use crate::numeric::{argmax, argmin, Real, Tape, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<F> {
    /// Class ids in episode order; row `i` of `matrix` belongs to `classes[i]`.
    pub classes: Vec<usize>,
    pub matrix: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction<F> {
    pub probs: Vec<F>,
    pub distances: Vec<F>,
    /// Position in the class order.
    pub predicted: usize,
}

/// `groups[i]` holds class `classes[i]`'s support embeddings as `[k, d]`.
pub fn compute_prototypes<F: Real>(classes: &[usize], groups: &[Tensor<F>]) -> Result<PrototypeSet<F>> {
    if classes.len() != groups.len() || groups.is_empty() {
        return Err(shape_err("compute_prototypes", "one group per class required"));
    }
    let d = groups[0].cols();
    let mut data = Vec::with_capacity(groups.len() * d);
    for (i, g) in groups.iter().enumerate() {
        if g.shape().len() != 2 || g.rows() == 0 {
            return Err(Error::EmptyGroup(i));
        }
        if g.cols() != d {
            return Err(shape_err(
                "compute_prototypes",
                format!("group {i} has dim {} not {d}", g.cols()),
            ));
        }
        let inv = F::one() / F::from_usize(g.rows()).unwrap();
        let mut mean = vec![F::zero(); d];
        for r in 0..g.rows() {
            for (m, &v) in mean.iter_mut().zip(g.row(r)) {
                *m = *m + v;
            }
        }
        data.extend(mean.into_iter().map(|m| m * inv));
    }
    Ok(PrototypeSet {
        classes: classes.to_vec(),
        matrix: Tensor::new(vec![groups.len(), d], data)?,
    })
}

/// `[q, d]` queries against `[c, d]` prototypes.
pub fn sq_euclidean<F: Real>(queries: &Tensor<F>, prototypes: &Tensor<F>) -> Result<Tensor<F>> {
    queries.sq_dist(prototypes)
}

pub fn classify<F: Real>(queries: &Tensor<F>, prototypes: &PrototypeSet<F>) -> Result<Vec<QueryPrediction<F>>> {
    let dist = sq_euclidean(queries, &prototypes.matrix)?;
    let probs = dist.map(|v| -v).softmax_rows()?;
    Ok((0..dist.rows())
        .map(|q| {
            let p = probs.row(q).to_vec();
            QueryPrediction {
                predicted: argmax(&p),
                probs: p,
                distances: dist.row(q).to_vec(),
            }
        })
        .collect())
}

/// `labels` are positions in the class order.
pub fn ce_loss<F: Real>(predictions: &[QueryPrediction<F>], labels: &[usize]) -> Result<F> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(shape_err(
            "ce_loss",
            format!("{} predictions, {} labels", predictions.len(), labels.len()),
        ));
    }
    let floor = F::from_f64_lossy(LOG_FLOOR);
    let mut total = F::zero();
    for (p, &y) in predictions.iter().zip(labels) {
        let prob = *p.probs.get(y).ok_or(Error::LabelOutOfRange {
            label: y,
            n_classes: p.probs.len(),
        })?;
        total = total - prob.max(floor).ln();
    }
    Ok(total / F::from_usize(labels.len()).unwrap())
}

/// Checks `argmax(prob) == argmin(distance)` for one prediction.
pub fn is_consistent<F: Real>(p: &QueryPrediction<F>) -> bool {
    argmax(&p.probs) == argmin(&p.distances)
}

/// Tape nodes produced by [`head_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub prototypes: Var,
    pub distances: Var,
    pub probs: Var,
    pub ce: Var,
}

/// Differentiable head: prototypes from `support` rows grouped by
/// `groups`, squared distances from `query` rows, softmax, and the mean
/// clamped cross-entropy against `labels` (positions in group order).
pub fn head_on_tape<F: Real>(
    tape: &mut Tape<F>,
    support: Var,
    groups: &[Vec<usize>],
    query: Var,
    labels: &[usize],
) -> Result<HeadVars> {
    let n_classes = groups.len();
    if labels.len() != tape.value(query).rows() {
        return Err(shape_err("head", "one label per query row required"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::LabelOutOfRange { label: bad, n_classes });
    }
    let prototypes = tape.group_mean(support, groups)?;
    let distances = tape.sq_dist(query, prototypes)?;
    let neg = tape.neg(distances)?;
    let probs = tape.softmax_rows(neg)?;
    let picks: Vec<usize> = labels.iter().enumerate().map(|(q, &y)| q * n_classes + y).collect();
    let true_probs = tape.pick(probs, &picks)?;
    let logs = tape.log_clamped(true_probs, LOG_FLOOR)?;
    let mean = tape.mean(logs)?;
    let ce = tape.neg(mean)?;
    Ok(HeadVars {
        prototypes,
        distances,
        probs,
        ce,
    })
}
