//! Class-aware margin loss.
//!
//! For each class prototype `p`, with positives `P` (that class's support
//! embeddings) and negatives `N` (the other classes' support embeddings):
//!
//! ```text
//! c     = mean_{x in P} |x - p|
//! d_max = max_{x in P}  |x - p|
//! d_min = min_{x in N}  |x - p|
//! loss  = relu(d_max - d_min + margin) + relu(d_max - c)
//! ```
//!
//! Distances are unsquared Euclidean norms. The episode loss is the mean of
//! the per-class values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tape, Var};

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalTerms {
    pub central: f64,
    pub max_pos: f64,
    pub min_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_ca: f64,
    pub l_comb: f64,
    pub margin: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Terms for one class.
pub fn cal_terms(prototype: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<CalTerms> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Invalid(format!(
            "class-aware terms need >= 1 positive and >= 1 negative, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    let d = prototype.len();
    if positives.iter().chain(negatives).any(|x| x.len() != d) {
        return Err(crate::error::shape_err("cal_terms", "embedding dims differ"));
    }
    let pos: Vec<f64> = positives.iter().map(|x| l2(x, prototype)).collect();
    let central = pos.iter().sum::<f64>() / pos.len() as f64;
    let max_pos = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_neg = negatives.iter().map(|x| l2(x, prototype)).fold(f64::INFINITY, f64::min);
    Ok(CalTerms {
        central,
        max_pos,
        min_neg,
        n_pos: positives.len(),
        n_neg: negatives.len(),
    })
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Loss of a single class.
pub fn class_loss(terms: &CalTerms, margin: f64) -> f64 {
    relu(terms.max_pos - terms.min_neg + margin) + relu(terms.max_pos - terms.central)
}

/// Mean per-class loss over the episode's classes.
pub fn cal_loss(terms: &[CalTerms], margin: f64) -> Result<f64> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Invalid(format!("margin must be >= 0, got {margin}")));
    }
    if terms.is_empty() {
        return Err(Error::Invalid("no classes".into()));
    }
    Ok(terms.iter().map(|t| class_loss(t, margin)).sum::<f64>() / terms.len() as f64)
}

pub fn combined_loss(ce: f64, l_ca: f64, margin: f64) -> Result<LossBreakdown> {
    if !ce.is_finite() || !l_ca.is_finite() || ce < 0.0 || l_ca < 0.0 {
        return Err(Error::Invalid(format!(
            "combined loss needs finite non-negative parts, got ce={ce}, l_ca={l_ca}"
        )));
    }
    Ok(LossBreakdown {
        ce,
        l_ca,
        l_comb: ce + l_ca,
        margin,
    })
}

/// Terms for every class of an episode from its support embeddings
/// (`support` rows, `groups[i]` = rows of class `i`, `prototypes` rows).
pub fn episode_terms(support: &[Vec<f64>], groups: &[Vec<usize>], prototypes: &[Vec<f64>]) -> Result<Vec<CalTerms>> {
    groups
        .iter()
        .enumerate()
        .map(|(i, members)| {
            let pos: Vec<Vec<f64>> = members.iter().map(|&r| support[r].clone()).collect();
            let neg: Vec<Vec<f64>> = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, m)| m.iter().map(|&r| support[r].clone()))
                .collect();
            cal_terms(&prototypes[i], &pos, &neg)
        })
        .collect()
}

/// Differentiable episode loss. `support` is `[s, d]`, `prototypes` is
/// `[c, d]`, and `groups[i]` lists the support rows of class `i`.
pub fn cal_on_tape<F: Real>(
    tape: &mut Tape<F>,
    support: Var,
    prototypes: Var,
    groups: &[Vec<usize>],
    margin: f64,
) -> Result<Var> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Invalid(format!("margin must be >= 0, got {margin}")));
    }
    let n_classes = groups.len();
    let n_support = tape.value(support).rows();
    if n_classes < 2 {
        return Err(Error::Invalid("class-aware loss needs at least two classes".into()));
    }
    let sq = tape.sq_dist(support, prototypes)?;
    let dist = tape.sqrt_guarded(sq)?;

    let mut owner = vec![usize::MAX; n_support];
    for (i, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyGroup(i));
        }
        for &r in members {
            owner[r] = i;
        }
    }

    let mut total: Option<Var> = None;
    for (i, members) in groups.iter().enumerate() {
        let pos_idx: Vec<usize> = members.iter().map(|&r| r * n_classes + i).collect();
        let neg_idx: Vec<usize> = (0..n_support)
            .filter(|&r| owner[r] != i && owner[r] != usize::MAX)
            .map(|r| r * n_classes + i)
            .collect();
        let pos = tape.pick(dist, &pos_idx)?;
        let neg = tape.pick(dist, &neg_idx)?;
        let central = tape.mean(pos)?;
        let max_pos = tape.max_all(pos)?;
        let min_neg = tape.min_all(neg)?;

        let gap = tape.sub(max_pos, min_neg)?;
        let gap = tape.add_scalar(gap, margin)?;
        let separation = tape.relu(gap)?;
        let spread = tape.sub(max_pos, central)?;
        let compactness = tape.relu(spread)?;
        let class_loss = tape.add(separation, compactness)?;
        total = Some(match total {
            Some(t) => tape.add(t, class_loss)?,
            None => class_loss,
        });
    }
    tape.scale(total.expect("at least two classes"), 1.0 / n_classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn worked_terms() {
        let t = cal_terms(
            &[0.0, 0.0],
            &[vec![1.0, 0.0], vec![0.0, 2.0]],
            &[vec![4.0, 0.0], vec![3.0, 4.0]],
        )
        .unwrap();
        assert_eq!((t.central, t.max_pos, t.min_neg), (1.5, 2.0, 4.0));
        assert_eq!(class_loss(&t, 0.5), 0.5);
    }

    #[test]
    fn positives_on_prototype() {
        let t = cal_terms(&[1.0, 1.0], &[vec![1.0, 1.0], vec![1.0, 1.0]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!((t.central, t.max_pos), (0.0, 0.0));
    }

    #[test]
    fn single_positive_mean_equals_max() {
        let t = cal_terms(&[0.0, 0.0], &[vec![0.3, -0.7]], &[vec![5.0, 5.0]]).unwrap();
        assert_eq!(t.central, t.max_pos);
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(cal_terms(&[0.0], &[], &[vec![1.0]]).is_err());
        assert!(cal_terms(&[0.0], &[vec![1.0]], &[]).is_err());
    }

    fn terms(central: f64, max_pos: f64, min_neg: f64) -> CalTerms {
        CalTerms {
            central,
            max_pos,
            min_neg,
            n_pos: 1,
            n_neg: 1,
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(cal_loss(&[terms(1.5, 2.0, 4.0)], 0.5).unwrap(), 0.5);
        assert_eq!(cal_loss(&[terms(2.0, 2.0, 2.0)], 0.0).unwrap(), 0.0);
        assert_eq!(cal_loss(&[terms(3.0, 3.0, 2.0)], 1.0).unwrap(), 2.0);
        assert!(cal_loss(&[terms(1.0, 1.0, 1.0)], -0.1).is_err());
    }

    #[test]
    fn loss_is_mean_over_classes() {
        let l = cal_loss(&[terms(1.5, 2.0, 4.0), terms(3.0, 3.0, 2.0)], 0.5).unwrap();
        // 0.5 and relu(1.5) + 0
        assert_eq!(l, 1.0);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(0.0, 0.0, 0.5).unwrap().l_comb, 0.0);
        let b = combined_loss(2f64.ln(), 0.5, 0.5).unwrap();
        assert!((b.l_comb - 1.1931).abs() < 1e-4);
        let ce = 0.123456789;
        assert_eq!(combined_loss(ce, 0.0, 0.5).unwrap().l_comb, ce);
        assert!(combined_loss(f64::NAN, 0.0, 0.5).is_err());
        assert!(combined_loss(1.0, f64::INFINITY, 0.5).is_err());
    }

    #[test]
    fn tape_matches_plain_evaluation() {
        let support = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![0.2, -0.4],
            vec![3.0, 3.0],
            vec![2.5, 3.5],
            vec![4.0, 2.0],
        ];
        let groups = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let protos: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| {
                (0..2)
                    .map(|d| g.iter().map(|&r| support[r][d]).sum::<f64>() / g.len() as f64)
                    .collect()
            })
            .collect();
        let plain = cal_loss(&episode_terms(&support, &groups, &protos).unwrap(), 1.5).unwrap();

        let mut tape = Tape::<f64>::new();
        let s = tape.input(Tensor::from_rows(&support).unwrap()).unwrap();
        let p = tape.group_mean(s, &groups).unwrap();
        let l = cal_on_tape(&mut tape, s, p, &groups, 1.5).unwrap();
        assert!((tape.value(l).item() - plain).abs() < 1e-12);
    }
}
