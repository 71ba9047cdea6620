//! Lazy quadruplet loss.
//!
//! With d the squared Euclidean distance and delta = min_i d(anchor, pos_i):
//!
//! ```text
//! loss = max_j [alpha + delta - d(anchor, neg_j)]_+
//!      + max_j [beta  + delta - d(decoy,  neg_j)]_+
//! ```
//!
//! Both maxima and the minimum break ties toward the lowest index, and an
//! inactive hinge contributes a zero subgradient, so the backward pass is
//! deterministic everywhere.

use crate::error::{Error, Result};
use crate::linalg::squared_distance;

/// Forward value plus everything the backward pass and the gradcheck
/// rejection rule need.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub value: f64,
    pub delta_pos: f64,
    /// Index of the best (closest) positive.
    pub best_positive: usize,
    /// Hardest negative of the anchor hinge, when that hinge is active.
    pub anchor_hinge: Option<usize>,
    /// Hardest negative of the decoy hinge, when that hinge is active.
    pub decoy_hinge: Option<usize>,
    /// Distance to the nearest hinge corner or max/min tie.
    pub kink_margin: f64,
}

fn check_inputs(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    decoy: &[f64],
) -> Result<()> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::NoCandidates);
    }
    let dim = anchor.len();
    if decoy.len() != dim
        || positives.iter().any(|p| p.len() != dim)
        || negatives.iter().any(|n| n.len() != dim)
    {
        return Err(Error::DimMismatch(
            "loss descriptors must share one dimension".into(),
        ));
    }
    Ok(())
}

/// Max with lowest-index tie break; returns (argmax, max, gap to runner-up).
fn arg_max(values: &[f64]) -> (usize, f64, f64) {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    let mut gap = f64::INFINITY;
    for (i, v) in values.iter().enumerate() {
        if i != best {
            gap = gap.min(values[best] - v);
        }
    }
    (best, values[best], gap)
}

pub(crate) fn lazy_quadruplet_loss_detailed(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    decoy: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_inputs(anchor, positives, negatives, decoy)?;

    let pos_d: Vec<f64> = positives
        .iter()
        .map(|p| squared_distance(anchor, p))
        .collect();
    // min with lowest-index tie break == argmax of negated values.
    let neg_pos: Vec<f64> = pos_d.iter().map(|d| -d).collect();
    let (best_positive, _, pos_gap) = arg_max(&neg_pos);
    let delta_pos = pos_d[best_positive];

    let anchor_hinges: Vec<f64> = negatives
        .iter()
        .map(|n| alpha + delta_pos - squared_distance(anchor, n))
        .collect();
    let (a_idx, a_max, a_gap) = arg_max(&anchor_hinges);
    let decoy_hinges: Vec<f64> = negatives
        .iter()
        .map(|n| beta + delta_pos - squared_distance(decoy, n))
        .collect();
    let (d_idx, d_max, d_gap) = arg_max(&decoy_hinges);

    let term1 = a_max.max(0.0);
    let term2 = d_max.max(0.0);
    let value = term1 + term2;
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite loss {value}")));
    }

    let kink_margin = [pos_gap, a_gap, d_gap, a_max.abs(), d_max.abs()]
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    Ok(LossBreakdown {
        value,
        delta_pos,
        best_positive,
        anchor_hinge: (a_max > 0.0).then_some(a_idx),
        decoy_hinge: (d_max > 0.0).then_some(d_idx),
        kink_margin,
    })
}

/// Scalar loss value.
pub fn lazy_quadruplet_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    decoy: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    Ok(lazy_quadruplet_loss_detailed(anchor, positives, negatives, decoy, alpha, beta)?.value)
}

/// Gradients of the loss with respect to every descriptor.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub decoy: Vec<f64>,
}

/// Backward pass; `upstream` scales every gradient (1.0 for plain dL).
pub(crate) fn lazy_quadruplet_loss_backward(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    decoy: &[f64],
    breakdown: &LossBreakdown,
    upstream: f64,
) -> LossGrads {
    let dim = anchor.len();
    let mut grads = LossGrads {
        anchor: vec![0.0; dim],
        positives: positives.iter().map(|_| vec![0.0; dim]).collect(),
        negatives: negatives.iter().map(|_| vec![0.0; dim]).collect(),
        decoy: vec![0.0; dim],
    };

    // d/dx d(x, y) = 2 (x - y); d/dy d(x, y) = -2 (x - y).
    let active_terms = breakdown.anchor_hinge.is_some() as usize as f64
        + breakdown.decoy_hinge.is_some() as usize as f64;
    if active_terms > 0.0 {
        let p = positives[breakdown.best_positive];
        for j in 0..dim {
            let g = upstream * active_terms * 2.0 * (anchor[j] - p[j]);
            grads.anchor[j] += g;
            grads.positives[breakdown.best_positive][j] -= g;
        }
    }
    if let Some(idx) = breakdown.anchor_hinge {
        let n = negatives[idx];
        for j in 0..dim {
            let g = upstream * 2.0 * (anchor[j] - n[j]);
            grads.anchor[j] -= g;
            grads.negatives[idx][j] += g;
        }
    }
    if let Some(idx) = breakdown.decoy_hinge {
        let n = negatives[idx];
        for j in 0..dim {
            let g = upstream * 2.0 * (decoy[j] - n[j]);
            grads.decoy[j] -= g;
            grads.negatives[idx][j] += g;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn satisfied_margins_give_zero() {
        let anchor = [0.0];
        let pos = [[0.5]];
        let neg = [[10.0]];
        let pos_refs: Vec<&[f64]> = pos.iter().map(|p| p.as_slice()).collect();
        let neg_refs: Vec<&[f64]> = neg.iter().map(|n| n.as_slice()).collect();
        let loss =
            lazy_quadruplet_loss(&anchor, &pos_refs, &neg_refs, &[20.0], 1.0, 0.5).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hand_evaluated_one_dimensional_case() {
        // anchor 0, positives {1, 2} -> delta = 1, negative {1.2}, alpha = 1:
        // first term = max(0, 1 + 1 - 1.44) = 0.56; decoy term inactive.
        let anchor = [0.0];
        let pos = [[1.0], [2.0]];
        let neg = [[1.2]];
        let pos_refs: Vec<&[f64]> = pos.iter().map(|p| p.as_slice()).collect();
        let neg_refs: Vec<&[f64]> = neg.iter().map(|n| n.as_slice()).collect();
        // decoy sits far from the negative so its hinge stays inactive.
        let loss =
            lazy_quadruplet_loss(&anchor, &pos_refs, &neg_refs, &[100.0], 1.0, 0.2).unwrap();
        assert!((loss - 0.56).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn empty_lists_error() {
        let anchor = [0.0];
        let empty: Vec<&[f64]> = vec![];
        let neg = [[1.0]];
        let neg_refs: Vec<&[f64]> = neg.iter().map(|n| n.as_slice()).collect();
        assert!(matches!(
            lazy_quadruplet_loss(&anchor, &empty, &neg_refs, &[1.0], 1.0, 0.5),
            Err(Error::NoCandidates)
        ));
        let pos = [[1.0]];
        let pos_refs: Vec<&[f64]> = pos.iter().map(|p| p.as_slice()).collect();
        assert!(matches!(
            lazy_quadruplet_loss(&anchor, &pos_refs, &empty, &[1.0], 1.0, 0.5),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn loss_is_nonnegative_and_permutation_invariant() {
        use crate::rng::{stream_rng, uniform, Stream};
        let mut rng = stream_rng(23, Stream::Test, 0);
        for _ in 0..50 {
            let dim = 4;
            let rand_vec = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
                (0..dim).map(|_| uniform(rng, -1.0, 1.0)).collect()
            };
            let anchor = rand_vec(&mut rng);
            let decoy = rand_vec(&mut rng);
            let positives: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng)).collect();
            let negatives: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng)).collect();
            let pos_refs: Vec<&[f64]> = positives.iter().map(|p| p.as_slice()).collect();
            let neg_refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
            let base =
                lazy_quadruplet_loss(&anchor, &pos_refs, &neg_refs, &decoy, 0.5, 0.2).unwrap();
            assert!(base >= 0.0);

            let pos_rev: Vec<&[f64]> = pos_refs.iter().rev().copied().collect();
            let neg_rev: Vec<&[f64]> = neg_refs.iter().rev().copied().collect();
            let permuted =
                lazy_quadruplet_loss(&anchor, &pos_rev, &neg_rev, &decoy, 0.5, 0.2).unwrap();
            assert!((base - permuted).abs() < 1e-15);
        }
    }
}
