//! Contrastive and classification losses with analytic gradients.
//!
//! Both losses report per-example values and gradients of the batch *mean*,
//! so callers can add them with a weight and feed the result straight into
//! the encoder backward passes.

use ndarray::{Array2, Axis};

use crate::kg::EntityId;
use crate::model::Real;

/// Per-query contrastive losses and mean-loss gradients.
#[derive(Debug)]
pub struct ContrastiveGrads<F> {
    /// Loss of each query.
    pub losses: Vec<F>,
    /// Gradient of the mean loss with respect to the query embeddings.
    pub d_queries: Array2<F>,
    /// Gradient of the mean loss with respect to the candidate embeddings.
    pub d_candidates: Array2<F>,
}

/// InfoNCE over a batch of query embeddings against a shared candidate
/// table. `positive[i]` is the candidate row holding query `i`'s answer, and
/// `candidate_entity[j]` names the entity behind row `j`: any *other* row
/// carrying the same entity as the positive is excluded from the
/// denominator, so a correct in-batch "negative" is never punished.
///
/// Scores are dot products scaled by `1/tau`; each row's log-sum-exp is
/// stabilized by its max.
pub fn info_nce<F: Real>(
    queries: &Array2<F>,
    candidates: &Array2<F>,
    positive: &[usize],
    candidate_entity: &[EntityId],
    tau: F,
) -> ContrastiveGrads<F> {
    let n = queries.nrows();
    let m = candidates.nrows();
    assert_eq!(positive.len(), n, "one positive per query");
    assert_eq!(candidate_entity.len(), m, "one entity per candidate");
    assert!(tau > F::zero(), "temperature must be positive");

    let scores = queries.dot(&candidates.t()) / tau;
    let mut losses = Vec::with_capacity(n);
    // d(mean loss)/d(score), already divided by the batch size.
    let mut d_scores = Array2::<F>::zeros((n, m));
    let inv_n = F::from_f64(1.0 / n as f64);
    for i in 0..n {
        let pos = positive[i];
        assert!(pos < m, "positive index in range");
        let pos_entity = candidate_entity[pos];
        let valid = |j: usize| j == pos || candidate_entity[j] != pos_entity;

        let mut max = F::neg_infinity();
        for j in 0..m {
            if valid(j) && scores[(i, j)] > max {
                max = scores[(i, j)];
            }
        }
        let mut denom = F::zero();
        for j in 0..m {
            if valid(j) {
                denom = denom + (scores[(i, j)] - max).exp();
            }
        }
        let lse = max + denom.ln();
        losses.push(lse - scores[(i, pos)]);
        for j in 0..m {
            if valid(j) {
                let p = (scores[(i, j)] - lse).exp();
                let delta = if j == pos { F::one() } else { F::zero() };
                d_scores[(i, j)] = (p - delta) * inv_n / tau;
            }
        }
    }

    ContrastiveGrads {
        losses,
        d_queries: d_scores.dot(candidates),
        d_candidates: d_scores.t().dot(queries),
    }
}

/// Per-query classification losses and the mean-loss logit gradient.
#[derive(Debug)]
pub struct ClassifyGrads<F> {
    /// Loss of each query.
    pub losses: Vec<F>,
    /// Gradient of the mean loss with respect to the logits.
    pub d_logits: Array2<F>,
}

/// Softmax cross-entropy over entity logits, one target class per row.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, targets: &[usize]) -> ClassifyGrads<F> {
    let n = logits.nrows();
    let m = logits.ncols();
    assert_eq!(targets.len(), n, "one target per row");

    let mut losses = Vec::with_capacity(n);
    let mut d_logits = Array2::<F>::zeros((n, m));
    let inv_n = F::from_f64(1.0 / n as f64);
    for i in 0..n {
        let t = targets[i];
        assert!(t < m, "target class in range");
        let row = logits.index_axis(Axis(0), i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let denom = row.iter().map(|&z| (z - max).exp()).fold(F::zero(), |a, b| a + b);
        let lse = max + denom.ln();
        losses.push(lse - row[t]);
        for j in 0..m {
            let p = (row[j] - lse).exp();
            let delta = if j == t { F::one() } else { F::zero() };
            d_logits[(i, j)] = (p - delta) * inv_n;
        }
    }
    ClassifyGrads { losses, d_logits }
}
