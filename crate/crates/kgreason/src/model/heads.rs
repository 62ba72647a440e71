//! Branch combination heads and the entity classifier.
//!
//! After span pooling a query is a small stack of branch vectors. The
//! combiner reduces them to one query embedding:
//!
//! * no operator: the single branch passes through unchanged;
//! * intersection: additive scoring attention, `score_i = v · tanh(W h_i + b)`,
//!   softmax over branches, weighted sum;
//! * union: maxout, the coordinate-wise maximum over every (branch, piece)
//!   affine image. Ties go to the earliest branch, then piece, so the
//!   backward routing is deterministic.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::params::{ModelParams, Real};
use crate::query::CombineOp;

/// Forward state of one query's combiner, consumed by the backward pass.
#[derive(Debug, Clone)]
pub enum CombineCache<F> {
    Single,
    Attention {
        branches: Array2<F>,
        tanh_z: Array2<F>,
        weights: Array1<F>,
    },
    Maxout {
        branches: Array2<F>,
        /// Winning `(branch, piece)` per output coordinate.
        argmax: Vec<(usize, usize)>,
    },
}

impl<F> CombineCache<F> {
    /// Attention weights over branches, when the intersection head ran.
    pub fn attention_weights(&self) -> Option<&Array1<F>> {
        match self {
            CombineCache::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

/// Reduce branch vectors `[n_branches, dim]` to one query embedding.
pub fn combine_forward<F: Real>(
    params: &ModelParams<F>,
    branches: Array2<F>,
    op: Option<CombineOp>,
) -> (Array1<F>, CombineCache<F>) {
    let n = branches.nrows();
    match op {
        None => {
            assert_eq!(n, 1, "plain path queries have exactly one branch");
            (branches.row(0).to_owned(), CombineCache::Single)
        }
        Some(CombineOp::Intersection) => {
            let p = &params.intersect;
            let mut z = branches.dot(&p.proj.w);
            z += &p.proj.b;
            let tanh_z = z.mapv(F::tanh);
            let mut scores = tanh_z.dot(&p.v);
            let max = scores.iter().cloned().fold(F::neg_infinity(), F::max);
            scores.mapv_inplace(|s| (s - max).exp());
            let sum = scores.sum();
            scores.mapv_inplace(|s| s / sum);
            let out = scores.dot(&branches);
            (
                out,
                CombineCache::Attention {
                    branches,
                    tanh_z,
                    weights: scores,
                },
            )
        }
        Some(CombineOp::Union) => {
            let d = branches.ncols();
            let mut out = Array1::from_elem(d, F::neg_infinity());
            let mut argmax = vec![(0usize, 0usize); d];
            for (pj, piece) in params.union.pieces.iter().enumerate() {
                let mut a = branches.dot(&piece.w);
                a += &piece.b;
                for bi in 0..n {
                    for m in 0..d {
                        let v = a[(bi, m)];
                        if v > out[m] {
                            out[m] = v;
                            argmax[m] = (bi, pj);
                        }
                    }
                }
            }
            (out, CombineCache::Maxout { branches, argmax })
        }
    }
}

/// Backward through the combiner; returns the branch-vector gradient and
/// accumulates head parameter gradients.
pub fn combine_backward<F: Real>(
    params: &ModelParams<F>,
    cache: &CombineCache<F>,
    d_out: ArrayView1<F>,
    grads: &mut ModelParams<F>,
) -> Array2<F> {
    match cache {
        CombineCache::Single => {
            let mut db = Array2::zeros((1, d_out.len()));
            db.row_mut(0).assign(&d_out);
            db
        }
        CombineCache::Attention {
            branches,
            tanh_z,
            weights,
        } => {
            let p = &params.intersect;
            let gp = &mut grads.intersect;
            let n = branches.nrows();

            // out = Σ w_i h_i
            let mut db = Array2::zeros(branches.raw_dim());
            let mut dw = Array1::zeros(n);
            for i in 0..n {
                db.row_mut(i).zip_mut_with(&d_out, |a, &g| *a = *a + g * weights[i]);
                dw[i] = branches.row(i).dot(&d_out);
            }
            // Softmax backward: ds_i = w_i (dw_i − Σ_j w_j dw_j).
            let dot = weights.dot(&dw);
            let ds = Array1::from_shape_fn(n, |i| weights[i] * (dw[i] - dot));
            // score_i = v · tanh_z_i
            for i in 0..n {
                gp.v.zip_mut_with(&tanh_z.row(i), |a, &t| *a = *a + t * ds[i]);
            }
            let mut dz = tanh_z.clone();
            for i in 0..n {
                let s = ds[i];
                dz.row_mut(i).zip_mut_with(&p.v, |t, &v| {
                    let th = *t;
                    *t = s * v * (F::one() - th * th);
                });
            }
            // z = branches · w + b
            gp.proj.w += &branches.t().dot(&dz);
            gp.proj.b += &dz.sum_axis(Axis(0));
            db += &dz.dot(&p.proj.w.t());
            db
        }
        CombineCache::Maxout { branches, argmax } => {
            let d = branches.ncols();
            let mut db = Array2::zeros(branches.raw_dim());
            for m in 0..d {
                let g = d_out[m];
                if g == F::zero() {
                    continue;
                }
                let (bi, pj) = argmax[m];
                let piece = &params.union.pieces[pj];
                let gp = &mut grads.union.pieces[pj];
                gp.b[m] = gp.b[m] + g;
                for c in 0..d {
                    gp.w[(c, m)] = gp.w[(c, m)] + branches[(bi, c)] * g;
                    db[(bi, c)] = db[(bi, c)] + piece.w[(c, m)] * g;
                }
            }
            db
        }
    }
}

/// Entity logits `[n_queries, entity_count]` from query embeddings.
pub fn classify_forward<F: Real>(params: &ModelParams<F>, hq: &Array2<F>) -> Array2<F> {
    let head = params
        .classify
        .as_ref()
        .expect("classification head requires transductive mode");
    let mut logits = hq.dot(&head.w);
    logits += &head.b;
    logits
}

/// Backward through the classifier; returns the query-embedding gradient.
pub fn classify_backward<F: Real>(
    params: &ModelParams<F>,
    hq: &Array2<F>,
    d_logits: &Array2<F>,
    grads: &mut ModelParams<F>,
) -> Array2<F> {
    let head = params.classify.as_ref().expect("head exists");
    let gp = grads.classify.as_mut().expect("grads match params");
    gp.w += &hq.t().dot(d_logits);
    gp.b += &d_logits.sum_axis(Axis(0));
    d_logits.dot(&head.w.t())
}
