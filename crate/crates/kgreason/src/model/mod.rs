//! Structure-aware text encoder over linearized queries.
//!
//! One weight-shared transformer encodes both query lines and candidate
//! lines ([`encode_queries`], [`encode_entities`]). A query's token states
//! are mean-pooled per branch span and the branch vectors are reduced by the
//! shape's combiner (pass-through, attention intersection, or maxout union)
//! into one embedding; a candidate's states are mean-pooled over all
//! positions. Scoring and losses live in [`crate::train`]; this module owns
//! the differentiable machinery and its parameters.

pub mod checkpoint;
pub mod encoder;
pub mod heads;
pub mod params;

use std::ops::Range;

use ndarray::Array2;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use encoder::{encoder_backward, encoder_forward, Batch, EncoderCache};
pub use heads::{
    classify_backward, classify_forward, combine_backward, combine_forward, CombineCache,
};
pub use params::{ConfigError, LinearP, MaxoutP, ModelConfig, ModelParams, Real};

use crate::text::{EncodedEntity, EncodedQuery};
use encoder::{mean_rows, mean_rows_backward};

/// Forward state of a query batch.
pub struct QueryForward<F> {
    /// Query embeddings `[n_queries, dim]`.
    pub hq: Array2<F>,
    batch: Batch,
    cache: EncoderCache<F>,
    combines: Vec<CombineCache<F>>,
    /// Branch spans per query, in concatenated-batch coordinates.
    spans: Vec<Vec<Range<usize>>>,
}

impl<F> QueryForward<F> {
    /// Intersection attention weights of query `i`, if its shape has an
    /// intersection combiner.
    pub fn attention_weights(&self, i: usize) -> Option<&ndarray::Array1<F>> {
        self.combines[i].attention_weights()
    }
}

/// Encode a batch of query lines into embeddings.
pub fn encode_queries<F: Real>(
    params: &ModelParams<F>,
    queries: &[EncodedQuery],
) -> QueryForward<F> {
    assert!(!queries.is_empty(), "empty query batch");
    let seqs: Vec<&[crate::text::TokenId]> =
        queries.iter().map(|q| q.tokens.as_slice()).collect();
    let batch = Batch::from_sequences(&seqs);
    let (y, cache) = encoder_forward(params, &batch);

    let d = params.config.dim;
    let mut hq = Array2::zeros((queries.len(), d));
    let mut combines = Vec::with_capacity(queries.len());
    let mut all_spans = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let offset = batch.seq_range(i).start;
        let spans: Vec<Range<usize>> = q
            .spans
            .iter()
            .map(|r| (r.start + offset)..(r.end + offset))
            .collect();
        let mut branches = Array2::zeros((spans.len(), d));
        for (b, span) in spans.iter().enumerate() {
            branches.row_mut(b).assign(&mean_rows(&y.view(), span.clone()));
        }
        let (h, cc) = combine_forward(params, branches, q.operator);
        hq.row_mut(i).assign(&h);
        combines.push(cc);
        all_spans.push(spans);
    }
    QueryForward {
        hq,
        batch,
        cache,
        combines,
        spans: all_spans,
    }
}

/// Backward from query-embedding gradients `d_hq` into `grads`.
pub fn backward_queries<F: Real>(
    params: &ModelParams<F>,
    fwd: &QueryForward<F>,
    d_hq: &Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let d = params.config.dim;
    let mut d_enc = Array2::zeros((fwd.batch.len(), d));
    for i in 0..fwd.spans.len() {
        let db = combine_backward(params, &fwd.combines[i], d_hq.row(i), grads);
        for (b, span) in fwd.spans[i].iter().enumerate() {
            mean_rows_backward(&db.row(b), span.clone(), &mut d_enc);
        }
    }
    encoder_backward(params, &fwd.batch, &fwd.cache, d_enc, grads);
}

/// Forward state of a candidate batch.
pub struct EntityForward<F> {
    /// Candidate embeddings `[n_entities, dim]`.
    pub hc: Array2<F>,
    batch: Batch,
    cache: EncoderCache<F>,
}

/// Encode a batch of candidate lines; the embedding is the mean over all
/// token positions.
pub fn encode_entities<F: Real>(
    params: &ModelParams<F>,
    entities: &[EncodedEntity],
) -> EntityForward<F> {
    assert!(!entities.is_empty(), "empty entity batch");
    let seqs: Vec<&[crate::text::TokenId]> =
        entities.iter().map(|e| e.tokens.as_slice()).collect();
    let batch = Batch::from_sequences(&seqs);
    let (y, cache) = encoder_forward(params, &batch);
    let mut hc = Array2::zeros((entities.len(), params.config.dim));
    for i in 0..entities.len() {
        hc.row_mut(i)
            .assign(&mean_rows(&y.view(), batch.seq_range(i)));
    }
    EntityForward { hc, batch, cache }
}

/// Backward from candidate-embedding gradients `d_hc` into `grads`.
pub fn backward_entities<F: Real>(
    params: &ModelParams<F>,
    fwd: &EntityForward<F>,
    d_hc: &Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let d = params.config.dim;
    let mut d_enc = Array2::zeros((fwd.batch.len(), d));
    for i in 0..fwd.hc.nrows() {
        mean_rows_backward(&d_hc.row(i), fwd.batch.seq_range(i), &mut d_enc);
    }
    encoder_backward(params, &fwd.batch, &fwd.cache, d_enc, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::CombineOp;
    use crate::text::TokenId;
    use approx::assert_abs_diff_eq;

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 12,
            blocks: 2,
            heads: 3,
            max_len: 16,
            maxout_pieces: 2,
            vocab_size: 20,
            classify_entities: Some(6),
        }
    }

    fn toks(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    /// Hand-built encoded inputs with the three combiner kinds.
    fn sample_queries() -> Vec<EncodedQuery> {
        vec![
            // Chain: one span over the whole body.
            EncodedQuery {
                tokens: toks(&[0, 10, 11, 1, 6, 4, 12, 5, 13]),
                spans: vec![4..9],
                operator: None,
            },
            // Intersection: two spans after the combining marker.
            EncodedQuery {
                tokens: toks(&[0, 10, 11, 1, 7, 6, 4, 12, 5, 13, 6, 4, 14, 5, 15]),
                spans: vec![5..10, 10..15],
                operator: Some(CombineOp::Intersection),
            },
            // Union.
            EncodedQuery {
                tokens: toks(&[0, 10, 11, 1, 8, 6, 4, 16, 5, 13, 6, 4, 17, 5, 15]),
                spans: vec![5..10, 10..15],
                operator: Some(CombineOp::Union),
            },
        ]
    }

    fn sample_entities() -> Vec<EncodedEntity> {
        vec![
            EncodedEntity {
                tokens: toks(&[0, 9, 12, 18]),
            },
            EncodedEntity {
                tokens: toks(&[0, 9, 14]),
            },
        ]
    }

    #[test]
    fn query_embeddings_have_expected_shape() {
        let params = ModelParams::<f64>::init(&config(), 3).unwrap();
        let fwd = encode_queries(&params, &sample_queries());
        assert_eq!(fwd.hq.dim(), (3, 12));
        assert!(fwd.attention_weights(0).is_none());
        let w = fwd.attention_weights(1).unwrap();
        assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-12);
        assert!(fwd.attention_weights(2).is_none());
    }

    #[test]
    fn batched_queries_match_individual_encoding() {
        let params = ModelParams::<f64>::init(&config(), 5).unwrap();
        let queries = sample_queries();
        let joint = encode_queries(&params, &queries);
        for (i, q) in queries.iter().enumerate() {
            let single = encode_queries(&params, std::slice::from_ref(q));
            for j in 0..12 {
                assert_abs_diff_eq!(joint.hq[(i, j)], single.hq[(0, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn batched_entities_match_individual_encoding() {
        let params = ModelParams::<f64>::init(&config(), 5).unwrap();
        let entities = sample_entities();
        let joint = encode_entities(&params, &entities);
        for (i, e) in entities.iter().enumerate() {
            let single = encode_entities(&params, std::slice::from_ref(e));
            for j in 0..12 {
                assert_abs_diff_eq!(joint.hc[(i, j)], single.hc[(0, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn full_query_backward_matches_finite_difference() {
        let params = ModelParams::<f64>::init(&config(), 8).unwrap();
        let queries = sample_queries();
        let readout = Array2::from_shape_fn((3, 12), |(i, j)| ((i * 12 + j) as f64 * 0.21).sin());
        let loss = |p: &ModelParams<f64>| (&encode_queries(p, &queries).hq * &readout).sum();

        let fwd = encode_queries(&params, &queries);
        let mut grads = params.zeros_like();
        backward_queries(&params, &fwd, &readout, &mut grads);

        let mut p2 = params.clone();
        let n_tensors = p2.flat_tensors_mut().len();
        let h = 1e-6;
        for ti in 0..n_tensors {
            for &raw in &[0usize, 5, 29] {
                let len = p2.flat_tensors_mut()[ti].len();
                let idx = raw.min(len - 1);
                let orig = p2.flat_tensors_mut()[ti][idx];
                p2.flat_tensors_mut()[ti][idx] = orig + h;
                let up = loss(&p2);
                p2.flat_tensors_mut()[ti][idx] = orig - h;
                let down = loss(&p2);
                p2.flat_tensors_mut()[ti][idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.flat_tensors_mut()[ti][idx];
                // Near-zero gradients sit inside central-difference noise, so
                // they are judged on absolute agreement instead.
                let abs = (fd - an).abs();
                let rel = abs / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
                assert!(
                    abs < 1e-8 || rel < 1e-5,
                    "tensor {ti} coord {idx}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn full_entity_backward_matches_finite_difference() {
        let params = ModelParams::<f64>::init(&config(), 9).unwrap();
        let entities = sample_entities();
        let readout = Array2::from_shape_fn((2, 12), |(i, j)| ((i + j) as f64 * 0.4).cos());
        let loss = |p: &ModelParams<f64>| (&encode_entities(p, &entities).hc * &readout).sum();

        let fwd = encode_entities(&params, &entities);
        let mut grads = params.zeros_like();
        backward_entities(&params, &fwd, &readout, &mut grads);

        let mut p2 = params.clone();
        let h = 1e-6;
        // Token embedding of a used token and one attention weight.
        for (ti, idx) in [(0usize, 12 * 12 + 3), (2, 7)] {
            let orig = p2.flat_tensors_mut()[ti][idx];
            p2.flat_tensors_mut()[ti][idx] = orig + h;
            let up = loss(&p2);
            p2.flat_tensors_mut()[ti][idx] = orig - h;
            let down = loss(&p2);
            p2.flat_tensors_mut()[ti][idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.flat_tensors_mut()[ti][idx];
            assert_abs_diff_eq!(an, fd, epsilon = 1e-6);
        }
    }
}
