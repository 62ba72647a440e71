//! Contrastive training of the query encoder.
//!
//! Each step encodes a batch of query lines and the batch's positive
//! answers, then pulls every query toward its own answer and away from the
//! other answers in the batch (InfoNCE). In transductive runs a
//! classification head over the fixed entity table is trained alongside,
//! weighted by `lambda`.

pub mod eval;
pub mod loss;
pub mod optim;

pub use eval::{evaluate_records, EvalOptions, EvalReport, RankProtocol, Ranking, Scorer};
pub use loss::{cross_entropy, info_nce, ClassifyGrads, ContrastiveGrads};
pub use optim::{schedule_lr, AdamState};

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DataError, QueryRecord};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::model::{
    backward_entities, backward_queries, classify_backward, classify_forward, encode_entities,
    encode_queries, ModelParams, Real,
};
use crate::rng::substream;
use crate::text::{encode_entity, encode_query, EncodedEntity, EncodedQuery, TextError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training records")]
    NoRecords,
    #[error("contrastive batches need at least two queries, got {got}")]
    BatchTooSmall { got: usize },
    #[error("classification head covers {got:?} classes, graph has {expected} entities")]
    HeadMismatch { expected: usize, got: Option<usize> },
    #[error("record {qid} has no answers to train on")]
    NoAnswers { qid: String },
    #[error("loss diverged to a non-finite value in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Training knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Classification loss weight; zero skips the head entirely.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-4,
            tau: 0.05,
            lambda: 0.3,
            seed: 0,
        }
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub contrastive: f64,
    pub classification: f64,
    /// `contrastive + lambda * classification`.
    pub total: f64,
}

/// Loss trajectory of a full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

/// Split `n` items into training batches: full batches of `batch_size`, a
/// short tail kept as its own batch, except a tail of one query folds into
/// the previous batch (a single query cannot contrast against anything).
fn batch_bounds(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    assert!(batch_size >= 2, "checked by train()");
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        bounds.push(start..end);
        start = end;
    }
    if let [.., prev, last] = &mut bounds[..] {
        if last.len() == 1 {
            prev.end = last.end;
            bounds.pop();
        }
    }
    bounds
}

/// Train `params` in place on `records`; answers and names resolve against
/// `graph` (the observed graph of the split). Returns the loss trajectory.
pub fn train<F: Real>(
    params: &mut ModelParams<F>,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    records: &[QueryRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::NoRecords);
    }
    if cfg.batch_size < 2 || records.len() < 2 {
        return Err(TrainError::BatchTooSmall {
            got: cfg.batch_size.min(records.len()),
        });
    }
    let use_classifier = cfg.lambda != 0.0;
    if use_classifier && params.config.classify_entities != Some(graph.entity_count()) {
        return Err(TrainError::HeadMismatch {
            expected: graph.entity_count(),
            got: params.config.classify_entities,
        });
    }

    let n = records.len();
    let max_len = params.config.max_len;

    // Inputs and answer pools are fixed across epochs: encode once.
    let mut encoded: Vec<EncodedQuery> = Vec::with_capacity(n);
    let mut pools: Vec<Vec<EntityId>> = Vec::with_capacity(n);
    for r in records {
        let q = r.to_query(graph)?;
        encoded.push(encode_query(vocab, graph, &q, max_len)?);
        let observed = QueryRecord::resolve_answers(&r.answers_observed, graph)?;
        let pool: Vec<EntityId> = if observed.is_empty() {
            QueryRecord::resolve_answers(&r.answers_full, graph)?
                .into_iter()
                .collect()
        } else {
            observed.into_iter().collect()
        };
        if pool.is_empty() {
            return Err(TrainError::NoAnswers { qid: r.qid.clone() });
        }
        pools.push(pool);
    }
    let mut entity_tokens: Vec<Option<EncodedEntity>> = vec![None; graph.entity_count()];

    let bounds = batch_bounds(n, cfg.batch_size);
    let total_steps = cfg.epochs * bounds.len();
    let mut opt = AdamState::new(params);
    let mut grads = params.zeros_like();
    let mut step = 0usize;
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: total_steps,
    };

    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, &format!("train/epoch/{epoch}"));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut con_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut count = 0usize;
        for bounds in &bounds {
            let batch: &[usize] = &order[bounds.clone()];

            // Positives: one answer per query, deduplicated into a shared
            // candidate table so repeated entities are encoded once.
            let mut cand_index: BTreeMap<EntityId, usize> = BTreeMap::new();
            let mut positives = Vec::with_capacity(batch.len());
            for &qi in batch {
                let pool = &pools[qi];
                let a = pool[rng.gen_range(0..pool.len())];
                let next = cand_index.len();
                positives.push(*cand_index.entry(a).or_insert(next));
            }
            let cand_ids: Vec<EntityId> = {
                let mut v = vec![EntityId(0); cand_index.len()];
                for (&e, &i) in &cand_index {
                    v[i] = e;
                }
                v
            };
            let cand_encoded: Vec<EncodedEntity> = cand_ids
                .iter()
                .map(|&e| {
                    let slot = &mut entity_tokens[e.0 as usize];
                    if slot.is_none() {
                        *slot = Some(encode_entity(vocab, graph, e, max_len)?);
                    }
                    Ok(slot.clone().expect("just filled"))
                })
                .collect::<Result<_, TrainError>>()?;

            let batch_queries: Vec<EncodedQuery> =
                batch.iter().map(|&qi| encoded[qi].clone()).collect();
            let qf = encode_queries(params, &batch_queries);
            let ef = encode_entities(params, &cand_encoded);

            let con = info_nce(&qf.hq, &ef.hc, &positives, &cand_ids, F::from_f64(cfg.tau));
            grads.zero_all();
            let mut d_hq = con.d_queries;
            let mut cls_batch = 0.0;
            if use_classifier {
                let logits = classify_forward(params, &qf.hq);
                let targets: Vec<usize> =
                    positives.iter().map(|&p| cand_ids[p].0 as usize).collect();
                let cls = cross_entropy(&logits, &targets);
                cls_batch = cls
                    .losses
                    .iter()
                    .map(|&l| Real::into_f64(l))
                    .sum::<f64>();
                let weighted = cls.d_logits.mapv(|v| v * F::from_f64(cfg.lambda));
                d_hq += &classify_backward(params, &qf.hq, &weighted, &mut grads);
            }
            backward_entities(params, &ef, &con.d_candidates, &mut grads);
            backward_queries(params, &qf, &d_hq, &mut grads);

            let lr = schedule_lr(cfg.learning_rate, step, total_steps);
            opt.step(params, &mut grads, lr);
            step += 1;

            con_sum += con.losses.iter().map(|&l| Real::into_f64(l)).sum::<f64>();
            cls_sum += cls_batch;
            count += batch.len();
        }

        let contrastive = con_sum / count as f64;
        let classification = cls_sum / count as f64;
        let total = contrastive + cfg.lambda * classification;
        if !total.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        report.epochs.push(EpochStats {
            epoch,
            contrastive,
            classification,
            total,
        });
        log::info!(
            "epoch {epoch}: contrastive {contrastive:.4} classification {classification:.4}"
        );
    }
    Ok(report)
}
