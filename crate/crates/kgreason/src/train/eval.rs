//! Ranking metrics and the evaluation driver.
//!
//! Evaluation scores every entity against each held-out query, ranks them
//! (ties break toward the smaller entity id), and reports hits@K per query
//! shape. The filtered protocol discounts *other* correct answers ranked
//! above the one being judged, so a query with many answers is not punished
//! for ranking them all highly.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataError, QueryRecord};
use crate::kg::{EntityId, EntitySet, KnowledgeGraph};
use crate::model::{classify_forward, encode_entities, encode_queries, ModelParams, Real};
use crate::query::QueryType;
use crate::rng::substream;
use crate::text::{encode_entity, encode_query, EncodedEntity, EncodedQuery, Vocabulary};
use crate::train::TrainError;

/// How ranks are judged against the answer set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankProtocol {
    /// Other known answers ranked above the judged one are discounted.
    Filtered,
    /// Plain top-K membership.
    Raw,
}

/// A full ordering of entities by score, ties broken by ascending id.
pub struct Ranking {
    order: Vec<u32>,
    rank_of: Vec<usize>,
}

impl Ranking {
    pub fn from_scores<F: Real>(scores: &ArrayView1<F>) -> Self {
        let n = scores.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut rank_of = vec![0usize; n];
        for (pos, &e) in order.iter().enumerate() {
            rank_of[e as usize] = pos;
        }
        Self { order, rank_of }
    }

    /// Entities from best to worst.
    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn raw_hit(&self, answer: EntityId, k: usize) -> bool {
        self.rank_of[answer.0 as usize] < k
    }

    /// Effective rank: position minus other filter-set members ranked above.
    pub fn filtered_hit(&self, answer: EntityId, filter: &EntitySet, k: usize) -> bool {
        let pos = self.rank_of[answer.0 as usize];
        let above = filter
            .iter()
            .filter(|&&e| e != answer && self.rank_of[e.0 as usize] < pos)
            .count();
        pos - above < k
    }

    pub fn hit(&self, answer: EntityId, filter: &EntitySet, k: usize, p: RankProtocol) -> bool {
        match p {
            RankProtocol::Filtered => self.filtered_hit(answer, filter, k),
            RankProtocol::Raw => self.raw_hit(answer, k),
        }
    }
}

/// Entity scorer used by the evaluation driver.
pub enum Scorer<'a, F: Real> {
    /// Matching mode: score = dot(query embedding, entity embedding).
    Model {
        params: &'a ModelParams<F>,
        vocab: &'a Vocabulary,
    },
    /// Classification mode: score = the entity's logit under the trained
    /// classification head. Requires a head sized to the entity universe.
    Classify {
        params: &'a ModelParams<F>,
        vocab: &'a Vocabulary,
    },
    /// Exact symbolic answers on the evaluation graph score 1, others 0.
    Oracle,
    /// Uniform random scores, one substream per record: the floor any
    /// learned model must clear.
    Random { seed: u64 },
}

/// Evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Cutoffs to report, e.g. `[1, 3, 10]`.
    pub ks: Vec<usize>,
    pub protocol: RankProtocol,
    /// Judge only answers invisible on the observed graph when any exist
    /// (falling back to the full set otherwise).
    pub hard_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 10],
            protocol: RankProtocol::Filtered,
            hard_only: true,
        }
    }
}

/// Hit rates for one query shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub queries: usize,
    /// Judged (query, answer) pairs.
    pub answers: usize,
    /// Cutoff K to hit rate.
    pub hits: BTreeMap<usize, f64>,
}

/// Per-shape and macro-averaged hit rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: RankProtocol,
    pub per_type: BTreeMap<String, TypeMetrics>,
    /// Unweighted mean over the shapes present.
    pub macro_hits: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn hits(&self, tag: &str, k: usize) -> Option<f64> {
        self.per_type.get(tag).and_then(|m| m.hits.get(&k)).copied()
    }

    pub fn macro_hit(&self, k: usize) -> Option<f64> {
        self.macro_hits.get(&k).copied()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ks: Vec<usize> = self.macro_hits.keys().copied().collect();
        write!(f, "{:<6} {:>8} {:>8}", "type", "queries", "answers")?;
        for k in &ks {
            write!(f, " {:>8}", format!("h@{k}"))?;
        }
        writeln!(f)?;
        // Shapes print in canonical order, not alphabetical.
        for qt in QueryType::ALL {
            let tag = qt.tag();
            if let Some(m) = self.per_type.get(tag) {
                write!(f, "{:<6} {:>8} {:>8}", tag, m.queries, m.answers)?;
                for k in &ks {
                    write!(f, " {:>8.4}", m.hits.get(k).copied().unwrap_or(0.0))?;
                }
                writeln!(f)?;
            }
        }
        let total_q: usize = self.per_type.values().map(|m| m.queries).sum();
        let total_a: usize = self.per_type.values().map(|m| m.answers).sum();
        write!(f, "{:<6} {:>8} {:>8}", "macro", total_q, total_a)?;
        for k in &ks {
            write!(f, " {:>8.4}", self.macro_hits.get(k).copied().unwrap_or(0.0))?;
        }
        writeln!(f)
    }
}

/// Score batches of at most this many query records at a time.
const EVAL_BATCH: usize = 64;

/// Rank every entity of `graph` against each record and aggregate hits@K.
///
/// `graph` is the evaluation graph: it supplies the entity universe, the
/// names behind each record, and the oracle's answers. Records whose target
/// answer set is empty are skipped.
pub fn evaluate_records<F: Real>(
    scorer: &Scorer<'_, F>,
    graph: &KnowledgeGraph,
    records: &[QueryRecord],
    opts: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    let n_entities = graph.entity_count();
    if let Scorer::Classify { params, .. } = scorer {
        if params.config.classify_entities != Some(n_entities) {
            return Err(TrainError::HeadMismatch {
                expected: n_entities,
                got: params.config.classify_entities,
            });
        }
    }
    let entity_table = match scorer {
        Scorer::Model { params, vocab } => {
            Some(encode_entity_table(params, vocab, graph)?)
        }
        _ => None,
    };

    struct Accum {
        queries: usize,
        answers: usize,
        hits: BTreeMap<usize, usize>,
    }
    let mut acc: BTreeMap<String, Accum> = BTreeMap::new();

    for chunk in records.chunks(EVAL_BATCH) {
        let scores = score_chunk(scorer, graph, chunk, entity_table.as_ref())?;
        for (row, record) in chunk.iter().enumerate() {
            let full = QueryRecord::resolve_answers(&record.answers_full, graph)?;
            let observed = QueryRecord::resolve_answers(&record.answers_observed, graph)?;
            let hard: EntitySet = full.difference(&observed).copied().collect();
            let targets = if opts.hard_only && !hard.is_empty() {
                hard
            } else {
                full.clone()
            };
            if targets.is_empty() {
                continue;
            }
            debug_assert_eq!(scores.ncols(), n_entities);
            let ranking = Ranking::from_scores(&scores.row(row));
            let entry = acc.entry(record.qtype.clone()).or_insert_with(|| Accum {
                queries: 0,
                answers: 0,
                hits: opts.ks.iter().map(|&k| (k, 0)).collect(),
            });
            entry.queries += 1;
            for &a in &targets {
                entry.answers += 1;
                for &k in &opts.ks {
                    if ranking.hit(a, &full, k, opts.protocol) {
                        *entry.hits.get_mut(&k).unwrap() += 1;
                    }
                }
            }
        }
    }

    let per_type: BTreeMap<String, TypeMetrics> = acc
        .into_iter()
        .map(|(tag, a)| {
            let hits = a
                .hits
                .into_iter()
                .map(|(k, h)| (k, h as f64 / a.answers.max(1) as f64))
                .collect();
            (
                tag,
                TypeMetrics {
                    queries: a.queries,
                    answers: a.answers,
                    hits,
                },
            )
        })
        .collect();

    let mut macro_hits = BTreeMap::new();
    for &k in &opts.ks {
        let vals: Vec<f64> = per_type
            .values()
            .filter_map(|m| m.hits.get(&k).copied())
            .collect();
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        macro_hits.insert(k, mean);
    }

    Ok(EvalReport {
        protocol: opts.protocol,
        per_type,
        macro_hits,
    })
}

/// Candidate embeddings for every entity of the graph, encoded in batches.
fn encode_entity_table<F: Real>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
) -> Result<Array2<F>, TrainError> {
    let n = graph.entity_count();
    let max_len = params.config.max_len;
    let mut hc = Array2::zeros((n, params.config.dim));
    let ids: Vec<EntityId> = (0..n as u32).map(EntityId).collect();
    for chunk in ids.chunks(512) {
        let encoded: Vec<EncodedEntity> = chunk
            .iter()
            .map(|&e| encode_entity(vocab, graph, e, max_len))
            .collect::<Result<_, _>>()?;
        let fwd = encode_entities(params, &encoded);
        let start = chunk[0].0 as usize;
        hc.slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&fwd.hc);
    }
    Ok(hc)
}

/// Entity scores for one batch of records: `[records, entities]`.
fn score_chunk<F: Real>(
    scorer: &Scorer<'_, F>,
    graph: &KnowledgeGraph,
    chunk: &[QueryRecord],
    entity_table: Option<&Array2<F>>,
) -> Result<Array2<f64>, TrainError> {
    let n_entities = graph.entity_count();
    let mut scores = Array2::zeros((chunk.len(), n_entities));
    match scorer {
        Scorer::Model { params, vocab } => {
            let hc = entity_table.expect("entity table precomputed for model scorer");
            let encoded: Vec<EncodedQuery> = chunk
                .iter()
                .map(|r| {
                    let q = r.to_query(graph)?;
                    Ok(encode_query(vocab, graph, &q, params.config.max_len)?)
                })
                .collect::<Result<_, TrainError>>()?;
            let fwd = encode_queries(params, &encoded);
            let s = fwd.hq.dot(&hc.t());
            for (i, row) in s.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    scores[(i, j)] = Real::into_f64(v);
                }
            }
        }
        Scorer::Classify { params, vocab } => {
            let encoded: Vec<EncodedQuery> = chunk
                .iter()
                .map(|r| {
                    let q = r.to_query(graph)?;
                    Ok(encode_query(vocab, graph, &q, params.config.max_len)?)
                })
                .collect::<Result<_, TrainError>>()?;
            let fwd = encode_queries(params, &encoded);
            let logits = classify_forward(params, &fwd.hq);
            for (i, row) in logits.rows().into_iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    scores[(i, j)] = Real::into_f64(v);
                }
            }
        }
        Scorer::Oracle => {
            for (i, record) in chunk.iter().enumerate() {
                let answers = record
                    .to_query(graph)?
                    .evaluate(graph)
                    .map_err(DataError::from)?;
                for &a in &answers {
                    scores[(i, a.0 as usize)] = 1.0;
                }
            }
        }
        Scorer::Random { seed } => {
            for (i, record) in chunk.iter().enumerate() {
                let mut rng = substream(*seed, &format!("eval/random/{}", record.qid));
                for j in 0..n_entities {
                    scores[(i, j)] = rng.gen::<f64>();
                }
            }
        }
    }
    Ok(scores)
}
