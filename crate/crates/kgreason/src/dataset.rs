//! Dataset construction: graph splits, query sampling, and record IO.
//!
//! Two split regimes:
//!
//! * transductive: one entity set, nested triple sets
//!   `train ⊂ valid ⊂ test(=full)`. The held-out triples are chosen by
//!   shuffled greedy passes that never orphan an entity, so every entity
//!   keeps at least one incident triple in the train graph.
//! * inductive: the entity set itself is partitioned, stratified by the
//!   leading type word of each name; each side keeps its induced subgraph
//!   under a shared relation table, and the sides share no entities.
//!
//! Query records store names rather than ids so files remain meaningful
//! across graphs that share naming, and two answer sets: `answers_observed`
//! evaluated on the graph a model trains on, `answers_full` on the graph
//! that defines ground truth for evaluation.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, GraphError, KnowledgeGraph, Triple};
use crate::query::{random_query, QueryError, QueryGraph, QueryType};
use crate::rng::substream;
use crate::synth::type_word;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("holdout removed only {removed} of {quota} triples without orphaning an entity")]
    QuotaUnmet { removed: usize, quota: usize },
    #[error("invalid fraction {0}, expected a value in [0, 1)")]
    InvalidFraction(f64),
    #[error("inductive split left a side empty")]
    EmptySide,
    #[error("graphs passed to record generation use different name tables")]
    TableMismatch,
    #[error("collected only {have} distinct {qtype} queries of {want} after {attempts} attempts")]
    DedupExhausted {
        qtype: QueryType,
        have: usize,
        want: usize,
        attempts: usize,
    },
    #[error("{name:?} is not an entity of the graph")]
    UnknownEntity { name: String },
    #[error("{name:?} is not a relation of the graph")]
    UnknownRelation { name: String },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Nested transductive graphs over one entity table.
#[derive(Debug, Clone)]
pub struct TransductiveSplit {
    pub train: KnowledgeGraph,
    pub valid: KnowledgeGraph,
    pub test: KnowledgeGraph,
}

/// Entity-disjoint graphs over separate entity tables and one relation table.
#[derive(Debug, Clone)]
pub struct InductiveSplit {
    pub train: KnowledgeGraph,
    pub test: KnowledgeGraph,
}

/// Hold out `holdout_fraction` of the triples. The valid graph adds back the
/// first half of the holdout (in removal order); the test graph is `full`.
pub fn split_transductive(
    full: &KnowledgeGraph,
    holdout_fraction: f64,
    seed: u64,
) -> Result<TransductiveSplit, DataError> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(DataError::InvalidFraction(holdout_fraction));
    }
    let quota = (holdout_fraction * full.triple_count() as f64).round() as usize;

    // occ[e] counts triples incident to e; a triple may be removed only when
    // every endpoint stays covered afterwards.
    let mut occ = vec![0usize; full.entity_count()];
    for t in full.triples() {
        occ[t.head.0 as usize] += 1;
        if t.tail != t.head {
            occ[t.tail.0 as usize] += 1;
        }
    }

    let mut rng = substream(seed, "split/transductive");
    let mut remaining: Vec<Triple> = full.triples().to_vec();
    let mut holdout: Vec<Triple> = Vec::with_capacity(quota);
    while holdout.len() < quota {
        let before = holdout.len();
        remaining.shuffle(&mut rng);
        let mut kept = Vec::with_capacity(remaining.len());
        for t in remaining.drain(..) {
            let h = t.head.0 as usize;
            let l = t.tail.0 as usize;
            let removable = if h == l {
                occ[h] >= 2
            } else {
                occ[h] >= 2 && occ[l] >= 2
            };
            if holdout.len() < quota && removable {
                occ[h] -= 1;
                if h != l {
                    occ[l] -= 1;
                }
                holdout.push(t);
            } else {
                kept.push(t);
            }
        }
        remaining = kept;
        if holdout.len() == before {
            return Err(DataError::QuotaUnmet {
                removed: holdout.len(),
                quota,
            });
        }
    }

    let train = full.with_triples(remaining.clone())?;
    let mut valid_triples = remaining;
    valid_triples.extend_from_slice(&holdout[..holdout.len() / 2]);
    let valid = full.with_triples(valid_triples)?;
    Ok(TransductiveSplit {
        train,
        valid,
        test: full.clone(),
    })
}

/// Partition entities into two sides, stratified by leading type word, and
/// keep each side's induced subgraph. Roughly `train_fraction` of each type
/// cluster lands on the train side.
pub fn split_inductive(
    full: &KnowledgeGraph,
    train_fraction: f64,
    seed: u64,
) -> Result<InductiveSplit, DataError> {
    if !(0.0..1.0).contains(&train_fraction) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let mut rng = substream(seed, "split/inductive");

    // Group entity ids by type word, in first-appearance order of the word.
    let mut groups: Vec<(String, Vec<u32>)> = Vec::new();
    for (i, name) in full.entity_names().iter().enumerate() {
        let tw = type_word(name);
        match groups.iter_mut().find(|(w, _)| w == tw) {
            Some((_, ids)) => ids.push(i as u32),
            None => groups.push((tw.to_string(), vec![i as u32])),
        }
    }

    let mut on_train = vec![false; full.entity_count()];
    for (_, mut ids) in groups {
        ids.shuffle(&mut rng);
        let take = (train_fraction * ids.len() as f64).round() as usize;
        for &id in &ids[..take.min(ids.len())] {
            on_train[id as usize] = true;
        }
    }
    let train_count = on_train.iter().filter(|&&b| b).count();
    if train_count == 0 || train_count == full.entity_count() {
        return Err(DataError::EmptySide);
    }

    let side = |keep_train: bool| -> Result<KnowledgeGraph, DataError> {
        let mut names = Vec::new();
        let mut remap = vec![u32::MAX; full.entity_count()];
        for (i, name) in full.entity_names().iter().enumerate() {
            if on_train[i] == keep_train {
                remap[i] = names.len() as u32;
                names.push(name.clone());
            }
        }
        let triples: Vec<Triple> = full
            .triples()
            .iter()
            .filter(|t| {
                on_train[t.head.0 as usize] == keep_train
                    && on_train[t.tail.0 as usize] == keep_train
            })
            .map(|t| Triple {
                head: EntityId(remap[t.head.0 as usize]),
                relation: t.relation,
                tail: EntityId(remap[t.tail.0 as usize]),
            })
            .collect();
        Ok(KnowledgeGraph::from_parts(
            names,
            full.relation_names().to_vec(),
            triples,
        )?)
    };

    Ok(InductiveSplit {
        train: side(true)?,
        test: side(false)?,
    })
}

/// One sampled query with its answer sets, stored by name. Answer lists are
/// ordered by entity id in the graph the record was generated against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub qtype: String,
    pub anchors: Vec<String>,
    pub relations: Vec<String>,
    pub answers_observed: Vec<String>,
    pub answers_full: Vec<String>,
}

impl QueryRecord {
    /// Resolve names back to a canonical-form query on `graph`.
    pub fn to_query(&self, graph: &KnowledgeGraph) -> Result<QueryGraph, DataError> {
        let qtype: QueryType = self.qtype.parse()?;
        let anchors = self
            .anchors
            .iter()
            .map(|n| {
                graph
                    .entity_id(n)
                    .ok_or_else(|| DataError::UnknownEntity { name: n.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let relations = self
            .relations
            .iter()
            .map(|n| {
                graph
                    .relation_id(n)
                    .ok_or_else(|| DataError::UnknownRelation { name: n.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QueryGraph::new(qtype, anchors, relations)?)
    }

    /// Resolve an answer list to ids on `graph`.
    pub fn resolve_answers(
        names: &[String],
        graph: &KnowledgeGraph,
    ) -> Result<BTreeSet<EntityId>, DataError> {
        names
            .iter()
            .map(|n| {
                graph
                    .entity_id(n)
                    .ok_or_else(|| DataError::UnknownEntity { name: n.clone() })
            })
            .collect()
    }
}

fn names_of(set: &BTreeSet<EntityId>, graph: &KnowledgeGraph) -> Vec<String> {
    set.iter()
        .map(|&e| graph.entity_name(e).expect("answer id is valid").to_string())
        .collect()
}

/// Sample `per_type` distinct queries per shape. Queries are sampled
/// backward on `sample`, answered on `observed` (what a model sees in
/// training) and on `full` (evaluation ground truth). All three graphs must
/// share name tables. The record id is `prefix/tag/index`, and sampling for
/// each shape runs on its own seed substream.
pub fn generate_records(
    prefix: &str,
    sample: &KnowledgeGraph,
    observed: &KnowledgeGraph,
    full: &KnowledgeGraph,
    types: &[QueryType],
    per_type: usize,
    seed: u64,
) -> Result<Vec<QueryRecord>, DataError> {
    if !sample.shares_tables_with(observed) || !sample.shares_tables_with(full) {
        return Err(DataError::TableMismatch);
    }
    let mut records = Vec::with_capacity(types.len() * per_type);
    for &qtype in types {
        let mut rng = substream(seed, &format!("gen/{prefix}/{}", qtype.tag()));
        let mut seen: BTreeSet<(Vec<EntityId>, Vec<crate::kg::RelationId>)> = BTreeSet::new();
        let cap = 100 * per_type + 100;
        let mut attempts = 0;
        while seen.len() < per_type {
            if attempts >= cap {
                return Err(DataError::DedupExhausted {
                    qtype,
                    have: seen.len(),
                    want: per_type,
                    attempts,
                });
            }
            attempts += 1;
            let q = random_query(sample, qtype, &mut rng)?;
            if !seen.insert((q.anchors.clone(), q.relations.clone())) {
                continue;
            }
            let idx = seen.len() - 1;
            let obs = q.evaluate(observed)?;
            let ful = q.evaluate(full)?;
            records.push(QueryRecord {
                qid: format!("{prefix}/{}/{idx:04}", qtype.tag()),
                qtype: qtype.tag().to_string(),
                anchors: q
                    .anchors
                    .iter()
                    .map(|&e| sample.entity_name(e).expect("sampled id").to_string())
                    .collect(),
                relations: q
                    .relations
                    .iter()
                    .map(|&r| sample.relation_name(r).expect("sampled id").to_string())
                    .collect(),
                answers_observed: names_of(&obs, sample),
                answers_full: names_of(&ful, sample),
            });
        }
    }
    Ok(records)
}

/// Write records as JSON Lines.
pub fn write_jsonl(path: &Path, records: &[QueryRecord]) -> Result<(), DataError> {
    let path_str = path.display().to_string();
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Read records from JSON Lines; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<QueryRecord>, DataError> {
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path_str.clone(),
            line: lineno + 1,
            source,
        })?;
        records.push(rec);
    }
    Ok(records)
}
