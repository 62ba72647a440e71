//! Query shapes and exact evaluation.
//!
//! Thirteen fixed query shapes over a knowledge graph, each a small DAG of
//! relation projections combined by intersection or union. A query instance
//! is the shape plus concrete anchor entities and relations; evaluation
//! returns the exact answer set under the existential semantics: an entity
//! answers the query when some assignment of the bound variables satisfies
//! every edge atom.
//!
//! Shapes whose last step projects a combined set (`ip`, `up`) also admit a
//! distributed form in which the final relation is pushed into each branch
//! and the combine runs last. For unions the push-down is the plain
//! distributive law. For intersections it is not: projecting the
//! intersection keeps only answers reachable from a shared witness, so the
//! distributed route intersects (witness, answer) pairs rather than bare
//! answer sets. Both routes return identical answers by construction.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::kg::{EntityId, EntitySet, GraphError, KnowledgeGraph, RelationId};

/// Full resample attempts before backward sampling reports exhaustion.
pub const MAX_SAMPLE_ATTEMPTS: usize = 100;

/// The thirteen query shapes. Tags follow the usual naming: a digit prefix
/// counts repeated steps, `p` is projection, `i` intersection, `u` union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryType {
    /// `p(e1, r1)`
    OneP,
    /// `p(p(e1, r1), r2)`
    TwoP,
    /// Three chained projections.
    ThreeP,
    /// `p(e1, r1) ∩ p(e2, r2)`
    TwoI,
    /// Three-way intersection.
    ThreeI,
    /// `p(p(e1, r1), r2) ∩ p(e2, r3)`
    Pi,
    /// `p(p(e1, r1) ∩ p(e2, r2), r3)`
    Ip,
    /// `p(e1, r1) ∪ p(e2, r2)`
    TwoU,
    /// `p(p(e1, r1) ∪ p(e2, r2), r3)`
    Up,
    /// Four chained projections.
    FourP,
    /// Five chained projections.
    FiveP,
    /// `p(p(e1, r1) ∩ p(e2, r2) ∩ p(e3, r3), r4)`
    ThreeIp,
    /// `p(p(p(e1, r1) ∩ p(e2, r2), r3), r4)`
    ITwoP,
}

/// Set-combining operator appearing in a query shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CombineOp {
    Intersection,
    Union,
}

impl QueryType {
    /// Every shape, in the canonical listing order used throughout.
    pub const ALL: [QueryType; 13] = [
        QueryType::OneP,
        QueryType::TwoP,
        QueryType::ThreeP,
        QueryType::TwoI,
        QueryType::ThreeI,
        QueryType::Pi,
        QueryType::Ip,
        QueryType::TwoU,
        QueryType::Up,
        QueryType::FourP,
        QueryType::FiveP,
        QueryType::ThreeIp,
        QueryType::ITwoP,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            QueryType::OneP => "1p",
            QueryType::TwoP => "2p",
            QueryType::ThreeP => "3p",
            QueryType::TwoI => "2i",
            QueryType::ThreeI => "3i",
            QueryType::Pi => "pi",
            QueryType::Ip => "ip",
            QueryType::TwoU => "2u",
            QueryType::Up => "up",
            QueryType::FourP => "4p",
            QueryType::FiveP => "5p",
            QueryType::ThreeIp => "3ip",
            QueryType::ITwoP => "i2p",
        }
    }

    /// `(anchor count, relation count)` for the shape.
    pub fn arity(self) -> (usize, usize) {
        match self {
            QueryType::OneP => (1, 1),
            QueryType::TwoP => (1, 2),
            QueryType::ThreeP => (1, 3),
            QueryType::TwoI => (2, 2),
            QueryType::ThreeI => (3, 3),
            QueryType::Pi => (2, 3),
            QueryType::Ip => (2, 3),
            QueryType::TwoU => (2, 2),
            QueryType::Up => (2, 3),
            QueryType::FourP => (1, 4),
            QueryType::FiveP => (1, 5),
            QueryType::ThreeIp => (3, 4),
            QueryType::ITwoP => (2, 4),
        }
    }

    /// The combining operator in the shape, if any.
    pub fn combine_op(self) -> Option<CombineOp> {
        match self {
            QueryType::OneP
            | QueryType::TwoP
            | QueryType::ThreeP
            | QueryType::FourP
            | QueryType::FiveP => None,
            QueryType::TwoI
            | QueryType::ThreeI
            | QueryType::Pi
            | QueryType::Ip
            | QueryType::ThreeIp
            | QueryType::ITwoP => Some(CombineOp::Intersection),
            QueryType::TwoU | QueryType::Up => Some(CombineOp::Union),
        }
    }

    /// Shapes whose final step projects a combined set, and so admit the
    /// distributed form.
    pub fn supports_distributed(self) -> bool {
        matches!(self, QueryType::Ip | QueryType::Up)
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for QueryType {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, QueryError> {
        QueryType::ALL
            .iter()
            .copied()
            .find(|t| t.tag() == s)
            .ok_or_else(|| QueryError::UnknownType(s.to_string()))
    }
}

/// Which evaluation route a query instance takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QueryForm {
    /// Evaluate the shape as written.
    #[default]
    Canonical,
    /// Push the final projection into the branches and combine last.
    /// Only `ip` and `up` support this.
    Distributed,
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("unknown query type {0:?}")]
    UnknownType(String),
    #[error(
        "{qtype} expects {expected_anchors} anchors and {expected_relations} relations, \
         got {got_anchors} and {got_relations}"
    )]
    Arity {
        qtype: QueryType,
        expected_anchors: usize,
        expected_relations: usize,
        got_anchors: usize,
        got_relations: usize,
    },
    #[error("{0} does not support the distributed form")]
    FormNotSupported(QueryType),
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("backward sampling for {qtype} exhausted {attempts} attempts")]
    SamplingExhausted { qtype: QueryType, attempts: usize },
}

/// A concrete query: shape, anchors, relations, and evaluation form.
///
/// Anchor and relation order follows the shape definition: chain shapes list
/// relations from the anchor outward; branched shapes list each branch's
/// anchor and relations left to right, with trailing projection relations
/// last.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryGraph {
    pub qtype: QueryType,
    pub anchors: Vec<EntityId>,
    pub relations: Vec<RelationId>,
    pub form: QueryForm,
}

impl QueryGraph {
    /// Build a canonical-form query, checking arity.
    pub fn new(
        qtype: QueryType,
        anchors: Vec<EntityId>,
        relations: Vec<RelationId>,
    ) -> Result<Self, QueryError> {
        let q = Self {
            qtype,
            anchors,
            relations,
            form: QueryForm::Canonical,
        };
        q.check_arity()?;
        Ok(q)
    }

    fn check_arity(&self) -> Result<(), QueryError> {
        let (ea, er) = self.qtype.arity();
        if self.anchors.len() != ea || self.relations.len() != er {
            return Err(QueryError::Arity {
                qtype: self.qtype,
                expected_anchors: ea,
                expected_relations: er,
                got_anchors: self.anchors.len(),
                got_relations: self.relations.len(),
            });
        }
        if self.form == QueryForm::Distributed && !self.qtype.supports_distributed() {
            return Err(QueryError::FormNotSupported(self.qtype));
        }
        Ok(())
    }

    /// Arity plus id-range validation against a graph.
    pub fn validate(&self, graph: &KnowledgeGraph) -> Result<(), QueryError> {
        self.check_arity()?;
        for &e in &self.anchors {
            graph.entity_name(e)?;
        }
        for &r in &self.relations {
            graph.relation_name(r)?;
        }
        Ok(())
    }

    /// Rewrite a final-step-projection query (`ip`, `up`) to its distributed
    /// form. Anchors and relations are unchanged; only the evaluation route
    /// differs, and `evaluate` returns the same answers on both routes.
    pub fn distribute_final_projection(&self) -> Result<QueryGraph, QueryError> {
        if !self.qtype.supports_distributed() {
            return Err(QueryError::FormNotSupported(self.qtype));
        }
        Ok(QueryGraph {
            form: QueryForm::Distributed,
            ..self.clone()
        })
    }

    /// Exact answer set of the query over `graph`.
    pub fn evaluate(&self, graph: &KnowledgeGraph) -> Result<EntitySet, QueryError> {
        self.validate(graph)?;
        let a = &self.anchors;
        let r = &self.relations;
        let single = |e: EntityId| -> EntitySet { std::iter::once(e).collect() };
        let out = match (self.qtype, self.form) {
            (QueryType::OneP, _) => chain(graph, a[0], &r[..])?,
            (QueryType::TwoP, _) => chain(graph, a[0], &r[..])?,
            (QueryType::ThreeP, _) => chain(graph, a[0], &r[..])?,
            (QueryType::FourP, _) => chain(graph, a[0], &r[..])?,
            (QueryType::FiveP, _) => chain(graph, a[0], &r[..])?,
            (QueryType::TwoI, _) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                &b1 & &b2
            }
            (QueryType::ThreeI, _) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                let b3 = graph.project(&single(a[2]), r[2])?;
                &(&b1 & &b2) & &b3
            }
            (QueryType::Pi, _) => {
                let b1 = chain(graph, a[0], &r[0..2])?;
                let b2 = graph.project(&single(a[1]), r[2])?;
                &b1 & &b2
            }
            (QueryType::TwoU, _) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                &b1 | &b2
            }
            (QueryType::Ip, QueryForm::Canonical) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                graph.project(&(&b1 & &b2), r[2])?
            }
            (QueryType::Ip, QueryForm::Distributed) => {
                // Intersect (witness, answer) pairs so the shared witness
                // survives the push-down.
                let s1 = witness_pairs(graph, &graph.project(&single(a[0]), r[0])?, r[2])?;
                let s2 = witness_pairs(graph, &graph.project(&single(a[1]), r[1])?, r[2])?;
                s1.intersection(&s2).map(|&(_, ans)| ans).collect()
            }
            (QueryType::Up, QueryForm::Canonical) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                graph.project(&(&b1 | &b2), r[2])?
            }
            (QueryType::Up, QueryForm::Distributed) => {
                // Projection distributes over union exactly.
                let b1 = chain(graph, a[0], &[r[0], r[2]])?;
                let b2 = chain(graph, a[1], &[r[1], r[2]])?;
                &b1 | &b2
            }
            (QueryType::ThreeIp, _) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                let b3 = graph.project(&single(a[2]), r[2])?;
                graph.project(&(&(&b1 & &b2) & &b3), r[3])?
            }
            (QueryType::ITwoP, _) => {
                let b1 = graph.project(&single(a[0]), r[0])?;
                let b2 = graph.project(&single(a[1]), r[1])?;
                let mid = graph.project(&(&b1 & &b2), r[2])?;
                graph.project(&mid, r[3])?
            }
        };
        Ok(out)
    }
}

/// Chained projections from a single entity.
fn chain(
    graph: &KnowledgeGraph,
    start: EntityId,
    relations: &[RelationId],
) -> Result<EntitySet, QueryError> {
    let mut set: EntitySet = std::iter::once(start).collect();
    for &rel in relations {
        set = graph.project(&set, rel)?;
        if set.is_empty() {
            break;
        }
    }
    Ok(set)
}

/// All `(witness, answer)` pairs with the witness drawn from `sources` and
/// `(witness, relation, answer)` an edge.
fn witness_pairs(
    graph: &KnowledgeGraph,
    sources: &EntitySet,
    relation: RelationId,
) -> Result<BTreeSet<(EntityId, EntityId)>, QueryError> {
    let mut pairs = BTreeSet::new();
    for &v in sources {
        for &ans in graph.project_one(v, relation)? {
            pairs.insert((v, ans));
        }
    }
    Ok(pairs)
}

/// Sample a query of the given shape by walking backward from a random
/// answer entity, so the sampled query always has at least one answer on
/// `graph`. Branches that meet at a node are forced to use pairwise
/// distinct `(anchor, relation)` steps. Fails with `SamplingExhausted`
/// after [`MAX_SAMPLE_ATTEMPTS`] full restarts.
pub fn random_query<R: Rng>(
    graph: &KnowledgeGraph,
    qtype: QueryType,
    rng: &mut R,
) -> Result<QueryGraph, QueryError> {
    let answer_pool: Vec<EntityId> = (0..graph.entity_count() as u32)
        .map(EntityId)
        .filter(|&e| !graph.in_neighbors(e).unwrap_or(&[]).is_empty())
        .collect();
    if answer_pool.is_empty() {
        return Err(QueryError::SamplingExhausted { qtype, attempts: 0 });
    }
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let answer = *answer_pool.choose(rng).expect("pool is nonempty");
        if let Some(q) = try_sample(graph, qtype, answer, rng) {
            debug_assert!(q.check_arity().is_ok());
            return Ok(q);
        }
    }
    Err(QueryError::SamplingExhausted {
        qtype,
        attempts: MAX_SAMPLE_ATTEMPTS,
    })
}

/// One backward-walk attempt; `None` when a step has no incoming edge or a
/// distinctness constraint cannot be met.
fn try_sample<R: Rng>(
    graph: &KnowledgeGraph,
    qtype: QueryType,
    answer: EntityId,
    rng: &mut R,
) -> Option<QueryGraph> {
    let step = |node: EntityId, rng: &mut R| -> Option<(RelationId, EntityId)> {
        graph.in_neighbors(node).ok()?.choose(rng).copied()
    };
    // Walk a relation chain backward; returns (anchor, relations forward).
    let walk = |node: EntityId, len: usize, rng: &mut R| -> Option<(EntityId, Vec<RelationId>)> {
        let mut rels = Vec::with_capacity(len);
        let mut cur = node;
        for _ in 0..len {
            let (r, h) = step(cur, rng)?;
            rels.push(r);
            cur = h;
        }
        rels.reverse();
        Some((cur, rels))
    };
    // n distinct (relation, head) steps into node.
    let branches = |node: EntityId, n: usize, rng: &mut R| -> Option<Vec<(RelationId, EntityId)>> {
        let mut seen: Vec<(RelationId, EntityId)> = Vec::with_capacity(n);
        let edges = graph.in_neighbors(node).ok()?;
        if edges.len() < n {
            return None;
        }
        let mut picks: Vec<&(RelationId, EntityId)> = edges.iter().collect();
        picks.shuffle(rng);
        for &&e in picks.iter() {
            if !seen.contains(&e) {
                seen.push(e);
                if seen.len() == n {
                    return Some(seen);
                }
            }
        }
        None
    };

    let (anchors, relations) = match qtype {
        QueryType::OneP | QueryType::TwoP | QueryType::ThreeP | QueryType::FourP
        | QueryType::FiveP => {
            let (_, len) = qtype.arity();
            let (anchor, rels) = walk(answer, len, rng)?;
            (vec![anchor], rels)
        }
        QueryType::TwoI | QueryType::TwoU => {
            let b = branches(answer, 2, rng)?;
            (vec![b[0].1, b[1].1], vec![b[0].0, b[1].0])
        }
        QueryType::ThreeI => {
            let b = branches(answer, 3, rng)?;
            (vec![b[0].1, b[1].1, b[2].1], vec![b[0].0, b[1].0, b[2].0])
        }
        QueryType::Pi => {
            let (r2, v) = step(answer, rng)?;
            let (r1, e1) = step(v, rng)?;
            let (r3, e2) = step(answer, rng)?;
            (vec![e1, e2], vec![r1, r2, r3])
        }
        QueryType::Ip | QueryType::Up => {
            let (r3, v) = step(answer, rng)?;
            let b = branches(v, 2, rng)?;
            (vec![b[0].1, b[1].1], vec![b[0].0, b[1].0, r3])
        }
        QueryType::ThreeIp => {
            let (r4, v) = step(answer, rng)?;
            let b = branches(v, 3, rng)?;
            (
                vec![b[0].1, b[1].1, b[2].1],
                vec![b[0].0, b[1].0, b[2].0, r4],
            )
        }
        QueryType::ITwoP => {
            let (r4, v2) = step(answer, rng)?;
            let (r3, v1) = step(v2, rng)?;
            let b = branches(v1, 2, rng)?;
            (vec![b[0].1, b[1].1], vec![b[0].0, b[1].0, r3, r4])
        }
    };
    Some(QueryGraph {
        qtype,
        anchors,
        relations,
        form: QueryForm::Canonical,
    })
}
