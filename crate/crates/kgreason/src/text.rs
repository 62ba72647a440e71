//! Textual linearization of queries and the token vocabulary.
//!
//! A query is rendered as one whitespace-separated token line:
//!
//! ```text
//! [CLS] [qtype:2i] Three steps: [proj], and [proj], [inter] [SEP]
//! [intersection] [projection] [anchor] t(e1) [relation] t(r1)
//! [projection] [anchor] t(e2) [relation] t(r2)
//! ```
//!
//! (shown wrapped; the real line has no newlines). The part before `[SEP]`
//! is a fixed structural prompt per shape; the part after is the query body
//! built from marker tokens and the anchor/relation names, whose words each
//! become one token. Shapes whose final step projects a combined set (`ip`,
//! `up`) are rendered in distributed layout: the final relation repeats
//! inside every branch and the combining marker leads the body.
//!
//! Path spans segment the body into branches by a purely textual rule: a
//! branch starts at a `[projection]` immediately followed by `[anchor]` and
//! runs to the next such pair or the end of the line. Projection units
//! without an anchor therefore extend the branch opened before them. The
//! leading combining marker belongs to no span.
//!
//! A candidate entity is rendered as `[CLS] [target] <name words>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::kg::{EntityId, GraphError, KnowledgeGraph};
use crate::query::{CombineOp, QueryError, QueryGraph, QueryType};
use crate::rng::fnv1a;

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u32);

pub const CLS: TokenId = TokenId(0);
pub const SEP: TokenId = TokenId(1);
pub const PAD: TokenId = TokenId(2);
pub const UNK: TokenId = TokenId(3);

/// Marker tokens, pinned to the lowest ids in this order.
pub const SPECIALS: [&str; 10] = [
    "[CLS]",
    "[SEP]",
    "[PAD]",
    "[UNK]",
    "[anchor]",
    "[relation]",
    "[projection]",
    "[intersection]",
    "[union]",
    "[target]",
];

#[derive(Debug, Error)]
pub enum TextError {
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("encoded input is {len} tokens, the maximum is {max}")]
    TooLong { len: usize, max: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The structural prompt for a shape: its step count and step kinds.
pub fn structural_prompt(qtype: QueryType) -> &'static str {
    match qtype {
        QueryType::OneP => "One step: [proj]",
        QueryType::TwoP => "Two steps: [proj], then [proj]",
        QueryType::ThreeP => "Three steps: [proj], then [proj], then [proj]",
        QueryType::TwoI => "Three steps: [proj], and [proj], [inter]",
        QueryType::ThreeI => "Four steps: [proj], and [proj], and [proj], [inter]",
        QueryType::Pi => "Four steps: [proj], then [proj], and [proj], [inter]",
        QueryType::Ip => "Five steps: [proj], then [proj], and [proj], then [proj], [inter]",
        QueryType::TwoU => "Three steps: [proj], and [proj], [union]",
        QueryType::Up => "Five steps: [proj], then [proj], and [proj], then [proj], [union]",
        QueryType::FourP => "Four steps: [proj], then [proj], then [proj], then [proj]",
        QueryType::FiveP => {
            "Five steps: [proj], then [proj], then [proj], then [proj], then [proj]"
        }
        QueryType::ThreeIp => "Five steps: [proj], and [proj], and [proj], [inter], then [proj]",
        QueryType::ITwoP => "Five steps: [proj], and [proj], [inter], then [proj], then [proj]",
    }
}

/// The shape marker token surface, e.g. `[qtype:2i]`.
pub fn qtype_surface(qtype: QueryType) -> String {
    format!("[qtype:{}]", qtype.tag())
}

/// Branch layout of a shape over its anchor and relation lists: per branch,
/// the anchor index and the relation indices applied in order. `ip` and
/// `up` repeat their final relation in both branches (distributed layout);
/// the trailing projections of `3ip` and `i2p` extend the last branch.
fn branch_layout(qtype: QueryType) -> Vec<(usize, Vec<usize>)> {
    match qtype {
        QueryType::OneP => vec![(0, vec![0])],
        QueryType::TwoP => vec![(0, vec![0, 1])],
        QueryType::ThreeP => vec![(0, vec![0, 1, 2])],
        QueryType::FourP => vec![(0, vec![0, 1, 2, 3])],
        QueryType::FiveP => vec![(0, vec![0, 1, 2, 3, 4])],
        QueryType::TwoI | QueryType::TwoU => vec![(0, vec![0]), (1, vec![1])],
        QueryType::ThreeI => vec![(0, vec![0]), (1, vec![1]), (2, vec![2])],
        QueryType::Pi => vec![(0, vec![0, 1]), (1, vec![2])],
        QueryType::Ip | QueryType::Up => vec![(0, vec![0, 2]), (1, vec![1, 2])],
        QueryType::ThreeIp => vec![(0, vec![0]), (1, vec![1]), (2, vec![2, 3])],
        QueryType::ITwoP => vec![(0, vec![0]), (1, vec![1, 2, 3])],
    }
}

/// Query body token surfaces (the part after `[SEP]`).
fn body_surfaces(graph: &KnowledgeGraph, query: &QueryGraph) -> Result<Vec<String>, TextError> {
    query.validate(graph)?;
    let mut out = Vec::new();
    match query.qtype.combine_op() {
        Some(CombineOp::Intersection) => out.push("[intersection]".to_string()),
        Some(CombineOp::Union) => out.push("[union]".to_string()),
        None => {}
    }
    for (anchor_idx, rel_idxs) in branch_layout(query.qtype) {
        for (k, &ri) in rel_idxs.iter().enumerate() {
            out.push("[projection]".to_string());
            if k == 0 {
                out.push("[anchor]".to_string());
                let name = graph.entity_name(query.anchors[anchor_idx])?;
                out.extend(name.split_whitespace().map(str::to_string));
            }
            out.push("[relation]".to_string());
            let name = graph.relation_name(query.relations[ri])?;
            out.extend(name.split_whitespace().map(str::to_string));
        }
    }
    Ok(out)
}

/// Scan branch spans in a body per the textual rule. Ranges index into
/// `body`.
fn scan_spans(body: &[String]) -> Vec<Range<usize>> {
    let starts: Vec<usize> = body
        .iter()
        .enumerate()
        .filter(|&(i, tok)| {
            tok == "[projection]" && body.get(i + 1).is_some_and(|next| next == "[anchor]")
        })
        .map(|(i, _)| i)
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, &start)| {
            let end = starts.get(k + 1).copied().unwrap_or(body.len());
            start..end
        })
        .collect()
}

/// Full input token surfaces for a query, with branch spans (absolute
/// indices) and the combining operator.
pub fn query_surfaces(
    graph: &KnowledgeGraph,
    query: &QueryGraph,
) -> Result<(Vec<String>, Vec<Range<usize>>, Option<CombineOp>), TextError> {
    let body = body_surfaces(graph, query)?;
    let spans = scan_spans(&body);
    let mut tokens = vec!["[CLS]".to_string(), qtype_surface(query.qtype)];
    tokens.extend(
        structural_prompt(query.qtype)
            .split_whitespace()
            .map(str::to_string),
    );
    tokens.push("[SEP]".to_string());
    let offset = tokens.len();
    let spans = spans
        .into_iter()
        .map(|r| (r.start + offset)..(r.end + offset))
        .collect::<Vec<_>>();
    tokens.extend(body);
    debug_assert_eq!(
        spans.is_empty(),
        false,
        "every shape has at least one branch"
    );
    debug_assert_eq!(
        query.qtype.combine_op().is_none(),
        spans.len() == 1,
        "operator is none exactly for single-branch shapes"
    );
    Ok((tokens, spans, query.qtype.combine_op()))
}

/// The query input as one text line.
pub fn linearize_query(graph: &KnowledgeGraph, query: &QueryGraph) -> Result<String, TextError> {
    let (tokens, _, _) = query_surfaces(graph, query)?;
    Ok(tokens.join(" "))
}

/// The candidate input as one text line.
pub fn linearize_entity(graph: &KnowledgeGraph, entity: EntityId) -> Result<String, TextError> {
    Ok(entity_surfaces(graph, entity)?.join(" "))
}

fn entity_surfaces(graph: &KnowledgeGraph, entity: EntityId) -> Result<Vec<String>, TextError> {
    let mut tokens = vec!["[CLS]".to_string(), "[target]".to_string()];
    tokens.extend(
        graph
            .entity_name(entity)?
            .split_whitespace()
            .map(str::to_string),
    );
    Ok(tokens)
}

/// An encoded query input: token ids, branch spans, combining operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedQuery {
    pub tokens: Vec<TokenId>,
    pub spans: Vec<Range<usize>>,
    pub operator: Option<CombineOp>,
}

/// An encoded candidate input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedEntity {
    pub tokens: Vec<TokenId>,
}

/// Token inventory. Ids are assigned in four fixed blocks: markers, shape
/// tokens, prompt words, then name words in first-appearance order
/// (entities before relations). Extension appends name words only, so ids
/// already assigned never move.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Markers, shape tokens, and prompt words only.
    fn base() -> Self {
        let mut v = Vocabulary {
            surfaces: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in QueryType::ALL {
            v.push(qtype_surface(t));
        }
        for t in QueryType::ALL {
            for word in structural_prompt(t).split_whitespace() {
                if !v.index.contains_key(word) {
                    v.push(word.to_string());
                }
            }
        }
        v
    }

    /// Base vocabulary plus the graph's name words.
    pub fn build(graph: &KnowledgeGraph) -> Self {
        let mut v = Self::base();
        v.absorb_names(graph);
        v
    }

    fn absorb_names(&mut self, graph: &KnowledgeGraph) -> Vec<TokenId> {
        let mut added = Vec::new();
        let names = graph
            .entity_names()
            .iter()
            .chain(graph.relation_names().iter());
        for name in names {
            for word in name.split_whitespace() {
                if !self.index.contains_key(word) {
                    added.push(self.push(word.to_string()));
                }
            }
        }
        added
    }

    /// A copy that also covers `graph`, plus the freshly added ids (which a
    /// model must initialize embeddings for).
    pub fn extend_with(&self, graph: &KnowledgeGraph) -> (Vocabulary, Vec<TokenId>) {
        let mut v = self.clone();
        let added = v.absorb_names(graph);
        (v, added)
    }

    fn push(&mut self, surface: String) -> TokenId {
        let id = TokenId(self.surfaces.len() as u32);
        self.index.insert(surface.clone(), id);
        self.surfaces.push(surface);
        id
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    /// Lookup falling back to `[UNK]` for unknown surfaces.
    pub fn id_or_unk(&self, surface: &str) -> TokenId {
        self.id(surface).unwrap_or(UNK)
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id.0 as usize).map(String::as_str)
    }

    /// Stable content hash, used to pair checkpoints with vocabularies.
    pub fn content_hash(&self) -> u64 {
        let mut joined = String::new();
        for s in &self.surfaces {
            joined.push_str(s);
            joined.push('\n');
        }
        fnv1a(joined.as_bytes())
    }

    /// Dump as `id<TAB>surface` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<(), TextError> {
        let file = File::create(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        for (i, s) in self.surfaces.iter().enumerate() {
            writeln!(w, "{i}\t{s}").map_err(|source| TextError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

fn encode_surfaces(
    vocab: &Vocabulary,
    surfaces: &[String],
    max_len: usize,
) -> Result<Vec<TokenId>, TextError> {
    if surfaces.len() > max_len {
        return Err(TextError::TooLong {
            len: surfaces.len(),
            max: max_len,
        });
    }
    Ok(surfaces.iter().map(|s| vocab.id_or_unk(s)).collect())
}

/// Encode a query input. Structural tokens are always known; name words may
/// fall back to `[UNK]` when the vocabulary does not cover the graph.
pub fn encode_query(
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    query: &QueryGraph,
    max_len: usize,
) -> Result<EncodedQuery, TextError> {
    let (surfaces, spans, operator) = query_surfaces(graph, query)?;
    Ok(EncodedQuery {
        tokens: encode_surfaces(vocab, &surfaces, max_len)?,
        spans,
        operator,
    })
}

/// Encode a candidate input.
pub fn encode_entity(
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    entity: EntityId,
    max_len: usize,
) -> Result<EncodedEntity, TextError> {
    let surfaces = entity_surfaces(graph, entity)?;
    Ok(EncodedEntity {
        tokens: encode_surfaces(vocab, &surfaces, max_len)?,
    })
}
