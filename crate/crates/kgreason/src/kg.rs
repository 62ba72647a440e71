//! Knowledge graph storage and traversal.
//!
//! A [`KnowledgeGraph`] is an immutable set of `(head, relation, tail)`
//! triples over dense integer ids, with name tables for entities and
//! relations and a forward adjacency index. It serves both the symbolic
//! query evaluator and dataset generation; after construction it is
//! read-only and safe to share across threads.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Dense entity identifier, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

/// Dense relation identifier, assigned in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// One directed, labeled edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// A sorted set of entity ids, used for answer sets and intermediate
/// variable sets during query evaluation.
pub type EntitySet = BTreeSet<EntityId>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: malformed line: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: undeclared name {name:?}")]
    UndeclaredName {
        path: String,
        line: usize,
        name: String,
    },
    #[error("{path}:{line}: duplicate name {name:?}")]
    DuplicateName {
        path: String,
        line: usize,
        name: String,
    },
    #[error("invalid entity id {0}")]
    InvalidEntity(u32),
    #[error("invalid relation id {0}")]
    InvalidRelation(u32),
    #[error("triple references id outside the name tables: {0:?}")]
    DanglingTriple(Triple),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Immutable knowledge graph: name tables, a deduplicated sorted triple
/// list, and a forward `(head, relation) -> sorted tails` index.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    forward: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    // Outgoing (relation, tail) pairs per entity, sorted.
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    // Incoming (relation, head) pairs per entity, sorted.
    in_adjacency: Vec<Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Build a graph from already-parsed parts. Triples are deduplicated
    /// and must reference ids covered by the name tables.
    pub fn from_parts(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        mut triples: Vec<Triple>,
    ) -> Result<Self, GraphError> {
        let entity_index = build_name_index(&entity_names, |name| GraphError::DuplicateName {
            path: "<entities>".into(),
            line: 0,
            name,
        })?;
        let relation_index = build_name_index(&relation_names, |name| GraphError::DuplicateName {
            path: "<relations>".into(),
            line: 0,
            name,
        })?;

        triples.sort_unstable();
        let before = triples.len();
        triples.dedup();
        if triples.len() != before {
            log::warn!("deduplicated {} repeated triples", before - triples.len());
        }

        for t in &triples {
            if t.head.0 as usize >= entity_names.len() || t.tail.0 as usize >= entity_names.len() {
                return Err(GraphError::DanglingTriple(*t));
            }
            if t.relation.0 as usize >= relation_names.len() {
                return Err(GraphError::DanglingTriple(*t));
            }
        }

        let mut forward: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut adjacency = vec![Vec::new(); entity_names.len()];
        let mut in_adjacency = vec![Vec::new(); entity_names.len()];
        for t in &triples {
            forward.entry((t.head, t.relation)).or_default().push(t.tail);
            adjacency[t.head.0 as usize].push((t.relation, t.tail));
            in_adjacency[t.tail.0 as usize].push((t.relation, t.head));
        }
        // Triples are sorted, so each bucket is already in ascending order.
        for list in adjacency.iter_mut() {
            list.sort_unstable();
        }
        for list in in_adjacency.iter_mut() {
            list.sort_unstable();
        }

        Ok(Self {
            entity_names,
            relation_names,
            entity_index,
            relation_index,
            triples,
            forward,
            adjacency,
            in_adjacency,
        })
    }

    /// Load a graph from a tab-separated triples file plus one-name-per-line
    /// entity and relation files. Ids follow first-appearance order in the
    /// name files; duplicate triples are dropped with a warning.
    pub fn load(
        triples_path: &Path,
        entity_names_path: &Path,
        relation_names_path: &Path,
    ) -> Result<Self, GraphError> {
        let entity_names = read_name_file(entity_names_path)?;
        let relation_names = read_name_file(relation_names_path)?;
        let entity_index = build_name_index(&entity_names, |name| GraphError::DuplicateName {
            path: entity_names_path.display().to_string(),
            line: 0,
            name,
        })?;
        let relation_index = build_name_index(&relation_names, |name| GraphError::DuplicateName {
            path: relation_names_path.display().to_string(),
            line: 0,
            name,
        })?;

        let path_str = triples_path.display().to_string();
        let file = File::open(triples_path).map_err(|source| GraphError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut triples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| GraphError::Io {
                path: path_str.clone(),
                source,
            })?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (head, rel, tail) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(h), Some(r), Some(t), None) => (h, r, t),
                _ => {
                    return Err(GraphError::Malformed {
                        path: path_str,
                        line: lineno + 1,
                        reason: "expected head<TAB>relation<TAB>tail".into(),
                    })
                }
            };
            let head = *entity_index
                .get(head)
                .ok_or_else(|| GraphError::UndeclaredName {
                    path: path_str.clone(),
                    line: lineno + 1,
                    name: head.to_string(),
                })?;
            let relation = *relation_index
                .get(rel)
                .ok_or_else(|| GraphError::UndeclaredName {
                    path: path_str.clone(),
                    line: lineno + 1,
                    name: rel.to_string(),
                })?;
            let tail = *entity_index
                .get(tail)
                .ok_or_else(|| GraphError::UndeclaredName {
                    path: path_str.clone(),
                    line: lineno + 1,
                    name: tail.to_string(),
                })?;
            triples.push(Triple { head, relation, tail });
        }

        Self::from_parts(entity_names, relation_names, triples)
    }

    /// Write the graph back out in the `load` format: `triples.tsv`,
    /// `entities.txt`, `relations.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        std::fs::create_dir_all(dir).map_err(|source| GraphError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_lines(&dir.join("entities.txt"), self.entity_names.iter())?;
        write_lines(&dir.join("relations.txt"), self.relation_names.iter())?;
        let path = dir.join("triples.tsv");
        let file = File::create(&path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        for t in &self.triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_names[t.head.0 as usize],
                self.relation_names[t.relation.0 as usize],
                self.entity_names[t.tail.0 as usize],
            )
            .map_err(|source| GraphError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    /// Same name tables, restricted triple set. Used by split construction.
    pub fn with_triples(&self, triples: Vec<Triple>) -> Result<Self, GraphError> {
        Self::from_parts(self.entity_names.clone(), self.relation_names.clone(), triples)
    }

    pub fn entity_count(&self) -> usize {
        self.entity_names.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_name(&self, id: EntityId) -> Result<&str, GraphError> {
        self.entity_names
            .get(id.0 as usize)
            .map(String::as_str)
            .ok_or(GraphError::InvalidEntity(id.0))
    }

    pub fn relation_name(&self, id: RelationId) -> Result<&str, GraphError> {
        self.relation_names
            .get(id.0 as usize)
            .map(String::as_str)
            .ok_or(GraphError::InvalidRelation(id.0))
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    /// True when `other` declares the same entity and relation tables in the
    /// same order (and so shares this graph's id space).
    pub fn shares_tables_with(&self, other: &KnowledgeGraph) -> bool {
        self.entity_names == other.entity_names && self.relation_names == other.relation_names
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.triples
            .binary_search(&Triple { head, relation, tail })
            .is_ok()
    }

    /// One relation-projection hop: the union of tails reachable from any
    /// source entity through `relation`, sorted by entity id.
    pub fn project(
        &self,
        sources: &EntitySet,
        relation: RelationId,
    ) -> Result<EntitySet, GraphError> {
        if relation.0 as usize >= self.relation_names.len() {
            return Err(GraphError::InvalidRelation(relation.0));
        }
        let mut out = EntitySet::new();
        for &source in sources {
            if source.0 as usize >= self.entity_names.len() {
                return Err(GraphError::InvalidEntity(source.0));
            }
            if let Some(tails) = self.forward.get(&(source, relation)) {
                out.extend(tails.iter().copied());
            }
        }
        Ok(out)
    }

    /// Tails reachable from a single entity through `relation`.
    pub fn project_one(
        &self,
        source: EntityId,
        relation: RelationId,
    ) -> Result<&[EntityId], GraphError> {
        if source.0 as usize >= self.entity_names.len() {
            return Err(GraphError::InvalidEntity(source.0));
        }
        if relation.0 as usize >= self.relation_names.len() {
            return Err(GraphError::InvalidRelation(relation.0));
        }
        Ok(self
            .forward
            .get(&(source, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[]))
    }

    /// Outgoing `(relation, tail)` pairs of an entity, sorted.
    pub fn neighbors(&self, entity: EntityId) -> Result<&[(RelationId, EntityId)], GraphError> {
        self.adjacency
            .get(entity.0 as usize)
            .map(Vec::as_slice)
            .ok_or(GraphError::InvalidEntity(entity.0))
    }

    /// Incoming `(relation, head)` pairs of an entity, sorted. Backward
    /// query sampling walks these.
    pub fn in_neighbors(&self, entity: EntityId) -> Result<&[(RelationId, EntityId)], GraphError> {
        self.in_adjacency
            .get(entity.0 as usize)
            .map(Vec::as_slice)
            .ok_or(GraphError::InvalidEntity(entity.0))
    }
}

fn build_name_index<I, F>(names: &[String], mut dup: F) -> Result<HashMap<String, I>, GraphError>
where
    I: From<u32>,
    F: FnMut(String) -> GraphError,
{
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if index.insert(name.clone(), I::from(i as u32)).is_some() {
            return Err(dup(name.clone()));
        }
    }
    Ok(index)
}

impl From<u32> for EntityId {
    fn from(v: u32) -> Self {
        EntityId(v)
    }
}

impl From<u32> for RelationId {
    fn from(v: u32) -> Self {
        RelationId(v)
    }
}

fn read_name_file(path: &Path) -> Result<Vec<String>, GraphError> {
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| GraphError::Io {
        path: path_str.clone(),
        source,
    })?;
    let mut names = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GraphError::Io {
            path: path_str.clone(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.contains('\t') {
            return Err(GraphError::Malformed {
                path: path_str,
                line: lineno + 1,
                reason: "name contains a tab".into(),
            });
        }
        names.push(line.to_string());
    }
    Ok(names)
}

fn write_lines<'a>(
    path: &Path,
    lines: impl Iterator<Item = &'a String>,
) -> Result<(), GraphError> {
    let file = File::create(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    fn write_file(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn load_counts_six_triple_example() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(
            dir.path(),
            "triples.tsv",
            "A\tr\tB\nA\tr\tC\nB\ts\tD\nC\ts\tD\nC\ts\tE\nE\tr\tD\n",
        );
        let entities = write_file(dir.path(), "entities.txt", "A\nB\nC\nD\nE\n");
        let relations = write_file(dir.path(), "relations.txt", "r\ns\n");
        let g = KnowledgeGraph::load(&triples, &entities, &relations).unwrap();
        assert_eq!(g.entity_count(), 5);
        assert_eq!(g.relation_count(), 2);
        assert_eq!(g.triple_count(), 6);
    }

    #[test]
    fn load_empty_triples_file() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "# nothing here\n");
        let entities = write_file(dir.path(), "entities.txt", "A\nB\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let g = KnowledgeGraph::load(&triples, &entities, &relations).unwrap();
        assert_eq!(g.triple_count(), 0);
        assert_eq!(g.entity_count(), 2);
    }

    #[test]
    fn load_rejects_undeclared_relation() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "A\tq\tB\n");
        let entities = write_file(dir.path(), "entities.txt", "A\nB\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let err = KnowledgeGraph::load(&triples, &entities, &relations).unwrap_err();
        match err {
            GraphError::UndeclaredName { name, line, .. } => {
                assert_eq!(name, "q");
                assert_eq!(line, 1);
            }
            other => panic!("expected UndeclaredName, got {other}"),
        }
    }

    #[test]
    fn load_rejects_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "A r B\n");
        let entities = write_file(dir.path(), "entities.txt", "A\nB\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let err = KnowledgeGraph::load(&triples, &entities, &relations).unwrap_err();
        assert!(matches!(err, GraphError::Malformed { line: 1, .. }));
    }

    #[test]
    fn load_rejects_duplicate_name() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "");
        let entities = write_file(dir.path(), "entities.txt", "A\nA\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let err = KnowledgeGraph::load(&triples, &entities, &relations).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateName { .. }));
    }

    #[test]
    fn duplicate_triples_are_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "A\tr\tB\nA\tr\tB\n");
        let entities = write_file(dir.path(), "entities.txt", "A\nB\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let g = KnowledgeGraph::load(&triples, &entities, &relations).unwrap();
        assert_eq!(g.triple_count(), 1);
    }

    #[test]
    fn project_single_source() {
        let g = six_triple_graph();
        let r = g.relation_id("r").unwrap();
        let out = g.project(&ids(&g, &["A"]), r).unwrap();
        assert_eq!(out, ids(&g, &["B", "C"]));
    }

    #[test]
    fn project_union_over_sources() {
        // Expected {D, E}: exhaustive scan of the six triples, sources {B, C}
        // through relation s, reaches D (from B), D and E (from C).
        let g = six_triple_graph();
        let s = g.relation_id("s").unwrap();
        let out = g.project(&ids(&g, &["B", "C"]), s).unwrap();
        assert_eq!(out, ids(&g, &["D", "E"]));
    }

    #[test]
    fn project_empty_sources() {
        let g = six_triple_graph();
        let r = g.relation_id("r").unwrap();
        assert!(g.project(&EntitySet::new(), r).unwrap().is_empty());
    }

    #[test]
    fn project_rejects_invalid_ids() {
        let g = six_triple_graph();
        assert!(matches!(
            g.project(&ids(&g, &["A"]), RelationId(99)),
            Err(GraphError::InvalidRelation(99))
        ));
        let mut bad = EntitySet::new();
        bad.insert(EntityId(99));
        assert!(matches!(
            g.project(&bad, RelationId(0)),
            Err(GraphError::InvalidEntity(99))
        ));
    }

    #[test]
    fn neighbors_listing() {
        let g = six_triple_graph();
        let a = g.entity_id("A").unwrap();
        let d = g.entity_id("D").unwrap();
        let r = g.relation_id("r").unwrap();
        assert_eq!(
            g.neighbors(a).unwrap(),
            &[(r, g.entity_id("B").unwrap()), (r, g.entity_id("C").unwrap())]
        );
        assert!(g.neighbors(d).unwrap().is_empty());
    }

    #[test]
    fn in_neighbors_listing() {
        let g = six_triple_graph();
        let d = g.entity_id("D").unwrap();
        let a = g.entity_id("A").unwrap();
        let r = g.relation_id("r").unwrap();
        let s = g.relation_id("s").unwrap();
        // D is reached by (B,s), (C,s), (E,r); pairs sort by relation first.
        assert_eq!(
            g.in_neighbors(d).unwrap(),
            &[
                (r, g.entity_id("E").unwrap()),
                (s, g.entity_id("B").unwrap()),
                (s, g.entity_id("C").unwrap()),
            ]
        );
        assert!(g.in_neighbors(a).unwrap().is_empty());
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let triples = write_file(dir.path(), "triples.tsv", "B\tr\tA\nA\tr\tB\n");
        let entities = write_file(dir.path(), "entities.txt", "A\nB\n");
        let relations = write_file(dir.path(), "relations.txt", "r\n");
        let g1 = KnowledgeGraph::load(&triples, &entities, &relations).unwrap();
        let g2 = KnowledgeGraph::load(&triples, &entities, &relations).unwrap();
        assert_eq!(g1.triples(), g2.triples());
        assert_eq!(g1.entity_names(), g2.entity_names());
    }

    #[test]
    fn save_load_round_trip() {
        let g = six_triple_graph();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let g2 = KnowledgeGraph::load(
            &dir.path().join("triples.tsv"),
            &dir.path().join("entities.txt"),
            &dir.path().join("relations.txt"),
        )
        .unwrap();
        assert_eq!(g.triples(), g2.triples());
        assert_eq!(g.entity_names(), g2.entity_names());
        assert_eq!(g.relation_names(), g2.relation_names());
    }

    /// Random small graph as (entity count, relation count, triple list).
    fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
        (2u32..8, 1u32..4).prop_flat_map(|(ne, nr)| {
            let triple = (0..ne, 0..nr, 0..ne).prop_map(|(h, r, t)| Triple {
                head: EntityId(h),
                relation: RelationId(r),
                tail: EntityId(t),
            });
            proptest::collection::vec(triple, 0..30).prop_map(move |triples| {
                let entities = (0..ne).map(|i| format!("e{i}")).collect();
                let relations = (0..nr).map(|i| format!("r{i}")).collect();
                KnowledgeGraph::from_parts(entities, relations, triples).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn project_is_monotone_in_sources(g in arb_graph(), mask in proptest::collection::vec(any::<bool>(), 8)) {
            let all: Vec<EntityId> = (0..g.entity_count() as u32).map(EntityId).collect();
            let small: EntitySet = all
                .iter()
                .zip(mask.iter())
                .filter(|(_, keep)| **keep)
                .map(|(e, _)| *e)
                .collect();
            let big: EntitySet = all.iter().copied().collect();
            for r in 0..g.relation_count() as u32 {
                let rel = RelationId(r);
                let from_small = g.project(&small, rel).unwrap();
                let from_big = g.project(&big, rel).unwrap();
                prop_assert!(from_small.is_subset(&from_big));
            }
        }

        #[test]
        fn adding_a_triple_never_shrinks_projection(
            g in arb_graph(),
            h in 0u32..8, r in 0u32..4, t in 0u32..8,
        ) {
            let h = EntityId(h.min(g.entity_count() as u32 - 1));
            let t = EntityId(t.min(g.entity_count() as u32 - 1));
            let r = RelationId(r.min(g.relation_count() as u32 - 1));
            let mut triples = g.triples().to_vec();
            triples.push(Triple { head: h, relation: r, tail: t });
            let bigger = g.with_triples(triples).unwrap();
            let sources: EntitySet = (0..g.entity_count() as u32).map(EntityId).collect();
            for rel in 0..g.relation_count() as u32 {
                let rel = RelationId(rel);
                let before = g.project(&sources, rel).unwrap();
                let after = bigger.project(&sources, rel).unwrap();
                prop_assert!(before.is_subset(&after));
            }
        }
    }
}
