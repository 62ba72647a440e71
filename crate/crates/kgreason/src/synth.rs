//! Synthetic knowledge graph generation.
//!
//! Graphs are grown from a seed with a configurable amount of latent
//! structure. With `types == 1` triples are uniformly random. With more
//! types, entities are evenly assigned to latent type clusters, every
//! relation gets one range type the way real schemas type their relations,
//! and tails are drawn uniformly inside that range cluster. Held-out edges
//! then stay statistically predictable from the visible ones, which is what
//! makes learned ranking on such graphs meaningful.
//!
//! Names are built from pseudo-words (two or three consonant-vowel
//! syllables), so they never collide with the structural vocabulary used by
//! the text encoder, which has no such word shape. An entity is named
//! "<type word> <instance word>" with the instance word unique to it; a
//! relation is a single unique word. The type word is the only part of a
//! name that carries transferable signal.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::kg::{EntityId, GraphError, KnowledgeGraph, Triple};
use crate::rng::substream;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    /// Latent type cluster count; 1 means uniformly random triples.
    pub types: usize,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("graph admits at most {max} distinct triples, {requested} requested")]
    TooDense { requested: usize, max: usize },
    #[error("triple sampling stalled after {attempts} attempts at {generated}/{requested}")]
    Exhausted {
        attempts: usize,
        generated: usize,
        requested: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pseudo-words, each two or three consonant-vowel syllables.
fn pseudo_words<R: Rng>(rng: &mut R, count: usize, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3usize);
        let mut word = String::new();
        for _ in 0..syllables {
            word.push_str(ONSETS.choose(rng).expect("nonempty"));
            word.push_str(VOWELS.choose(rng).expect("nonempty"));
        }
        if used.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

/// Generate a graph per `spec`. Deterministic in the seed.
pub fn generate(spec: &SynthSpec) -> Result<KnowledgeGraph, SynthError> {
    if spec.entities < 2 {
        return Err(SynthError::InvalidSpec(format!(
            "need at least 2 entities, got {}",
            spec.entities
        )));
    }
    if spec.relations == 0 {
        return Err(SynthError::InvalidSpec("need at least 1 relation".into()));
    }
    if spec.types == 0 || spec.types > spec.entities {
        return Err(SynthError::InvalidSpec(format!(
            "types must be in 1..={}, got {}",
            spec.entities, spec.types
        )));
    }

    let mut used = HashSet::new();
    let mut word_rng = substream(spec.seed, "synth/words");
    let type_words = pseudo_words(&mut word_rng, spec.types, &mut used);
    let instance_words = pseudo_words(&mut word_rng, spec.entities, &mut used);
    let relation_names = pseudo_words(&mut word_rng, spec.relations, &mut used);

    // Entity i belongs to type i mod T, so clusters stay balanced.
    let entity_type = |e: usize| e % spec.types;
    let mut clusters: Vec<Vec<EntityId>> = vec![Vec::new(); spec.types];
    for e in 0..spec.entities {
        clusters[entity_type(e)].push(EntityId(e as u32));
    }
    let entity_names: Vec<String> = (0..spec.entities)
        .map(|e| format!("{} {}", type_words[entity_type(e)], instance_words[e]))
        .collect();

    // Every relation has one range type, independent of the source type,
    // the way real schemas type their relations. The range pool is smaller
    // than the relation count so distinct relations can share a range,
    // which keeps intersection queries satisfiable with distinct branch
    // relations. Individual edges stay unpredictable (tails are drawn
    // uniformly inside the range cluster); only the type level is exact.
    let mut map_rng = substream(spec.seed, "synth/typemap");
    let mut ranges: Vec<usize> = (0..spec.types).collect();
    ranges.shuffle(&mut map_rng);
    let pool = spec.types.min(spec.relations.div_ceil(2)).max(1);
    let type_map: Vec<Vec<usize>> = (0..spec.relations)
        .map(|r| vec![ranges[r % pool]; spec.types])
        .collect();

    let max: usize = (0..spec.entities)
        .map(|e| {
            (0..spec.relations)
                .map(|r| clusters[type_map[r][entity_type(e)]].len())
                .sum::<usize>()
        })
        .sum();
    if spec.triples > max {
        return Err(SynthError::TooDense {
            requested: spec.triples,
            max,
        });
    }

    let mut edge_rng = substream(spec.seed, "synth/edges");
    let mut triples: BTreeSet<Triple> = BTreeSet::new();
    let attempt_cap = 100 * spec.triples + 1000;
    let mut attempts = 0;
    while triples.len() < spec.triples {
        if attempts >= attempt_cap {
            return Err(SynthError::Exhausted {
                attempts,
                generated: triples.len(),
                requested: spec.triples,
            });
        }
        attempts += 1;
        // Half the heads come from range clusters so edges chain into
        // multi-hop paths; otherwise only range entities have in-edges and
        // backward walks starve.
        let head = if spec.types > 1 && edge_rng.gen_bool(0.5) {
            let cluster = &clusters[ranges[edge_rng.gen_range(0..pool)]];
            cluster.choose(&mut edge_rng).expect("clusters are nonempty").0 as usize
        } else {
            edge_rng.gen_range(0..spec.entities)
        };
        let rel = edge_rng.gen_range(0..spec.relations);
        let cluster = &clusters[type_map[rel][entity_type(head)]];
        let tail = *cluster.choose(&mut edge_rng).expect("clusters are nonempty");
        triples.insert(Triple {
            head: EntityId(head as u32),
            relation: crate::kg::RelationId(rel as u32),
            tail,
        });
    }

    Ok(KnowledgeGraph::from_parts(
        entity_names,
        relation_names,
        triples.into_iter().collect(),
    )?)
}

/// The leading type word of a generated entity name.
pub fn type_word(name: &str) -> &str {
    name.split_whitespace().next().unwrap_or(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn spec(entities: usize, relations: usize, triples: usize, types: usize) -> SynthSpec {
        SynthSpec {
            entities,
            relations,
            triples,
            types,
            seed: 42,
        }
    }

    #[test]
    fn generates_requested_counts() {
        let g = generate(&spec(50, 4, 300, 5)).unwrap();
        assert_eq!(g.entity_count(), 50);
        assert_eq!(g.relation_count(), 4);
        assert_eq!(g.triple_count(), 300);
    }

    #[test]
    fn deterministic_in_seed() {
        let g1 = generate(&spec(30, 3, 100, 3)).unwrap();
        let g2 = generate(&spec(30, 3, 100, 3)).unwrap();
        assert_eq!(g1.triples(), g2.triples());
        assert_eq!(g1.entity_names(), g2.entity_names());

        let mut other = spec(30, 3, 100, 3);
        other.seed = 43;
        let g3 = generate(&other).unwrap();
        assert_ne!(g1.triples(), g3.triples());
    }

    #[test]
    fn typed_tails_share_a_type_word() {
        let g = generate(&spec(60, 4, 400, 6)).unwrap();
        // All tails of one (head, relation) pair must carry one type word.
        let mut seen: HashMap<(u32, u32), &str> = HashMap::new();
        for t in g.triples() {
            let tail_type = type_word(g.entity_name(t.tail).unwrap());
            let key = (t.head.0, t.relation.0);
            match seen.get(&key) {
                None => {
                    seen.insert(key, tail_type);
                }
                Some(prev) => assert_eq!(*prev, tail_type),
            }
        }
    }

    #[test]
    fn relation_type_map_is_a_function_of_source_type() {
        let g = generate(&spec(60, 4, 400, 6)).unwrap();
        // Same source type word and relation imply one tail type word, even
        // across different head entities.
        let mut seen: HashMap<(String, u32), String> = HashMap::new();
        for t in g.triples() {
            let head_type = type_word(g.entity_name(t.head).unwrap()).to_string();
            let tail_type = type_word(g.entity_name(t.tail).unwrap()).to_string();
            match seen.entry((head_type, t.relation.0)) {
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(tail_type);
                }
                std::collections::hash_map::Entry::Occupied(o) => {
                    assert_eq!(o.get(), &tail_type);
                }
            }
        }
    }

    #[test]
    fn name_shapes() {
        let g = generate(&spec(20, 3, 50, 4)).unwrap();
        let mut all_words = HashSet::new();
        for name in g.entity_names() {
            let words: Vec<&str> = name.split(' ').collect();
            assert_eq!(words.len(), 2, "entity name {name:?}");
            all_words.insert(words[1].to_string());
        }
        // Instance words are unique per entity.
        assert_eq!(all_words.len(), 20);
        for name in g.relation_names() {
            assert!(!name.contains(' '), "relation name {name:?}");
        }
    }

    #[test]
    fn uniform_mode_uses_all_types_freely() {
        // types=1: every entity shares the single type word and any tail is
        // reachable, so requesting a dense graph succeeds.
        let g = generate(&spec(10, 2, 150, 1)).unwrap();
        assert_eq!(g.triple_count(), 150);
    }

    #[test]
    fn too_dense_is_rejected() {
        // types == entities gives singleton clusters: each (head, relation)
        // admits exactly one tail, so at most E*R distinct triples exist.
        let err = generate(&spec(4, 1, 100, 4)).unwrap_err();
        match err {
            SynthError::TooDense { requested, max } => {
                assert_eq!(requested, 100);
                assert_eq!(max, 4);
            }
            other => panic!("expected TooDense, got {other}"),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            generate(&spec(1, 1, 1, 1)),
            Err(SynthError::InvalidSpec(_))
        ));
        assert!(matches!(
            generate(&spec(5, 0, 1, 1)),
            Err(SynthError::InvalidSpec(_))
        ));
        assert!(matches!(
            generate(&spec(5, 1, 1, 9)),
            Err(SynthError::InvalidSpec(_))
        ));
    }
}
