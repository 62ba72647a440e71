//! End-to-end runs: one flat TOML config drives four stages that hand off
//! artifacts through an output directory.
//!
//! ```text
//! out/
//!   config.toml            resolved config, written by every stage
//!   kg/full/               synthetic graph (synth stage)
//!   kg/train, kg/valid     transductive splits (gen stage)
//!   kg/ind-train, kg/ind-test   inductive splits (gen stage)
//!   queries/{train,valid,test}.jsonl
//!   model.bin, vocab.tsv, train_report.json
//!   eval-{split}-{scorer}.json
//! ```
//!
//! Every stage is deterministic in the config seed: rerunning a stage
//! rewrites byte-identical artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    generate_records, read_jsonl, split_inductive, split_transductive, write_jsonl, DataError,
    QueryRecord,
};
use crate::kg::{GraphError, KnowledgeGraph};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointError, ConfigError, ModelConfig, ModelParams,
};
use crate::query::QueryType;
use crate::synth::{generate, SynthError, SynthSpec};
use crate::text::{TextError, Vocabulary};
use crate::train::{
    evaluate_records, train, EvalOptions, EvalReport, RankProtocol, Scorer, TrainConfig,
    TrainError, TrainReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {what} at {path}; run `{stage}` first")]
    Missing {
        what: &'static str,
        path: PathBuf,
        stage: &'static str,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Whether held-out knowledge is new edges or entirely new entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Transductive,
    Inductive,
}

/// One flat table of knobs for a whole run. Every field has a default, so a
/// config file only states what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,

    // Synthetic graph.
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    /// Latent entity clusters; 1 means untyped uniform edges.
    pub entity_types: usize,

    // Splits.
    /// Transductive: fraction of triples held out of the training graph.
    pub holdout_fraction: f64,
    /// Inductive: fraction of entities kept on the training side.
    pub train_fraction: f64,

    // Query records.
    pub train_query_types: Vec<String>,
    pub eval_query_types: Vec<String>,
    pub train_per_type: usize,
    pub eval_per_type: usize,

    // Model.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub maxout_pieces: usize,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub lambda: f64,

    // Evaluation.
    pub hits_at: Vec<usize>,
    pub protocol: RankProtocol,
    pub hard_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Transductive,
            seed: 0,
            entities: 200,
            relations: 8,
            triples: 1500,
            entity_types: 20,
            holdout_fraction: 0.2,
            train_fraction: 0.75,
            train_query_types: ["1p", "2p", "3p", "2i", "3i"]
                .map(str::to_string)
                .to_vec(),
            eval_query_types: ["1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up"]
                .map(str::to_string)
                .to_vec(),
            train_per_type: 500,
            eval_per_type: 200,
            dim: 64,
            blocks: 2,
            heads: 4,
            max_len: 128,
            maxout_pieces: 2,
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-4,
            tau: 0.05,
            lambda: 0.3,
            hits_at: vec![1, 3, 10],
            protocol: RankProtocol::Filtered,
            hard_only: true,
        }
    }
}

impl RunConfig {
    /// Read a config file (optional) and apply `key=value` overrides on
    /// top. Unknown keys are rejected, values parse as TOML.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, PipelineError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| PipelineError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{set}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_toml_value(raw.trim()));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        self.train_types()?;
        self.eval_types()?;
        if self.hits_at.is_empty() || self.hits_at.contains(&0) {
            return Err(PipelineError::Config(
                "hits_at needs at least one positive cutoff".into(),
            ));
        }
        Ok(())
    }

    pub fn train_types(&self) -> Result<Vec<QueryType>, PipelineError> {
        parse_types(&self.train_query_types)
    }

    pub fn eval_types(&self) -> Result<Vec<QueryType>, PipelineError> {
        parse_types(&self.eval_query_types)
    }

    fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            types: self.entity_types,
            seed: self.seed,
        }
    }

    fn model_config(&self, vocab_size: usize, classes: Option<usize>) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            blocks: self.blocks,
            heads: self.heads,
            max_len: self.max_len,
            maxout_pieces: self.maxout_pieces,
            vocab_size,
            classify_entities: classes,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            tau: self.tau,
            lambda: match self.mode {
                Mode::Transductive => self.lambda,
                // No fixed entity table to classify against.
                Mode::Inductive => 0.0,
            },
            seed: self.seed,
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ks: self.hits_at.clone(),
            protocol: self.protocol,
            hard_only: self.hard_only,
        }
    }
}

fn parse_types(tags: &[String]) -> Result<Vec<QueryType>, PipelineError> {
    if tags.is_empty() {
        return Err(PipelineError::Config("query type list is empty".into()));
    }
    tags.iter()
        .map(|t| {
            t.parse::<QueryType>()
                .map_err(|e| PipelineError::Config(e.to_string()))
        })
        .collect()
}

/// `raw` as a TOML value; unparseable input falls back to a plain string,
/// so `--set mode=inductive` works without quoting.
fn parse_toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// Artifact layout.
fn graph_dir(out: &Path, name: &str) -> PathBuf {
    out.join("kg").join(name)
}

fn records_path(out: &Path, split: &str) -> PathBuf {
    out.join("queries").join(format!("{split}.jsonl"))
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.bin")
}

fn load_graph(out: &Path, name: &str, stage: &'static str) -> Result<KnowledgeGraph, PipelineError> {
    let dir = graph_dir(out, name);
    if !dir.is_dir() {
        return Err(PipelineError::Missing {
            what: "graph",
            path: dir,
            stage,
        });
    }
    Ok(KnowledgeGraph::load(
        &dir.join("triples.tsv"),
        &dir.join("entities.txt"),
        &dir.join("relations.txt"),
    )?)
}

fn load_records(out: &Path, split: &str) -> Result<Vec<QueryRecord>, PipelineError> {
    let path = records_path(out, split);
    if !path.is_file() {
        return Err(PipelineError::Missing {
            what: "query records",
            path,
            stage: "gen",
        });
    }
    Ok(read_jsonl(&path)?)
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out).map_err(|source| PipelineError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let text = toml::to_string_pretty(cfg).expect("config serializes");
    let path = out.join("config.toml");
    std::fs::write(&path, text).map_err(|source| PipelineError::Io { path, source })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Synthesize the full graph.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    write_config(cfg, out)?;
    let graph = generate(&cfg.synth_spec())?;
    graph.save(&graph_dir(out, "full"))?;
    log::info!(
        "synthesized {} entities, {} relations, {} triples",
        graph.entity_count(),
        graph.relation_count(),
        graph.triple_count()
    );
    Ok(())
}

/// Split the graph and sample query records for every split.
pub fn run_gen(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    write_config(cfg, out)?;
    let full = load_graph(out, "full", "synth-kg")?;
    let train_types = cfg.train_types()?;
    let eval_types = cfg.eval_types()?;
    let queries = out.join("queries");
    std::fs::create_dir_all(&queries).map_err(|source| PipelineError::Io {
        path: queries.clone(),
        source,
    })?;

    match cfg.mode {
        Mode::Transductive => {
            let split = split_transductive(&full, cfg.holdout_fraction, cfg.seed)?;
            split.train.save(&graph_dir(out, "train"))?;
            split.valid.save(&graph_dir(out, "valid"))?;
            // Train queries live entirely on the training graph; eval
            // queries are answered both on what the model saw and on the
            // graph one rung up, so "hard" answers are the difference.
            let train_records = generate_records(
                "train",
                &split.train,
                &split.train,
                &split.train,
                &train_types,
                cfg.train_per_type,
                cfg.seed,
            )?;
            let valid_records = generate_records(
                "valid",
                &split.valid,
                &split.train,
                &split.valid,
                &eval_types,
                cfg.eval_per_type,
                cfg.seed,
            )?;
            let test_records = generate_records(
                "test",
                &split.test,
                &split.valid,
                &split.test,
                &eval_types,
                cfg.eval_per_type,
                cfg.seed,
            )?;
            write_jsonl(&records_path(out, "train"), &train_records)?;
            write_jsonl(&records_path(out, "valid"), &valid_records)?;
            write_jsonl(&records_path(out, "test"), &test_records)?;
            log::info!(
                "generated {} train, {} valid, {} test records",
                train_records.len(),
                valid_records.len(),
                test_records.len()
            );
        }
        Mode::Inductive => {
            let split = split_inductive(&full, cfg.train_fraction, cfg.seed)?;
            split.train.save(&graph_dir(out, "ind-train"))?;
            split.test.save(&graph_dir(out, "ind-test"))?;
            let train_records = generate_records(
                "train",
                &split.train,
                &split.train,
                &split.train,
                &train_types,
                cfg.train_per_type,
                cfg.seed,
            )?;
            let test_records = generate_records(
                "test",
                &split.test,
                &split.test,
                &split.test,
                &eval_types,
                cfg.eval_per_type,
                cfg.seed,
            )?;
            write_jsonl(&records_path(out, "train"), &train_records)?;
            write_jsonl(&records_path(out, "test"), &test_records)?;
            log::info!(
                "generated {} train, {} test records ({} / {} entities)",
                train_records.len(),
                test_records.len(),
                split.train.entity_count(),
                split.test.entity_count()
            );
        }
    }
    Ok(())
}

fn train_graph_name(cfg: &RunConfig) -> &'static str {
    match cfg.mode {
        Mode::Transductive => "train",
        Mode::Inductive => "ind-train",
    }
}

/// The graph a records split resolves against: transductive splits share
/// the full graph's tables; inductive test records live on the test graph.
fn eval_graph(cfg: &RunConfig, out: &Path, split: &str) -> Result<KnowledgeGraph, PipelineError> {
    match cfg.mode {
        Mode::Transductive => load_graph(out, "full", "synth-kg"),
        Mode::Inductive if split == "train" => load_graph(out, "ind-train", "gen"),
        Mode::Inductive => load_graph(out, "ind-test", "gen"),
    }
}

/// Text lines for a records split (`qid<TAB>line` per record), or for a
/// single named entity when `entity` is given.
pub fn run_linearize(
    cfg: &RunConfig,
    out: &Path,
    split: &str,
    limit: Option<usize>,
    entity: Option<&str>,
) -> Result<Vec<String>, PipelineError> {
    let graph = eval_graph(cfg, out, split)?;
    if let Some(name) = entity {
        let id = graph
            .entity_id(name)
            .ok_or_else(|| DataError::UnknownEntity { name: name.into() })?;
        return Ok(vec![crate::text::linearize_entity(&graph, id)?]);
    }
    let records = load_records(out, split)?;
    let take = limit.unwrap_or(records.len());
    records
        .iter()
        .take(take)
        .map(|r| {
            let q = r.to_query(&graph)?;
            let line = crate::text::linearize_query(&graph, &q)?;
            Ok(format!("{}\t{line}", r.qid))
        })
        .collect()
}

/// Train a model on the train split; writes checkpoint, vocabulary dump and
/// loss trajectory.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport, PipelineError> {
    write_config(cfg, out)?;
    let graph = load_graph(out, train_graph_name(cfg), "gen")?;
    let records = load_records(out, "train")?;
    let vocab = Vocabulary::build(&graph);
    let tc = cfg.train_config();
    let classes = (tc.lambda != 0.0).then(|| graph.entity_count());
    let mc = cfg.model_config(vocab.len(), classes);
    mc.validate()?;
    let mut params = ModelParams::<f32>::init(&mc, cfg.seed)?;

    let started = Instant::now();
    let report = train(&mut params, &vocab, &graph, &records, &tc)?;
    log::info!(
        "trained {} steps in {:.1?}",
        report.steps,
        started.elapsed()
    );

    save_checkpoint(&params, vocab.content_hash(), &checkpoint_path(out))?;
    vocab.write_tsv(&out.join("vocab.tsv"))?;
    write_json(&report, &out.join("train_report.json"))?;
    Ok(report)
}

/// Which scorer ranks entities during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    /// The trained checkpoint.
    Model,
    /// Exact symbolic answers (a correctness ceiling).
    Oracle,
    /// Uniform random scores (the floor).
    Random,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Model => "model",
            ScorerKind::Oracle => "oracle",
            ScorerKind::Random => "random",
        }
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" => Ok(ScorerKind::Model),
            "oracle" => Ok(ScorerKind::Oracle),
            "random" => Ok(ScorerKind::Random),
            other => Err(format!("unknown scorer `{other}`")),
        }
    }
}

/// Evaluate a records split against the entity universe of its graph.
///
/// In transductive mode the evaluation graph is the full graph (names and
/// entity ids match the training graph). In inductive mode the `test` split
/// runs on the disjoint test graph: the vocabulary extends with the new
/// name words and the model gains mean-initialized embedding rows for them.
pub fn run_eval(
    cfg: &RunConfig,
    out: &Path,
    split: &str,
    scorer: ScorerKind,
) -> Result<EvalReport, PipelineError> {
    let records = load_records(out, split)?;
    let train_graph = load_graph(out, train_graph_name(cfg), "gen")?;
    let train_vocab = Vocabulary::build(&train_graph);
    let eval_graph = eval_graph(cfg, out, split)?;

    let started = Instant::now();
    let opts = cfg.eval_options();
    let report = match scorer {
        ScorerKind::Oracle => {
            evaluate_records(&Scorer::<f32>::Oracle, &eval_graph, &records, &opts)?
        }
        ScorerKind::Random => evaluate_records(
            &Scorer::<f32>::Random { seed: cfg.seed },
            &eval_graph,
            &records,
            &opts,
        )?,
        ScorerKind::Model => {
            let (mut params, _) =
                load_checkpoint(&checkpoint_path(out), Some(train_vocab.content_hash()))?;
            let vocab = match cfg.mode {
                Mode::Transductive => train_vocab,
                Mode::Inductive => {
                    let (extended, added) = train_vocab.extend_with(&eval_graph);
                    if !added.is_empty() {
                        log::info!("vocabulary gained {} unseen words", added.len());
                    }
                    params.extend_vocab(extended.len());
                    extended
                }
            };
            // Transductive checkpoints carry a classification head sized to
            // the entity universe; ranking uses its scores there. Matching
            // mode (embedding dot products) covers everything else.
            let scorer = if cfg.mode == Mode::Transductive
                && params.config.classify_entities == Some(eval_graph.entity_count())
            {
                Scorer::Classify {
                    params: &params,
                    vocab: &vocab,
                }
            } else {
                Scorer::Model {
                    params: &params,
                    vocab: &vocab,
                }
            };
            evaluate_records(
                &scorer,
                &eval_graph,
                &records,
                &opts,
            )?
        }
    };
    log::info!(
        "evaluated {} records in {:.1?}",
        records.len(),
        started.elapsed()
    );
    write_json(
        &report,
        &out.join(format!("eval-{split}-{}.json", scorer.name())),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        RunConfig {
            entities: 40,
            relations: 4,
            triples: 220,
            entity_types: 4,
            train_query_types: vec!["1p".into(), "2i".into()],
            eval_query_types: vec!["1p".into(), "2i".into(), "2u".into()],
            train_per_type: 16,
            eval_per_type: 8,
            dim: 16,
            blocks: 1,
            heads: 2,
            max_len: 64,
            epochs: 2,
            batch_size: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = text.parse::<toml::Table>().unwrap().try_into().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_take_effect_and_are_typed() {
        let cfg = RunConfig::load(
            None,
            &[
                "epochs=3".into(),
                "mode=inductive".into(),
                "learning_rate=1e-3".into(),
                "train_query_types=[\"1p\"]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, Mode::Inductive);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.train_types().unwrap(), vec![QueryType::OneP]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["epocs=3".into()]).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)), "{err}");
    }

    #[test]
    fn bad_query_type_is_rejected() {
        let err = RunConfig::load(None, &["train_query_types=[\"9z\"]".into()]).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)), "{err}");
    }

    #[test]
    fn transductive_pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = tiny_config();
        run_synth(&cfg, out).unwrap();
        run_gen(&cfg, out).unwrap();
        let report = run_train(&cfg, out).unwrap();
        assert_eq!(report.epochs.len(), 2);
        assert!(checkpoint_path(out).is_file());
        assert!(out.join("vocab.tsv").is_file());

        let model = run_eval(&cfg, out, "test", ScorerKind::Model).unwrap();
        assert!(model.macro_hit(10).unwrap() >= 0.0);
        let oracle = run_eval(&cfg, out, "test", ScorerKind::Oracle).unwrap();
        for m in oracle.per_type.values() {
            for &h in m.hits.values() {
                assert_eq!(h, 1.0);
            }
        }
        let random = run_eval(&cfg, out, "test", ScorerKind::Random).unwrap();
        assert!(random.macro_hit(10).unwrap() <= 1.0);
        assert!(out.join("eval-test-model.json").is_file());
        assert!(out.join("eval-test-oracle.json").is_file());

        let lines = run_linearize(&cfg, out, "test", Some(2), None).unwrap();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("test/1p/"), "{}", lines[0]);
        assert!(lines[0].contains("[CLS] [qtype:1p]"), "{}", lines[0]);
        let name = {
            let g = load_graph(out, "full", "synth-kg").unwrap();
            g.entity_names()[0].clone()
        };
        let entity = run_linearize(&cfg, out, "test", None, Some(&name)).unwrap();
        assert_eq!(entity, vec![format!("[CLS] [target] {name}")]);
    }

    #[test]
    fn inductive_pipeline_extends_the_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = RunConfig {
            mode: Mode::Inductive,
            entities: 60,
            triples: 300,
            lambda: 0.3, // forced to zero internally for inductive runs
            ..tiny_config()
        };
        run_synth(&cfg, out).unwrap();
        run_gen(&cfg, out).unwrap();
        run_train(&cfg, out).unwrap();
        let report = run_eval(&cfg, out, "test", ScorerKind::Model).unwrap();
        for m in report.per_type.values() {
            for &h in m.hits.values() {
                assert!((0.0..=1.0).contains(&h));
            }
        }
    }

    #[test]
    fn stages_rewrite_identical_artifacts() {
        let cfg = tiny_config();
        let mk = || {
            let dir = tempfile::tempdir().unwrap();
            run_synth(&cfg, dir.path()).unwrap();
            run_gen(&cfg, dir.path()).unwrap();
            let triples = std::fs::read(graph_dir(dir.path(), "full").join("triples.tsv")).unwrap();
            let train = std::fs::read(records_path(dir.path(), "train")).unwrap();
            let test = std::fs::read(records_path(dir.path(), "test")).unwrap();
            (triples, train, test)
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn missing_artifacts_point_at_the_skipped_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let err = run_gen(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Missing { stage: "synth-kg", .. }), "{err}");
        let err = run_train(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Missing { stage: "gen", .. }), "{err}");
    }
}
