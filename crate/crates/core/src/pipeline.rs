//! Stage orchestration with content-hash caching.
//!
//! Configuration is a flat text file of `section.key = value` lines (`#`
//! starts a comment line). A preset supplies every default; the file
//! overrides them. Relative paths resolve against the config file's
//! directory.
//!
//! Each stage reads and writes named artifacts in the work directory. After
//! a stage runs, `manifest.json` records the hash of the stage's config
//! section, the hashes of its inputs and the hashes of its outputs. A stage
//! whose record still matches is skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{AnnIndex, AnnParams};
use crate::corpus::{annotate_corpus, ingest, read_sentences, write_sentences, Document, IngestOptions, Lexicon, Sentence};
use crate::evalharness::{
    build_subdomain_benchmarks, evaluate_subdomain, pr_auc, roc_auc, write_benchmarks, write_report_table, write_report_tsv,
    LabeledEntry, LabeledRanking, MetricRow, Observation,
};
use crate::graph::{self, read_nodes, read_tsv, write_nodes, write_tsv, NodeKey, NodeKind, SemanticGraph};
use crate::hetembed::{self, EmbedConfig, EmbeddingStore};
use crate::phrase_mining::{mine, read_phrases, write_phrases, MiningConfig};
use crate::ranker::{
    rank_pairs, sort_ranking, train_ranker, training_pairs, write_ranking, ModelConfig, RankedPair, RankerConfig,
    RankingModel, SampleContext,
};
use crate::sent_embed::{self, SentenceVector};
use crate::util::{sha256_file, sha256_hex, write_atomic};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown preset {0:?}; expected paper or desk")]
    UnknownPreset(String),
    #[error("unknown stage {0:?}; expected one of ingest, mine, sembed, knn, graph, embed, ranker, eval, all")]
    UnknownStage(String),
    #[error("input file {0} does not exist")]
    MissingInput(PathBuf),
    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: Stage },
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}

/// Raw `key = value` settings after preset defaults and file overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigValues(BTreeMap<String, String>);

const PATH_KEYS: &[&str] = &["paths.input", "paths.work_dir", "paths.lexicon"];

fn preset_defaults(preset: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let common: &[(&str, &str)] = &[
        ("paths.input", "corpus.jsonl"),
        ("paths.work_dir", "work"),
        ("paths.lexicon", ""),
        ("corpus.cutoff", "2015-01-01"),
        ("corpus.language", "en"),
        ("ann.k", "25"),
        ("ann.nprobe", "16"),
        ("ann.iters", "25"),
        ("embed.lr", "0.1"),
        ("embed.batch_size", "1000"),
        ("embed.negatives_batch", "50"),
        ("embed.negatives_partition", "50"),
        ("ranker.s", "15"),
        ("ranker.scrambles", "10"),
        ("ranker.swaps", "30"),
        ("ranker.margin", "0.1"),
        ("ranker.layers", "4"),
        ("ranker.dropout", "0.1"),
        ("ranker.scored_negatives", "3"),
        ("ranker.patience", "0"),
        ("eval.top_types", "20"),
        ("eval.top_preds", "100"),
        ("eval.k", "1,10,100"),
        ("seed", "0"),
    ];
    let specific: &[(&str, &str)] = match preset {
        "paper" => &[
            ("mine.global_min", "100"),
            ("mine.partition_min", "5"),
            ("mine.partitions", "16"),
            ("sembed.dim", "768"),
            ("ann.m", "96"),
            ("ann.nlist", "2048"),
            ("ann.train_fraction", "0.1"),
            ("embed.dim", "512"),
            ("embed.epochs", "10"),
            ("embed.partitions", "100"),
            ("ranker.lr", "0.01"),
            ("ranker.warmup", "1000"),
            ("ranker.batch", "600"),
            ("ranker.epochs", "10"),
            ("ranker.heads", "8"),
            ("ranker.model_dim", "512"),
            ("ranker.ff_dim", "1024"),
            ("ranker.holdout", "0.01"),
            ("eval.samples_per_pair", "1"),
        ],
        "desk" => &[
            ("mine.global_min", "10"),
            ("mine.partition_min", "2"),
            ("mine.partitions", "4"),
            ("sembed.dim", "64"),
            ("ann.m", "8"),
            ("ann.nlist", "64"),
            ("ann.train_fraction", "1.0"),
            ("embed.dim", "32"),
            ("embed.epochs", "20"),
            ("embed.partitions", "1"),
            ("ranker.lr", "0.001"),
            ("ranker.warmup", "20"),
            ("ranker.batch", "32"),
            ("ranker.epochs", "20"),
            ("ranker.heads", "4"),
            ("ranker.model_dim", "32"),
            ("ranker.ff_dim", "64"),
            ("ranker.holdout", "0.05"),
            ("eval.samples_per_pair", "5"),
        ],
        other => return Err(PipelineError::UnknownPreset(other.to_string())),
    };
    Ok(common
        .iter()
        .chain(specific)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

impl ConfigValues {
    /// Preset defaults overlaid with the `key = value` lines of `text`. A
    /// `preset` key in the text is honoured when `preset` is `None`.
    pub fn parse(text: &str, preset: Option<&str>) -> Result<Self, PipelineError> {
        let mut file = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Syntax {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(PipelineError::Syntax {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if file.insert(k.clone(), v).is_some() {
                return Err(PipelineError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key {k}"),
                });
            }
        }
        let file_preset = file.remove("preset");
        let preset = preset.map(str::to_string).or(file_preset).unwrap_or_else(|| "desk".to_string());
        let mut values = preset_defaults(&preset)?;
        for (k, v) in file {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(PipelineError::UnknownKey(k)),
            }
        }
        Ok(Self(values))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), PipelineError> {
        match self.0.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(PipelineError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, PipelineError>
    where
        T::Err: fmt::Display,
    {
        self.get(key).parse().map_err(|e: T::Err| PipelineError::Value {
            key: key.to_string(),
            message: format!("{:?}: {e}", self.get(key)),
        })
    }

    /// Hash of every non-path key under the given sections, plus the seed.
    fn section_hash(&self, sections: &[&str]) -> String {
        let mut text = String::new();
        for (k, v) in &self.0 {
            let section = k.split_once('.').map_or(k.as_str(), |(s, _)| s);
            if (k == "seed" || sections.contains(&section)) && !PATH_KEYS.contains(&k.as_str()) {
                text.push_str(&format!("{k}={v}\n"));
            }
        }
        sha256_hex(text.as_bytes())
    }

    /// The settings as a config file.
    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub top_types: usize,
    pub top_preds: usize,
    pub ks: Vec<usize>,
    pub samples_per_pair: usize,
}

/// Validated pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub values: ConfigValues,
    pub input: PathBuf,
    pub work_dir: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub cutoff: NaiveDate,
    pub language: String,
    pub mining: MiningConfig,
    pub mine_partitions: usize,
    pub sembed_dim: usize,
    pub ann: AnnParams,
    pub ann_train_fraction: f64,
    pub embed: EmbedConfig,
    pub ranker: RankerConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

fn invalid(key: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(v: &ConfigValues, key: &str) -> Result<usize, PipelineError> {
    let n: usize = v.parsed(key)?;
    if n == 0 {
        return Err(invalid(key, "must be positive"));
    }
    Ok(n)
}

fn positive_f64(v: &ConfigValues, key: &str) -> Result<f64, PipelineError> {
    let x: f64 = v.parsed(key)?;
    if !(x.is_finite() && x > 0.0) {
        return Err(invalid(key, format!("{x} must be a positive finite number")));
    }
    Ok(x)
}

impl PipelineConfig {
    pub fn load(path: &Path, preset: Option<&str>, seed: Option<u64>) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut values = ConfigValues::parse(&text, preset)?;
        if let Some(seed) = seed {
            values.set("seed", seed.to_string())?;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_values(values, base)
    }

    pub fn from_values(v: ConfigValues, base: &Path) -> Result<Self, PipelineError> {
        let path = |key: &str| -> Option<PathBuf> {
            let raw = v.get(key);
            (!raw.is_empty()).then(|| base.join(raw))
        };
        let input = path("paths.input").ok_or_else(|| invalid("paths.input", "required"))?;
        let work_dir = path("paths.work_dir").ok_or_else(|| invalid("paths.work_dir", "required"))?;
        let seed: u64 = v.parsed("seed")?;

        let mining = MiningConfig {
            global_min: v.parsed("mine.global_min")?,
            partition_min: v.parsed("mine.partition_min")?,
        };
        if mining.partition_min > mining.global_min {
            return Err(invalid("mine.partition_min", "exceeds mine.global_min"));
        }
        let sembed_dim = v.parsed("sembed.dim")?;
        if sembed_dim < sent_embed::MIN_DIM {
            return Err(invalid("sembed.dim", format!("must be at least {}", sent_embed::MIN_DIM)));
        }

        let m = match v.get("ann.m") {
            "flat" => None,
            _ => Some(positive(&v, "ann.m")?),
        };
        let ann = AnnParams {
            m,
            nlist: positive(&v, "ann.nlist")?,
            nprobe: positive(&v, "ann.nprobe")?,
            k: positive(&v, "ann.k")?,
            iters: positive(&v, "ann.iters")?,
        };
        if let Some(m) = m {
            if sembed_dim % m != 0 {
                return Err(invalid("ann.m", format!("{m} does not divide sembed.dim {sembed_dim}")));
            }
        }
        if ann.nprobe > ann.nlist {
            return Err(invalid("ann.nprobe", "exceeds ann.nlist"));
        }
        let ann_train_fraction = positive_f64(&v, "ann.train_fraction")?;
        if ann_train_fraction > 1.0 {
            return Err(invalid("ann.train_fraction", "exceeds 1"));
        }

        let embed = EmbedConfig {
            dim: positive(&v, "embed.dim")?,
            epochs: v.parsed("embed.epochs")?,
            lr: positive_f64(&v, "embed.lr")?,
            batch_size: positive(&v, "embed.batch_size")?,
            partitions: positive(&v, "embed.partitions")?,
            k_batch: v.parsed("embed.negatives_batch")?,
            k_part: v.parsed("embed.negatives_partition")?,
            seed,
            log_buckets: false,
        };
        if embed.k_batch + embed.k_part == 0 {
            return Err(invalid("embed.negatives_batch", "at least one negative is required"));
        }

        let dropout: f64 = v.parsed("ranker.dropout")?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(invalid("ranker.dropout", "must lie in [0, 1)"));
        }
        let model = ModelConfig {
            input_dim: embed.dim,
            model_dim: positive(&v, "ranker.model_dim")?,
            ff_dim: positive(&v, "ranker.ff_dim")?,
            heads: positive(&v, "ranker.heads")?,
            layers: positive(&v, "ranker.layers")?,
            dropout,
        };
        model.validate().map_err(|e| invalid("ranker.heads", e.to_string()))?;
        let ranker = RankerConfig {
            model,
            s: positive(&v, "ranker.s")?,
            scrambles: v.parsed("ranker.scrambles")?,
            swaps: v.parsed("ranker.swaps")?,
            margin: v.parsed("ranker.margin")?,
            lr: positive_f64(&v, "ranker.lr")?,
            warmup_steps: v.parsed("ranker.warmup")?,
            batch_positives: positive(&v, "ranker.batch")?,
            epochs: v.parsed("ranker.epochs")?,
            scored_negatives: positive(&v, "ranker.scored_negatives")?,
            holdout: v.parsed("ranker.holdout")?,
            patience: v.parsed("ranker.patience")?,
            seed,
        };
        if ranker.scrambles + ranker.swaps < ranker.scored_negatives {
            return Err(invalid("ranker.scored_negatives", "exceeds ranker.scrambles + ranker.swaps"));
        }
        if !(0.0..1.0).contains(&ranker.holdout) {
            return Err(invalid("ranker.holdout", "must lie in [0, 1)"));
        }

        let ks = v
            .get("eval.k")
            .split(',')
            .map(|s| s.trim().parse::<usize>().ok().filter(|&k| k > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid("eval.k", "expected a comma-separated list of positive integers"))?;
        let eval = EvalConfig {
            top_types: positive(&v, "eval.top_types")?,
            top_preds: positive(&v, "eval.top_preds")?,
            ks,
            samples_per_pair: positive(&v, "eval.samples_per_pair")?,
        };

        Ok(Self {
            input,
            work_dir,
            lexicon: path("paths.lexicon"),
            cutoff: v.parsed("corpus.cutoff")?,
            language: v.get("corpus.language").to_string(),
            mining,
            mine_partitions: positive(&v, "mine.partitions")?,
            sembed_dim,
            ann,
            ann_train_fraction,
            embed,
            ranker,
            eval,
            seed,
            values: v,
        })
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Mine,
    Sembed,
    Knn,
    Graph,
    Embed,
    Ranker,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const CORPUS: &str = "corpus.jsonl";
pub const HELD_OUT: &str = "heldout.jsonl";
pub const SENTENCES: &str = "sentences.jsonl";
pub const PHRASES: &str = "phrases.tsv";
pub const VECTORS: &str = "vectors.bin";
pub const VECTOR_KEYS: &str = "vectors.keys";
pub const ANN_INDEX: &str = "ann.index";
pub const KNN: &str = "knn.tsv";
pub const GRAPH: &str = "graph.tsv";
pub const NODES: &str = "nodes.tsv";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBED_LOSS: &str = "embed_loss.tsv";
pub const MODEL: &str = "model.bin";
pub const RANKER_LOSS: &str = "ranker_loss.tsv";
pub const BENCHMARKS: &str = "benchmarks.jsonl";
pub const RANKING: &str = "ranking.tsv";
pub const METRICS: &str = "metrics.tsv";
pub const METRICS_TABLE: &str = "metrics.txt";

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Mine,
        Stage::Sembed,
        Stage::Knn,
        Stage::Graph,
        Stage::Embed,
        Stage::Ranker,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Mine => "mine",
            Stage::Sembed => "sembed",
            Stage::Knn => "knn",
            Stage::Graph => "graph",
            Stage::Embed => "embed",
            Stage::Ranker => "ranker",
            Stage::Eval => "eval",
        }
    }

    /// Config sections whose values feed the stage.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["corpus"],
            Stage::Mine => &["mine"],
            Stage::Sembed => &["sembed"],
            Stage::Knn => &["ann"],
            Stage::Graph => &[],
            // The embedding dimension is also the ranker's input size.
            Stage::Embed => &["embed"],
            Stage::Ranker => &["ranker", "embed"],
            Stage::Eval => &["eval", "ranker"],
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::Mine | Stage::Sembed => &[SENTENCES],
            Stage::Knn => &[VECTORS, VECTOR_KEYS],
            Stage::Graph => &[CORPUS, SENTENCES, PHRASES, KNN],
            Stage::Embed => &[GRAPH, NODES],
            Stage::Ranker => &[GRAPH, NODES, EMBEDDINGS],
            Stage::Eval => &[CORPUS, HELD_OUT, GRAPH, NODES, EMBEDDINGS, MODEL],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[CORPUS, HELD_OUT, SENTENCES],
            Stage::Mine => &[PHRASES],
            Stage::Sembed => &[VECTORS, VECTOR_KEYS],
            Stage::Knn => &[ANN_INDEX, KNN],
            Stage::Graph => &[GRAPH, NODES],
            Stage::Embed => &[EMBEDDINGS, EMBED_LOSS],
            Stage::Ranker => &[MODEL, RANKER_LOSS],
            Stage::Eval => &[BENCHMARKS, RANKING, METRICS, METRICS_TABLE],
        }
    }

    fn producer(artifact: &str) -> Stage {
        Stage::ALL
            .into_iter()
            .find(|s| s.outputs().contains(&artifact))
            .expect("every input is some stage's output")
    }
}

/// `all` or a single stage name.
pub fn parse_target(name: &str) -> Result<Vec<Stage>, PipelineError> {
    if name == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    Stage::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .map(|s| vec![s])
        .ok_or_else(|| PipelineError::UnknownStage(name.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    /// Missing, unreadable or malformed manifests load as empty.
    pub fn load(work_dir: &Path) -> Manifest {
        let path = work_dir.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Manifest::default(),
            Err(e) => {
                warn!("{}: {e}; recomputing all stages", path.display());
                return Manifest::default();
            }
        };
        match serde_json::from_str::<Manifest>(&text) {
            Ok(m) if m.version == MANIFEST_VERSION => m,
            Ok(m) => {
                warn!("{}: version {} unsupported; recomputing all stages", path.display(), m.version);
                Manifest::default()
            }
            Err(e) => {
                warn!("{}: corrupt manifest ({e}); recomputing all stages", path.display());
                Manifest::default()
            }
        }
    }

    fn save(&self, work_dir: &Path) -> Result<(), PipelineError> {
        let path = work_dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, |w| writeln!(w, "{text}")).map_err(io_err(&path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageStatus)>,
}

impl RunSummary {
    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| *st)
    }
}

fn hash(path: &Path) -> Result<String, PipelineError> {
    sha256_file(path).map_err(io_err(path))
}

fn current_record(stage: Stage, cfg: &PipelineConfig) -> Result<StageRecord, PipelineError> {
    let mut inputs = BTreeMap::new();
    if stage == Stage::Ingest {
        if !cfg.input.is_file() {
            return Err(PipelineError::MissingInput(cfg.input.clone()));
        }
        inputs.insert("corpus".to_string(), hash(&cfg.input)?);
        if let Some(lex) = &cfg.lexicon {
            if !lex.is_file() {
                return Err(PipelineError::MissingInput(lex.clone()));
            }
            inputs.insert("lexicon".to_string(), hash(lex)?);
        }
    }
    for name in stage.inputs() {
        let path = cfg.artifact(name);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                path,
                stage: Stage::producer(name),
            });
        }
        inputs.insert(name.to_string(), hash(&path)?);
    }
    Ok(StageRecord {
        config_hash: cfg.values.section_hash(stage.sections()),
        inputs,
        outputs: BTreeMap::new(),
    })
}

fn outputs_intact(stage: Stage, cfg: &PipelineConfig, rec: &StageRecord) -> bool {
    stage.outputs().iter().all(|name| {
        let path = cfg.artifact(name);
        path.is_file() && rec.outputs.get(*name).is_some_and(|h| sha256_file(&path).is_ok_and(|x| &x == h))
    })
}

/// Runs `stages` in order, skipping any whose manifest record matches.
pub fn run(stages: &[Stage], cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(&cfg.work_dir).map_err(io_err(&cfg.work_dir))?;
    let mut manifest = Manifest::load(&cfg.work_dir);
    let mut summary = RunSummary::default();
    for &stage in stages {
        let mut rec = current_record(stage, cfg)?;
        let cached = manifest.stages.get(stage.name()).is_some_and(|old| {
            old.config_hash == rec.config_hash && old.inputs == rec.inputs && outputs_intact(stage, cfg, old)
        });
        if cached {
            info!("stage {stage}: up to date");
            summary.stages.push((stage, StageStatus::Skipped));
            continue;
        }
        info!("stage {stage}: running");
        execute(stage, cfg)?;
        for name in stage.outputs() {
            rec.outputs.insert(name.to_string(), hash(&cfg.artifact(name))?);
        }
        manifest.stages.insert(stage.name().to_string(), rec);
        manifest.save(&cfg.work_dir)?;
        summary.stages.push((stage, StageStatus::Ran));
    }
    Ok(summary)
}

fn put(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, |w| w.write_all(bytes)).map_err(io_err(path))
}

fn reader(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in reader(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)),
        })?);
    }
    Ok(out)
}

fn documents_bytes(docs: &[Document]) -> Vec<u8> {
    let mut buf = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut buf, d).expect("document serializes");
        buf.push(b'\n');
    }
    buf
}

pub fn load_graph(work_dir: &Path) -> Result<SemanticGraph, PipelineError> {
    let edges = work_dir.join(GRAPH);
    let nodes = work_dir.join(NODES);
    let mut g = read_tsv(reader(&edges)?).at(Stage::Graph)?;
    read_nodes(reader(&nodes)?, &mut g).at(Stage::Graph)?;
    Ok(g)
}

pub fn load_store(work_dir: &Path) -> Result<EmbeddingStore, PipelineError> {
    let path = work_dir.join(EMBEDDINGS);
    EmbeddingStore::read(&mut reader(&path)?).at(Stage::Embed)
}

pub fn load_model(work_dir: &Path) -> Result<RankingModel, PipelineError> {
    let path = work_dir.join(MODEL);
    RankingModel::read(&mut reader(&path)?).at(Stage::Ranker)
}

fn load_sentences(cfg: &PipelineConfig) -> Result<Vec<Sentence>, PipelineError> {
    read_sentences(reader(&cfg.artifact(SENTENCES))?).at(Stage::Ingest)
}

fn execute(stage: Stage, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    match stage {
        Stage::Ingest => run_ingest(cfg),
        Stage::Mine => run_mine(cfg),
        Stage::Sembed => run_sembed(cfg),
        Stage::Knn => run_knn(cfg),
        Stage::Graph => run_graph(cfg),
        Stage::Embed => run_embed(cfg),
        Stage::Ranker => run_ranker(cfg),
        Stage::Eval => run_eval(cfg),
    }
}

fn run_ingest(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let mut opts = IngestOptions::new(cfg.cutoff);
    opts.language = cfg.language.clone();
    let out = ingest(reader(&cfg.input)?, &opts).at(Stage::Ingest)?;
    let lexicon = match &cfg.lexicon {
        Some(p) => Lexicon::load(p).at(Stage::Ingest)?,
        None => Lexicon::default(),
    };
    info!(
        "ingest: {} training documents, {} held out, {} rejected",
        out.corpus.len(),
        out.held_out.len(),
        out.errors.len()
    );
    let sentences = annotate_corpus(&out.corpus, &lexicon);
    put(&cfg.artifact(CORPUS), &documents_bytes(&out.corpus))?;
    put(&cfg.artifact(HELD_OUT), &documents_bytes(&out.held_out))?;
    let path = cfg.artifact(SENTENCES);
    write_atomic(&path, |w| write_sentences(w, &sentences)).map_err(io_err(&path))
}

/// Contiguous runs of whole documents, one run per partition.
fn partition_sentences(sentences: &[Sentence], partitions: usize) -> Vec<Vec<Sentence>> {
    let mut doc_ids: Vec<&str> = Vec::new();
    for s in sentences {
        if doc_ids.last() != Some(&s.doc_id.as_str()) {
            doc_ids.push(&s.doc_id);
        }
    }
    let n_docs = doc_ids.len().max(1);
    let index: HashMap<&str, usize> = doc_ids.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut out = vec![Vec::new(); partitions];
    for s in sentences {
        out[index[s.doc_id.as_str()] * partitions / n_docs].push(s.clone());
    }
    out
}

fn run_mine(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let sentences = load_sentences(cfg)?;
    let parts = partition_sentences(&sentences, cfg.mine_partitions);
    let phrases = mine(&parts, cfg.mining).at(Stage::Mine)?;
    info!("mine: {} phrases", phrases.len());
    let path = cfg.artifact(PHRASES);
    write_atomic(&path, |w| write_phrases(w, &phrases)).map_err(io_err(&path))
}

fn run_sembed(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let sentences = load_sentences(cfg)?;
    let vectors = sentences
        .iter()
        .map(|s| sent_embed::embed(s, cfg.sembed_dim, cfg.seed))
        .collect::<Result<Vec<_>, _>>()
        .at(Stage::Sembed)?;
    let (mut data, mut keys) = (Vec::new(), Vec::new());
    sent_embed::write_vectors(&mut data, &mut keys, &vectors).at(Stage::Sembed)?;
    put(&cfg.artifact(VECTORS), &data)?;
    put(&cfg.artifact(VECTOR_KEYS), &keys)
}

fn run_knn(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let vectors: Vec<SentenceVector> =
        sent_embed::read_vectors(reader(&cfg.artifact(VECTORS))?, reader(&cfg.artifact(VECTOR_KEYS))?).at(Stage::Knn)?;
    let items: Vec<(NodeKey, Vec<f32>)> = vectors
        .iter()
        .filter(|v| !v.empty)
        .map(|v| (v.key.clone(), v.values.clone()))
        .collect();
    let training: Vec<Vec<f32>> = items.iter().map(|(_, v)| v.clone()).collect();
    let mut index = AnnIndex::train(&training, &cfg.ann, cfg.ann_train_fraction, cfg.seed).at(Stage::Knn)?;
    index.add(&items).at(Stage::Knn)?;
    let edges = graph::knn_edges(&index, &vectors, cfg.ann.k, cfg.ann.nprobe);
    info!("knn: {} indexed sentences, {} edges", index.len(), edges.len());
    let mut buf = Vec::new();
    index.write(&mut buf).at(Stage::Knn)?;
    put(&cfg.artifact(ANN_INDEX), &buf)?;
    let text: String = edges.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect();
    put(&cfg.artifact(KNN), text.as_bytes())
}

fn read_knn(path: &Path) -> Result<Vec<(NodeKey, NodeKey)>, PipelineError> {
    let bad = |line: usize, m: String| PipelineError::Io {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {m}")),
    };
    let mut out = Vec::new();
    for (i, line) in reader(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| bad(i + 1, "expected two fields".into()))?;
        out.push((
            a.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
            b.parse().map_err(|e| bad(i + 1, format!("{e}")))?,
        ));
    }
    Ok(out)
}

fn run_graph(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let docs = read_documents(&cfg.artifact(CORPUS))?;
    let sentences = load_sentences(cfg)?;
    let phrases = read_phrases(reader(&cfg.artifact(PHRASES))?).at(Stage::Graph)?;
    let knn = read_knn(&cfg.artifact(KNN))?;
    let g = graph::build(&docs, &sentences, &phrases, &knn).at(Stage::Graph)?;
    info!("graph: {} nodes, {} edges", g.node_count(), g.edge_count());
    let (mut edges, mut nodes) = (Vec::new(), Vec::new());
    write_tsv(&mut edges, &g).at(Stage::Graph)?;
    write_nodes(&mut nodes, &g).at(Stage::Graph)?;
    put(&cfg.artifact(GRAPH), &edges)?;
    put(&cfg.artifact(NODES), &nodes)
}

fn loss_table(losses: &[f64]) -> Vec<u8> {
    let mut s = String::from("epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i}\t{l:.9}\n"));
    }
    s.into_bytes()
}

fn run_embed(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let g = load_graph(&cfg.work_dir)?;
    let (store, report) = hetembed::train(&g, &cfg.embed).at(Stage::Embed)?;
    let mut buf = Vec::new();
    store.write(&mut buf).at(Stage::Embed)?;
    put(&cfg.artifact(EMBEDDINGS), &buf)?;
    put(&cfg.artifact(EMBED_LOSS), &loss_table(&report.epoch_loss))
}

fn run_ranker(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let g = load_graph(&cfg.work_dir)?;
    let store = load_store(&cfg.work_dir)?;
    let ctx = SampleContext::new(&g);
    let positives = training_pairs(&g);
    info!("ranker: {} training predicates", positives.len());
    let (model, report) = train_ranker(&ctx, &store, &positives, &cfg.ranker).at(Stage::Ranker)?;
    let mut buf = Vec::new();
    model.write(&mut buf).map_err(io_err(&cfg.artifact(MODEL)))?;
    put(&cfg.artifact(MODEL), &buf)?;
    let mut table = String::from("epoch\ttrain_loss\tvalidation_loss\n");
    for (i, (t, v)) in report.train_loss.iter().zip(&report.validation_loss).enumerate() {
        table.push_str(&format!("{i}\t{t:.9}\t{v:.9}\n"));
    }
    put(&cfg.artifact(RANKER_LOSS), table.as_bytes())
}

/// Scores for each pair; pairs the model cannot score (terms absent from the
/// training graph) are left out and logged.
pub fn score_pairs(
    model: &RankingModel,
    store: &EmbeddingStore,
    ctx: &SampleContext,
    pairs: &[(String, String)],
    samples_per_pair: usize,
    s: usize,
    seed: u64,
) -> Result<HashMap<(String, String), f64>, NodeKeyError> {
    let keys = pairs
        .iter()
        .map(|(a, b)| {
            Ok((
                NodeKey::try_new(NodeKind::CodedTerm, a.clone())?,
                NodeKey::try_new(NodeKind::CodedTerm, b.clone())?,
            ))
        })
        .collect::<Result<Vec<_>, NodeKeyError>>()?;
    let scores = rank_pairs(model, store, ctx, &keys, samples_per_pair, s, seed);
    let mut out = HashMap::new();
    let mut unscored = 0;
    for (pair, score) in pairs.iter().zip(scores) {
        match score {
            Ok(x) => {
                out.insert(pair.clone(), x);
            }
            Err(e) => {
                unscored += 1;
                log::debug!("cannot score {}-{}: {e}", pair.0, pair.1);
            }
        }
    }
    if unscored > 0 {
        warn!("{unscored} of {} pairs could not be scored", pairs.len());
    }
    Ok(out)
}

pub type NodeKeyError = graph::KeyError;

fn run_eval(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let pre = Observation::from_documents(&read_documents(&cfg.artifact(CORPUS))?);
    let post = Observation::from_documents(&read_documents(&cfg.artifact(HELD_OUT))?);
    let specs = build_subdomain_benchmarks(&pre, &post, cfg.eval.top_types, cfg.eval.top_preds);
    info!("eval: {} subdomains", specs.len());
    let mut buf = Vec::new();
    write_benchmarks(&mut buf, &specs).at(Stage::Eval)?;
    put(&cfg.artifact(BENCHMARKS), &buf)?;

    let g = load_graph(&cfg.work_dir)?;
    let store = load_store(&cfg.work_dir)?;
    let model = load_model(&cfg.work_dir)?;
    let ctx = SampleContext::new(&g);
    let pairs: Vec<(String, String)> = specs
        .iter()
        .flat_map(|s| s.candidates.iter().map(|c| (c.subject.clone(), c.object.clone())))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let scores = score_pairs(&model, &store, &ctx, &pairs, cfg.eval.samples_per_pair, cfg.ranker.s, cfg.seed).at(Stage::Eval)?;

    let mut ranked: Vec<RankedPair> = scores
        .iter()
        .map(|((a, b), &score)| RankedPair {
            alpha: NodeKey::new(NodeKind::CodedTerm, a.clone()),
            beta: NodeKey::new(NodeKind::CodedTerm, b.clone()),
            score,
        })
        .collect();
    sort_ranking(&mut ranked);
    let mut buf = Vec::new();
    write_ranking(&mut buf, &ranked).at(Stage::Eval)?;
    put(&cfg.artifact(RANKING), &buf)?;

    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for spec in &specs {
        let report = evaluate_subdomain(spec, &scores, &cfg.eval.ks).at(Stage::Eval)?;
        rows.extend(MetricRow::from_subdomain(&report));
        pooled.extend(spec.candidates.iter().map(|c| LabeledEntry {
            key: format!("{}\t{}\t{}", spec.name(), c.subject, c.object),
            score: scores.get(&(c.subject.clone(), c.object.clone())).copied().unwrap_or(0.0),
            label: c.label,
        }));
    }
    if !pooled.is_empty() {
        let all = LabeledRanking::new(pooled).at(Stage::Eval)?;
        if let Ok(v) = roc_auc(&all) {
            rows.push(MetricRow::new("all", "roc_auc", None, v));
        }
        if let Ok(v) = pr_auc(&all) {
            rows.push(MetricRow::new("all", "pr_auc_ap", None, v));
        }
    }
    let (mut tsv, mut table) = (Vec::new(), Vec::new());
    write_report_tsv(&mut tsv, &rows).at(Stage::Eval)?;
    write_report_table(&mut table, &rows).at(Stage::Eval)?;
    put(&cfg.artifact(METRICS), &tsv)?;
    put(&cfg.artifact(METRICS_TABLE), &table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_rejects() {
        let v = ConfigValues::parse("# comment\nembed.dim = 16\n\nseed=3\n", Some("desk")).unwrap();
        assert_eq!(v.get("embed.dim"), "16");
        assert_eq!(v.get("seed"), "3");
        assert_eq!(v.get("ann.m"), "8");
        assert!(matches!(ConfigValues::parse("nope.key = 1", None), Err(PipelineError::UnknownKey(_))));
        assert!(matches!(ConfigValues::parse("seed", None), Err(PipelineError::Syntax { line: 1, .. })));
        assert!(matches!(ConfigValues::parse("seed=1\nseed=2", None), Err(PipelineError::Syntax { line: 2, .. })));
        assert!(matches!(ConfigValues::parse("", Some("huge")), Err(PipelineError::UnknownPreset(_))));
        let p = ConfigValues::parse("preset = paper", None).unwrap();
        assert_eq!(p.get("ann.nlist"), "2048");
    }

    #[test]
    fn presets_validate() {
        for preset in ["paper", "desk"] {
            let v = ConfigValues::parse("", Some(preset)).unwrap();
            let cfg = PipelineConfig::from_values(v, Path::new("/base")).unwrap();
            assert_eq!(cfg.input, Path::new("/base/corpus.jsonl"));
            assert_eq!(cfg.lexicon, None);
            assert_eq!(cfg.eval.ks, vec![1, 10, 100]);
        }
        let paper = PipelineConfig::from_values(ConfigValues::parse("", Some("paper")).unwrap(), Path::new(".")).unwrap();
        assert_eq!(paper.ranker.model, ModelConfig::paper(512));
        assert_eq!(paper.ann, AnnParams::paper());
    }

    #[test]
    fn numeric_ranges_checked() {
        for (text, key) in [
            ("ann.m = 7", "ann.m"),
            ("ann.nprobe = 100", "ann.nprobe"),
            ("ranker.heads = 5", "ranker.heads"),
            ("mine.partition_min = 50", "mine.partition_min"),
            ("eval.k = 1,,3", "eval.k"),
            ("ranker.dropout = 1.5", "ranker.dropout"),
            ("embed.lr = -1", "embed.lr"),
            ("corpus.cutoff = soon", "corpus.cutoff"),
        ] {
            let v = ConfigValues::parse(text, Some("desk")).unwrap();
            match PipelineConfig::from_values(v, Path::new(".")) {
                Err(PipelineError::Value { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn section_hash_ignores_other_sections_and_paths() {
        let a = ConfigValues::parse("", Some("desk")).unwrap();
        let b = ConfigValues::parse("eval.top_types = 3\npaths.work_dir = elsewhere", Some("desk")).unwrap();
        let c = ConfigValues::parse("seed = 9", Some("desk")).unwrap();
        assert_eq!(a.section_hash(&["embed"]), b.section_hash(&["embed"]));
        assert_ne!(a.section_hash(&["eval"]), b.section_hash(&["eval"]));
        assert_ne!(a.section_hash(&["embed"]), c.section_hash(&["embed"]));
    }

    #[test]
    fn render_roundtrips() {
        let v = ConfigValues::parse("ranker.epochs = 3", Some("paper")).unwrap();
        assert_eq!(ConfigValues::parse(&v.render(), Some("paper")).unwrap(), v);
    }

    #[test]
    fn targets() {
        assert_eq!(parse_target("all").unwrap().len(), 8);
        assert_eq!(parse_target("knn").unwrap(), vec![Stage::Knn]);
        assert!(parse_target("train").is_err());
        assert_eq!(Stage::producer(EMBEDDINGS), Stage::Embed);
    }

    #[test]
    fn partitions_keep_documents_whole() {
        let s = |d: &str, i: usize| Sentence {
            doc_id: d.into(),
            index: i,
            text: String::new(),
            tokens: vec![],
            entities: vec![],
        };
        let sentences = vec![s("a", 0), s("a", 1), s("b", 0), s("c", 0), s("c", 1), s("d", 0)];
        let parts = partition_sentences(&sentences, 2);
        let ids: Vec<Vec<&str>> = parts.iter().map(|p| p.iter().map(|s| s.doc_id.as_str()).collect()).collect();
        assert_eq!(ids, vec![vec!["a", "a", "b"], vec!["c", "c", "d"]]);
    }

    #[test]
    fn corrupt_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "{not json").unwrap();
        assert_eq!(Manifest::load(dir.path()), Manifest::default());
    }
}
