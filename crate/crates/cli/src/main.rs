use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use hypogen::corpus::{annotate_corpus, ingest, write_sentences, IngestOptions, Lexicon};
use hypogen::graph::{read_nodes, read_tsv};
use hypogen::hetembed::EmbeddingStore;
use hypogen::pipeline::{self, PipelineConfig, StageStatus};
use hypogen::ranker::{rank_pairs, sort_ranking, write_ranking, RankedPair, RankingModel, SampleContext};
use hypogen::synth::{generate, SynthConfig};
use hypogen::{NodeKey, NodeKind};

#[derive(Parser)]
#[command(name = "hypogen", version, about = "Hypothesis generation from a dated literature corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline stage, or `all`, skipping stages that are up to date.
    Run {
        /// ingest, mine, sembed, knn, graph, embed, ranker, eval or all
        stage: String,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Default values for keys the config omits (default: the config's
        /// `preset` key, else desk).
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Score term pairs with a trained model.
    Rank {
        /// Two tab-separated term ids per line.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Edge list; the node sidecar is read from `nodes.tsv` beside it
        /// unless `--nodes` is given.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        nodes: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Predicates drawn per term.
        #[arg(long, default_value_t = 15)]
        s: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Filter, split and annotate a corpus without the rest of the pipeline.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        cutoff: NaiveDate,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Write the planted-structure corpus, its lexicon and a desk config.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")
}

fn parse_term(field: &str) -> Result<NodeKey> {
    let field = field.trim();
    if field.contains(':') {
        let key: NodeKey = field.parse().with_context(|| format!("bad term {field:?}"))?;
        if key.kind() != NodeKind::CodedTerm {
            bail!("{field:?} is not a coded term");
        }
        return Ok(key);
    }
    NodeKey::try_new(NodeKind::CodedTerm, field).with_context(|| format!("bad term {field:?}"))
}

fn read_pairs(path: &Path) -> Result<Vec<(NodeKey, NodeKey)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected two tab-separated terms", path.display(), i + 1))?;
        out.push((parse_term(a)?, parse_term(b)?));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

#[allow(clippy::too_many_arguments)]
fn rank(
    pairs: &Path,
    model: &Path,
    store: &Path,
    graph: &Path,
    nodes: Option<&Path>,
    samples: usize,
    s: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let pairs = read_pairs(pairs)?;
    let model = RankingModel::read(&mut open(model)?).context("reading model")?;
    let store = EmbeddingStore::read(&mut open(store)?).context("reading embeddings")?;
    let mut g = read_tsv(open(graph)?).context("reading graph")?;
    let nodes = nodes.map(Path::to_path_buf).unwrap_or_else(|| graph.with_file_name(pipeline::NODES));
    read_nodes(open(&nodes)?, &mut g).context("reading node sidecar")?;
    let ctx = SampleContext::new(&g);
    let scores = rank_pairs(&model, &store, &ctx, &pairs, samples, s, seed);
    let mut ranked = Vec::with_capacity(pairs.len());
    for ((alpha, beta), score) in pairs.into_iter().zip(scores) {
        match score {
            Ok(score) => ranked.push(RankedPair { alpha, beta, score }),
            Err(e) => log::warn!("skipping {alpha} {beta}: {e}"),
        }
    }
    sort_ranking(&mut ranked);
    let mut w = output(out)?;
    write_ranking(&mut w, &ranked)?;
    w.flush()?;
    Ok(())
}

const DESK_CONFIG: &str = "\
# Desk-scale run over the bundled synthetic corpus.
preset = desk
paths.input = corpus.jsonl
paths.lexicon = lexicon.json
paths.work_dir = work
corpus.cutoff = 2015-01-01
seed = 0
";

fn gen_synthetic(out: &Path, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let write = |name: &str, f: &dyn Fn(&mut dyn Write) -> io::Result<()>| -> Result<()> {
        let path = out.join(name);
        hypogen::util::write_atomic(&path, |w| f(w)).with_context(|| format!("writing {}", path.display()))
    };
    write("corpus.jsonl", &|w| corpus.write_documents(w))?;
    write("lexicon.json", &|w| corpus.write_lexicon(w))?;
    write("terms.tsv", &|w| corpus.write_terms(w))?;
    write("truth.tsv", &|w| corpus.write_truth(w))?;
    write("desk.conf", &|w| w.write_all(DESK_CONFIG.as_bytes()))?;
    eprintln!("wrote {} documents to {}", corpus.documents.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            stage,
            config,
            seed,
            threads,
            preset,
        } => {
            init_threads(threads)?;
            let stages = pipeline::parse_target(&stage)?;
            let cfg = PipelineConfig::load(&config, preset.map(Preset::name), seed)?;
            let summary = pipeline::run(&stages, &cfg)?;
            for (stage, status) in &summary.stages {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Skipped => "skipped (up to date)",
                };
                println!("{stage}\t{s}");
            }
            let table = cfg.work_dir.join(pipeline::METRICS_TABLE);
            if stages.contains(&pipeline::Stage::Eval) && table.is_file() {
                print!("{}", fs::read_to_string(&table)?);
            }
        }
        Command::Rank {
            pairs,
            model,
            store,
            graph,
            nodes,
            samples,
            s,
            seed,
            threads,
            output,
        } => {
            init_threads(threads)?;
            rank(&pairs, &model, &store, &graph, nodes.as_deref(), samples, s, seed, output.as_deref())?;
        }
        Command::Ingest {
            input,
            output: out,
            cutoff,
            lexicon,
        } => {
            let lexicon = match lexicon {
                Some(p) => Lexicon::load(&p)?,
                None => Lexicon::default(),
            };
            let result = ingest(open(&input)?, &IngestOptions::new(cutoff))?;
            let sentences = annotate_corpus(&result.corpus, &lexicon);
            hypogen::util::write_atomic(&out, |w| write_sentences(w, &sentences))?;
            eprintln!(
                "{} documents retained, {} held out, {} rejected; {} sentences",
                result.corpus.len(),
                result.held_out.len(),
                result.errors.len(),
                sentences.len()
            );
        }
        Command::GenSynthetic { out, seed } => gen_synthetic(&out, seed)?,
    }
    Ok(())
}
