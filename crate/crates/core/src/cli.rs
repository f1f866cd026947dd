//! Command-line front end. Every subcommand is a plain function so tests
//! can drive it without spawning a process.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TokenizerRef};
use crate::error::Error;
use crate::eval::{evaluate, score_raw_triple, RankingReport};
use crate::kg::{KnowledgeGraph, Split};
use crate::model::{default_pq, ByteSpec, Model, ModelSpec};
use crate::scorer::Family;
use crate::tensor::sigmoid;
use crate::tokenizer::{encode_padded, BpeVocab, TokenizerConfig, DEFAULT_PAD_TOKEN};
use crate::trainer::{fit, grid_search, EpochLog, Strategy, TrainConfig, PAPER_DIMS, PAPER_LRS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "byte-kge", version, about = "Subword-unit knowledge graph embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, epoch log and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Score an arbitrary triple given as strings.
    Score(ScoreArgs),
    /// Dimension sweep or learning-rate × dimension grid search.
    Sweep(SweepArgs),
    /// Print BPE token ids of strings.
    Tokenize(TokenizeArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TokenizerArgs {
    /// GPT-2 style vocab.json.
    #[arg(long, requires = "merges")]
    pub vocab: Option<PathBuf>,
    /// GPT-2 style merges.txt.
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
    /// Learn a BPE vocabulary of this size from the graph's strings instead.
    #[arg(long, conflicts_with = "vocab")]
    pub train_vocab: Option<usize>,
    /// Sequence length m (default: longest encoding in the graph).
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value = DEFAULT_PAD_TOKEN)]
    pub pad_token: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "keci")]
    pub model: Family,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Keci: number of basis vectors squaring to +1.
    #[arg(long)]
    pub p: Option<usize>,
    /// Keci: number of basis vectors squaring to -1.
    #[arg(long)]
    pub q: Option<usize>,
    /// Represent entities and relations through subword units.
    #[arg(long = "byte-pair-encoding")]
    pub byte_pair_encoding: bool,
    /// Single-head self-attention over token embeddings (byte mode).
    #[arg(long)]
    pub attention: bool,
    /// Drop the bias of the linear map (byte mode).
    #[arg(long)]
    pub no_bias: bool,
    /// Scale head and relation embeddings to unit norm before scoring.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimArgs {
    /// kvsall, 1vsall or negsample:<k>.
    #[arg(long, default_value = "kvsall")]
    pub strategy: String,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    /// Global gradient-norm cap in byte mode.
    #[arg(long, default_value_t = 10.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Directory with train.txt, valid.txt and test.txt.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Do not echo the per-epoch log.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, requires = "merges")]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[arg(long, requires = "merges")]
    pub vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    pub merges: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Models as `<family>` or `<family>-byte`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "keci,keci-byte")]
    pub models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128,256")]
    pub dims: Vec<usize>,
    /// Grid-search learning rates × dims on the validation split instead.
    #[arg(long)]
    pub grid: bool,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value = DEFAULT_PAD_TOKEN)]
    pub pad_token: String,
    pub strings: Vec<String>,
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command, reports errors on stderr and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, &mut out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, &mut out).map(|_| ()),
        Command::Score(a) => cmd_score(&a, &mut out).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a, &mut out).map(|_| ()),
        Command::Tokenize(a) => cmd_tokenize(&a, &mut out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Runtime(Error::Io(e))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Loads a dataset directory and adds reciprocal triples.
pub fn load_graph(dir: &Path) -> CliResult<KnowledgeGraph> {
    require_dir(dir, "dataset")?;
    Ok(KnowledgeGraph::load(dir)?.add_reciprocals()?)
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub family: Family,
    pub dim: usize,
    pub p: usize,
    pub q: usize,
    pub byte_mode: bool,
    pub attention: bool,
    pub bias: bool,
    pub normalize: bool,
    pub dropout: f64,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub train_vocab: Option<usize>,
    pub max_len: Option<usize>,
    pub pad_token: String,
    pub train: TrainConfig,
}

fn train_config(o: &OptimArgs) -> CliResult<TrainConfig> {
    let strategy: Strategy = o.strategy.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        strategy,
        lr: o.lr,
        epochs: o.epochs,
        batch_size: o.batch_size,
        l2: o.l2,
        label_smoothing: o.label_smoothing,
        clip_norm: (!o.no_clip).then_some(o.clip_norm),
        seed: o.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Model spec plus the tokenizer files it was built from, if any. With
/// `--train-vocab`, the learned files are written to `vocab_dir`.
fn model_spec(
    m: &ModelArgs,
    g: &KnowledgeGraph,
    vocab_dir: Option<&Path>,
) -> CliResult<(ModelSpec, Option<(PathBuf, PathBuf)>)> {
    let (dp, dq) = default_pq(m.model);
    let mut spec = ModelSpec {
        family: m.model,
        dim: m.dim,
        p: m.p.unwrap_or(dp),
        q: m.q.unwrap_or(dq),
        byte: None,
        normalize: m.normalize,
        dropout: m.dropout,
    };
    if !(0.0..1.0).contains(&m.dropout) {
        return Err(CliError::Usage(format!("--dropout {} outside [0, 1)", m.dropout)));
    }
    crate::scorer::ScorerConfig::new(spec.family, spec.dim, spec.p, spec.q)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !m.byte_pair_encoding {
        if m.attention {
            return Err(CliError::Usage("--attention needs --byte-pair-encoding".into()));
        }
        return Ok((spec, None));
    }
    let t = &m.tokenizer;
    let (vocab, files) = match (&t.vocab, &t.merges, t.train_vocab) {
        (Some(v), Some(mg), None) => {
            require_file(v, "vocab file")?;
            require_file(mg, "merges file")?;
            (BpeVocab::load(v, mg)?, Some((v.clone(), mg.clone())))
        }
        (None, None, Some(size)) => {
            let corpus: Vec<&str> = g
                .entities()
                .iter()
                .chain(g.relations())
                .map(String::as_str)
                .collect();
            let vocab = BpeVocab::train(&corpus, size)?;
            let files = match vocab_dir {
                Some(dir) => {
                    let files = (dir.join("vocab.json"), dir.join("merges.txt"));
                    vocab.save(&files.0, &files.1)?;
                    Some(files)
                }
                None => None,
            };
            (vocab, files)
        }
        _ => {
            return Err(CliError::Usage(
                "--byte-pair-encoding needs --vocab and --merges, or --train-vocab".into(),
            ))
        }
    };
    spec.byte = Some(ByteSpec {
        vocab: Arc::new(vocab),
        max_len: t.max_len,
        pad_token: t.pad_token.clone(),
        attention: m.attention,
        bias: !m.no_bias,
    });
    Ok((spec, files))
}

/// Results of a finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    pub train_report: RankingReport,
    pub test_report: RankingReport,
    pub checkpoint: PathBuf,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let g = load_graph(&args.dataset)?;
    let cfg = train_config(&args.optim)?;
    fs::create_dir_all(&args.out).map_err(io_err)?;
    let (spec, files) = model_spec(&args.model, &g, Some(&args.out))?;

    let mut log_rows = Vec::new();
    let quiet = args.quiet;
    let mut echo_err = None;
    let (model, epochs) = fit(&spec, &g, &cfg, |e| {
        let line = format!("{},{},{}", e.epoch, e.loss, e.seconds);
        if !quiet {
            if let Err(err) = writeln!(out, "{line}") {
                echo_err.get_or_insert(err);
            }
        }
        log_rows.push(line);
    })?;
    if let Some(e) = echo_err {
        return Err(io_err(e));
    }
    let mut csv_text = String::from("epoch,loss,seconds\n");
    for row in &log_rows {
        csv_text.push_str(row);
        csv_text.push('\n');
    }
    fs::write(args.out.join("epochs.csv"), csv_text).map_err(io_err)?;

    // Tokenizer files travel with the checkpoint.
    let tref = match &files {
        Some((v, m)) => {
            let (dv, dm) = (args.out.join("vocab.json"), args.out.join("merges.txt"));
            if v != &dv {
                fs::copy(v, &dv).map_err(io_err)?;
                fs::copy(m, &dm).map_err(io_err)?;
            }
            Some(TokenizerRef::from_files(&dv, &dm)?)
        }
        None => None,
    };
    let ckpt = args.out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &model, cfg.seed, tref)?;

    let run_cfg = RunConfig {
        dataset: args.dataset.clone(),
        out: args.out.clone(),
        family: spec.family,
        dim: spec.dim,
        p: spec.p,
        q: spec.q,
        byte_mode: spec.byte.is_some(),
        attention: args.model.attention,
        bias: !args.model.no_bias,
        normalize: spec.normalize,
        dropout: spec.dropout,
        vocab: args.model.tokenizer.vocab.clone(),
        merges: args.model.tokenizer.merges.clone(),
        train_vocab: args.model.tokenizer.train_vocab,
        max_len: model.byte_repr().map(|b| b.tokenizer.max_len),
        pad_token: args.model.tokenizer.pad_token.clone(),
        train: cfg,
    };
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&run_cfg).map_err(Error::from)?,
    )
    .map_err(io_err)?;

    let train_report = evaluate(&model, &g, Split::Train)?;
    let test_report = evaluate(&model, &g, Split::Test)?;
    for (name, rep) in [("report_train.csv", &train_report), ("report_test.csv", &test_report)] {
        let file = fs::File::create(args.out.join(name)).map_err(io_err)?;
        RankingReport::write_csv(std::slice::from_ref(rep), file)?;
    }
    if !quiet {
        RankingReport::write_csv(&[train_report.clone(), test_report.clone()], &mut *out)?;
    }
    Ok(TrainOutcome {
        model,
        epochs,
        train_report,
        test_report,
        checkpoint: ckpt,
    })
}

fn load_checkpoint(path: &Path, vocab: &Option<PathBuf>, merges: &Option<PathBuf>) -> CliResult<Model> {
    require_file(path, "checkpoint")?;
    let files = match (vocab, merges) {
        (Some(v), Some(m)) => Some((v.as_path(), m.as_path())),
        _ => None,
    };
    Ok(checkpoint::load(path, files)?.0)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<RankingReport> {
    let model = load_checkpoint(&args.checkpoint, &args.vocab, &args.merges)?;
    let g = load_graph(&args.dataset)?;
    let report = evaluate(&model, &g, args.split)?;
    if args.json {
        writeln!(out, "{}", report.to_json()?).map_err(io_err)?;
    } else {
        RankingReport::write_csv(std::slice::from_ref(&report), out)?;
    }
    Ok(report)
}

pub fn cmd_score(args: &ScoreArgs, out: &mut dyn Write) -> CliResult<f64> {
    let model = load_checkpoint(&args.checkpoint, &args.vocab, &args.merges)?;
    let logit = score_raw_triple(&model, &args.head, &args.relation, &args.tail)?;
    writeln!(out, "logit={logit} sigmoid={}", sigmoid(logit)).map_err(io_err)?;
    Ok(logit)
}

/// One row of a dimension sweep: train and test MRR per model label.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dim: usize,
    pub mrr: Vec<(f64, f64)>,
}

fn parse_model_label(label: &str) -> CliResult<(Family, bool)> {
    let (name, byte) = match label.strip_suffix("-byte") {
        Some(n) => (n, true),
        None => (label, false),
    };
    let family = name.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    Ok((family, byte))
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> CliResult<Vec<SweepRow>> {
    let g = load_graph(&args.dataset)?;
    let cfg = train_config(&args.optim)?;
    if args.dims.is_empty() || args.models.is_empty() {
        return Err(CliError::Usage("need at least one model and one dimension".into()));
    }
    let mut sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).map_err(io_err)?),
        None => Box::new(&mut *out),
    };
    if args.grid {
        let lrs = args.lrs.clone().unwrap_or_else(|| PAPER_LRS.to_vec());
        let dims = if args.dims == default_sweep_dims() { PAPER_DIMS.to_vec() } else { args.dims.clone() };
        let mut w = csv::Writer::from_writer(&mut sink);
        w.write_record(["model", "lr", "dim", "valid_mrr", "valid_h1", "valid_h3", "valid_h10", "best"])
            .map_err(Error::from)?;
        for label in &args.models {
            let (family, byte) = parse_model_label(label)?;
            let margs = ModelArgs { model: family, byte_pair_encoding: byte, ..args.model.clone() };
            let (spec, _) = model_spec(&margs, &g, None)?;
            let report = grid_search(&g, &spec, &cfg, &lrs, &dims, |_| {})?;
            for (i, c) in report.cells.iter().enumerate() {
                w.write_record([
                    label.clone(),
                    c.lr.to_string(),
                    c.dim.to_string(),
                    c.valid.mrr.to_string(),
                    c.valid.h1.to_string(),
                    c.valid.h3.to_string(),
                    c.valid.h10.to_string(),
                    (i == report.best).to_string(),
                ])
                .map_err(Error::from)?;
            }
        }
        w.flush().map_err(io_err)?;
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    let mut w = csv::Writer::from_writer(&mut sink);
    let mut head = vec!["dim".to_string()];
    for label in &args.models {
        head.push(format!("{label}_train_mrr"));
        head.push(format!("{label}_test_mrr"));
    }
    w.write_record(&head).map_err(Error::from)?;
    for &dim in &args.dims {
        let mut row = SweepRow { dim, mrr: Vec::new() };
        for label in &args.models {
            let (family, byte) = parse_model_label(label)?;
            let margs = ModelArgs { model: family, dim, byte_pair_encoding: byte, ..args.model.clone() };
            let (spec, _) = model_spec(&margs, &g, None)?;
            let (model, _) = fit(&spec, &g, &cfg, |_| {})?;
            row.mrr.push((
                evaluate(&model, &g, Split::Train)?.mrr,
                evaluate(&model, &g, Split::Test)?.mrr,
            ));
        }
        let mut rec = vec![dim.to_string()];
        for (tr, te) in &row.mrr {
            rec.push(tr.to_string());
            rec.push(te.to_string());
        }
        w.write_record(&rec).map_err(Error::from)?;
        w.flush().map_err(io_err)?;
        rows.push(row);
    }
    Ok(rows)
}

fn default_sweep_dims() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64, 128, 256]
}

pub fn cmd_tokenize(args: &TokenizeArgs, out: &mut dyn Write) -> CliResult<()> {
    require_file(&args.vocab, "vocab file")?;
    require_file(&args.merges, "merges file")?;
    let vocab = BpeVocab::load(&args.vocab, &args.merges)?;
    let cfg = match args.max_len {
        Some(m) => Some(TokenizerConfig::new(&vocab, m, &args.pad_token).map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    for s in &args.strings {
        let ids = match &cfg {
            Some(c) => encode_padded(s, c, &vocab),
            None => vocab.encode(s),
        };
        let text: Vec<String> = ids.iter().map(u32::to_string).collect();
        writeln!(out, "{}", text.join(" ")).map_err(io_err)?;
    }
    Ok(())
}
