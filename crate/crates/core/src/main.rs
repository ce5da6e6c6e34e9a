use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use bjlm::checkpoint::{load_checkpoint, save_checkpoint};
use bjlm::data::{build_vocab, gen_synthetic, read_parallel, split_holdout, tokenize, SyntheticTask, Vocabulary};
use bjlm::evaluation::corpus_bleu;
use bjlm::gradcheck::tiny_model_check;
use bjlm::inference::{translate, DecodeConfig};
use bjlm::masking::{build_band_mask, parse_windows, render_ascii, write_pgm, BandSpec, BoundaryPolicy, Window};
use bjlm::model::{Model, ModelConfig, ParamSet, Preset};
use bjlm::training::{train, MetricRecord, Schedule, TrainConfig, TrainData, TrainError, TrainObserver};

/// Fraction of synthetic data held out for evaluation.
const HOLDOUT_FRACTION: f64 = 0.05;

#[derive(Parser)]
#[command(name = "bjlm", version, about = "Joint source-target translation with local self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a synthetic task or a parallel corpus.
    Train(TrainArgs),
    /// Translate lines from a file or stdin with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Print a band mask as an ASCII grid.
    MaskDump(MaskDumpArgs),
    /// Compare full-model gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Count parameters by enumeration and by closed form.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with any of the flags below (underscored names); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset: toy, toy-mini, iwslt, wmt-big [default: toy]
    #[arg(long)]
    preset: Option<Preset>,
    /// Synthetic task when no corpus is given: copy, reverse, sort [default: copy]
    #[arg(long)]
    task: Option<SyntheticTask>,
    /// Number of synthetic training pairs [default: 2000]
    #[arg(long)]
    pairs: Option<usize>,
    /// Shortest synthetic sentence [default: 3]
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest synthetic sentence [default: 8]
    #[arg(long)]
    max_len: Option<usize>,
    /// Distinct synthetic symbols [default: 10]
    #[arg(long)]
    symbols: Option<usize>,
    /// Source side of a training corpus, one sentence per line
    #[arg(long, requires = "train_tgt")]
    train_src: Option<PathBuf>,
    /// Target side of a training corpus
    #[arg(long, requires = "train_src")]
    train_tgt: Option<PathBuf>,
    /// Source side of a validation corpus [default: last 5% of training data]
    #[arg(long, requires = "valid_tgt")]
    valid_src: Option<PathBuf>,
    /// Target side of a validation corpus
    #[arg(long, requires = "valid_src")]
    valid_tgt: Option<PathBuf>,
    /// Largest vocabulary including special tokens [default: 32000]
    #[arg(long)]
    max_vocab: Option<usize>,
    /// Number of layers [default: from preset]
    #[arg(long)]
    layers: Option<usize>,
    /// Model width [default: from preset]
    #[arg(long)]
    d_model: Option<usize>,
    /// Feed-forward width [default: from preset]
    #[arg(long)]
    d_ff: Option<usize>,
    /// Attention heads [default: from preset]
    #[arg(long)]
    heads: Option<usize>,
    /// Per-layer windows, e.g. 3,5,7,inf [default: from preset]
    #[arg(long)]
    windows: Option<String>,
    /// Dropout rate [default: from preset]
    #[arg(long)]
    dropout: Option<f64>,
    /// Positional table size [default: from preset]
    #[arg(long)]
    max_positions: Option<usize>,
    /// Use a separate output projection instead of the token embedding
    #[arg(long)]
    untied: bool,
    /// Boundary policy: cross or clip_full_source [default: cross]
    #[arg(long)]
    boundary_policy: Option<BoundaryPolicy>,
    /// Training steps [default: 3000 for toy presets]
    #[arg(long)]
    steps: Option<usize>,
    /// Linear warmup steps [default: from preset]
    #[arg(long)]
    warmup: Option<usize>,
    /// Peak learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Schedule after warmup: inv_sqrt or cosine [default: from preset]
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Label smoothing weight [default: 0.1]
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Sentences per batch [default: from preset]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Clip gradients to this global norm [default: off]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Steps between metric lines [default: 100]
    #[arg(long)]
    log_every: Option<usize>,
    /// Steps between intermediate checkpoints, 0 for none [default: 0]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Seed for initialization, data generation, sampling and dropout [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Final checkpoint path [default: model.bjlm]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write metric lines to this file
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write `-` instead of measured throughput so logs are reproducible
    #[arg(long)]
    no_timing: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    preset: Option<String>,
    task: Option<String>,
    pairs: Option<usize>,
    min_len: Option<usize>,
    max_len: Option<usize>,
    symbols: Option<usize>,
    train_src: Option<PathBuf>,
    train_tgt: Option<PathBuf>,
    valid_src: Option<PathBuf>,
    valid_tgt: Option<PathBuf>,
    max_vocab: Option<usize>,
    layers: Option<usize>,
    d_model: Option<usize>,
    d_ff: Option<usize>,
    heads: Option<usize>,
    windows: Option<String>,
    dropout: Option<f64>,
    max_positions: Option<usize>,
    untied: Option<bool>,
    boundary_policy: Option<String>,
    steps: Option<usize>,
    warmup: Option<usize>,
    lr: Option<f64>,
    schedule: Option<String>,
    label_smoothing: Option<f64>,
    batch_size: Option<usize>,
    clip_norm: Option<f64>,
    log_every: Option<usize>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    metrics: Option<PathBuf>,
    no_timing: Option<bool>,
}

#[derive(Args)]
struct TranslateArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input file, one sentence per line [default: stdin]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Beam size; 1 decodes greedily
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Length-penalty exponent
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Generated-token cap [default: 2 * source length + 10]
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Print a header comment with the decoding settings
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Hypotheses, one tokenized sentence per line
    #[arg(long)]
    hyp: PathBuf,
    /// References, aligned with the hypotheses
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct MaskDumpArgs {
    /// Source block length
    #[arg(long, default_value_t = 8)]
    source_len: usize,
    /// Target block length
    #[arg(long, default_value_t = 8)]
    target_len: usize,
    /// Odd window or inf; overrides the preset layer
    #[arg(long)]
    window: Option<Window>,
    /// Take the window from this preset's schedule
    #[arg(long)]
    preset: Option<Preset>,
    /// Layer index into the preset schedule
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Boundary policy: cross or clip_full_source
    #[arg(long, default_value = "cross")]
    policy: BoundaryPolicy,
    /// Also write the mask as a binary PGM image
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Architecture preset
    #[arg(long, default_value = "toy-mini")]
    preset: Preset,
    /// Vocabulary size [default: from preset]
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Seed for parameters and the random batch
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pass threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct ParamCountArgs {
    /// Architecture preset
    #[arg(long, default_value = "toy")]
    preset: Preset,
    /// Vocabulary size [default: from preset]
    #[arg(long)]
    vocab_size: Option<usize>,
    /// List every parameter array
    #[arg(long)]
    verbose: bool,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

type CliResult = Result<(), CliError>;

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Score(a) => cmd_score(a),
        Command::MaskDump(a) => cmd_mask_dump(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::ParamCount(a) => cmd_param_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn parse_opt<T: std::str::FromStr>(s: Option<String>, what: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.map(|s| s.parse().map_err(|e| usage(format!("config file {what}: {e}"))))
        .transpose()
}

struct TrainPlan {
    model: ModelConfig,
    train: TrainConfig,
    source: DataSource,
    max_vocab: usize,
    output: PathBuf,
    metrics: Option<PathBuf>,
    no_timing: bool,
}

enum DataSource {
    Synthetic {
        task: SyntheticTask,
        pairs: usize,
        lengths: (usize, usize),
        symbols: usize,
    },
    Files {
        train: (PathBuf, PathBuf),
        valid: Option<(PathBuf, PathBuf)>,
    },
}

/// Resolves flags over the config file over preset defaults and validates
/// everything before any work starts.
fn plan_training(a: TrainArgs) -> Result<TrainPlan, CliError> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let preset = match a.preset {
        Some(p) => p,
        None => parse_opt(file.preset, "preset")?.unwrap_or(Preset::Toy),
    };
    let task = match a.task {
        Some(t) => t,
        None => parse_opt(file.task, "task")?.unwrap_or(SyntheticTask::Copy),
    };

    let mut model = preset.config(preset.default_vocab_size());
    let layers = a.layers.or(file.layers);
    let windows = a.windows.or(file.windows);
    if let Some(l) = layers {
        model.n_layers = l;
    }
    match windows {
        Some(w) => model.windows = parse_windows(&w).map_err(usage)?,
        None if layers.is_some_and(|l| l != model.windows.len()) => {
            return Err(usage(format!(
                "config conflict: preset {preset} has {} windows but {} layers were requested; pass --windows",
                model.windows.len(),
                model.n_layers
            )));
        }
        None => {}
    }
    if let Some(x) = a.d_model.or(file.d_model) {
        model.d_model = x;
    }
    if let Some(x) = a.d_ff.or(file.d_ff) {
        model.d_ff = x;
    }
    if let Some(x) = a.heads.or(file.heads) {
        model.n_heads = x;
    }
    if let Some(x) = a.dropout.or(file.dropout) {
        model.dropout = x;
    }
    if let Some(x) = a.max_positions.or(file.max_positions) {
        model.max_positions = x;
    }
    if a.untied || file.untied == Some(true) {
        model.tie_embeddings = false;
    }
    model.boundary_policy = match a.boundary_policy {
        Some(p) => p,
        None => parse_opt(file.boundary_policy, "boundary_policy")?.unwrap_or_default(),
    };
    // Vocabulary size is only known after reading the data; validate the
    // rest with a placeholder.
    model.validate().map_err(usage)?;

    let mut train = TrainConfig::for_preset(preset);
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut train.max_steps, a.steps.or(file.steps));
    set(&mut train.warmup_steps, a.warmup.or(file.warmup));
    set(&mut train.batch_size, a.batch_size.or(file.batch_size));
    set(&mut train.log_every, a.log_every.or(file.log_every));
    set(&mut train.checkpoint_every, a.checkpoint_every.or(file.checkpoint_every));
    if let Some(x) = a.lr.or(file.lr) {
        train.peak_lr = x;
    }
    if let Some(x) = a.label_smoothing.or(file.label_smoothing) {
        train.label_smoothing = x;
    }
    if let Some(x) = a.seed.or(file.seed) {
        train.seed = x;
    }
    train.clip_norm = a.clip_norm.or(file.clip_norm);
    if let Some(s) = a.schedule {
        train.schedule = s;
    } else if let Some(s) = parse_opt(file.schedule, "schedule")? {
        train.schedule = s;
    }
    train.validate().map_err(usage)?;

    let train_files = a.train_src.or(file.train_src).zip(a.train_tgt.or(file.train_tgt));
    let valid_files = a.valid_src.or(file.valid_src).zip(a.valid_tgt.or(file.valid_tgt));
    let source = match train_files {
        Some(t) => DataSource::Files {
            train: t,
            valid: valid_files,
        },
        None => {
            if valid_files.is_some() {
                return Err(usage("validation files need --train-src and --train-tgt"));
            }
            let lengths = (a.min_len.or(file.min_len).unwrap_or(3), a.max_len.or(file.max_len).unwrap_or(8));
            if lengths.0 < 1 || lengths.1 < lengths.0 {
                return Err(usage(format!("bad length range {}..{}", lengths.0, lengths.1)));
            }
            let pairs = a.pairs.or(file.pairs).unwrap_or(2000);
            if pairs == 0 {
                return Err(usage("--pairs must be positive"));
            }
            DataSource::Synthetic {
                task,
                pairs,
                lengths,
                symbols: a.symbols.or(file.symbols).unwrap_or(10),
            }
        }
    };
    Ok(TrainPlan {
        model,
        train,
        source,
        max_vocab: a.max_vocab.or(file.max_vocab).unwrap_or(32_000),
        output: a.output.or(file.output).unwrap_or_else(|| PathBuf::from("model.bjlm")),
        metrics: a.metrics.or(file.metrics),
        no_timing: a.no_timing || file.no_timing == Some(true),
    })
}

struct Reporter<'a> {
    vocab: &'a Vocabulary,
    output: &'a Path,
    metrics: Option<BufWriter<File>>,
    no_timing: bool,
}

impl Reporter<'_> {
    fn line(&self, r: &MetricRecord) -> String {
        if self.no_timing {
            format!("{}\t{:.6}\t{:.6e}\t-", r.step, r.loss_per_token, r.lr)
        } else {
            r.to_line()
        }
    }
}

impl TrainObserver for Reporter<'_> {
    fn on_log(&mut self, r: &MetricRecord) -> Result<(), TrainError> {
        let line = self.line(r);
        println!("{line}");
        if let Some(f) = &mut self.metrics {
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| TrainError::Hook(format!("metrics file: {e}")))?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, model: &Model) -> Result<(), TrainError> {
        let mut name = self.output.as_os_str().to_owned();
        name.push(format!(".step{step}"));
        save_checkpoint(model, self.vocab, Path::new(&name)).map_err(|e| TrainError::Hook(e.to_string()))
    }
}

fn load_data(plan: &TrainPlan) -> Result<TrainData, CliError> {
    let (train, valid) = match &plan.source {
        DataSource::Synthetic {
            task,
            pairs,
            lengths,
            symbols,
        } => {
            // Enough extra pairs that the trailing holdout leaves `pairs`
            // for training.
            let total = (*pairs as f64 / (1.0 - HOLDOUT_FRACTION)).ceil() as usize;
            let all = gen_synthetic(*task, *symbols, *lengths, total, plan.train.seed).map_err(usage)?;
            let held = total - *pairs;
            split_holdout(all, held as f64 / total as f64)
        }
        DataSource::Files { train, valid } => {
            let corpus = read_parallel(&train.0, &train.1).map_err(runtime)?;
            if corpus.skipped_blank > 0 {
                eprintln!("warning: skipped {} pairs with a blank side", corpus.skipped_blank);
            }
            match valid {
                Some(v) => (corpus.pairs, read_parallel(&v.0, &v.1).map_err(runtime)?.pairs),
                None => split_holdout(corpus.pairs, HOLDOUT_FRACTION),
            }
        }
    };
    let vocab = build_vocab(train.iter(), plan.max_vocab).map_err(runtime)?;
    Ok(TrainData { vocab, train, valid })
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut plan = plan_training(a)?;
    let data = load_data(&plan)?;
    plan.model.vocab_size = data.vocab.len();
    for w in plan.model.validate().map_err(usage)? {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "training: {} parameters, {} train / {} held-out pairs, vocabulary {}",
        plan.model.parameter_count(),
        data.train.len(),
        data.valid.len(),
        data.vocab.len()
    );
    let metrics = match &plan.metrics {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let mut reporter = Reporter {
        vocab: &data.vocab,
        output: &plan.output,
        metrics,
        no_timing: plan.no_timing,
    };
    let outcome = train(&plan.model, &plan.train, &data, &mut reporter).map_err(runtime)?;
    save_checkpoint(&outcome.model, &data.vocab, &plan.output).map_err(runtime)?;
    eprintln!("saved {}", plan.output.display());
    if let Some(eval) = &outcome.eval {
        println!("{eval}");
    }
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> CliResult {
    let (model, vocab) = load_checkpoint(&a.checkpoint).map_err(|e| runtime(format!("[{}] {e}", e.code())))?;
    let base = DecodeConfig {
        max_new_tokens: a.max_new_tokens.unwrap_or(1),
        beam_size: a.beam,
        length_penalty: a.alpha,
    };
    base.validate().map_err(usage)?;
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(BufReader::new(
            File::open(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if a.verbose {
        writeln!(
            out,
            "# checkpoint={} beam={} alpha={} max_new_tokens={}",
            a.checkpoint.display(),
            a.beam,
            a.alpha,
            a.max_new_tokens.map_or("2*len+10".to_string(), |n| n.to_string())
        )
        .map_err(runtime)?;
    }
    for line in input.lines() {
        let line = line.map_err(runtime)?;
        let source = tokenize(&line);
        let cfg = DecodeConfig {
            max_new_tokens: a.max_new_tokens.unwrap_or(2 * source.len() + 10),
            ..base
        };
        let hyp = translate(&model, &vocab, &source, &cfg).map_err(runtime)?;
        writeln!(out, "{}", hyp.join(" ")).map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(tokenize).collect())
}

fn cmd_score(a: ScoreArgs) -> CliResult {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let report = corpus_bleu(&hyps, &refs).map_err(runtime)?;
    println!("{report}");
    Ok(())
}

fn cmd_mask_dump(a: MaskDumpArgs) -> CliResult {
    let window = match (a.window, a.preset) {
        (Some(w), _) => w,
        (None, Some(p)) => {
            let windows = p.config(p.default_vocab_size()).windows;
            *windows.get(a.layer).ok_or_else(|| {
                usage(format!("preset {p} has {} layers; --layer {} is out of range", windows.len(), a.layer))
            })?
        }
        (None, None) => return Err(usage("pass --window or --preset")),
    };
    let spec = BandSpec::new(window, a.source_len, a.target_len).with_policy(a.policy);
    let mask = build_band_mask(spec).map_err(usage)?;
    println!(
        "S={} T={} window={} policy={}",
        a.source_len, a.target_len, window, a.policy
    );
    print!("{}", render_ascii(&mask));
    if let Some(p) = &a.pgm {
        let f = File::create(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        write_pgm(&mask, BufWriter::new(f)).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult {
    let cfg = a.preset.config(a.vocab_size.unwrap_or(a.preset.default_vocab_size()));
    cfg.validate().map_err(usage)?;
    let count = cfg.parameter_count();
    if count > 200_000 {
        eprintln!("warning: checking {count} parameters takes two forward passes each");
    }
    let start = std::time::Instant::now();
    let report = tiny_model_check(&cfg, a.seed).map_err(runtime)?;
    println!("{report} elapsed={:.2}s", start.elapsed().as_secs_f64());
    if report.passes(a.tol) {
        println!("max_rel_err < {:e} PASS", a.tol);
        Ok(())
    } else {
        println!("max_rel_err >= {:e} FAIL", a.tol);
        Err(runtime("gradient check failed"))
    }
}

fn cmd_param_count(a: ParamCountArgs) -> CliResult {
    let cfg = a.preset.config(a.vocab_size.unwrap_or(a.preset.default_vocab_size()));
    cfg.validate().map_err(usage)?;
    let layout = ParamSet::layout(&cfg);
    if a.verbose {
        layout.for_each(|name, s| {
            println!("{name}\t{:?}\t{}", s.shape, s.shape.iter().product::<usize>());
        });
    }
    let enumerated = layout.count();
    let closed = cfg.parameter_count();
    println!("enumerated {enumerated}");
    println!("closed-form {closed}");
    if enumerated == closed {
        Ok(())
    } else {
        Err(runtime("parameter counts disagree"))
    }
}
