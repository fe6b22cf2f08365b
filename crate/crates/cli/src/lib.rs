//! Command-line front end: argument definitions and subcommand handlers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use pldr::cache::CacheMode;
use pldr::checkpoint;
use pldr::diagnostics::{compare_cached_uncached, head_metrics, time_inference, HeadMetricReport};
use pldr::generation::{encode_text, generate, GenerateOptions, SamplerSpec, BOS};
use pldr::model::GOverride;
use pldr::training::{pack_corpus, write_csv, LossReport, TrainConfig, Trainer};
use pldr::{ModelConfig, PldrModel, Variant};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pldr", version, about = "Train, sample and inspect PLDR-LLM decoders")]
pub struct Cli {
    /// Default seed for every random choice (overridden per command where one is taken).
    #[arg(long, global = true, env = "PLDR_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a text corpus and write a checkpoint.
    Train(TrainArgs),
    /// Generate a continuation of a prompt.
    Generate(GenerateArgs),
    /// Report deductive-output metrics for a prompt.
    Diagnose(DiagnoseArgs),
    /// Time generation with a given cache mode.
    Bench(BenchArgs),
    /// Print parameter counts of the PLGA blocks for a configuration.
    Params(ParamsArgs),
    /// Freeze the G tensors of a trainable checkpoint into a new checkpoint.
    #[command(name = "transfer-g")]
    TransferG(TransferArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OverrideKind {
    None,
    Identity,
    Random,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model config file (`key = value` lines); desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config file; desk defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UTF-8 text file (one document per line) or a directory of such files.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// Linear warmup steps.
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// DAG loss weights for A_LM, A_P and G_LM.
    #[arg(long, default_value = "0,0,0", value_parser = parse_dag)]
    pub dag: DagCoefficients,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    /// Per-step loss log as CSV.
    #[arg(long)]
    pub log_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DagCoefficients(pub [f64; 3]);

fn parse_dag(s: &str) -> std::result::Result<DagCoefficients, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got `{s}`"));
    }
    let mut out = [0.0f64; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|e| format!("`{p}`: {e}"))?;
        if !(*o >= 0.0) || !o.is_finite() {
            return Err(format!("`{p}` must be finite and non-negative"));
        }
    }
    Ok(DagCoefficients(out))
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Model checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Number of tokens to generate.
    #[arg(long, default_value_t = 32)]
    pub max_length: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Keep the k most likely tokens; 0 keeps all, 1 is greedy.
    #[arg(long, default_value_t = 0)]
    pub top_k: usize,
    /// Nucleus mass; 1 disables.
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub kv_cache: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub g_cache: Switch,
    /// Replace G at inference time (trainable models only).
    #[arg(long, value_enum, default_value_t = OverrideKind::None)]
    pub g_override: OverrideKind,
    /// Include per-step head metrics of the deductive outputs.
    #[arg(long)]
    pub capture_deductive: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Compare greedy generation with KV+G caches against no caches.
    #[arg(long)]
    pub compare_cached: bool,
    /// Tokens generated for the cached comparison.
    #[arg(long, default_value_t = 32)]
    pub max_length: usize,
    /// Also print the comparison table to standard error.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "the cat sat on the mat")]
    pub prompt: String,
    /// Tokens per generation.
    #[arg(long, default_value_t = 100)]
    pub max_length: usize,
    /// Timed runs (at least 2).
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Generations per run.
    #[arg(long, default_value_t = 10)]
    pub loops: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub kv_cache: Switch,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub g_cache: Switch,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Trainable checkpoint to read.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the transferred-G checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input not found: {}", path.display());
    }
    Ok(())
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(pldr::Error::CheckpointNotFound(path.display().to_string()).into());
    }
    Ok(())
}

fn require_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        bail!("output directory does not exist: {}", parent.display());
    }
    if path.is_dir() {
        bail!("output path is a directory: {}", path.display());
    }
    Ok(())
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ModelConfig::from_kv_text(&text)?)
        }
        None => Ok(ModelConfig::default().validate()?),
    }
}

fn cache_mode(kv: Switch, g: Switch) -> CacheMode {
    CacheMode {
        kv_enabled: kv.on(),
        g_enabled: g.on(),
    }
}

/// Documents of a corpus: lines of a file, or lines of every regular file
/// in a directory in name order.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut docs = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        docs.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    Ok(docs)
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Params(a) => params(a),
        Command::Train(a) => train(a, seed),
        Command::Generate(a) => generate_cmd(a, seed),
        Command::Diagnose(a) => diagnose(a),
        Command::Bench(a) => bench(a, seed),
        Command::TransferG(a) => transfer(a),
    }
}

fn params(a: ParamsArgs) -> Result<()> {
    if let Some(p) = &a.config {
        require_input(p)?;
    }
    let cfg = load_config(a.config.as_deref())?;
    emit(&cfg.plga_param_count(), None)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    documents: usize,
    windows: usize,
    trainable_params: u64,
    checkpoint: PathBuf,
    first: Option<LossReport>,
    last: Option<LossReport>,
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    if let Some(p) = &a.config {
        require_input(p)?;
    }
    require_input(&a.corpus)?;
    require_output(&a.checkpoint_out)?;
    if let Some(p) = &a.log_csv {
        require_output(p)?;
    }

    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.init_seed = s;
    }
    let tc = TrainConfig {
        learning_rate: a.lr,
        warmup_steps: a.warmup,
        total_steps: a.steps,
        batch_size: a.batch_size,
        dag_coefficients: a.dag.0,
        seed: seed.unwrap_or(0),
        ..TrainConfig::default()
    };
    let docs = read_corpus(&a.corpus)?;
    let windows = pack_corpus(&docs, cfg.context_length)?;
    info!("{} documents, {} training windows of {} tokens", docs.len(), windows.len(), cfg.context_length);

    let log_every = tc.log_every;
    let mut trainer = Trainer::new(PldrModel::new(cfg)?, tc)?;
    let reports = trainer.fit(&windows, |r| {
        if r.step == 1 || r.step % log_every == 0 {
            info!(
                "step {:>5}  ce {:.4}  dag {:.3e} {:.3e} {:.3e}  acc {:.3}  lr {:.2e}",
                r.step, r.cross_entropy, r.dag_losses[0], r.dag_losses[1], r.dag_losses[2], r.next_token_accuracy,
                r.learning_rate_now
            );
        }
    })?;

    checkpoint::save(&trainer.model, &a.checkpoint_out)?;
    if let Some(p) = &a.log_csv {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_csv(f, &reports)?;
    }
    emit(
        &TrainSummary {
            steps: reports.len(),
            documents: docs.len(),
            windows: windows.len(),
            trainable_params: trainer.model.trainable_param_count(),
            checkpoint: a.checkpoint_out,
            first: reports.first().cloned(),
            last: reports.last().cloned(),
        },
        None,
    )
}

#[derive(Serialize)]
struct GenerateReport {
    prompt: String,
    text: String,
    token_ids: Vec<usize>,
    sampler: SamplerSpec,
    cache_mode_used: CacheMode,
    g_override: &'static str,
    per_token_nanoseconds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    deductive: Option<Vec<HeadMetricReport>>,
}

fn generate_cmd(a: GenerateArgs, seed: Option<u64>) -> Result<()> {
    require_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.out {
        require_output(p)?;
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let seed = seed.unwrap_or(0);
    let sampler = SamplerSpec {
        temperature: a.temperature,
        top_k: a.top_k,
        top_p: a.top_p,
        rng_seed: seed,
    };
    let (g_override, label) = match a.g_override {
        OverrideKind::None => (None, "none"),
        OverrideKind::Identity => (Some(GOverride::Identity), "identity"),
        OverrideKind::Random => (Some(GOverride::RandomNormal { seed }), "random"),
    };
    let r = generate(
        &model,
        &a.prompt,
        &GenerateOptions {
            max_length: a.max_length,
            sampler: sampler.clone(),
            cache: cache_mode(a.kv_cache, a.g_cache),
            g_override,
            capture_deductive: a.capture_deductive,
        },
    )?;
    let deductive = r
        .deductive_snapshots
        .as_ref()
        .map(|snaps| snaps.iter().map(head_metrics).collect::<pldr::Result<Vec<_>>>())
        .transpose()?;
    emit(
        &GenerateReport {
            prompt: a.prompt,
            text: r.text,
            token_ids: r.token_ids,
            sampler,
            cache_mode_used: r.cache_mode_used,
            g_override: label,
            per_token_nanoseconds: r.per_token_nanoseconds,
            deductive,
        },
        a.out.as_deref(),
    )
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    require_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.out {
        require_output(p)?;
    }
    let model = checkpoint::load(&a.checkpoint)?;
    if a.compare_cached {
        let r = compare_cached_uncached(&model, &a.prompt, a.max_length)?;
        if a.table {
            eprint!("{}", r.to_table());
        }
        emit(&r, a.out.as_deref())
    } else {
        let mut ids = vec![BOS];
        ids.extend(encode_text(&a.prompt));
        let (_, ded) = model.forward_full(&[ids], true)?;
        let ded = ded.and_then(|d| d.into_iter().next()).context("no deductive outputs captured")?;
        emit(&head_metrics(&ded)?, a.out.as_deref())
    }
}

fn bench(a: BenchArgs, seed: Option<u64>) -> Result<()> {
    require_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.out {
        require_output(p)?;
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let spec = SamplerSpec {
        rng_seed: seed.unwrap_or(0),
        ..SamplerSpec::greedy()
    };
    let mode = cache_mode(a.kv_cache, a.g_cache);
    info!("timing {} runs x {} loops x {} tokens, cache {:?}", a.runs, a.loops, a.max_length, mode);
    let r = time_inference(&model, &a.prompt, &spec, a.max_length, a.runs, a.loops, mode)?;
    emit(&r, a.out.as_deref())
}

#[derive(Serialize)]
struct TransferSummary {
    source_variant: Variant,
    variant: Variant,
    trainable_params_before: u64,
    trainable_params_after: u64,
    out: PathBuf,
}

fn transfer(a: TransferArgs) -> Result<()> {
    require_checkpoint(&a.checkpoint)?;
    require_output(&a.out)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let t = model.transfer_g()?;
    checkpoint::save(&t, &a.out)?;
    emit(
        &TransferSummary {
            source_variant: model.variant(),
            variant: t.variant(),
            trainable_params_before: model.trainable_param_count(),
            trainable_params_after: t.trainable_param_count(),
            out: a.out,
        },
        None,
    )
}
