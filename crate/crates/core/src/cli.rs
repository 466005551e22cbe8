//! The `ronin` command line: one subcommand per pipeline stage.
//!
//! Every subcommand reads an optional TOML file (`--config`), applies flag
//! overrides on top and writes the resolved record into its output
//! directory as `<subcommand>.resolved.toml`. Passing that file back with
//! `--config` reruns the same thing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::degrade::{generate_sources, synthesize_dataset, Dataset, DegradationKind, Protocol, ProtocolConfig, SourceConfig};
use crate::eval::{
    alignment_text, evaluate, evaluate_inputs, export_prompt_embeddings, metrics_csv, metrics_table,
    perturb_prompts_eval, prompt_alignment, write_json,
};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::grounding::{
    build_embedding_store, frame_refs, BuildOptions, EmbeddingStore, MllmClient, MockEncoder, MockMllm, SocketEncoder,
    SocketMllm, TextEncoder, DEFAULT_CANDIDATES,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::{HistoryMode, InjectionPreset, ModelConfig};
use crate::train::{train, TrainConfig, FINAL_CHECKPOINT};

pub const SEED_ENV: &str = "RONIN_SEED";

#[derive(Parser, Debug)]
#[command(name = "ronin", version, about = "Streaming all-in-one video restoration toolkit")]
pub struct Cli {
    /// TOML file with one table per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render procedural clean source clips.
    Sources(SourcesArgs),
    /// Synthesize a degraded dataset from clean sources.
    Synth(SynthArgs),
    /// Ground every LQ frame and build the embedding store.
    Ground(GroundArgs),
    /// Train a restorer.
    Train(TrainArgs),
    /// Score a checkpoint or run a prompt analysis.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SourcesArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per degradation segment.
    #[arg(long)]
    pub t: Option<usize>,
    /// Comma-separated degradation kinds replacing the protocol's list.
    #[arg(long, value_delimiter = ',')]
    pub degradations: Option<Vec<DegradationKind>>,
}

#[derive(Args, Debug)]
pub struct GroundArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Store directory (default `<dataset>/store`).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// `mock` or `socket:<addr>`.
    #[arg(long)]
    pub client: Option<String>,
    /// `mock` or `socket:<addr>`.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Comma-separated degradation words to ask about.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<String>>,
    /// Embedding dimension of the mock encoder.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub retries: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Store directory (default `<dataset>/store`).
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub injection: Option<InjectionPreset>,
    /// No prompt branch: injection disabled and the prompt loss weight set to 0.
    #[arg(long)]
    pub no_prompt: bool,
    /// Drop the gated previous-frame history path.
    #[arg(long)]
    pub no_history: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    /// PSNR / SSIM of the checkpoint and of the raw input.
    Metrics,
    /// Metrics with Gaussian noise added to the prompts.
    Perturb,
    /// Cosine between learned prompts and stored text embeddings.
    Alignment,
    /// Write learned prompts in the store format.
    Export,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Needed by `alignment` (default `<dataset>/store`).
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub analysis: Option<Analysis>,
    /// Prompt noise std for `perturb`.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourcesRun {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub source: SourceConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub src: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundRun {
    pub dataset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub client: String,
    pub encoder: String,
    pub candidates: Vec<String>,
    pub d: usize,
    /// Seed of the mock encoder's token vectors.
    pub seed: Option<u64>,
    pub jobs: usize,
    pub retries: usize,
}

impl Default for GroundRun {
    fn default() -> Self {
        Self {
            dataset: None,
            store: None,
            client: "mock".into(),
            encoder: "mock".into(),
            candidates: DEFAULT_CANDIDATES.iter().map(|s| s.to_string()).collect(),
            d: 384,
            seed: None,
            jobs: 0,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub dataset: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    pub seed: Option<u64>,
    /// Defaults to the stock config with `d` taken from the store.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub analysis: Analysis,
    pub sigma: f64,
    pub seed: Option<u64>,
    pub jobs: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            out: None,
            store: None,
            analysis: Analysis::Metrics,
            sigma: 1.0,
            seed: None,
            jobs: 0,
        }
    }
}

/// The config file: one optional table per subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sources: Option<SourcesRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground: Option<GroundRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalRun>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then config file, then `RONIN_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn required(p: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    p.with_context(|| format!("missing --{flag} (flag or config file)"))
}

fn write_resolved(dir: &Path, name: &str, cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.resolved.toml"));
    let text = toml::to_string_pretty(cfg).context("serializing resolved config")?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Sources(a) => cmd_sources(file.sources.unwrap_or_default(), a),
        Command::Synth(a) => cmd_synth(file.synth.unwrap_or_default(), a, cli.jobs),
        Command::Ground(a) => cmd_ground(file.ground.unwrap_or_default(), a, cli.jobs),
        Command::Train(a) => cmd_train(file.train.unwrap_or_default(), a),
        Command::Eval(a) => cmd_eval(file.eval.unwrap_or_default(), a, cli.jobs),
    }
}

pub fn cmd_sources(mut r: SourcesRun, a: SourcesArgs) -> Result<()> {
    r.out = a.out.or(r.out);
    r.seed = Some(resolve_seed(a.seed, r.seed)?);
    let s = &mut r.source;
    s.clips = a.clips.unwrap_or(s.clips);
    s.frames = a.frames.unwrap_or(s.frames);
    s.height = a.height.unwrap_or(s.height);
    s.width = a.width.unwrap_or(s.width);
    let out = required(r.out.clone(), "out")?;
    let ids = generate_sources(&out, &r.source, r.seed.unwrap_or_default())?;
    write_resolved(&out, "sources", &RunConfig { sources: Some(r), ..Default::default() })?;
    println!("wrote {} source clips to {}", ids.len(), out.display());
    Ok(())
}

pub fn cmd_synth(mut r: SynthRun, a: SynthArgs, jobs: Option<usize>) -> Result<()> {
    r.src = a.src.or(r.src);
    r.out = a.out.or(r.out);
    r.seed = Some(resolve_seed(a.seed, r.seed)?);
    r.jobs = jobs.unwrap_or(r.jobs);
    if let Some(p) = a.protocol {
        if p != r.protocol.protocol {
            // protocol-specific defaults (e.g. t) follow the new protocol
            let keep = r.protocol.clone();
            r.protocol = ProtocolConfig { protocol: p, ..keep };
        }
    }
    if let Some(t) = a.t {
        r.protocol.interval_t = t;
    }
    if let Some(k) = a.degradations {
        r.protocol.candidates = Some(k);
    }
    let src = required(r.src.clone(), "src")?;
    let out = required(r.out.clone(), "out")?;
    let m = synthesize_dataset(&r.protocol, &src, &out, r.seed.unwrap_or_default(), r.jobs)?;
    write_resolved(&out, "synth", &RunConfig { synth: Some(r), ..Default::default() })?;
    println!(
        "synthesized {} clips ({}, t={}) into {}",
        m.clips.len(),
        m.config.protocol,
        m.config.interval_t,
        out.display()
    );
    Ok(())
}

fn socket_addr(spec: &str) -> Result<Option<&str>> {
    match spec {
        "mock" => Ok(None),
        s => match s.strip_prefix("socket:") {
            Some(addr) if !addr.is_empty() => Ok(Some(addr)),
            _ => bail!("expected `mock` or `socket:<addr>`, got {s:?}"),
        },
    }
}

fn default_store(dataset: &Path) -> PathBuf {
    dataset.join("store")
}

pub fn cmd_ground(mut r: GroundRun, a: GroundArgs, jobs: Option<usize>) -> Result<()> {
    r.dataset = a.dataset.or(r.dataset);
    r.store = a.store.or(r.store);
    r.client = a.client.unwrap_or(r.client);
    r.encoder = a.encoder.unwrap_or(r.encoder);
    r.candidates = a.candidates.unwrap_or(r.candidates);
    r.d = a.d.unwrap_or(r.d);
    r.retries = a.retries.unwrap_or(r.retries);
    r.seed = Some(resolve_seed(None, r.seed)?);
    r.jobs = jobs.unwrap_or(r.jobs);
    let dataset = required(r.dataset.clone(), "dataset")?;
    let store_dir = r.store.clone().unwrap_or_else(|| default_store(&dataset));
    r.store = Some(store_dir.clone());
    if r.candidates.is_empty() {
        bail!("no candidate degradations");
    }
    let ds = Dataset::open(&dataset)?;
    let client: Box<dyn MllmClient> = match socket_addr(&r.client)? {
        None => Box::new(MockMllm::from_dataset(&ds)),
        Some(addr) => Box::new(SocketMllm::new(addr)),
    };
    let encoder: Box<dyn TextEncoder> = match socket_addr(&r.encoder)? {
        None => Box::new(MockEncoder::new(r.d, r.seed.unwrap_or_default())),
        Some(addr) => Box::new(SocketEncoder::new(addr)),
    };
    let opts = BuildOptions {
        dir: Some(store_dir.clone()),
        jobs: r.jobs,
        retries: r.retries,
    };
    let (store, stats) = build_embedding_store(&frame_refs(&ds), client.as_ref(), encoder.as_ref(), &r.candidates, &opts)?;
    write_resolved(&store_dir, "ground", &RunConfig { ground: Some(r), ..Default::default() })?;
    println!(
        "store {}: {} records (d={}), {} grounded, {} reused, {} parse warnings",
        store_dir.display(),
        store.len(),
        store.d(),
        stats.grounded,
        stats.reused,
        stats.parse_warnings
    );
    Ok(())
}

pub fn cmd_train(mut r: TrainRun, a: TrainArgs) -> Result<()> {
    r.dataset = a.dataset.or(r.dataset);
    r.store = a.store.or(r.store);
    r.out = a.out.or(r.out);
    let seed = resolve_seed(a.seed, r.seed)?;
    r.seed = Some(seed);
    r.train.seed = seed;
    if let Some(n) = a.iters {
        r.train.total_iters = n;
    }
    if let Some(b) = a.batch_size {
        r.train.batch_size = b;
    }
    if let Some(c) = a.crop {
        r.train.crop_size = c;
    }
    if let Some(c) = a.checkpoint_every {
        r.train.checkpoint_every = c;
    }
    let dataset = required(r.dataset.clone(), "dataset")?;
    let out = required(r.out.clone(), "out")?;
    let store_dir = r.store.clone().unwrap_or_else(|| default_store(&dataset));
    r.store = Some(store_dir.clone());
    let ds = Dataset::open(&dataset)?;
    let store = EmbeddingStore::load(&store_dir)?;
    let mut model = r.model.clone().unwrap_or_else(|| ModelConfig::toy(store.d()));
    if let Some(p) = a.injection {
        model = model.with_injection(p);
    }
    if a.no_prompt {
        model = model.with_injection(InjectionPreset::None);
        r.train.loss.lambda2 = 0.0;
    }
    if a.no_history {
        model.history_mode = HistoryMode::None;
    }
    r.model = Some(model.clone());
    write_resolved(&out, "train", &RunConfig { train: Some(r.clone()), ..Default::default() })?;
    let outcome = train(&ds, &store, model, r.train.clone(), Some(&out))?;
    let last = outcome.curve.last();
    println!(
        "trained {} steps; final loss {}; checkpoint {}",
        r.train.total_iters,
        last.map(|l| format!("{:.6}", l.total)).unwrap_or_else(|| "n/a".into()),
        out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

pub fn cmd_eval(mut r: EvalRun, a: EvalArgs, jobs: Option<usize>) -> Result<()> {
    r.checkpoint = a.checkpoint.or(r.checkpoint);
    r.dataset = a.dataset.or(r.dataset);
    r.out = a.out.or(r.out);
    r.store = a.store.or(r.store);
    r.analysis = a.analysis.unwrap_or(r.analysis);
    r.sigma = a.sigma.unwrap_or(r.sigma);
    r.seed = Some(resolve_seed(a.seed, r.seed)?);
    r.jobs = jobs.unwrap_or(r.jobs);
    let ckpt_path = required(r.checkpoint.clone(), "checkpoint")?;
    let dataset = required(r.dataset.clone(), "dataset")?;
    let out = required(r.out.clone(), "out")?;
    if r.analysis == Analysis::Alignment && r.store.is_none() {
        r.store = Some(default_store(&dataset));
    }
    let bytes = std::fs::read(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
    let id = sha256_hex(&bytes)[..12].to_string();
    let model = Checkpoint::read_from(bytes.as_slice())?.into_restorer()?;
    let ds = Dataset::open(&dataset)?;
    let seed = r.seed.unwrap_or_default();
    let jobs = r.jobs;
    std::fs::create_dir_all(&out)?;
    match r.analysis {
        Analysis::Metrics => {
            let input = evaluate_inputs(&ds, jobs)?;
            let rep = evaluate(&model, &ds, &id, jobs)?;
            write_json(&out.join("metrics.json"), &rep)?;
            write_atomic(&out.join("metrics.csv"), metrics_csv(&rep).as_bytes())?;
            write_json(&out.join("input_metrics.json"), &input)?;
            let table = metrics_table(&[("Input", vec![&input]), (id.as_str(), vec![&rep])]);
            write_atomic(&out.join("metrics.txt"), table.as_bytes())?;
            print!("{table}");
        }
        Analysis::Perturb => {
            let clean = evaluate(&model, &ds, &id, jobs)?;
            let noisy = perturb_prompts_eval(&model, &ds, &id, r.sigma, seed, jobs)?;
            write_json(&out.join("perturb.json"), &noisy)?;
            write_atomic(&out.join("perturb.csv"), metrics_csv(&noisy).as_bytes())?;
            let table = metrics_table(&[
                ("Unperturbed", vec![&clean]),
                (format!("σ={}", r.sigma).as_str(), vec![&noisy]),
            ]);
            write_atomic(&out.join("perturb.txt"), table.as_bytes())?;
            print!("{table}");
        }
        Analysis::Alignment => {
            let store_dir = r.store.clone().expect("set above");
            let store = EmbeddingStore::load(&store_dir)?;
            let rep = prompt_alignment(&model, &ds, &store, &id, seed, jobs)?;
            write_json(&out.join("alignment.json"), &rep)?;
            let text = alignment_text(&rep);
            write_atomic(&out.join("alignment.txt"), text.as_bytes())?;
            print!("{text}");
        }
        Analysis::Export => {
            let dir = out.join("prompts");
            let store = export_prompt_embeddings(&model, &ds, &id, &dir, jobs)?;
            println!("exported {} prompts (d={}) to {}", store.len(), store.d(), dir.display());
        }
    }
    write_resolved(&out, "eval", &RunConfig { eval: Some(r), ..Default::default() })?;
    Ok(())
}
