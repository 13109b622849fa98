use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use slotfill::atomic::write_atomic;
use slotfill::backbone::{checkpoint_dtype, load_checkpoint};
use slotfill::harness::{
    self, render_svg, resolve_output, run_pipeline, write_run, RunConfig, SweepGrid, Task, TaskSpec,
};
use slotfill::probe::{dependency_probe, write_curves_csv};
use slotfill::{decode, CacheMode, DType, DecodeConfig, DecodeTrace, DraftMode, Model, Scalar, TokenId};

#[derive(Parser)]
#[command(name = "slotfill", version, about = "Slot-level plan-and-infill decoding on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL corpus.
    GenCorpus(GenCorpusArgs),
    /// Generate corpora, train, evaluate, and write the run directory.
    Train(TrainArgs),
    /// Decode prompts from a checkpoint.
    Decode(DecodeArgs),
    /// Sweep decoding hyperparameters and write accuracy/TPF per cell as CSV.
    Bench(BenchArgs),
    /// Measure dependency locality and write the curves as CSV.
    Probe(ProbeArgs),
    /// Render a decode trace as an SVG grid.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    /// Number of distinct payload values.
    #[arg(long, default_value_t = 24)]
    values: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run config whose model bounds the corpus; the toy model otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeSetup {
    /// Named decoding preset.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    tau_slot: Option<f64>,
    #[arg(long)]
    tau_token: Option<f64>,
    #[arg(short = 'k')]
    k: Option<usize>,
    #[arg(short = 'b')]
    b: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    cache_mode: Option<CacheMode>,
    /// Sample drafts with this seed instead of drafting greedily.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

impl DecodeSetup {
    fn build(&self) -> Result<DecodeConfig> {
        let mut cfg = DecodeConfig::preset(&self.preset)?;
        if let Some(v) = self.tau_slot {
            cfg.tau_slot = v;
        }
        if let Some(v) = self.tau_token {
            cfg.tau_token = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.b {
            cfg.b = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.cache_mode {
            cfg.cache_mode = v;
        }
        if let Some(seed) = self.seed {
            cfg.draft_mode = DraftMode::Sampled {
                temperature: self.temperature,
                seed,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DecodeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL file with a "prompt" array per line.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    setup: DecodeSetup,
    /// Output directory for responses.jsonl and traces.json.
    #[arg(long, default_value = "decode")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL corpus with prompts and reference responses.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    setup: DecodeSetup,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.6, 0.9])]
    tau_slots: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
    tau_tokens: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16])]
    bs: Vec<usize>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.8])]
    t_levels: Vec<f64>,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "locality.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// Trace JSON: a single trace, or an array of traces with --index.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "trace.svg")]
    out: PathBuf,
}

#[derive(Deserialize)]
struct PromptLine {
    prompt: Vec<TokenId>,
}

#[derive(Serialize)]
struct ResponseLine<'a> {
    prompt: &'a [TokenId],
    response: &'a [TokenId],
    truncated: bool,
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PromptLine = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if p.prompt.is_empty() {
            bail!("{}:{}: empty prompt", path.display(), i + 1);
        }
        out.push(p.prompt);
    }
    if out.is_empty() {
        bail!("{} holds no prompts", path.display());
    }
    Ok(out)
}

fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let ckpt = load_checkpoint::<T>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(Model::new(ckpt.config, ckpt.params)?)
}

/// Runs `$body` with `$model` bound to the checkpoint's model in its stored precision.
macro_rules! with_model {
    ($dir:expr, |$model:ident| $body:expr) => {
        match checkpoint_dtype($dir).with_context(|| format!("reading checkpoint {}", $dir.display()))? {
            DType::F32 => {
                let $model = load_model::<f32>($dir)?;
                $body
            }
            DType::F64 => {
                let $model = load_model::<f64>($dir)?;
                $body
            }
        }
    };
}

fn gen_corpus_cmd(args: GenCorpusArgs) -> Result<()> {
    let model = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => RunConfig::default().model,
    };
    let spec = TaskSpec {
        task: args.task,
        min_len: args.min_len,
        max_len: args.max_len,
        values: args.values,
    };
    let corpus = harness::gen_corpus(&spec, &model, args.n, args.seed)?;
    let mut buf = Vec::new();
    harness::write_jsonl(&corpus, &mut buf)?;
    let out = resolve_output(&args.out);
    write_atomic(&out, &buf)?;
    println!("wrote {} samples to {}", corpus.len(), out.display());
    Ok(())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let every = (cfg.steps / 20).max(1);
    let out = run_pipeline::<T>(cfg, |row| {
        if row.step % every == 0 || row.step == cfg.steps {
            eprintln!(
                "step {:>6}  arm {:.4}  mdm {:.4}  total {:.4}",
                row.step, row.arm, row.mdm, row.total
            );
        }
    })?;
    write_run(cfg, &out, dir)?;
    for r in &out.reports {
        println!("{:<12} accuracy {:.3}  tpf {:.3}", r.preset, r.accuracy, r.tpf);
    }
    println!("run written to {}", dir.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let dir = cfg.resolved_output_dir();
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(&cfg, &dir),
        DType::F64 => train_typed::<f64>(&cfg, &dir),
    }
}

fn decode_typed<T: Scalar>(model: &Model<T>, prompts: &[Vec<TokenId>], cfg: &DecodeConfig, dir: &Path) -> Result<()> {
    let mut lines = Vec::new();
    let mut traces: Vec<DecodeTrace> = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let out = decode(model, p, cfg).with_context(|| format!("prompt {}", i + 1))?;
        serde_json::to_writer(
            &mut lines,
            &ResponseLine {
                prompt: p,
                response: out.content(),
                truncated: out.truncated,
            },
        )?;
        lines.push(b'\n');
        traces.push(out.trace);
    }
    write_atomic(&dir.join("responses.jsonl"), &lines)?;
    write_atomic(&dir.join("traces.json"), serde_json::to_string_pretty(&traces)?.as_bytes())?;
    let tokens: usize = traces.iter().map(|t| t.tokens_total).sum();
    let forwards: u64 = traces.iter().map(|t| t.forwards).sum();
    println!(
        "decoded {} prompts, tpf {:.3}, output in {}",
        prompts.len(),
        tokens as f64 / forwards as f64,
        dir.display()
    );
    Ok(())
}

fn decode_cmd(args: DecodeArgs) -> Result<()> {
    let cfg = args.setup.build()?;
    let prompts = read_prompts(&args.prompts)?;
    let dir = resolve_output(&args.out);
    with_model!(&args.ckpt, |model| decode_typed(&model, &prompts, &cfg, &dir))
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let base = args.setup.build()?;
    let samples = harness::load_corpus(&args.prompts).with_context(|| format!("reading {}", args.prompts.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", args.prompts.display());
    }
    let grid = SweepGrid {
        tau_slot: args.tau_slots,
        tau_token: args.tau_tokens,
        k: args.ks,
        b: args.bs,
    };
    for (name, taus) in [("tau-slot", &grid.tau_slot), ("tau-token", &grid.tau_token)] {
        if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            bail!("--{name}s value {t} is outside [0, 1]");
        }
    }
    let rows = with_model!(&args.ckpt, |model| harness::sweep(&model, &samples, &base, &grid)?);
    if rows.is_empty() {
        bail!("no valid (k, b) combination in the grid");
    }
    let mut buf = Vec::new();
    harness::write_sweep_csv(&rows, &mut buf)?;
    let out = resolve_output(&args.out);
    write_atomic(&out, &buf)?;
    println!("{} cells written to {}", rows.len(), out.display());
    Ok(())
}

fn probe_cmd(args: ProbeArgs) -> Result<()> {
    if let Some(t) = args.t_levels.iter().find(|t| !(0.0..1.0).contains(*t)) {
        bail!("masking ratio {t} is outside [0, 1)");
    }
    let corpus = harness::load_corpus(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let curves = with_model!(&args.ckpt, |model| dependency_probe(
        &model,
        &corpus,
        &args.t_levels,
        args.samples,
        args.seed
    )?);
    let mut buf = Vec::new();
    write_curves_csv(&curves, &mut buf)?;
    let out = resolve_output(&args.out);
    write_atomic(&out, &buf)?;
    println!("locality curves written to {}", out.display());
    Ok(())
}

fn render_cmd(args: RenderArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let trace: DecodeTrace = match value {
        serde_json::Value::Array(mut all) => {
            if args.index >= all.len() {
                bail!("trace index {} out of range ({} traces)", args.index, all.len());
            }
            serde_json::from_value(all.swap_remove(args.index))?
        }
        single => serde_json::from_value(single)?,
    };
    let out = resolve_output(&args.out);
    write_atomic(&out, render_svg(&trace).as_bytes())?;
    println!("rendered {} slots to {}", trace.slots.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Render(a) => render_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
