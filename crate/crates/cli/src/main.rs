use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use srcp::dataset::{generate_dataset, Generator, OfflineDataset};
use srcp::env::{write_ppm, TaskId};
use srcp::evaluate::{
    ablate, attention_report, evaluate_skill, evaluate_zero_shot, infer_task_skill, probe_linear, record_episode,
    write_ablation_csv, AblationAxis, EvalOptions, ProbeOptions,
};
use srcp::oracle::{run_theory_suite, TheorySuiteConfig};
use srcp::successor::l2_normalize;
use srcp::trainer::{pretrain, Agent, PretrainOptions, TrainConfig};
use srcp::TrainError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "srcp", version, about = "Saliency-guided successor-feature pretraining on DotWorld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write an offline dataset.
    GenerateData(GenerateArgs),
    /// Pretrain encoder, successor features and policy.
    Pretrain(PretrainArgs),
    /// Infer a task skill from labeled transitions and write it as JSON.
    InferSkill(InferArgs),
    /// Zero-shot evaluation of a checkpoint on one task.
    Evaluate(EvaluateArgs),
    /// Linear probe from frozen latents to the physical state.
    Probe(ProbeArgs),
    /// Share of saliency mass on the agent's pixels.
    AttentionReport(AttentionArgs),
    /// Sweep guidance weight or masked-loss weight.
    Ablate(AblateArgs),
    /// Exact tabular checks of the successor-measure identities and bound.
    VerifyTheory(TheoryArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Training config whose `[env]` section describes the world.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "goal-sweep")]
    generator: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the checkpoint, metrics and config copy.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long, default_value = "reach-TL")]
    task: String,
    #[arg(long, default_value_t = 10_000)]
    n_label: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    label: LabelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    label: LabelArgs,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long, default_value_t = 3.0)]
    omega: f64,
    /// Use this skill file instead of inferring one.
    #[arg(long)]
    skill: Option<PathBuf>,
    /// Write the first episode's frames as PPM images here.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    max_samples: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// `omega` or `beta`.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "reach-TL")]
    task: String,
    #[arg(long, default_value_t = 10_000)]
    n_label: usize,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, TrainError> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn task(name: &str) -> Result<TaskId, TrainError> {
    Ok(name.parse::<TaskId>()?)
}

fn emit(value: &Value, out: Option<&Path>) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TrainError::Config(e.to_string()))?;
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn read_skill(path: &Path, d: usize) -> Result<Vec<f64>, TrainError> {
    let text = fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
    let skill: Option<Vec<f64>> = v
        .get("skill")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_f64).collect());
    match skill {
        Some(z) if z.len() == d => Ok(z),
        Some(z) => Err(TrainError::Config(format!("skill has {} entries, checkpoint expects {d}", z.len()))),
        None => Err(TrainError::Config(format!("{}: no `skill` array", path.display()))),
    }
}

fn generate(a: GenerateArgs) -> Result<(), TrainError> {
    let cfg = load_config(a.config.as_deref())?;
    let generator: Generator = a.generator.parse()?;
    let ds = generate_dataset(&cfg.env, generator, a.n, a.seed)?;
    ds.save(&a.out)?;
    let m = ds.meta();
    emit(
        &json!({
            "path": a.out,
            "generator": m.generator.name(),
            "seed": m.seed,
            "transitions": m.count,
            "coverage": m.coverage,
            "env_hash": format!("{:016x}", m.env_hash),
        }),
        None,
    )
}

fn run_pretrain(a: PretrainArgs) -> Result<(), TrainError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let opts = PretrainOptions {
        out_dir: Some(a.out.clone()),
        verbose: a.verbose,
        ..Default::default()
    };
    let outcome = pretrain(&cfg, &ds, &opts)?;
    let last = outcome.metrics.last().map(to_json).unwrap_or(Value::Null);
    emit(&json!({ "out_dir": a.out, "steps": cfg.steps, "last_metrics": last }), None)
}

fn infer(a: InferArgs) -> Result<(), TrainError> {
    let agent = Agent::load(&a.checkpoint)?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let t = task(&a.label.task)?;
    let raw = infer_task_skill(&agent, &ds, t, a.label.n_label, a.label.seed)?;
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    emit(
        &json!({
            "task": t.name(),
            "n_label": a.label.n_label,
            "seed": a.label.seed,
            "ridge_eps": agent.config.network.ridge_eps,
            "raw_norm": norm,
            "raw": raw,
            "skill": l2_normalize(&raw),
        }),
        a.out.as_deref(),
    )
}

fn evaluate(a: EvaluateArgs) -> Result<(), TrainError> {
    let agent = Agent::load(&a.checkpoint)?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let t = task(&a.label.task)?;
    let opts = EvalOptions {
        n_label: a.label.n_label,
        n_episodes: a.episodes,
        seed: a.label.seed,
        omega: a.omega,
    };
    let report = match &a.skill {
        Some(path) => {
            let z = read_skill(path, agent.config.feature_dim)?;
            evaluate_skill(&agent, &ds.meta().env, t, &z, &opts)?
        }
        None => evaluate_zero_shot(&agent, &ds, t, &opts)?,
    };
    if let Some(dir) = &a.frames_dir {
        fs::create_dir_all(dir)?;
        let env = &ds.meta().env;
        let frames = record_episode(&agent, env, &report.skill, a.omega, a.label.seed)?;
        for (i, f) in frames.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("frame_{i:04}.ppm")))?);
            write_ppm(&mut w, f, env.grid_size, 8)?;
        }
    }
    emit(&to_json(&report), a.out.as_deref())
}

fn probe(a: ProbeArgs) -> Result<(), TrainError> {
    let agent = Agent::load(&a.checkpoint)?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let opts = ProbeOptions {
        max_samples: a.max_samples,
        holdout_frac: a.holdout,
        seed: a.seed,
        ..Default::default()
    };
    emit(&to_json(&probe_linear(&agent, &ds, &opts)?), a.out.as_deref())
}

fn attention(a: AttentionArgs) -> Result<(), TrainError> {
    let agent = Agent::load(&a.checkpoint)?;
    let ds = OfflineDataset::load(&a.dataset)?;
    if let Some(dir) = &a.dump_dir {
        fs::create_dir_all(dir)?;
    }
    let report = attention_report(&agent, &ds, a.n_samples, a.seed, a.dump_dir.as_deref())?;
    emit(
        &json!({ "mean": report.mean, "k_frac": report.k_frac, "n_samples": report.per_sample.len() }),
        a.out.as_deref(),
    )
}

fn run_ablate(a: AblateArgs) -> Result<(), TrainError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    let axis: AblationAxis = a.axis.parse()?;
    let ds = OfflineDataset::load(&a.dataset)?;
    let t = task(&a.task)?;
    let eval = EvalOptions {
        n_label: a.n_label,
        n_episodes: a.episodes,
        ..Default::default()
    };
    let mut train = |c: &TrainConfig| pretrain(c, &ds, &PretrainOptions::default()).map(|o| o.agent);
    let rows = ablate(&cfg, &ds, axis, &a.values, &a.seeds, t, &eval, &mut train)?;
    write_ablation_csv(&a.out, &rows)?;
    emit(&to_json(&rows), None)
}

fn verify_theory(a: TheoryArgs) -> Result<bool, TrainError> {
    let cfg = TheorySuiteConfig {
        seed: a.seed,
        ..Default::default()
    };
    let report = run_theory_suite(&cfg)?;
    emit(
        &json!({
            "pass": report.pass,
            "prop1_pass": report.prop1_pass,
            "prop2_pass": report.prop2_pass,
            "theorem_pass": report.theorem_pass,
            "max_tightness": report.max_tightness,
            "report": to_json(&report),
        }),
        a.out.as_deref(),
    )?;
    Ok(report.pass)
}

fn run(cli: Cli) -> Result<bool, TrainError> {
    match cli.command {
        Command::GenerateData(a) => generate(a).map(|_| true),
        Command::Pretrain(a) => run_pretrain(a).map(|_| true),
        Command::InferSkill(a) => infer(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Probe(a) => probe(a).map(|_| true),
        Command::AttentionReport(a) => attention(a).map(|_| true),
        Command::Ablate(a) => run_ablate(a).map(|_| true),
        Command::VerifyTheory(a) => verify_theory(a),
    }
}

/// Numeric failures exit with 3; every other failure is treated as bad
/// input and exits with 2.
fn exit_code(err: &TrainError) -> u8 {
    match err {
        TrainError::NonFinite { .. } | TrainError::SkillInference(_) | TrainError::Linalg(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: theory checks failed");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
