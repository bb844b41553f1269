use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use swg::calibration::solve_temperature;
use swg::data::io::{read_checkpoint, read_dataset, write_dataset};
use swg::data::synthetic::{build, BenchmarkParams, SyntheticSpec};
use swg::data::{Domain, DomainDataset};
use swg::trainer::{evaluate, run_in, write_artifacts, RunOutput, TrainConfig};

#[derive(Parser)]
#[command(name = "swg", version, about = "Strong-weak guidance for unsupervised domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair with simulated zero-shot logits.
    Gen(GenArgs),
    /// Solve for the temperature that gives the requested mean winning probability.
    Calibrate(CalibrateArgs),
    /// Train one configuration and write its artifacts.
    Train(TrainArgs),
    /// Train once per expansion fraction.
    SweepExpansion(SweepExpansionArgs),
    /// Train once per tau value (`none` uses the raw zero-shot softmax).
    SweepTau(SweepTauArgs),
    /// Target accuracy of a checkpoint on a labeled dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Directory for source.csv and target.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BenchmarkParams::default().num_classes)]
    classes: usize,
    #[arg(long, default_value_t = BenchmarkParams::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = BenchmarkParams::default().source_per_class)]
    source_per_class: usize,
    #[arg(long, default_value_t = BenchmarkParams::default().target_per_class)]
    target_per_class: usize,
    #[arg(long, default_value_t = BenchmarkParams::default().mean_scale)]
    mean_scale: f64,
    #[arg(long, default_value_t = BenchmarkParams::default().shift)]
    shift: f64,
    #[arg(long, default_value_t = BenchmarkParams::default().rotation)]
    rotation: f64,
    #[arg(long, default_value_t = BenchmarkParams::default().feature_std)]
    feature_std: f64,
    #[arg(long, default_value_t = BenchmarkParams::default().oracle_noise)]
    oracle_noise: f64,
    #[arg(long, default_value_t = BenchmarkParams::default().oracle_scale)]
    oracle_scale: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Artifact directory; created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Parent directory for one artifact directory per row.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs trained at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepExpansionArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    fractions: Vec<f64>,
}

#[derive(Args)]
struct SweepTauArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,0.95,0.99,none")]
    taus: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled target dataset.
    #[arg(long)]
    dataset: PathBuf,
}

fn echo(key: &str, value: impl std::fmt::Display) {
    println!("# {key}={value}");
}

fn echo_config(cfg: &TrainConfig) {
    for line in cfg.effective().to_text().lines() {
        println!("# {line}");
    }
}

fn load(path: &Path) -> Result<DomainDataset> {
    Ok(read_dataset(path)?)
}

fn resolve_config(args: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v).with_context(|| format!("--set {o}"))?;
    }
    cfg.effective().validate()?;
    Ok(cfg)
}

fn gen(a: &GenArgs) -> Result<()> {
    let params = BenchmarkParams {
        num_classes: a.classes,
        dim: a.dim,
        source_per_class: a.source_per_class,
        target_per_class: a.target_per_class,
        mean_scale: a.mean_scale,
        shift: a.shift,
        rotation: a.rotation,
        feature_std: a.feature_std,
        oracle_noise: a.oracle_noise,
        oracle_scale: a.oracle_scale,
        seed: a.seed,
    };
    echo("out", a.out.display());
    echo("seed", a.seed);
    echo("classes", a.classes);
    echo("dim", a.dim);
    echo("source_per_class", a.source_per_class);
    echo("target_per_class", a.target_per_class);
    echo("mean_scale", a.mean_scale);
    echo("shift", a.shift);
    echo("rotation", a.rotation);
    echo("feature_std", a.feature_std);
    echo("oracle_noise", a.oracle_noise);
    echo("oracle_scale", a.oracle_scale);
    let (source, target) = build(&SyntheticSpec::from_params(&params))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    println!("file samples zeroshot_accuracy");
    for (name, ds) in [("source.csv", &source), ("target.csv", &target)] {
        write_dataset(&a.out.join(name), ds)?;
        let acc = ds.zeroshot_accuracy().map_or("none".to_string(), |v| v.to_string());
        println!("{name} {} {acc}", ds.len());
    }
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    echo("source", a.source.display());
    echo("target", a.target.display());
    echo("tau", a.tau);
    let s = load(&a.source)?.logit_matrix(Domain::Source)?;
    let t = load(&a.target)?.logit_matrix(Domain::Target)?;
    let r = solve_temperature(&s, &t, a.tau)?;
    println!(
        "T={:.6} achieved_mean={:.6} iterations={} temperature={}",
        r.temperature, r.achieved_mean, r.iterations, r.temperature
    );
    Ok(())
}

fn train_and_write(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    out: Option<&Path>,
) -> Result<RunOutput> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let result = run_in(cfg, source, target, out)?;
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &result)?;
    }
    Ok(result)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    echo("source", a.run.source.display());
    echo("target", a.run.target.display());
    if let Some(out) = &a.out {
        echo("out", out.display());
    }
    echo_config(&cfg);
    let source = load(&a.run.source)?;
    let target = load(&a.run.target)?;
    let result = train_and_write(&cfg, &source, &target, a.out.as_deref())?;
    for m in &result.metrics {
        println!("{}", m.to_line());
    }
    println!("{}", result.summary());
    Ok(())
}

/// Runs every configuration on a pool of `jobs` threads; results keep input order.
fn sweep(a: &SweepArgs, label: &str, rows: Vec<(String, TrainConfig)>) -> Result<Vec<(String, RunOutput)>> {
    if a.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let source = load(&a.run.source)?;
    let target = load(&a.run.target)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    pool.install(|| {
        rows.into_par_iter()
            .map(|(key, cfg)| {
                let dir = a.out.as_ref().map(|o| o.join(format!("{label}_{key}")));
                let out = train_and_write(&cfg, &source, &target, dir.as_deref())
                    .with_context(|| format!("{label}={key}"))?;
                Ok((key, out))
            })
            .collect()
    })
}

fn echo_sweep(a: &SweepArgs, cfg: &TrainConfig) {
    echo("source", a.run.source.display());
    echo("target", a.run.target.display());
    if let Some(out) = &a.out {
        echo("out", out.display());
    }
    echo("jobs", a.jobs);
    echo_config(cfg);
}

fn fmt_acc(r: &RunOutput) -> String {
    r.accuracy.map_or("none".to_string(), |v| v.to_string())
}

fn sweep_expansion(a: &SweepExpansionArgs) -> Result<()> {
    let base = resolve_config(&a.sweep.run)?;
    let mut rows = Vec::with_capacity(a.fractions.len());
    for &f in &a.fractions {
        let mut cfg = base.clone();
        cfg.set("fraction", &f.to_string())?;
        cfg.effective().validate()?;
        rows.push((f.to_string(), cfg));
    }
    echo_sweep(&a.sweep, &base);
    echo("fractions", join(&a.fractions));
    let results = sweep(&a.sweep, "fraction", rows)?;
    println!("fraction accuracy temperature pseudo_source");
    for (key, r) in &results {
        println!("{key} {} {} {}", fmt_acc(r), r.temperature, r.pseudo_source);
    }
    Ok(())
}

fn sweep_tau(a: &SweepTauArgs) -> Result<()> {
    let base = resolve_config(&a.sweep.run)?;
    let mut rows = Vec::with_capacity(a.taus.len());
    for t in &a.taus {
        let mut cfg = base.clone();
        cfg.set("tau", t).with_context(|| format!("--taus value {t:?}"))?;
        cfg.effective().validate()?;
        rows.push((cfg.get("tau").expect("known key"), cfg));
    }
    echo_sweep(&a.sweep, &base);
    echo("taus", a.taus.join(","));
    let results = sweep(&a.sweep, "tau", rows)?;
    println!("tau accuracy temperature");
    for (key, r) in &results {
        println!("{key} {} {}", fmt_acc(r), r.temperature);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    echo("checkpoint", a.checkpoint.display());
    echo("dataset", a.dataset.display());
    let params = read_checkpoint(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let acc = evaluate(&params, &ds).with_context(|| format!("evaluating on {}", a.dataset.display()))?;
    println!("samples accuracy");
    println!("{} {acc}", ds.len());
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train(a),
        Command::SweepExpansion(a) => sweep_expansion(a),
        Command::SweepTau(a) => sweep_tau(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
