//! Config-driven experiment runner for the bilevel meta-RL toolkit.
//!
//! Subcommands: `gen-tasks`, `train`, `evaluate`, `verify`, `oracle`,
//! `repro-fig1`. Exit codes: 0 success, 2 validation error, 3 numerical
//! failure, 4 failed assertion.

mod config;
mod oracle;
mod pipeline;
mod verify;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use metarl::policy::SoftmaxPolicy;
use metarl::tasks::TaskPreset;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "metarl", version, about = "Bilevel meta-RL experiments on gridworld task distributions")]
struct Cli {
    /// Experiment config (TOML; a `.json` file is accepted as a mirror).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set meta.iterations=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (skips the run-stamped default).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Action-value estimation mode: `exact` or `mc`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Meta-policy JSON for `evaluate` (defaults to the uniform policy).
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate and persist a task distribution.
    GenTasks,
    /// Meta-train on the configured distribution.
    Train,
    /// Optimality gaps, bounds, and meta-test curves for a meta-policy.
    Evaluate,
    /// Run the invariant and property suite.
    Verify,
    /// Cross-check the exact oracles against sampling and finite differences.
    Oracle,
    /// Both presets end to end: train, compare with baselines, emit tables.
    ReproFig1,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenTasks => "gen-tasks",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Verify => "verify",
            Command::Oracle => "oracle",
            Command::ReproFig1 => "repro-fig1",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    });
}

/// 2 for validation problems, 3 for numerical failures, 4 for failed
/// assertions in `verify`/`oracle`.
fn exit_code(e: &anyhow::Error) -> i32 {
    if e.to_string().contains("check(s) failed") {
        return 4;
    }
    match e.downcast_ref::<metarl::Error>() {
        Some(
            metarl::Error::NumericalFailure { .. }
            | metarl::Error::NonConvergence { .. }
            | metarl::Error::LambdaTooSmall { .. }
            | metarl::Error::LambdaBelowConcavity { .. }
            | metarl::Error::ConcavityViolated(_)
            | metarl::Error::SingularHessian { .. }
            | metarl::Error::VisitFloorViolated(_)
            | metarl::Error::Degenerate(_)
            | metarl::Error::Generation(_),
        ) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(mode) = &cli.mode {
        overrides.push(format!("mode=\"{mode}\""));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;

    match cli.command {
        Command::Verify => return verify::run_all(),
        Command::Oracle => return oracle::run_all(),
        _ => {}
    }

    let run_dir = prepare_run_dir(&cfg, cli, cli.command.name())?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(run_dir.join("config.json"), cfg.to_json()?)?;

    match cli.command {
        Command::GenTasks => gen_tasks(&cfg, &run_dir),
        Command::Train => train(&cfg, &run_dir),
        Command::Evaluate => evaluate(&cfg, cli.policy.as_deref(), &run_dir),
        Command::ReproFig1 => repro_fig1(&cfg, &run_dir),
        Command::Verify | Command::Oracle => unreachable!(),
    }
}

fn prepare_run_dir(cfg: &ExperimentConfig, cli: &Cli, name: &str) -> Result<PathBuf> {
    let dir = match &cli.out {
        Some(out) => out.clone(),
        None => {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            Path::new(&cfg.output_dir).join(format!("{name}-{stamp}"))
        }
    };
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn gen_tasks(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let dist = cfg.build_distribution()?;
    let task_dir = run_dir.join("tasks");
    metarl::tasks::save_distribution(&dist, &task_dir)?;
    println!(
        "wrote {} tasks ({} states, {} actions) to {}",
        dist.tasks.len(),
        dist.n_states(),
        dist.n_actions(),
        task_dir.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let dist = cfg.build_distribution()?;
    let trace = pipeline::train(cfg, &dist)?;
    pipeline::write_trace(&trace, run_dir)?;
    let last = trace.records.last().expect("at least one iteration");
    println!(
        "trained {} iterations (alpha {:.3e}); final grad norm {:.3e}, meta objective {:.4}",
        trace.records.len(),
        trace.alpha,
        last.grad_norm,
        last.meta_obj
    );
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn load_policy(path: Option<&Path>, dist: &metarl::tasks::TaskDistribution) -> Result<SoftmaxPolicy> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading policy {}", p.display()))?;
            Ok(SoftmaxPolicy::from_json(&text)?)
        }
        None => Ok(pipeline::uniform_init(dist)),
    }
}

fn evaluate(cfg: &ExperimentConfig, policy_path: Option<&Path>, run_dir: &Path) -> Result<()> {
    let dist = cfg.build_distribution()?;
    let meta_policy = load_policy(policy_path, &dist)?;
    let metrics = pipeline::metrics_for(cfg.analysis.bound_metric);
    let probes = vec![meta_policy.clone(), pipeline::uniform_init(&dist)];
    let ctx = pipeline::eval_context(&dist, cfg.analysis.tol, &metrics, &probes)?;
    let lambda_train = cfg.lambda_train();
    let mut reports = Vec::new();
    for mc in &ctx.metrics {
        let report = pipeline::analyze_policy(
            cfg,
            &dist,
            &ctx,
            mc,
            &meta_policy,
            lambda_train[(mc.metric.index() - 1) as usize],
            cfg.meta.iterations,
        )?;
        println!(
            "metric {}: teog {:.4e} (train-lambda {:.4e}) <= bound {:.4e}: {}",
            report.metric,
            report.teog,
            report.teog_train_lambda,
            report.bound,
            if report.teog <= report.bound { "yes" } else { "NO" }
        );
        pipeline::write_report(&report, run_dir)?;
        reports.push(report);
    }
    pipeline::write_summary(&reports, run_dir)?;
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

fn repro_fig1(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    for preset in [TaskPreset::LowVariance, TaskPreset::HighVariance] {
        let out = pipeline::run_fig1_preset(cfg, preset)?;
        pipeline::write_fig1(&out, run_dir)?;
        let k1 = &out.curves;
        let ours = k1.iter().find(|(n, _)| n == "ours").expect("present");
        let baseline = k1
            .iter()
            .find(|(n, _)| n == "one-step-baseline-own-rule")
            .expect("present");
        println!(
            "{}: one-step mean reward ours {:.4} vs baseline {:.4}",
            preset.name(),
            ours.1[1].mean,
            baseline.1[1].mean
        );
        for row in &out.gap_rows {
            if row.method == "ours" {
                println!(
                    "  metric {}: teog {:.4e} <= bound {:.4e}: {}",
                    row.metric,
                    row.teog_theorem_lambda,
                    row.bound,
                    if row.teog_theorem_lambda <= row.bound {
                        "yes"
                    } else {
                        "NO"
                    }
                );
            }
        }
    }
    println!("artifacts in {}", run_dir.display());
    Ok(())
}
