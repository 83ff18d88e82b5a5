//! Shared experiment steps behind the subcommands: distribution building,
//! training, full evaluation into analysis reports, and the benchmark
//! comparison tables.

use crate::config::ExperimentConfig;
use anyhow::Result;
use metarl::analysis::{
    self, AnalysisReport, BoundInputs, OptimalPolicyResult, VarianceSolverConfig,
};
use metarl::meta::{self, TrainTrace};
use metarl::policy::{DistanceMetric, SoftmaxPolicy};
use metarl::tasks::{TaskDistribution, TaskPreset};
use std::io::Write;
use std::path::Path;

pub fn uniform_init(dist: &TaskDistribution) -> SoftmaxPolicy {
    SoftmaxPolicy::uniform_tabular(dist.n_states(), dist.n_actions())
}

pub fn train(cfg: &ExperimentConfig, dist: &TaskDistribution) -> Result<TrainTrace> {
    let train_cfg = cfg.train_config()?;
    let init = uniform_init(dist);
    Ok(meta::meta_train_batched(dist, &init, &train_cfg)?)
}

pub fn write_trace(trace: &TrainTrace, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    std::fs::write(dir.join("trace.csv"), buf)?;
    std::fs::write(dir.join("final_policy.json"), trace.final_policy.to_json()?)?;
    std::fs::write(
        dir.join("checkpoints.json"),
        serde_json::to_string_pretty(&trace.checkpoints)?,
    )?;
    Ok(())
}

/// Everything the evaluation needs from one distribution, reusable across
/// meta-policies: per-task optima plus per-metric variance solutions.
pub struct EvalContext {
    pub optima: Vec<OptimalPolicyResult>,
    pub metrics: Vec<MetricContext>,
}

pub struct MetricContext {
    pub metric: DistanceMetric,
    pub variance: f64,
    pub center: SoftmaxPolicy,
    pub epsilon: f64,
    pub a_max: f64,
    /// Prescribed regularization weight; zero when the advantage bound is
    /// degenerate (reward-free tasks), in which case no bound is evaluated.
    pub lambda_theorem: f64,
}

pub fn metrics_for(bound_metric: u8) -> Vec<DistanceMetric> {
    match bound_metric {
        0 => DistanceMetric::ALL.to_vec(),
        i => vec![DistanceMetric::from_index(i).expect("validated")],
    }
}

/// Computes task optima, per-metric variance/center, the visitation floor,
/// and the advantage bound. `probes` are extra policies (trained iterates)
/// included in the floor minimization.
pub fn eval_context(
    dist: &TaskDistribution,
    tol: f64,
    metrics: &[DistanceMetric],
    probes: &[SoftmaxPolicy],
) -> Result<EvalContext> {
    let optima: Vec<OptimalPolicyResult> = dist
        .tasks
        .iter()
        .map(|t| analysis::optimal_softmax_policy(t, tol))
        .collect::<metarl::Result<_>>()?;
    let opt_policies: Vec<SoftmaxPolicy> = optima.iter().map(|o| o.policy.clone()).collect();
    let mut out = Vec::new();
    for metric in metrics {
        let var = analysis::task_variance(
            dist,
            *metric,
            &opt_policies,
            &VarianceSolverConfig::default(),
        )?;
        let mut all_probes = opt_policies.clone();
        all_probes.extend(probes.iter().cloned());
        let (epsilon, a_max) = analysis::epsilon_and_amax(dist, &var.center, &all_probes)?;
        let (l1, l2, _) = var.center.lipschitz();
        let lambda_theorem = if a_max > 0.0 {
            analysis::theorem_lambda(*metric, a_max, dist.gamma(), epsilon, l1, l2)?
        } else {
            0.0
        };
        out.push(MetricContext {
            metric: *metric,
            variance: var.variance,
            center: var.center,
            epsilon,
            a_max,
            lambda_theorem,
        });
    }
    Ok(EvalContext {
        optima,
        metrics: out,
    })
}

/// Assembles the analysis report of one meta-policy under one metric.
pub fn analyze_policy(
    cfg: &ExperimentConfig,
    dist: &TaskDistribution,
    ctx: &EvalContext,
    mc: &MetricContext,
    meta_policy: &SoftmaxPolicy,
    lambda_train: f64,
    iterations: usize,
) -> Result<AnalysisReport> {
    let (l1, l2, l3) = mc.center.lipschitz();
    // Reward-free tasks make the prescribed lambda (and the bound) undefined;
    // the gap is still well defined at the training lambda and equals zero.
    let degenerate = mc.lambda_theorem == 0.0;
    let bound_report = if degenerate {
        None
    } else {
        Some(analysis::theoretical_bound(
            &BoundInputs {
                gamma: dist.gamma(),
                r_max: dist.r_max(),
                a_max: mc.a_max,
                epsilon: mc.epsilon,
                lambda: mc.lambda_theorem,
                lipschitz: (l1, l2, l3),
                variance: mc.variance,
                t: iterations.max(1),
            },
            mc.metric,
        )?)
    };
    let train_cfg = cfg.adapt_config_for(mc.metric, lambda_train);
    let teog_train = analysis::teog(dist, meta_policy, &train_cfg, &ctx.optima)?;
    let teog_theorem = if degenerate {
        teog_train.clone()
    } else {
        let theorem_cfg = cfg.adapt_config_for(mc.metric, mc.lambda_theorem);
        analysis::teog(dist, meta_policy, &theorem_cfg, &ctx.optima)?
    };
    let curve = analysis::meta_test_curve(dist, meta_policy, &train_cfg, cfg.analysis.k_max)?;
    Ok(AnalysisReport {
        metric: mc.metric.index(),
        teog: teog_theorem.teog,
        teog_train_lambda: teog_train.teog,
        bound: bound_report.as_ref().map_or(0.0, |b| b.bound),
        variance: mc.variance,
        epsilon: mc.epsilon,
        a_max: mc.a_max,
        lambda_theorem: mc.lambda_theorem,
        lambda_train,
        constants: bound_report.as_ref().map_or(
            metarl::meta::TheoremConstants {
                b: 0.0,
                c: 0.0,
                g: 0.0,
                k: 0.0,
                m: 0.0,
            },
            |b| b.constants,
        ),
        rate_term: bound_report.as_ref().map_or(0.0, |b| b.rate_term),
        optimal_softmax_residual_max: ctx
            .optima
            .iter()
            .map(|o| o.residual)
            .fold(0.0, f64::max),
        per_task_gap: teog_theorem.per_task_gap,
        per_task_optimal: teog_theorem.per_task_optimal,
        per_task_adapted: teog_theorem.per_task_adapted,
        meta_test_curve: curve,
    })
}

pub fn write_report(report: &AnalysisReport, dir: &Path) -> Result<()> {
    let metric = report.metric;
    std::fs::write(
        dir.join(format!("report_metric{metric}.json")),
        report.to_json()?,
    )?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    std::fs::write(dir.join(format!("report_metric{metric}.csv")), buf)?;
    let mut buf = Vec::new();
    report.write_curve_csv(&mut buf)?;
    std::fs::write(dir.join(format!("curve_metric{metric}.csv")), buf)?;
    Ok(())
}

pub fn write_summary(reports: &[AnalysisReport], dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "metric,teog_theorem_lambda,teog_train_lambda,bound,variance,epsilon,a_max,lambda_theorem,lambda_train"
    )?;
    for r in reports {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{},{}",
            r.metric,
            r.teog,
            r.teog_train_lambda,
            r.bound,
            r.variance,
            r.epsilon,
            r.a_max,
            r.lambda_theorem,
            r.lambda_train
        )?;
    }
    std::fs::write(dir.join("summary.csv"), buf)?;
    Ok(())
}

/// One preset's worth of the benchmark comparison: trained meta-policy vs
/// the one-step baseline vs random initialization.
pub struct Fig1Preset {
    pub preset: TaskPreset,
    pub curves: Vec<(String, Vec<analysis::CurvePoint>)>,
    pub gap_rows: Vec<Fig1GapRow>,
}

pub struct Fig1GapRow {
    pub metric: u8,
    pub method: String,
    pub teog_train_lambda: f64,
    pub teog_theorem_lambda: f64,
    pub bound: f64,
}

pub fn run_fig1_preset(cfg: &ExperimentConfig, preset: TaskPreset) -> Result<Fig1Preset> {
    let mut preset_cfg = cfg.clone();
    preset_cfg.task.preset = Some(preset.name().into());
    let lambda_train = preset_cfg.lambda_train();
    let metric = preset_cfg.metric();
    preset_cfg.adapt.lambda = lambda_train[(metric.index() - 1) as usize];

    let dist = preset_cfg.build_distribution()?;
    let init = uniform_init(&dist);
    let train_cfg = preset_cfg.train_config()?;
    let ours = meta::meta_train_batched(&dist, &init, &train_cfg)?;
    let baseline = meta::meta_train_baseline(&dist, &init, &train_cfg)?;

    let metrics = metrics_for(preset_cfg.analysis.bound_metric);
    let probes = vec![
        init.clone(),
        ours.final_policy.clone(),
        baseline.final_policy.clone(),
    ];
    let ctx = eval_context(&dist, preset_cfg.analysis.tol, &metrics, &probes)?;

    let adapt_cfg = preset_cfg.adapt_config();
    let methods: [(&str, &SoftmaxPolicy); 3] = [
        ("ours", &ours.final_policy),
        ("one-step-baseline", &baseline.final_policy),
        ("random-init", &init),
    ];

    let mut curves = Vec::new();
    for (name, policy) in &methods {
        let curve =
            analysis::meta_test_curve(&dist, policy, &adapt_cfg, preset_cfg.analysis.k_max)?;
        curves.push((name.to_string(), curve));
    }
    // The baseline's meta-test adapts by its own one-step rule.
    let baseline_curve = baseline_one_step_curve(
        &dist,
        &baseline.final_policy,
        &preset_cfg,
        preset_cfg.analysis.k_max,
    )?;
    curves.push(("one-step-baseline-own-rule".to_string(), baseline_curve));

    let mut gap_rows = Vec::new();
    for mc in &ctx.metrics {
        for (name, policy) in &methods {
            let report = analyze_policy(
                &preset_cfg,
                &dist,
                &ctx,
                mc,
                policy,
                lambda_train[(mc.metric.index() - 1) as usize],
                preset_cfg.meta.iterations,
            )?;
            gap_rows.push(Fig1GapRow {
                metric: mc.metric.index(),
                method: name.to_string(),
                teog_train_lambda: report.teog_train_lambda,
                teog_theorem_lambda: report.teog,
                bound: report.bound,
            });
        }
    }

    Ok(Fig1Preset {
        preset,
        curves,
        gap_rows,
    })
}

/// Meta-test curve where each step is one policy-gradient step (the
/// baseline's own adaptation rule) instead of the one-shot solver.
pub fn baseline_one_step_curve(
    dist: &TaskDistribution,
    meta_policy: &SoftmaxPolicy,
    cfg: &ExperimentConfig,
    k_max: usize,
) -> Result<Vec<analysis::CurvePoint>> {
    let adapt_cfg = cfg.adapt_config();
    let n_tasks = dist.tasks.len();
    let mut returns = vec![vec![0.0f64; n_tasks]; k_max + 1];
    for (i, task) in dist.tasks.iter().enumerate() {
        let mut current = meta_policy.clone();
        returns[0][i] = metarl::mdp::accumulated_reward(task, current.probs()?.view())?;
        for k in 1..=k_max {
            current = metarl::adapt::maml_one_step(task, &current, &adapt_cfg)?.adapted;
            returns[k][i] = metarl::mdp::accumulated_reward(task, current.probs()?.view())?;
        }
    }
    let mut curve = Vec::with_capacity(k_max + 1);
    for (step, row) in returns.iter().enumerate() {
        let mean: f64 = row
            .iter()
            .zip(dist.weights.iter())
            .map(|(j, w)| j * w)
            .sum();
        let var: f64 = row
            .iter()
            .zip(dist.weights.iter())
            .map(|(j, w)| w * (j - mean) * (j - mean))
            .sum();
        curve.push(analysis::CurvePoint {
            step,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(curve)
}

pub fn write_fig1(out: &Fig1Preset, dir: &Path) -> Result<()> {
    let name = out.preset.name();
    let mut buf = Vec::new();
    write!(buf, "step")?;
    for (method, _) in &out.curves {
        write!(buf, ",{method}_mean,{method}_std")?;
    }
    writeln!(buf)?;
    let n_steps = out.curves[0].1.len();
    for step in 0..n_steps {
        write!(buf, "{step}")?;
        for (_, curve) in &out.curves {
            write!(buf, ",{},{}", curve[step].mean, curve[step].std)?;
        }
        writeln!(buf)?;
    }
    std::fs::write(dir.join(format!("fig1_curve_{name}.csv")), buf)?;

    let mut buf = Vec::new();
    writeln!(
        buf,
        "metric,method,teog_train_lambda,teog_theorem_lambda,bound"
    )?;
    for row in &out.gap_rows {
        writeln!(
            buf,
            "{},{},{},{},{}",
            row.metric, row.method, row.teog_train_lambda, row.teog_theorem_lambda, row.bound
        )?;
    }
    std::fs::write(dir.join(format!("fig1_gap_{name}.csv")), buf)?;
    Ok(())
}
