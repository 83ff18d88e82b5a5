//! Invariant and property suite behind the `verify` subcommand. Each check
//! prints one pass/fail line; any failure makes the command exit nonzero.

use anyhow::{bail, Result};
use metarl::adapt::{self, AdaptConfig};
use metarl::analysis;
use metarl::hypergrad;
use metarl::mdp::{self, TabularMdp};
use metarl::meta::{self, MetaTrainConfig, StepRule};
use metarl::policy::{self, DistanceMetric, SoftmaxPolicy};
use metarl::tasks::TaskPreset;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Result<String>,
}

pub const CHECKS: &[Check] = &[
    Check {
        name: "pinsker-chain",
        run: pinsker_chain,
    },
    Check {
        name: "softmax-shift-invariance",
        run: shift_invariance,
    },
    Check {
        name: "visitation-floor",
        run: visitation_floor,
    },
    Check {
        name: "sigma-nu-consistency",
        run: sigma_nu_consistency,
    },
    Check {
        name: "adaptation-ratio-bounds",
        run: ratio_bounds,
    },
    Check {
        name: "surrogate-lower-bounds",
        run: surrogate_lower_bounds,
    },
    Check {
        name: "monotone-improvement",
        run: monotone_improvement,
    },
    Check {
        name: "reverse-kl-closed-form",
        run: reverse_kl_closed_form,
    },
    Check {
        name: "hypergradient-structure",
        run: hypergradient_structure,
    },
    Check {
        name: "variance-solver-sanity",
        run: variance_solver_sanity,
    },
    Check {
        name: "training-determinism",
        run: training_determinism,
    },
    Check {
        name: "full-batch-ascent",
        run: full_batch_ascent,
    },
    Check {
        name: "stochastic-ascent-trend",
        run: stochastic_ascent_trend,
    },
];

pub fn run_all() -> Result<()> {
    let mut failures = 0;
    for check in CHECKS {
        match (check.run)() {
            Ok(detail) => println!("PASS {}: {detail}", check.name),
            Err(e) => {
                failures += 1;
                println!("FAIL {}: {e}", check.name);
            }
        }
    }
    if failures > 0 {
        bail!("{failures} verification check(s) failed");
    }
    Ok(())
}

fn random_logits(n_states: usize, n_actions: usize, scale: f64, rng: &mut ChaCha8Rng) -> SoftmaxPolicy {
    SoftmaxPolicy::tabular(Array2::from_shape_fn((n_states, n_actions), |_| {
        rng.gen_range(-scale..scale)
    }))
    .unwrap()
}

fn pinsker_chain() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let n = rng.gen_range(2usize..6);
        let draw = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            Array1::from(v)
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let tv: f64 =
            0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let kl_pq = policy::kl_divergence(p.view(), q.view())?;
        let kl_qp = policy::kl_divergence(q.view(), p.view())?;
        if tv * tv > 0.5 * kl_pq + 1e-12 || tv * tv > 0.5 * kl_qp + 1e-12 {
            bail!("violated at pair {i}: tv^2 {} kl {kl_pq}/{kl_qp}", tv * tv);
        }
    }
    Ok("1000 random pairs".into())
}

fn shift_invariance() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let policy = random_logits(3, 4, 2.0, &mut rng);
        let shift = rng.gen_range(-5.0..5.0);
        let p = policy.probs()?;
        if let SoftmaxPolicy::Tabular { logits } = &policy {
            let q = SoftmaxPolicy::tabular(logits.mapv(|x| x + shift))?.probs()?;
            if (&p - &q).iter().any(|d| d.abs() > 1e-12) {
                bail!("shifted softmax changed probabilities");
            }
        }
    }
    Ok("100 random shifts".into())
}

fn visitation_floor() -> Result<String> {
    let dist = TaskPreset::LowVariance.distribution(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_margin = f64::INFINITY;
    for task in &dist.tasks {
        let policy = random_logits(16, 4, 3.0, &mut rng);
        let nu = mdp::state_visitation(task, policy.probs()?.view())?;
        for s in 0..16 {
            let floor = (1.0 - task.gamma) * task.rho[s];
            let margin = nu[s] - floor;
            if margin < -1e-12 {
                bail!("nu({s}) = {} under floor {floor}", nu[s]);
            }
            min_margin = min_margin.min(margin);
        }
    }
    Ok(format!("20 tasks, min margin {min_margin:.3e}"))
}

fn sigma_nu_consistency() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..3 {
        let task = random_dense_mdp(4, 3, 0.85, 50 + trial, &mut rng);
        let policy = random_logits(4, 3, 1.0, &mut rng).probs()?;
        let nu = mdp::state_visitation(&task, policy.view())?;
        let mut mixed = Array2::<f64>::zeros((4, 3));
        for s in 0..4 {
            for a in 0..3 {
                let sigma = mdp::state_action_visitation(&task, policy.view(), (s, a))?;
                mixed = mixed + sigma.mapv(|x| x * nu[s] * policy[[s, a]]);
            }
        }
        // Brute-force one-step-shifted occupancy by power series.
        let mut start = Array1::<f64>::zeros(4);
        for s in 0..4 {
            for a in 0..3 {
                for s2 in 0..4 {
                    start[s2] += nu[s] * policy[[s, a]] * task.transition[[s, a, s2]];
                }
            }
        }
        let p_pi = task.transition_under(policy.view());
        let mut occupancy = Array1::<f64>::zeros(4);
        let mut dist_t = start.clone();
        let mut disc = 1.0;
        while disc >= 1e-12 {
            occupancy = occupancy + dist_t.mapv(|x| (1.0 - task.gamma) * disc * x);
            dist_t = p_pi.t().dot(&dist_t);
            disc *= task.gamma;
        }
        for s2 in 0..4 {
            for a2 in 0..3 {
                let expected = occupancy[s2] * policy[[s2, a2]];
                if (mixed[[s2, a2]] - expected).abs() > 1e-9 {
                    bail!("mixture mismatch at ({s2},{a2})");
                }
            }
        }
    }
    Ok("3 instances vs power series".into())
}

fn random_dense_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    _tag: u64,
    rng: &mut ChaCha8Rng,
) -> TabularMdp {
    let mut transition = ndarray::Array3::<f64>::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
            let sum: f64 = row.iter().sum();
            for (s2, p) in row.drain(..).enumerate() {
                transition[[s, a, s2]] = p / sum;
            }
        }
    }
    let reward =
        ndarray::Array3::from_shape_fn((n_states, n_actions, n_states), |_| rng.gen::<f64>());
    let mut rho: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.1).collect();
    let sum: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|p| *p /= sum);
    TabularMdp::new(transition, reward, gamma, Array1::from(rho)).unwrap()
}

fn ratio_bounds() -> Result<String> {
    // Stationarity of the forward-KL adaptation gives
    //   pi'/pi_meta = lambda / (lambda + E_{pi'}[A] - A(s, a))
    // with E_{pi'}[A] in [0, max|A|], so the provable two-sided bound is
    //   lambda / (lambda + 2 max|A|) <= pi'/pi_meta <= lambda / (lambda - max|A|).
    // (The one-sided tightening of the lower denominator to lambda + max|A|
    // fails on seeded instances; see the upper bound for the side that the
    // gradient-norm analysis actually consumes.)
    let dist = TaskPreset::LowVariance.distribution(6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0usize;
    for task in dist.tasks.iter().take(10) {
        let meta = random_logits(16, 4, 1.5, &mut rng);
        let probs = meta.probs()?;
        let max_adv = mdp::policy_evaluation(task, probs.view())?.max_abs_adv();
        let lambda = 1.5 * max_adv + 0.1;
        let cfg = AdaptConfig::exact(DistanceMetric::ForwardKl, lambda);
        let result = adapt::adapt_tabular(task, &meta, &cfg)?;
        let adapted = result.adapted.probs()?;
        let lo = lambda / (lambda + 2.0 * max_adv);
        let hi = lambda / (lambda - max_adv);
        for s in 0..16 {
            for a in 0..4 {
                let ratio = adapted[[s, a]] / probs[[s, a]];
                if !(lo - 1e-9..=hi + 1e-9).contains(&ratio) {
                    bail!("ratio {ratio} outside [{lo}, {hi}]");
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} ratios within the two-sided bound"))
}

fn surrogate_lower_bounds() -> Result<String> {
    let dist = TaskPreset::LowVariance.distribution(8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = f64::INFINITY;
    for i in 0..300 {
        let task = &dist.tasks[i % dist.tasks.len()];
        let a_pol = random_logits(16, 4, 2.0, &mut rng);
        let b_pol = random_logits(16, 4, 2.0, &mut rng);
        let margin = surrogate_bound_margin(task, &a_pol, &b_pol)?;
        if margin < -1e-10 {
            bail!("lower bound violated by {margin:e} at pair {i}");
        }
        worst = worst.min(margin);
    }
    Ok(format!("900 inequalities, smallest slack {worst:.3e}"))
}

/// Smallest slack of the surrogate lower bound across the three metrics for
/// one policy pair.
fn surrogate_bound_margin(
    task: &TabularMdp,
    base: &SoftmaxPolicy,
    other: &SoftmaxPolicy,
) -> Result<f64> {
    let p = base.probs()?;
    let q = other.probs()?;
    let tables = mdp::policy_evaluation(task, p.view())?;
    let nu = mdp::state_visitation(task, p.view())?;
    let j_base = task.rho.dot(&mdp::policy_evaluation(task, p.view())?.v);
    let j_other = task.rho.dot(&mdp::policy_evaluation(task, q.view())?.v);
    let a_max = tables.max_abs_adv();
    let eps = nu.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma = task.gamma;
    let mut expected_adv = 0.0;
    for s in 0..task.n_states {
        for a in 0..task.n_actions {
            expected_adv += nu[s] * q[[s, a]] * tables.adv[[s, a]];
        }
    }
    let lead = expected_adv / (1.0 - gamma);
    let mut min_margin = f64::INFINITY;
    for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
        let d2 = policy::policy_distance_sq(task, metric, base, other)?;
        let coeff = 2.0 * gamma * a_max / ((1.0 - gamma) * (1.0 - gamma) * eps);
        min_margin = min_margin.min((j_other - j_base) - (lead - coeff * d2));
    }
    // Parameter-distance form with unit score Lipschitz constant.
    let d2 = (&base.params_flat() - &other.params_flat())
        .mapv(|x| x * x)
        .sum();
    let coeff = 4.0 * gamma * a_max / ((1.0 - gamma) * (1.0 - gamma) * eps);
    min_margin = min_margin.min((j_other - j_base) - (lead - coeff * d2));
    Ok(min_margin)
}

fn monotone_improvement() -> Result<String> {
    let dist = TaskPreset::LowVariance.distribution(10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::INFINITY;
    for i in 0..60 {
        let task = &dist.tasks[i % dist.tasks.len()];
        let meta = random_logits(16, 4, 2.0, &mut rng);
        let probs = meta.probs()?;
        let j0 = mdp::accumulated_reward(task, probs.view())?;
        let tables = mdp::policy_evaluation(task, probs.view())?;
        let nu = mdp::state_visitation(task, probs.view())?;
        let eps = nu.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = tables.max_abs_adv().max(1e-12);
        for metric in DistanceMetric::ALL {
            let lambda =
                analysis::theorem_lambda(metric, a_max, task.gamma, eps, 1.0, 0.0)?;
            let cfg = AdaptConfig::exact(metric, lambda);
            let result = adapt::adapt_tabular(task, &meta, &cfg)?;
            let j1 = mdp::accumulated_reward(task, result.adapted.probs()?.view())?;
            if j1 < j0 - 1e-10 {
                bail!("metric {:?}: J dropped {j0} -> {j1}", metric);
            }
            worst = worst.min(j1 - j0);
        }
    }
    Ok(format!("180 adaptations, smallest improvement {worst:.3e}"))
}

fn reverse_kl_closed_form() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let meta = random_logits(4, 3, 1.0, &mut rng);
        let p = meta.probs()?;
        let q = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let lambda = 0.9;
        let cfg = AdaptConfig::exact(DistanceMetric::ReverseKl, lambda);
        let result = adapt::adapt_tabular_with_q(&meta, &q, &cfg, None)?;
        let adapted = result.adapted.probs()?;
        for s in 0..4 {
            let objective = |pi: &Array1<f64>| -> f64 {
                let mut v = 0.0;
                for a in 0..3 {
                    v += pi[a] * q[[s, a]];
                    if pi[a] > 0.0 {
                        v -= lambda * pi[a] * (pi[a] / p[[s, a]]).ln();
                    }
                }
                v
            };
            let ours = objective(&adapted.row(s).to_owned());
            // Dirichlet search plus projected-gradient polish.
            let mut best = f64::NEG_INFINITY;
            let mut best_pi = adapted.row(s).to_owned();
            for _ in 0..20_000 {
                let mut pi: Vec<f64> = (0..3).map(|_| -rng.gen::<f64>().ln()).collect();
                let sum: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|x| *x /= sum);
                let pi = Array1::from(pi);
                let v = objective(&pi);
                if v > best {
                    best = v;
                    best_pi = pi;
                }
            }
            let mut pi = best_pi;
            let mut step = 0.05;
            for _ in 0..2000 {
                let grad = Array1::from_shape_fn(3, |a| {
                    q[[s, a]] - lambda * ((pi[a].max(1e-300) / p[[s, a]]).ln() + 1.0)
                });
                let trial = adapt::project_to_simplex((&pi + &grad.mapv(|x| x * step)).view());
                if objective(&trial) > objective(&pi) {
                    pi = trial;
                    step *= 1.5;
                } else {
                    step *= 0.5;
                }
            }
            let brute = objective(&pi).max(best);
            if ours < brute - 1e-8 {
                bail!("state {s}: closed form {ours} below brute force {brute}");
            }
            worst = worst.min(ours - brute);
        }
    }
    Ok(format!("20 states, worst objective slack {worst:.3e}"))
}

fn hypergradient_structure() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst_row: f64 = 0.0;
    for trial in 0..3 {
        let task = random_dense_mdp(4, 3, 0.8, trial, &mut rng);
        let meta = random_logits(4, 3, 1.0, &mut rng);
        for metric in DistanceMetric::ALL {
            let cfg = AdaptConfig::exact(metric, 3.0);
            let result = adapt::adapt_tabular(&task, &meta, &cfg)?;
            let hg = hypergrad::hypergrad_tabular_general(&task, &meta, &result, &cfg)?;
            for jac in hg.per_state_jacobians.as_ref().unwrap() {
                for col in jac.sum_axis(ndarray::Axis(0)).iter() {
                    if col.abs() > 1e-9 {
                        bail!("jacobian columns sum to {col} under {:?}", metric);
                    }
                    worst_row = worst_row.max(col.abs());
                }
            }
            if let Some(bound) = hg.diagnostics.norm_bound {
                if hg.norm() > bound + 1e-12 {
                    bail!("norm {} above bound {bound} under {:?}", hg.norm(), metric);
                }
            }
        }
    }
    Ok(format!("9 instances, max row-sum deviation {worst_row:.3e}"))
}

fn variance_solver_sanity() -> Result<String> {
    let dist = metarl::tasks::make_task_distribution(
        4,
        &TaskPreset::LowVariance.spec(14),
        14,
    )?;
    let optima: Vec<SoftmaxPolicy> = dist
        .tasks
        .iter()
        .map(|t| Ok(analysis::optimal_softmax_policy(t, 1e-5)?.policy))
        .collect::<Result<_>>()?;
    for metric in DistanceMetric::ALL {
        let result = analysis::task_variance(
            &dist,
            metric,
            &optima,
            &analysis::VarianceSolverConfig::default(),
        )?;
        for v0 in &result.start_values {
            if result.variance > v0 + 1e-12 {
                bail!(
                    "variance {} exceeds start value {v0} under {:?}",
                    result.variance,
                    metric
                );
            }
        }
    }
    Ok("minimum never exceeds its starts".into())
}

fn training_determinism() -> Result<String> {
    let dist = metarl::tasks::make_task_distribution(
        3,
        &TaskPreset::LowVariance.spec(15),
        15,
    )?;
    let init = SoftmaxPolicy::uniform_tabular(16, 4);
    let cfg = MetaTrainConfig {
        iterations: 10,
        step_rule: StepRule::Fixed { alpha: 2.0 },
        adapt: AdaptConfig::exact(DistanceMetric::ForwardKl, 0.25),
        batch_size: 3,
        seed: 99,
        checkpoint_every: 5,
    };
    let a = meta::meta_train_batched(&dist, &init, &cfg)?;
    let b = meta::meta_train_batched(&dist, &init, &cfg)?;
    if a.final_policy.params_flat() != b.final_policy.params_flat() {
        bail!("final parameters differ between identical runs");
    }
    for (ra, rb) in a.records.iter().zip(b.records.iter()) {
        if ra.grad_norm != rb.grad_norm || ra.meta_obj != rb.meta_obj {
            bail!("iteration records differ between identical runs");
        }
    }
    Ok("two identical 10-iteration runs bit-equal".into())
}

fn full_batch_ascent() -> Result<String> {
    // Theorem step size with exact mode: the full-batch meta-objective must
    // be non-decreasing (up to 1e-10) because the step is below 1/smoothness.
    let dist = metarl::tasks::make_task_distribution(
        5,
        &TaskPreset::LowVariance.spec(16),
        16,
    )?;
    let init = SoftmaxPolicy::uniform_tabular(16, 4);
    let center = SoftmaxPolicy::uniform_tabular(16, 4);
    let (eps, a_max) = analysis::epsilon_and_amax(&dist, &center, &[init.clone()])?;
    let metric = DistanceMetric::ReverseKl;
    let lambda = analysis::theorem_lambda(metric, a_max, dist.gamma(), eps, 1.0, 0.0)?;
    let cfg = MetaTrainConfig {
        iterations: 40,
        step_rule: StepRule::Theorem { a_max },
        adapt: AdaptConfig::exact(metric, lambda),
        batch_size: 5,
        seed: 1,
        checkpoint_every: 0,
    };
    let trace = meta::meta_train_batched(&dist, &init, &cfg)?;
    let mut non_decreasing = 0usize;
    for w in trace.records.windows(2) {
        if w[1].meta_obj >= w[0].meta_obj - 1e-10 {
            non_decreasing += 1;
        } else {
            bail!(
                "full-batch objective dropped from {} to {}",
                w[0].meta_obj,
                w[1].meta_obj
            );
        }
    }
    Ok(format!(
        "{non_decreasing}/{} steps non-decreasing at alpha {:.3e}",
        trace.records.len() - 1,
        trace.alpha
    ))
}

fn stochastic_ascent_trend() -> Result<String> {
    // Single-task sampling at the theorem step size: the exact meta-objective
    // (recomputed over the whole twenty-task set at every iterate) must be
    // non-decreasing in at least 90% of the steps. Small task subsets do not
    // satisfy this; the full preset does.
    let dist = TaskPreset::LowVariance.distribution(17)?;
    let init = SoftmaxPolicy::uniform_tabular(16, 4);
    let center = SoftmaxPolicy::uniform_tabular(16, 4);
    let (eps, a_max) = analysis::epsilon_and_amax(&dist, &center, &[init.clone()])?;
    let metric = DistanceMetric::ReverseKl;
    let lambda = analysis::theorem_lambda(metric, a_max, dist.gamma(), eps, 1.0, 0.0)?;
    let adapt_cfg = AdaptConfig::exact(metric, lambda);
    let cfg = MetaTrainConfig {
        iterations: 60,
        step_rule: StepRule::Theorem { a_max },
        adapt: adapt_cfg.clone(),
        batch_size: 1,
        seed: 3,
        checkpoint_every: 1,
    };
    let trace = meta::meta_train(&dist, &init, &cfg)?;
    let objective = |policy: &SoftmaxPolicy| -> Result<f64> {
        let mut total = 0.0;
        for (task, w) in dist.tasks.iter().zip(dist.weights.iter()) {
            let adapted = adapt::adapt_tabular(task, policy, &adapt_cfg)?.adapted;
            total += w * mdp::accumulated_reward(task, adapted.probs()?.view())?;
        }
        Ok(total)
    };
    let mut previous = objective(&init)?;
    let mut non_decreasing = 0usize;
    let total = trace.checkpoints.len();
    let template = SoftmaxPolicy::uniform_tabular(16, 4);
    for checkpoint in &trace.checkpoints {
        let phi = template.with_params_flat(Array1::from(checkpoint.phi.clone()).view())?;
        let value = objective(&phi)?;
        if value >= previous - 1e-10 {
            non_decreasing += 1;
        }
        previous = value;
    }
    let fraction = non_decreasing as f64 / total as f64;
    if fraction < 0.9 {
        bail!("only {non_decreasing}/{total} sampled steps non-decreasing");
    }
    Ok(format!("{non_decreasing}/{total} sampled steps non-decreasing"))
}
