//! Evaluation quantities: optimal softmax policies, task variance, the
//! task-expected optimality gap of one-shot adaptation, closed-form upper
//! bounds on that gap, and meta-test curves.

use crate::adapt::{self, AdaptConfig};
use crate::error::{Error, Result};
use crate::linalg::LuSolver;
use crate::mdp::{self, TabularMdp};
use crate::meta::{theorem_constants, TheoremConstants, TheoremInputs};
use crate::policy::{self, DistanceMetric, SoftmaxPolicy};
use crate::tasks::TaskDistribution;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Value iteration on the action-value table until the sup-norm update falls
/// below `tol`. Returns `(q_star, v_star)`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> (Array2<f64>, Array1<f64>) {
    let r_sa = mdp.expected_reward();
    let mut v = Array1::<f64>::zeros(mdp.n_states);
    let mut q = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut backup = r_sa[[s, a]];
                for s2 in 0..mdp.n_states {
                    backup += mdp.gamma * mdp.transition[[s, a, s2]] * v[s2];
                }
                q[[s, a]] = backup;
            }
        }
        for s in 0..mdp.n_states {
            let best = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < tol {
            break;
        }
    }
    (q, v)
}

/// Deterministic greedy policy table (ties resolved to the lowest action
/// index, so the result is reproducible).
pub fn greedy_policy(q: &Array2<f64>) -> Array2<f64> {
    let (n_states, n_actions) = q.dim();
    let mut p = Array2::<f64>::zeros((n_states, n_actions));
    for s in 0..n_states {
        let mut best = 0;
        for a in 1..n_actions {
            if q[[s, a]] > q[[s, best]] {
                best = a;
            }
        }
        p[[s, best]] = 1.0;
    }
    p
}

/// Largest logit magnitude allowed in softmax approximations of optimal
/// policies; keeps parameters bounded while leaving probabilities far below
/// any tolerance used here.
pub const LOGIT_CAP: f64 = 200.0;

#[derive(Debug, Clone)]
pub struct OptimalPolicyResult {
    pub policy: SoftmaxPolicy,
    /// `J(greedy) - J(softmax)`: the cost of the bounded-parameter softmax
    /// approximation.
    pub residual: f64,
    pub beta: f64,
    /// Return of the deterministic value-iteration optimum.
    pub j_greedy: f64,
    /// Return of the softmax approximation.
    pub j_softmax: f64,
}

/// Softmax policy approaching the value-iteration optimum: logits are
/// `beta * (q* - max_a q*)` with `beta` doubled until the return gap falls
/// below `tol` or the logit cap binds.
pub fn optimal_softmax_policy(mdp: &TabularMdp, tol: f64) -> Result<OptimalPolicyResult> {
    if !(tol > 0.0) && !tol.is_infinite() {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    let (q_star, _) = value_iteration(mdp, 1e-13);
    let greedy = greedy_policy(&q_star);
    let j_greedy = mdp::accumulated_reward(mdp, greedy.view())?;

    // Per-state shifted gaps (non-positive, zero at the argmax).
    let mut shifted = q_star.clone();
    for s in 0..mdp.n_states {
        let best = q_star.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for a in 0..mdp.n_actions {
            shifted[[s, a]] -= best;
        }
    }
    let max_gap = shifted.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let evaluate = |beta: f64| -> Result<(SoftmaxPolicy, f64)> {
        let policy = SoftmaxPolicy::tabular(shifted.mapv(|x| beta * x))?;
        let j = mdp::accumulated_reward(mdp, policy.probs()?.view())?;
        Ok((policy, j))
    };

    let mut beta = 0.0;
    let (mut best_policy, mut best_j) = evaluate(beta)?;
    if tol.is_finite() {
        let mut candidate = 1.0;
        while candidate * max_gap <= LOGIT_CAP {
            let (policy, j) = evaluate(candidate)?;
            if j > best_j {
                best_policy = policy;
                best_j = j;
                beta = candidate;
            }
            if j_greedy - best_j < tol {
                break;
            }
            candidate *= 2.0;
        }
    }
    Ok(OptimalPolicyResult {
        policy: best_policy,
        residual: j_greedy - best_j,
        beta,
        j_greedy,
        j_softmax: best_j,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceSolverConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Also start the descent from each task optimum (on top of the uniform
    /// start).
    pub multi_start: bool,
}

impl Default for VarianceSolverConfig {
    fn default() -> Self {
        VarianceSolverConfig {
            grad_tol: 1e-8,
            max_iters: 2000,
            multi_start: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceResult {
    pub variance: f64,
    pub center: SoftmaxPolicy,
    pub grad_norm: f64,
    /// Objective value at every descent start, for the sanity check that the
    /// minimum never exceeds its starts.
    pub start_values: Vec<f64>,
}

/// Mean squared policy distance from `center` to each task optimum.
pub fn variance_objective(
    dist: &TaskDistribution,
    metric: DistanceMetric,
    center: &SoftmaxPolicy,
    optima: &[SoftmaxPolicy],
) -> Result<f64> {
    let mut total = 0.0;
    for ((task, weight), opt) in dist.tasks.iter().zip(dist.weights.iter()).zip(optima) {
        total += weight * policy::policy_distance_sq(task, metric, center, opt)?;
    }
    Ok(total)
}

/// Analytic gradient of [`variance_objective`] in the tabular logit space,
/// including the dependence of the visitation weights on the center policy.
fn variance_gradient(
    dist: &TaskDistribution,
    metric: DistanceMetric,
    center: &SoftmaxPolicy,
    optima: &[SoftmaxPolicy],
) -> Result<Array1<f64>> {
    let probs = center.probs()?;
    let (n_states, n_actions) = probs.dim();
    let mut grad = Array1::<f64>::zeros(center.param_count());

    for ((task, weight), opt) in dist.tasks.iter().zip(dist.weights.iter()).zip(optima) {
        let target = opt.probs()?;
        let nu = mdp::state_visitation(task, probs.view())?;
        let p_pi = task.transition_under(probs.view());

        // Per-state squared distances u(s) and their logit gradients.
        let mut u = Array1::<f64>::zeros(n_states);
        for s in 0..n_states {
            u[s] = policy::per_state_distance_sq(metric, probs.row(s), target.row(s), None, None)?;
        }

        // Visitation term: <d nu, u> via the adjoint solve
        // y = (I - gamma P_pi)^-1 u.
        let mut system = Array2::<f64>::eye(n_states);
        system = system - &(task.gamma * &p_pi);
        let y = LuSolver::new(system.view()).solve(u.view(), "variance adjoint")?;
        for s in 0..n_states {
            let base: f64 = p_pi.row(s).dot(&y);
            for a in 0..n_actions {
                let mut push = 0.0;
                for s2 in 0..n_states {
                    push += task.transition[[s, a, s2]] * y[s2];
                }
                grad[s * n_actions + a] +=
                    weight * task.gamma * nu[s] * probs[[s, a]] * (push - base);
            }
        }

        // Distance term: nu(s) * d u(s) / d logits.
        for s in 0..n_states {
            if nu[s] == 0.0 {
                continue;
            }
            match metric {
                DistanceMetric::ForwardKl => {
                    let mut kl = 0.0;
                    for a in 0..n_actions {
                        kl += probs[[s, a]] * (probs[[s, a]] / target[[s, a]]).ln();
                    }
                    for a in 0..n_actions {
                        let lr = (probs[[s, a]] / target[[s, a]]).ln();
                        grad[s * n_actions + a] += weight * nu[s] * probs[[s, a]] * (lr - kl);
                    }
                }
                DistanceMetric::ReverseKl => {
                    for a in 0..n_actions {
                        grad[s * n_actions + a] +=
                            weight * nu[s] * (probs[[s, a]] - target[[s, a]]);
                    }
                }
                DistanceMetric::SquaredEuclidean => {
                    let mut mean_dev = 0.0;
                    for a in 0..n_actions {
                        mean_dev += probs[[s, a]] * (probs[[s, a]] - target[[s, a]]);
                    }
                    for a in 0..n_actions {
                        let dev = probs[[s, a]] - target[[s, a]];
                        grad[s * n_actions + a] +=
                            weight * nu[s] * 2.0 * probs[[s, a]] * (dev - mean_dev);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Minimizes the mean squared distance to the task optima over tabular
/// center policies by multi-start gradient descent.
pub fn task_variance(
    dist: &TaskDistribution,
    metric: DistanceMetric,
    optima: &[SoftmaxPolicy],
    cfg: &VarianceSolverConfig,
) -> Result<VarianceResult> {
    if optima.len() != dist.tasks.len() {
        return Err(Error::ShapeMismatch("one optimal policy per task required".into()));
    }
    let (n_states, n_actions) = (dist.n_states(), dist.n_actions());

    let mut starts: Vec<SoftmaxPolicy> = vec![SoftmaxPolicy::uniform_tabular(n_states, n_actions)];
    if cfg.multi_start {
        starts.extend(optima.iter().cloned());
    }

    let mut best: Option<(f64, SoftmaxPolicy, f64)> = None;
    let mut start_values = Vec::with_capacity(starts.len());
    for start in &starts {
        let v0 = variance_objective(dist, metric, start, optima)?;
        start_values.push(v0);
        let (candidate, value, grad_norm) = descend(dist, metric, start, optima, cfg)?;
        if best.as_ref().map_or(true, |(b, _, _)| value < *b) {
            best = Some((value, candidate, grad_norm));
        }
    }
    let (variance, center, grad_norm) = best.expect("at least one start");
    Ok(VarianceResult {
        variance,
        center,
        grad_norm,
        start_values,
    })
}

fn descend(
    dist: &TaskDistribution,
    metric: DistanceMetric,
    start: &SoftmaxPolicy,
    optima: &[SoftmaxPolicy],
    cfg: &VarianceSolverConfig,
) -> Result<(SoftmaxPolicy, f64, f64)> {
    // Logits are kept in a bounded box: the targets are capped softmax
    // policies, the analysis assumes bounded parameters, and unbounded
    // descent toward near-deterministic targets would underflow
    // probabilities to exact zeros.
    let cap = 1.5 * LOGIT_CAP;
    let clamp = |x: Array1<f64>| x.mapv(|v| v.clamp(-cap, cap));
    let mut current = start.clone();
    let mut value = variance_objective(dist, metric, &current, optima)?;
    let mut step = 1.0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let grad = variance_gradient(dist, metric, &current, optima)?;
        grad_norm = grad.dot(&grad).sqrt();
        if grad_norm <= cfg.grad_tol {
            break;
        }
        let params = current.params_flat();
        let mut moved = false;
        for _ in 0..60 {
            let trial = current
                .with_params_flat(clamp(&params - &grad.mapv(|x| x * step)).view())?;
            let trial_value = variance_objective(dist, metric, &trial, optima)?;
            if trial_value < value {
                current = trial;
                value = trial_value;
                step *= 2.0;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok((current, value, grad_norm))
}

/// Smallest state-visitation probability over tasks and probe policies, and
/// the largest advantage magnitude of the center policy over tasks.
pub fn epsilon_and_amax(
    dist: &TaskDistribution,
    center: &SoftmaxPolicy,
    probes: &[SoftmaxPolicy],
) -> Result<(f64, f64)> {
    let mut epsilon = f64::INFINITY;
    let center_probs = center.probs()?;
    let mut a_max: f64 = 0.0;
    for task in &dist.tasks {
        let tables = mdp::policy_evaluation(task, center_probs.view())?;
        a_max = a_max.max(tables.max_abs_adv());
        for probe in probes.iter().chain(std::iter::once(center)) {
            let nu = mdp::state_visitation(task, probe.probs()?.view())?;
            epsilon = epsilon.min(nu.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
    if !(epsilon > 0.0) {
        return Err(Error::VisitFloorViolated(
            "some state has zero visitation probability; mix uniform mass into the initial \
             distribution (rho_uniform_mix) to restore a positive floor"
                .into(),
        ));
    }
    Ok((epsilon, a_max))
}

/// Regularization weight prescribed by the optimality analysis.
pub fn theorem_lambda(
    metric: DistanceMetric,
    a_max: f64,
    gamma: f64,
    epsilon: f64,
    l1: f64,
    l2: f64,
) -> Result<f64> {
    if !(a_max > 0.0) {
        return Err(Error::Degenerate(
            "advantage bound is zero; the prescribed lambda is undefined".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::VisitFloorViolated("epsilon must be positive".into()));
    }
    Ok(match metric {
        DistanceMetric::SquaredEuclidean => {
            (6.0 * l1 * l1 + 2.0 * l2) * a_max / ((1.0 - gamma) * epsilon)
        }
        _ => 2.0 * a_max / ((1.0 - gamma) * epsilon),
    })
}

/// Inputs of the optimality-gap bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma: f64,
    pub r_max: f64,
    /// Advantage bound evaluated at the center policy.
    pub a_max: f64,
    /// State-visitation floor.
    pub epsilon: f64,
    /// Must equal the metric's prescribed lambda.
    pub lambda: f64,
    pub lipschitz: (f64, f64, f64),
    /// Task variance under the bound's metric.
    pub variance: f64,
    /// Training horizon (the `1/T` and `1/sqrt(T)` coefficients are
    /// reported; their contribution is treated as vanishing for large `T`).
    pub t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub lambda: f64,
    pub constants: TheoremConstants,
    /// `K/T + M/sqrt(T)` at the supplied horizon: the argument of the
    /// non-constructive calibration function, reported but not added to the
    /// bound.
    pub rate_term: f64,
}

/// Variance-proportional upper bound on the expected optimality gap of
/// one-shot adaptation at the prescribed lambda.
pub fn theoretical_bound(inputs: &BoundInputs, metric: DistanceMetric) -> Result<BoundReport> {
    let BoundInputs {
        gamma,
        r_max,
        a_max,
        epsilon,
        lambda,
        lipschitz: (l1, l2, l3),
        variance,
        t,
    } = *inputs;
    if variance < 0.0 {
        return Err(Error::Invalid("variance must be non-negative".into()));
    }
    let expected = theorem_lambda(metric, a_max, gamma, epsilon, l1, l2)?;
    if (lambda - expected).abs() > 1e-9 * expected.max(1.0) {
        return Err(Error::Invalid(format!(
            "lambda {lambda} is not the prescribed value {expected} for this metric"
        )));
    }
    let om = 1.0 - gamma;
    let bound = match metric {
        DistanceMetric::SquaredEuclidean => {
            ((6.0 + 4.0 * gamma) * l1 * l1 + 2.0 * l2) * a_max * variance / (om * om * epsilon)
        }
        _ => 2.0 * (1.0 + gamma) * a_max * variance / (om * om * epsilon),
    };
    let constants = theorem_constants(
        metric,
        &TheoremInputs {
            r_max,
            gamma,
            a_max,
            lambda,
            l1,
            l2,
            l3,
        },
    )?;
    let rate_term = if t > 0 {
        constants.k / t as f64 + constants.m / (t as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(BoundReport {
        bound,
        lambda,
        constants,
        rate_term,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeogReport {
    /// Weighted mean of the per-task gaps.
    pub teog: f64,
    pub per_task_gap: Vec<f64>,
    pub per_task_optimal: Vec<f64>,
    pub per_task_adapted: Vec<f64>,
}

/// Task-expected optimality gap of one-shot adaptation from `meta`:
/// the weighted mean of `J(optimal softmax) - J(adapted)`.
pub fn teog(
    dist: &TaskDistribution,
    meta: &SoftmaxPolicy,
    adapt_cfg: &AdaptConfig,
    optima: &[OptimalPolicyResult],
) -> Result<TeogReport> {
    if optima.len() != dist.tasks.len() {
        return Err(Error::ShapeMismatch("one optimal policy per task required".into()));
    }
    let mut teog = 0.0;
    let mut per_task_gap = Vec::with_capacity(dist.tasks.len());
    let mut per_task_optimal = Vec::with_capacity(dist.tasks.len());
    let mut per_task_adapted = Vec::with_capacity(dist.tasks.len());
    for ((task, weight), opt) in dist.tasks.iter().zip(dist.weights.iter()).zip(optima) {
        let result = if meta.is_tabular() {
            adapt::adapt_tabular(task, meta, adapt_cfg)?
        } else {
            adapt::adapt_linear(task, meta, adapt_cfg)?
        };
        let j_adapted = mdp::accumulated_reward(task, result.adapted.probs()?.view())?;
        let gap = opt.j_softmax - j_adapted;
        teog += weight * gap;
        per_task_gap.push(gap);
        per_task_optimal.push(opt.j_softmax);
        per_task_adapted.push(j_adapted);
    }
    Ok(TeogReport {
        teog,
        per_task_gap,
        per_task_optimal,
        per_task_adapted,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean (and spread) of the exact return across tasks after `k` repeated
/// adaptations, for `k = 0..=k_max`. Step zero is the unadapted meta-policy.
pub fn meta_test_curve(
    dist: &TaskDistribution,
    meta: &SoftmaxPolicy,
    adapt_cfg: &AdaptConfig,
    k_max: usize,
) -> Result<Vec<CurvePoint>> {
    if k_max == 0 {
        return Err(Error::Invalid("k_max must be at least 1".into()));
    }
    let n_tasks = dist.tasks.len();
    let mut returns = vec![vec![0.0f64; n_tasks]; k_max + 1];
    for (i, task) in dist.tasks.iter().enumerate() {
        returns[0][i] = mdp::accumulated_reward(task, meta.probs()?.view())?;
        let steps = adapt::repeat_adapt(task, meta, adapt_cfg, k_max)?;
        for (k, result) in steps.iter().enumerate() {
            returns[k + 1][i] =
                mdp::accumulated_reward(task, result.adapted.probs()?.view())?;
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
        curve.push(CurvePoint {
            step,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(curve)
}

/// Full evaluation summary for one distance metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub metric: u8,
    /// Gap measured with the prescribed lambda.
    pub teog: f64,
    /// Gap measured with the training lambda.
    pub teog_train_lambda: f64,
    pub bound: f64,
    pub variance: f64,
    pub epsilon: f64,
    pub a_max: f64,
    pub lambda_theorem: f64,
    pub lambda_train: f64,
    pub constants: TheoremConstants,
    pub rate_term: f64,
    pub optimal_softmax_residual_max: f64,
    pub per_task_gap: Vec<f64>,
    pub per_task_optimal: Vec<f64>,
    pub per_task_adapted: Vec<f64>,
    pub meta_test_curve: Vec<CurvePoint>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV: one row per task plus a summary row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "row,task_id,j_optimal,j_adapted,gap")?;
        for (i, gap) in self.per_task_gap.iter().enumerate() {
            writeln!(
                w,
                "task,{},{},{},{}",
                i, self.per_task_optimal[i], self.per_task_adapted[i], gap
            )?;
        }
        writeln!(
            w,
            "summary,metric={};teog={};bound={};variance={};epsilon={};a_max={},,,",
            self.metric, self.teog, self.bound, self.variance, self.epsilon, self.a_max
        )?;
        Ok(())
    }

    /// Plot data for the meta-test curve (`step,mean,std`).
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,mean,std")?;
        for p in &self.meta_test_curve {
            writeln!(w, "{},{},{}", p.step, p.mean, p.std)?;
        }
        Ok(())
    }
}
