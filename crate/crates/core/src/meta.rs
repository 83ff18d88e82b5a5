//! Meta-training: stochastic ascent on the meta-objective
//! `E_task[J(adapted(phi))]` with exact hypergradients.
//!
//! Step sizes either come from the convergence analysis (smoothness and
//! gradient-norm constants of the adapted return) or are fixed, optionally
//! with gradient-norm clipping. Traces are deterministic given the seed in
//! exact mode.

use crate::adapt::{self, AdaptConfig, QMode};
use crate::error::{Error, Result};
use crate::hypergrad;
use crate::policy::{DistanceMetric, SoftmaxPolicy};
use crate::tasks::TaskDistribution;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::time::Instant;

/// Problem constants feeding the theorem-derived step size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremInputs {
    pub r_max: f64,
    pub gamma: f64,
    pub a_max: f64,
    pub lambda: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

/// Smoothness/gradient constants of the adapted return and the derived
/// convergence-rate coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub b: f64,
    pub c: f64,
    pub g: f64,
    /// `1/T` coefficient of the averaged squared gradient-norm bound.
    pub k: f64,
    /// `1/sqrt(T)` coefficient of the averaged squared gradient-norm bound.
    pub m: f64,
}

pub fn theorem_constants(metric: DistanceMetric, inputs: &TheoremInputs) -> Result<TheoremConstants> {
    let TheoremInputs {
        r_max,
        gamma,
        a_max,
        lambda,
        l1,
        l2,
        l3,
    } = *inputs;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Invalid("gamma must lie in (0, 1)".into()));
    }
    if !(r_max > 0.0) {
        return Err(Error::Invalid("r_max must be positive".into()));
    }
    let om = 1.0 - gamma;
    let (b, c, g) = match metric {
        DistanceMetric::ForwardKl => {
            if lambda < 2.0 * a_max {
                return Err(Error::LambdaTooSmall {
                    lambda,
                    max_abs_adv: 2.0 * a_max,
                });
            }
            (
                16.0 * r_max / (lambda * om.powi(3)) + 24.0 / om + 12.0 / lambda,
                6.0 / om,
                4.0 * a_max / om.powi(2),
            )
        }
        DistanceMetric::ReverseKl => {
            if lambda < 2.0 * a_max {
                return Err(Error::LambdaTooSmall {
                    lambda,
                    max_abs_adv: 2.0 * a_max,
                });
            }
            (
                16.0 * r_max / (lambda * om.powi(3)) + 18.0 / om.powi(2),
                4.0 / om,
                2.0 * a_max / om.powi(2),
            )
        }
        DistanceMetric::SquaredEuclidean => {
            let threshold = (6.0 * l1 * l1 + 2.0 * l2) * a_max;
            if lambda <= threshold {
                return Err(Error::LambdaBelowConcavity { lambda, threshold });
            }
            let margin = lambda - threshold;
            let top = lambda + 2.0 * gamma / om * l1 * l1 * a_max;
            (
                (160.0 * l1.powi(3) + 56.0 * l1 * l2 + 4.0 * l3) * top * top
                    / (om.powi(3) * margin * margin),
                2.0 * l1 * top / (om * margin),
                l1 * a_max * top / (om * margin),
            )
        }
    };
    let k = 2.0 * (b + 2.0 * c * c) * r_max * r_max / om.powi(4);
    let m = (b + 2.0 * c * c) * g * r_max / om.powi(4);
    Ok(TheoremConstants { b, c, g, k, m })
}

/// Inverse of the smoothness constant of the adapted return: the first arm
/// of the theorem step size.
pub fn smoothness_step(constants: &TheoremConstants, inputs: &TheoremInputs) -> f64 {
    let om = 1.0 - inputs.gamma;
    1.0 / (inputs.r_max * constants.b / om.powi(2)
        + 2.0 * inputs.gamma * inputs.r_max * constants.c * constants.c / om.powi(3))
}

/// Theorem step size
/// `alpha = min{ smoothness^-1, 1 / (G sqrt(T)) }` for a horizon of `t`
/// iterations.
pub fn theorem_step_size(metric: DistanceMetric, inputs: &TheoremInputs, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Invalid("iteration horizon must be at least 1".into()));
    }
    let constants = theorem_constants(metric, inputs)?;
    let smooth = smoothness_step(&constants, inputs);
    let sqrt_arm = 1.0 / (constants.g * (t as f64).sqrt());
    Ok(smooth.min(sqrt_arm))
}

/// Horizon at which the step size switches from the smoothness arm to the
/// `1/sqrt(T)` arm.
pub fn step_size_crossover(metric: DistanceMetric, inputs: &TheoremInputs) -> Result<f64> {
    let constants = theorem_constants(metric, inputs)?;
    let smooth = smoothness_step(&constants, inputs);
    Ok(1.0 / (constants.g * smooth).powi(2))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StepRule {
    /// Theorem-derived step size, needing the advantage bound of the task
    /// distribution.
    Theorem { a_max: f64 },
    Fixed { alpha: f64 },
    FixedWithClip { alpha: f64, clip_norm: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub iterations: usize,
    pub step_rule: StepRule,
    pub adapt: AdaptConfig,
    /// Tasks per iteration. A batch covering the whole task set switches to
    /// the exact weighted expectation instead of i.i.d. sampling.
    pub batch_size: usize,
    pub seed: u64,
    /// Snapshot the meta-parameters every this many iterations (0 = never).
    pub checkpoint_every: usize,
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        match self.step_rule {
            StepRule::Fixed { alpha } | StepRule::FixedWithClip { alpha, .. } => {
                if !(alpha > 0.0) {
                    return Err(Error::Invalid("step size must be positive".into()));
                }
            }
            StepRule::Theorem { a_max } => {
                if !(a_max > 0.0) {
                    return Err(Error::Degenerate(
                        "theorem step size undefined for zero advantage bound".into(),
                    ));
                }
            }
        }
        self.adapt.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub task_ids: Vec<usize>,
    pub grad_norm: f64,
    /// Batch estimate of the meta-objective: mean adapted return.
    pub meta_obj: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub phi: Vec<f64>,
    pub rng_state_digest: String,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
    pub final_policy: SoftmaxPolicy,
    pub checkpoints: Vec<Checkpoint>,
    pub alpha: f64,
}

impl TrainTrace {
    /// Writes the per-iteration records as CSV
    /// (`iter,task_id,grad_norm,meta_obj,ms`). Multi-task batches join ids
    /// with `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,task_id,grad_norm,meta_obj,ms")?;
        for r in &self.records {
            let ids: Vec<String> = r.task_ids.iter().map(|i| i.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.iteration,
                ids.join(";"),
                r.grad_norm,
                r.meta_obj,
                r.ms
            )?;
        }
        Ok(())
    }

    /// Mean squared gradient norm over a fraction at the head or tail of the
    /// trace (used for convergence-trend checks).
    pub fn mean_sq_grad_norm(&self, fraction: f64, tail: bool) -> f64 {
        let n = self.records.len();
        let span = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let slice: Vec<&IterationRecord> = if tail {
            self.records[n - span..].iter().collect()
        } else {
            self.records[..span].iter().collect()
        };
        slice.iter().map(|r| r.grad_norm * r.grad_norm).sum::<f64>() / span as f64
    }
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut hasher = Sha256::new();
    hasher.update(rng.get_seed());
    hasher.update(rng.get_word_pos().to_le_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn weighted_sample(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Per-iteration Monte-Carlo seeds are derived from the configured seed so
/// that sampled mode stays deterministic but does not reuse one sample set.
fn adapt_cfg_for_iteration(base: &AdaptConfig, iteration: usize) -> AdaptConfig {
    let mut cfg = base.clone();
    if let QMode::MonteCarlo {
        n_rollouts,
        horizon,
        seed,
    } = cfg.q_mode
    {
        cfg.q_mode = QMode::MonteCarlo {
            n_rollouts,
            horizon,
            seed: seed.wrapping_add(iteration as u64),
        };
    }
    cfg
}

fn resolve_alpha(
    dist: &TaskDistribution,
    init: &SoftmaxPolicy,
    cfg: &MetaTrainConfig,
) -> Result<f64> {
    match cfg.step_rule {
        StepRule::Fixed { alpha } | StepRule::FixedWithClip { alpha, .. } => Ok(alpha),
        StepRule::Theorem { a_max } => {
            let r_max = dist
                .tasks
                .iter()
                .map(|t| t.reward_span())
                .fold(0.0, f64::max);
            let gamma = dist.tasks[0].gamma;
            let (l1, l2, l3) = init.lipschitz();
            let inputs = TheoremInputs {
                r_max,
                gamma,
                a_max,
                lambda: cfg.adapt.lambda,
                l1,
                l2,
                l3,
            };
            theorem_step_size(cfg.adapt.metric, &inputs, cfg.iterations)
        }
    }
}

/// Which meta-gradient drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMethod {
    /// Implicit-differentiation hypergradient through the one-shot solver.
    Bilevel,
    /// Meta-gradient of the one-step policy-gradient baseline.
    OneStepBaseline,
}

fn task_hypergradient(
    task: &crate::mdp::TabularMdp,
    policy: &SoftmaxPolicy,
    cfg: &AdaptConfig,
    method: TrainMethod,
) -> Result<(Array1<f64>, f64)> {
    let (result, grad) = match method {
        TrainMethod::Bilevel => {
            if policy.is_tabular() {
                let result = adapt::adapt_tabular(task, policy, cfg)?;
                let hg = hypergrad::hypergrad_tabular(task, policy, &result, cfg)?;
                (result, hg.grad)
            } else {
                let result = adapt::adapt_linear(task, policy, cfg)?;
                let hg = hypergrad::hypergrad_linear(task, policy, &result, cfg)?;
                (result, hg.grad)
            }
        }
        TrainMethod::OneStepBaseline => {
            let result = adapt::maml_one_step(task, policy, cfg)?;
            let grad = adapt::maml_meta_gradient(task, policy, cfg)?;
            (result, grad)
        }
    };
    let j = crate::mdp::accumulated_reward(task, result.adapted.probs()?.view())?;
    Ok((grad, j))
}

fn run_training(
    dist: &TaskDistribution,
    init: &SoftmaxPolicy,
    cfg: &MetaTrainConfig,
    method: TrainMethod,
) -> Result<TrainTrace> {
    cfg.validate()?;
    dist.validate()?;
    let n_tasks = dist.tasks.len();
    let alpha = resolve_alpha(dist, init, cfg)?;
    let full_batch = cfg.batch_size >= n_tasks;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = init.clone();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();

    for t in 0..cfg.iterations {
        let start = Instant::now();
        let adapt_cfg = adapt_cfg_for_iteration(&cfg.adapt, t);

        let (task_ids, task_weights): (Vec<usize>, Vec<f64>) = if full_batch {
            ((0..n_tasks).collect(), dist.weights.clone())
        } else {
            let mut ids: Vec<usize> = (0..cfg.batch_size)
                .map(|_| weighted_sample(&dist.weights, rng.gen::<f64>()))
                .collect();
            ids.sort_unstable();
            let w = 1.0 / ids.len() as f64;
            let weights = vec![w; ids.len()];
            (ids, weights)
        };

        let mut grad = Array1::<f64>::zeros(policy.param_count());
        let mut meta_obj = 0.0;
        for (id, w) in task_ids.iter().zip(task_weights.iter()) {
            let (g, j) = task_hypergradient(&dist.tasks[*id], &policy, &adapt_cfg, method)
                .map_err(|e| Error::at_step(t, e))?;
            grad = grad + g.mapv(|x| w * x);
            meta_obj += w * j;
        }

        let mut grad_norm = grad.dot(&grad).sqrt();
        if let StepRule::FixedWithClip { clip_norm, .. } = cfg.step_rule {
            if clip_norm.is_finite() && grad_norm > clip_norm {
                let scale = clip_norm / grad_norm;
                grad.mapv_inplace(|x| x * scale);
                grad_norm = clip_norm;
            }
        }

        let params = policy.params_flat();
        policy = policy.with_params_flat((&params + &grad.mapv(|x| alpha * x)).view())?;

        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push(Checkpoint {
                iteration: t + 1,
                phi: policy.params_flat().to_vec(),
                rng_state_digest: rng_digest(&rng),
            });
        }

        records.push(IterationRecord {
            iteration: t,
            task_ids,
            grad_norm,
            meta_obj,
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(TrainTrace {
        records,
        final_policy: policy,
        checkpoints,
        alpha,
    })
}

/// Single-task stochastic meta-training: one sampled task per iteration.
pub fn meta_train(
    dist: &TaskDistribution,
    init: &SoftmaxPolicy,
    cfg: &MetaTrainConfig,
) -> Result<TrainTrace> {
    let mut cfg = cfg.clone();
    cfg.batch_size = 1;
    run_training(dist, init, &cfg, TrainMethod::Bilevel)
}

/// Batched meta-training: hypergradients averaged over a task batch per
/// iteration, optionally clipped. A batch covering the whole task set uses
/// the exact weighted expectation.
pub fn meta_train_batched(
    dist: &TaskDistribution,
    init: &SoftmaxPolicy,
    cfg: &MetaTrainConfig,
) -> Result<TrainTrace> {
    run_training(dist, init, cfg, TrainMethod::Bilevel)
}

/// Meta-training of the one-step policy-gradient baseline under the same
/// loop, sampling, and step rules.
pub fn meta_train_baseline(
    dist: &TaskDistribution,
    init: &SoftmaxPolicy,
    cfg: &MetaTrainConfig,
) -> Result<TrainTrace> {
    run_training(dist, init, cfg, TrainMethod::OneStepBaseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TabularMdp;
    use crate::tasks::TaskDistribution;
    use ndarray::{arr1, Array3};

    fn bandit_task(q0: f64, q1: f64, gamma: f64) -> TabularMdp {
        let transition = Array3::from_elem((1, 2, 1), 1.0);
        let mut reward = Array3::zeros((1, 2, 1));
        reward[[0, 0, 0]] = q0;
        reward[[0, 1, 0]] = q1;
        TabularMdp::new(transition, reward, gamma, arr1(&[1.0])).unwrap()
    }

    fn two_bandit_distribution() -> TaskDistribution {
        TaskDistribution::new(
            vec![bandit_task(1.0, 0.0, 0.8), bandit_task(0.0, 1.0, 0.8)],
            vec![0.5, 0.5],
            0,
        )
        .unwrap()
    }

    fn train_cfg(iterations: usize, alpha: f64, lambda: f64) -> MetaTrainConfig {
        MetaTrainConfig {
            iterations,
            step_rule: StepRule::Fixed { alpha },
            adapt: AdaptConfig::exact(DistanceMetric::ReverseKl, lambda),
            batch_size: 1,
            seed: 7,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn constants_positive_and_step_size_positive() {
        let inputs = TheoremInputs {
            r_max: 1.0,
            gamma: 0.8,
            a_max: 1.0,
            lambda: 4.0,
            l1: 1.0,
            l2: 0.0,
            l3: 0.0,
        };
        for metric in DistanceMetric::ALL {
            let lambda_ok = match metric {
                DistanceMetric::SquaredEuclidean => 8.0,
                _ => 4.0,
            };
            let inputs = TheoremInputs {
                lambda: lambda_ok,
                ..inputs.clone()
            };
            let c = theorem_constants(metric, &inputs).unwrap();
            assert!(c.b > 0.0 && c.c > 0.0 && c.g > 0.0 && c.k > 0.0 && c.m > 0.0);
            for t in [1usize, 10, 1000, 1_000_000] {
                let alpha = theorem_step_size(metric, &inputs, t).unwrap();
                assert!(alpha > 0.0);
            }
        }
    }

    #[test]
    fn reverse_kl_constants_match_independent_evaluation() {
        // Re-derivation with different arithmetic grouping.
        let (r, gamma, a, lambda) = (1.0f64, 0.8f64, 1.0f64, 4.0f64);
        let inputs = TheoremInputs {
            r_max: r,
            gamma,
            a_max: a,
            lambda,
            l1: 1.0,
            l2: 0.0,
            l3: 0.0,
        };
        let c = theorem_constants(DistanceMetric::ReverseKl, &inputs).unwrap();
        let om = 1.0 - gamma;
        let b_ref = (16.0 * r) / (lambda * om * om * om) + 18.0 / (om * om);
        let c_ref = 4.0 / om;
        let g_ref = (a + a) / (om * om);
        assert!((c.b - b_ref).abs() <= 1e-12 * b_ref.abs());
        assert!((c.c - c_ref).abs() <= 1e-12 * c_ref.abs());
        assert!((c.g - g_ref).abs() <= 1e-12 * g_ref.abs());
        let kc = b_ref + c_ref * c_ref + c_ref * c_ref;
        let k_ref = kc * r * r / (om * om * om * om) * 2.0;
        let m_ref = kc * g_ref * r / (om * om * om * om);
        assert!((c.k - k_ref).abs() <= 1e-12 * k_ref.abs());
        assert!((c.m - m_ref).abs() <= 1e-12 * m_ref.abs());
    }

    #[test]
    fn step_size_switches_branch_at_crossover() {
        let inputs = TheoremInputs {
            r_max: 1.0,
            gamma: 0.8,
            a_max: 1.0,
            lambda: 4.0,
            l1: 1.0,
            l2: 0.0,
            l3: 0.0,
        };
        let metric = DistanceMetric::ReverseKl;
        let constants = theorem_constants(metric, &inputs).unwrap();
        let smooth = smoothness_step(&constants, &inputs);
        let t_star = step_size_crossover(metric, &inputs).unwrap();
        let below = (t_star * 0.25).max(1.0) as usize;
        let above = (t_star * 4.0).ceil() as usize;
        let alpha_below = theorem_step_size(metric, &inputs, below).unwrap();
        let alpha_above = theorem_step_size(metric, &inputs, above).unwrap();
        assert!((alpha_below - smooth).abs() < 1e-15, "below crossover uses smoothness arm");
        assert!(alpha_above < smooth, "above crossover uses the shrinking arm");
    }

    #[test]
    fn lambda_preconditions_rejected() {
        let inputs = TheoremInputs {
            r_max: 1.0,
            gamma: 0.8,
            a_max: 1.0,
            lambda: 1.0,
            l1: 1.0,
            l2: 0.0,
            l3: 0.0,
        };
        assert!(theorem_constants(DistanceMetric::ForwardKl, &inputs).is_err());
        assert!(theorem_constants(DistanceMetric::ReverseKl, &inputs).is_err());
        let inputs3 = TheoremInputs {
            lambda: 6.0,
            ..inputs
        };
        assert!(theorem_constants(DistanceMetric::SquaredEuclidean, &inputs3).is_err());
    }

    #[test]
    fn stationary_start_keeps_policy_fixed() {
        // Single task whose optimal policy has zero hypergradient: a task
        // with action-independent transitions and rewards.
        let transition = Array3::from_elem((1, 2, 1), 1.0);
        let reward = Array3::from_elem((1, 2, 1), 0.5);
        let task = TabularMdp::new(transition, reward, 0.8, arr1(&[1.0])).unwrap();
        let dist = TaskDistribution::new(vec![task], vec![1.0], 0).unwrap();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let trace = meta_train(&dist, &init, &train_cfg(20, 0.5, 1.0)).unwrap();
        for r in &trace.records {
            assert!(r.grad_norm < 1e-6);
        }
        let drift = (&init.params_flat() - &trace.final_policy.params_flat())
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6);
    }

    #[test]
    fn symmetric_bandits_keep_logits_symmetric_in_full_batch() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let mut cfg = train_cfg(50, 0.5, 1.0);
        cfg.batch_size = 2;
        let trace = meta_train_batched(&dist, &init, &cfg).unwrap();
        let params = trace.final_policy.params_flat();
        // Swapping the two arms is a symmetry of the distribution; the
        // averaged update cannot break it.
        assert!((params[0] - params[1]).abs() < 1e-9, "{params:?}");
    }

    #[test]
    fn batch_of_all_tasks_matches_hand_average() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::tabular(ndarray::array![[0.3, -0.2]]).unwrap();
        let cfg = {
            let mut c = train_cfg(1, 0.7, 1.0);
            c.batch_size = 2;
            c
        };
        let trace = meta_train_batched(&dist, &init, &cfg).unwrap();
        let adapt_cfg = adapt_cfg_for_iteration(&cfg.adapt, 0);
        let mut expected = Array1::<f64>::zeros(2);
        for (task, w) in dist.tasks.iter().zip(dist.weights.iter()) {
            let (g, _) =
                task_hypergradient(task, &init, &adapt_cfg, TrainMethod::Bilevel).unwrap();
            expected = expected + g.mapv(|x| w * x);
        }
        let expected_norm = expected.dot(&expected).sqrt();
        assert!((trace.records[0].grad_norm - expected_norm).abs() < 1e-12);
        let stepped = &init.params_flat() + &expected.mapv(|x| cfg_alpha(&cfg) * x);
        let got = trace.final_policy.params_flat();
        assert!((&stepped - &got).iter().all(|d| d.abs() < 1e-12));
    }

    fn cfg_alpha(cfg: &MetaTrainConfig) -> f64 {
        match cfg.step_rule {
            StepRule::Fixed { alpha } | StepRule::FixedWithClip { alpha, .. } => alpha,
            _ => unreachable!(),
        }
    }

    #[test]
    fn batch_size_one_equals_single_task_trainer() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let cfg = train_cfg(25, 0.3, 1.0);
        let a = meta_train(&dist, &init, &cfg).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.batch_size = 1;
        let b = meta_train_batched(&dist, &init, &cfg_b).unwrap();
        assert_eq!(a.final_policy.params_flat(), b.final_policy.params_flat());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.task_ids, rb.task_ids);
            assert_eq!(ra.grad_norm, rb.grad_norm);
        }
    }

    #[test]
    fn infinite_clip_matches_unclipped() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let mut unclipped = train_cfg(15, 0.4, 1.0);
        unclipped.batch_size = 2;
        let mut clipped = unclipped.clone();
        clipped.step_rule = StepRule::FixedWithClip {
            alpha: 0.4,
            clip_norm: f64::INFINITY,
        };
        let a = meta_train_batched(&dist, &init, &unclipped).unwrap();
        let b = meta_train_batched(&dist, &init, &clipped).unwrap();
        assert_eq!(a.final_policy.params_flat(), b.final_policy.params_flat());
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let cfg = train_cfg(30, 0.4, 1.0);
        let a = meta_train(&dist, &init, &cfg).unwrap();
        let b = meta_train(&dist, &init, &cfg).unwrap();
        assert_eq!(a.final_policy.params_flat(), b.final_policy.params_flat());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.task_ids, rb.task_ids);
            assert_eq!(ra.grad_norm, rb.grad_norm);
            assert_eq!(ra.meta_obj, rb.meta_obj);
        }
    }

    #[test]
    fn checkpoints_record_requested_iterations() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let mut cfg = train_cfg(10, 0.4, 1.0);
        cfg.checkpoint_every = 4;
        let trace = meta_train(&dist, &init, &cfg).unwrap();
        let iters: Vec<usize> = trace.checkpoints.iter().map(|c| c.iteration).collect();
        assert_eq!(iters, vec![4, 8]);
        assert_eq!(trace.checkpoints[0].phi.len(), 2);
        assert_eq!(trace.checkpoints[0].rng_state_digest.len(), 64);
    }

    #[test]
    fn trace_csv_has_expected_header_and_rows() {
        let dist = two_bandit_distribution();
        let init = SoftmaxPolicy::uniform_tabular(1, 2);
        let trace = meta_train(&dist, &init, &train_cfg(3, 0.4, 1.0)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,task_id,grad_norm,meta_obj,ms");
        assert_eq!(lines.len(), 4);
    }
}
