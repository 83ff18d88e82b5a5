//! Hypergradients of the meta-objective through the one-shot adaptation.
//!
//! The meta-objective is `J(adapted(phi))` where `adapted(phi)` solves the
//! regularized within-task problem. Differentiating through the lower-level
//! optimum by implicit differentiation of its stationarity conditions gives
//! exact gradients without unrolling any solver:
//!
//! * tabular policies -- the per-state KKT system is differentiated through a
//!   projected inverse of the per-state regularizer Hessian `M(s)`; the two
//!   KL metrics admit simplified assemblies with diagonal `M(s)`;
//! * linear-feature policies -- the stationarity of the ratio-form objective
//!   is differentiated, with Hessian-inverse products computed by conjugate
//!   gradient on a symmetry-probed operator.
//!
//! A coordinate-wise central-difference oracle (re-solving the lower level
//! per perturbation) validates every path.

use crate::adapt::{self, AdaptConfig, AdaptResult, QMode};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseOperator, LuSolver};
use crate::mdp::{self, TabularMdp};
use crate::policy::{self, DistanceMetric, SoftmaxPolicy};
use ndarray::{Array1, Array2, ArrayView1};

#[derive(Debug, Clone, Default)]
pub struct HypergradDiagnostics {
    pub cg_iterations: Option<usize>,
    pub cg_residual: Option<f64>,
    /// Worst conditioning of the per-state regularizer Hessians
    /// (max diagonal over min diagonal), tabular path only.
    pub m_condition_max: Option<f64>,
    /// Closed-form upper bound on the hypergradient norm, when the
    /// regularization weight is in the regime where the bound applies.
    pub norm_bound: Option<f64>,
    /// Norm of the visitation cross-term contribution that the simplified
    /// stationarity formula omits (linear path only). Large values flag
    /// feature maps far from the per-state decoupled regime.
    pub stated_formula_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Hypergradient {
    /// Flat gradient in the meta-parameter space (row-major `(s, a)` for
    /// tabular policies).
    pub grad: Array1<f64>,
    /// Per-state Jacobians `d pi'(.|s) / d phi` of shape `A x P`, when the
    /// general assembly produced them.
    pub per_state_jacobians: Option<Vec<Array2<f64>>>,
    pub diagnostics: HypergradDiagnostics,
}

impl Hypergradient {
    pub fn norm(&self) -> f64 {
        self.grad.dot(&self.grad).sqrt()
    }
}

/// Gradient of the exact action value `Q(s, a)` of the meta-policy with
/// respect to the meta-parameters: the discounted visitation from the pair,
/// weighted by score-gradient times advantage.
pub fn grad_q_wrt_meta(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    s: usize,
    a: usize,
) -> Result<Array1<f64>> {
    let all = grad_q_all(mdp, meta)?;
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(Error::Invalid(format!("pair ({s}, {a}) out of range")));
    }
    Ok(all.row(s * mdp.n_actions + a).to_owned())
}

/// `grad_q_all[(s * A + a), k] = d Q(s, a) / d phi_k` for all pairs at once.
pub fn grad_q_all(mdp: &TabularMdp, meta: &SoftmaxPolicy) -> Result<Array2<f64>> {
    let probs = meta.probs()?;
    let tables = mdp::policy_evaluation(mdp, probs.view())?;
    let marginals = mdp::state_action_visitation_marginals(mdp, probs.view())?;
    let scale = mdp.gamma / (1.0 - mdp.gamma);
    let n_pairs = mdp.n_states * mdp.n_actions;
    let mut out = Array2::<f64>::zeros((n_pairs, meta.param_count()));

    match meta {
        SoftmaxPolicy::Tabular { .. } => {
            // Entry (s2, a2): scale * sigma_marginal(s2) * pi(a2|s2) * adv(s2, a2).
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let row = s * mdp.n_actions + a;
                    for s2 in 0..mdp.n_states {
                        let m = marginals[[s, a, s2]];
                        if m == 0.0 {
                            continue;
                        }
                        for a2 in 0..mdp.n_actions {
                            out[[row, s2 * mdp.n_actions + a2]] =
                                scale * m * probs[[s2, a2]] * tables.adv[[s2, a2]];
                        }
                    }
                }
            }
        }
        SoftmaxPolicy::Linear { features, .. } => {
            // E over the visitation of feature(s2, a2) * adv(s2, a2).
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let row = s * mdp.n_actions + a;
                    let mut acc = Array1::<f64>::zeros(meta.param_count());
                    for s2 in 0..mdp.n_states {
                        let m = marginals[[s, a, s2]];
                        if m == 0.0 {
                            continue;
                        }
                        for a2 in 0..mdp.n_actions {
                            let w = m * probs[[s2, a2]] * tables.adv[[s2, a2]];
                            if w == 0.0 {
                                continue;
                            }
                            acc = acc
                                + features
                                    .slice(ndarray::s![s2, a2, ..])
                                    .mapv(|x| scale * w * x);
                        }
                    }
                    out.row_mut(row).assign(&acc);
                }
            }
        }
    }
    Ok(out)
}

/// Flat gradient of `pi_phi(a|s)` wrt the tabular meta-logits:
/// `pi(a|s) * (indicator(s, a) - policy row embedded at state s)`.
fn tabular_prob_gradient(probs: &Array2<f64>, s: usize, a: usize) -> Array1<f64> {
    let (n_states, n_actions) = probs.dim();
    let mut g = Array1::<f64>::zeros(n_states * n_actions);
    for a2 in 0..n_actions {
        g[s * n_actions + a2] = -probs[[s, a]] * probs[[s, a2]];
    }
    g[s * n_actions + a] += probs[[s, a]];
    g
}

struct TabularContext {
    meta_probs: Array2<f64>,
    adapted_probs: Array2<f64>,
    nu_adapted: Array1<f64>,
    adv_adapted: Array2<f64>,
    max_abs_adv_adapted: f64,
    max_abs_adv_meta: f64,
    grad_q: Array2<f64>,
}

fn tabular_context(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    result: &AdaptResult,
) -> Result<TabularContext> {
    if !meta.is_tabular() {
        return Err(Error::Invalid("tabular hypergradient needs a tabular meta-policy".into()));
    }
    let meta_probs = meta.probs()?;
    let adapted_probs = result.adapted.probs()?;
    if adapted_probs.dim() != meta_probs.dim() {
        return Err(Error::ShapeMismatch("adapted policy shape mismatch".into()));
    }
    let tables_meta = mdp::policy_evaluation(mdp, meta_probs.view())?;
    let tables_adapted = mdp::policy_evaluation(mdp, adapted_probs.view())?;
    let nu_adapted = mdp::state_visitation(mdp, adapted_probs.view())?;
    let grad_q = grad_q_all(mdp, meta)?;
    Ok(TabularContext {
        meta_probs,
        adapted_probs,
        nu_adapted,
        max_abs_adv_adapted: tables_adapted.max_abs_adv(),
        adv_adapted: tables_adapted.adv,
        max_abs_adv_meta: tables_meta.max_abs_adv(),
        grad_q,
    })
}

fn forward_kl_norm_bound(ctx: &TabularContext, lambda: f64, gamma: f64) -> Option<f64> {
    if lambda <= ctx.max_abs_adv_meta {
        return None;
    }
    let a_adapted = ctx.max_abs_adv_adapted;
    Some(
        a_adapted / (1.0 - gamma)
            * (a_adapted * gamma / ((lambda - ctx.max_abs_adv_meta) * (1.0 - gamma)) + 2.0),
    )
}

fn reverse_kl_norm_bound(ctx: &TabularContext, lambda: f64, gamma: f64) -> f64 {
    let a_adapted = ctx.max_abs_adv_adapted;
    a_adapted / (1.0 - gamma) * (a_adapted * gamma / (lambda * (1.0 - gamma)) + 1.0)
}

/// Hypergradient for a tabular meta-policy, using the simplified assembly
/// for the KL metrics (diagonal regularizer Hessians) and the projected
/// general assembly for the Euclidean metric.
pub fn hypergrad_tabular(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    result: &AdaptResult,
    cfg: &AdaptConfig,
) -> Result<Hypergradient> {
    let ctx = tabular_context(mdp, meta, result)?;
    let (n_states, n_actions) = ctx.meta_probs.dim();
    let n_params = n_states * n_actions;
    let scale = 1.0 / (1.0 - mdp.gamma);
    let lambda = cfg.lambda;

    let mut grad = Array1::<f64>::zeros(n_params);
    match cfg.metric {
        DistanceMetric::ForwardKl => {
            for s in 0..n_states {
                if ctx.nu_adapted[s] == 0.0 {
                    continue;
                }
                // Advantage recentering by the M(s)^-1-weighted mean.
                let weights: Vec<f64> = (0..n_actions)
                    .map(|a| {
                        ctx.adapted_probs[[s, a]] * ctx.adapted_probs[[s, a]]
                            / ctx.meta_probs[[s, a]]
                    })
                    .collect();
                let w_sum: f64 = weights.iter().sum();
                let c: f64 = (0..n_actions)
                    .map(|a| ctx.adv_adapted[[s, a]] * weights[a])
                    .sum::<f64>()
                    / w_sum;
                for a in 0..n_actions {
                    let coeff = scale
                        * ctx.nu_adapted[s]
                        * ctx.adapted_probs[[s, a]]
                        * (ctx.adv_adapted[[s, a]] - c);
                    if coeff == 0.0 {
                        continue;
                    }
                    let ratio = ctx.adapted_probs[[s, a]] / (lambda * ctx.meta_probs[[s, a]]);
                    grad = grad + ctx.grad_q.row(s * n_actions + a).mapv(|x| coeff * ratio * x);
                    // Score-gradient part: indicator minus the meta row.
                    grad[s * n_actions + a] += coeff;
                    for a2 in 0..n_actions {
                        grad[s * n_actions + a2] -= coeff * ctx.meta_probs[[s, a2]];
                    }
                }
            }
        }
        DistanceMetric::ReverseKl => {
            for s in 0..n_states {
                if ctx.nu_adapted[s] == 0.0 {
                    continue;
                }
                for a in 0..n_actions {
                    let coeff = scale
                        * ctx.nu_adapted[s]
                        * ctx.adapted_probs[[s, a]]
                        * ctx.adv_adapted[[s, a]];
                    if coeff == 0.0 {
                        continue;
                    }
                    grad =
                        grad + ctx.grad_q.row(s * n_actions + a).mapv(|x| coeff / lambda * x);
                    grad[s * n_actions + a] += coeff;
                }
            }
        }
        DistanceMetric::SquaredEuclidean => {
            return hypergrad_tabular_general(mdp, meta, result, cfg);
        }
    }

    let norm_bound = match cfg.metric {
        DistanceMetric::ForwardKl => forward_kl_norm_bound(&ctx, lambda, mdp.gamma),
        DistanceMetric::ReverseKl => Some(reverse_kl_norm_bound(&ctx, lambda, mdp.gamma)),
        DistanceMetric::SquaredEuclidean => None,
    };

    Ok(Hypergradient {
        grad,
        per_state_jacobians: None,
        diagnostics: HypergradDiagnostics {
            norm_bound,
            ..Default::default()
        },
    })
}

/// General projected-inverse assembly of the tabular hypergradient, valid
/// for all three metrics; also returns the per-state policy Jacobians.
pub fn hypergrad_tabular_general(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    result: &AdaptResult,
    cfg: &AdaptConfig,
) -> Result<Hypergradient> {
    let ctx = tabular_context(mdp, meta, result)?;
    let (n_states, n_actions) = ctx.meta_probs.dim();
    let n_params = n_states * n_actions;
    let scale = 1.0 / (1.0 - mdp.gamma);
    let lambda = cfg.lambda;

    let mut grad = Array1::<f64>::zeros(n_params);
    let mut jacobians = Vec::with_capacity(n_states);
    let mut m_condition_max: f64 = 1.0;

    // Actions squeezed to (numerically) zero probability by the Euclidean
    // projection stay at zero under small perturbations, so differentiation
    // restricts to the active set of each state.
    const ACTIVE_TOL: f64 = 1e-12;

    for s in 0..n_states {
        let active: Vec<usize> = (0..n_actions)
            .filter(|a| ctx.adapted_probs[[s, *a]] > ACTIVE_TOL)
            .collect();
        // Diagonal (or scalar) inverse of M(s) = lambda * per-state Hessian
        // of the distance, on the active set.
        let m_inv: Vec<f64> = match cfg.metric {
            DistanceMetric::ForwardKl => active
                .iter()
                .map(|a| {
                    ctx.adapted_probs[[s, *a]] * ctx.adapted_probs[[s, *a]]
                        / (lambda * ctx.meta_probs[[s, *a]])
                })
                .collect(),
            DistanceMetric::ReverseKl => active
                .iter()
                .map(|a| ctx.adapted_probs[[s, *a]] / lambda)
                .collect(),
            DistanceMetric::SquaredEuclidean => vec![1.0 / (2.0 * lambda); active.len()],
        };
        if m_inv.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::SingularHessian { state: s });
        }
        let hi = m_inv.iter().copied().fold(f64::MIN, f64::max);
        let lo = m_inv.iter().copied().fold(f64::MAX, f64::min);
        m_condition_max = m_condition_max.max(hi / lo);

        // R rows: grad_phi Q(s, a) - lambda * grad_phi grad_pi d^2.
        let mut r = Array2::<f64>::zeros((active.len(), n_params));
        for (row_idx, a) in active.iter().enumerate() {
            let a = *a;
            let mut row = ctx.grad_q.row(s * n_actions + a).to_owned();
            match cfg.metric {
                DistanceMetric::ForwardKl => {
                    // + lambda * grad_phi pi_phi(a|s) / pi'(a|s)
                    let g = tabular_prob_gradient(&ctx.meta_probs, s, a);
                    row = row + g.mapv(|x| lambda * x / ctx.adapted_probs[[s, a]]);
                }
                DistanceMetric::ReverseKl => {
                    // + lambda * grad_phi ln pi_phi(a|s)
                    let g = tabular_prob_gradient(&ctx.meta_probs, s, a);
                    row = row + g.mapv(|x| lambda * x / ctx.meta_probs[[s, a]]);
                }
                DistanceMetric::SquaredEuclidean => {
                    // + 2 lambda * grad_phi pi_phi(a|s)
                    let g = tabular_prob_gradient(&ctx.meta_probs, s, a);
                    row = row + g.mapv(|x| 2.0 * lambda * x);
                }
            }
            r.row_mut(row_idx).assign(&row);
        }

        // Projected inverse on the active set:
        // M^-1 - M^-1 1 1^T M^-1 / (1^T M^-1 1).
        let m_inv_sum: f64 = m_inv.iter().sum();
        let mut jac = Array2::<f64>::zeros((n_actions, n_params));
        let mut m_inv_r = r.clone();
        for row_idx in 0..active.len() {
            let w = m_inv[row_idx];
            m_inv_r.row_mut(row_idx).mapv_inplace(|x| x * w);
        }
        let col_sums = m_inv_r.sum_axis(ndarray::Axis(0));
        for (row_idx, a) in active.iter().enumerate() {
            let correction = m_inv[row_idx] / m_inv_sum;
            let row = &m_inv_r.row(row_idx) - &col_sums.view().mapv(|x| x * correction);
            jac.row_mut(*a).assign(&row);
        }

        if ctx.nu_adapted[s] > 0.0 {
            for a in 0..n_actions {
                let coeff = scale * ctx.nu_adapted[s] * ctx.adv_adapted[[s, a]];
                if coeff == 0.0 {
                    continue;
                }
                grad = grad + jac.row(a).mapv(|x| coeff * x);
            }
        }
        jacobians.push(jac);
    }

    let norm_bound = match cfg.metric {
        DistanceMetric::ForwardKl => forward_kl_norm_bound(&ctx, lambda, mdp.gamma),
        DistanceMetric::ReverseKl => Some(reverse_kl_norm_bound(&ctx, lambda, mdp.gamma)),
        DistanceMetric::SquaredEuclidean => None,
    };

    Ok(Hypergradient {
        grad,
        per_state_jacobians: Some(jacobians),
        diagnostics: HypergradDiagnostics {
            m_condition_max: Some(m_condition_max),
            norm_bound,
            ..Default::default()
        },
    })
}

/// Gradient of the state-visitation distribution wrt the policy parameters:
/// an `S x P` matrix with `[s, k] = d nu(s) / d phi_k`.
pub fn visitation_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<Array2<f64>> {
    let probs = policy.probs()?;
    let nu = mdp::state_visitation(mdp, probs.view())?;
    let p_pi = mdp.transition_under(probs.view());
    let mut system = Array2::<f64>::eye(mdp.n_states);
    system = system - &(mdp.gamma * &p_pi.t());
    let solver = LuSolver::new(system.view());

    let n_params = policy.param_count();
    let mut out = Array2::<f64>::zeros((mdp.n_states, n_params));
    // d nu = gamma * (I - gamma P^T)^-1 (dP^T) nu, assembled per parameter.
    // dP(s, s2)/dphi_k = sum_a pi(a|s) glp_k(s, a) P(s2|s, a).
    let mut glp = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            glp.push(policy.log_prob_gradient(s, a)?);
        }
    }
    for k in 0..n_params {
        let mut rhs = Array1::<f64>::zeros(mdp.n_states);
        for s in 0..mdp.n_states {
            if nu[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions {
                let w = probs[[s, a]] * glp[s * mdp.n_actions + a][k];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..mdp.n_states {
                    rhs[s2] += nu[s] * w * mdp.transition[[s, a, s2]];
                }
            }
        }
        let col = solver.solve(rhs.view(), "visitation gradient")?;
        for s2 in 0..mdp.n_states {
            out[[s2, k]] = mdp.gamma * col[s2];
        }
    }
    Ok(out)
}

/// Hypergradient for a linear-feature meta-policy by exact implicit
/// differentiation of the ratio-form stationarity condition.
///
/// The Hessian-inverse product is computed by conjugate gradient after a
/// symmetry probe. The returned diagnostics include the norm of the
/// visitation cross-term that the per-state-stationarity simplification
/// would drop; it vanishes in the decoupled-feature regime.
pub fn hypergrad_linear(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    result: &AdaptResult,
    cfg: &AdaptConfig,
) -> Result<Hypergradient> {
    if meta.is_tabular() {
        return Err(Error::Invalid("hypergrad_linear needs a linear-feature meta-policy".into()));
    }
    let adapted = &result.adapted;
    let n = meta.param_count();
    let meta_probs = meta.probs()?;
    let adapted_probs = adapted.probs()?;
    let tables_meta = mdp::policy_evaluation(mdp, meta_probs.view())?;
    let (l1, l2, _) = meta.lipschitz();
    if cfg.metric == DistanceMetric::SquaredEuclidean {
        let threshold = (6.0 * l1 * l1 + 2.0 * l2) * tables_meta.max_abs_adv();
        if cfg.lambda <= threshold {
            return Err(Error::LambdaBelowConcavity {
                lambda: cfg.lambda,
                threshold,
            });
        }
    }
    if result.diagnostics.kkt_residual > cfg.inner_tol.max(1e-8) {
        return Err(Error::NumericalFailure {
            what: "lower-level stationarity before implicit differentiation".into(),
            residual: result.diagnostics.kkt_residual,
        });
    }
    let nu = mdp::state_visitation(mdp, meta_probs.view())?;
    let q = &result.q_used;

    // Score gradients g(s, a) = grad ln pi(a|s) for the adapted and meta
    // policies, and per-state covariance of the adapted scores.
    let mut g_adapted = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    let mut g_meta = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            g_adapted.push(adapted.log_prob_gradient(s, a)?);
            g_meta.push(meta.log_prob_gradient(s, a)?);
        }
    }
    // Negated lower-level Hessian (positive definite at a strict maximum).
    let h = adapt::inner_neg_hessian(&nu, &meta_probs, adapted, q, cfg.metric, cfg.lambda)?;

    // Cross block A_B = d(stationarity)/d(phi). Entry [i, j] couples the
    // i-th adapted parameter with the j-th meta parameter. Contributions
    // through the visitation weights are collected separately: they are
    // exactly what the per-state-stationarity simplification drops, and
    // they cancel in the decoupled-feature regime.
    let grad_q = grad_q_all(mdp, meta)?;
    let nu_grad = visitation_gradient(mdp, meta)?;
    let mut b = Array2::<f64>::zeros((n, n));
    let mut nu_terms = Array2::<f64>::zeros((n, n));
    // Q-value sensitivity: sum_s nu(s) sum_a grad pi'(a|s) (x) grad_phi Q.
    for s in 0..mdp.n_states {
        if nu[s] == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let w = nu[s] * adapted_probs[[s, a]];
            let g = &g_adapted[s * mdp.n_actions + a];
            let dq = grad_q.row(s * mdp.n_actions + a);
            for i in 0..n {
                if g[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    b[[i, j]] += w * g[i] * dq[j];
                }
            }
        }
    }
    // Distance block: -lambda * grad_phi grad_theta D^2.
    match cfg.metric {
        DistanceMetric::SquaredEuclidean => {
            for i in 0..n {
                b[[i, i]] += 2.0 * cfg.lambda;
            }
        }
        DistanceMetric::ForwardKl => {
            // grad_theta D^2 = -E_nu[ sum_a pi_meta g_theta ]; its phi
            // derivative has a policy part and a visitation part.
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let w = cfg.lambda * nu[s] * meta_probs[[s, a]];
                    let gt = &g_adapted[s * mdp.n_actions + a];
                    let gm = &g_meta[s * mdp.n_actions + a];
                    for i in 0..n {
                        if gt[i] == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            b[[i, j]] += w * gt[i] * gm[j];
                        }
                    }
                }
                // Visitation part of the distance term.
                let mut dsum = Array1::<f64>::zeros(n);
                for a in 0..mdp.n_actions {
                    dsum = dsum
                        + g_adapted[s * mdp.n_actions + a].mapv(|x| meta_probs[[s, a]] * x);
                }
                for i in 0..n {
                    if dsum[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        nu_terms[[i, j]] += cfg.lambda * dsum[i] * nu_grad[[s, j]];
                    }
                }
            }
        }
        DistanceMetric::ReverseKl => {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let w = cfg.lambda * nu[s] * adapted_probs[[s, a]];
                    let gt = &g_adapted[s * mdp.n_actions + a];
                    let gm = &g_meta[s * mdp.n_actions + a];
                    for i in 0..n {
                        if gt[i] == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            b[[i, j]] += w * gt[i] * gm[j];
                        }
                    }
                }
                // Visitation part of the distance term.
                let mut dsum = Array1::<f64>::zeros(n);
                for a in 0..mdp.n_actions {
                    let r = (adapted_probs[[s, a]] / meta_probs[[s, a]]).ln();
                    dsum = dsum
                        + g_adapted[s * mdp.n_actions + a]
                            .mapv(|x| adapted_probs[[s, a]] * r * x);
                }
                for i in 0..n {
                    if dsum[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        nu_terms[[i, j]] -= cfg.lambda * dsum[i] * nu_grad[[s, j]];
                    }
                }
            }
        }
    }
    // Visitation cross-term of the value part: sum_s grad nu(s) (x)
    // grad_theta[sum_a pi'(a|s) q(s, a)].
    for s in 0..mdp.n_states {
        let mut gsum = Array1::<f64>::zeros(n);
        for a in 0..mdp.n_actions {
            gsum = gsum
                + g_adapted[s * mdp.n_actions + a]
                    .mapv(|x| adapted_probs[[s, a]] * q[[s, a]] * x);
        }
        for i in 0..n {
            if gsum[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                nu_terms[[i, j]] += gsum[i] * nu_grad[[s, j]];
            }
        }
    }

    // Policy gradient at the adapted parameters.
    let pg = policy::exact_policy_gradient(mdp, adapted)?;

    let op = DenseOperator { matrix: &h };
    linalg::symmetry_probe(&op, 1e-8)?;
    let cg = linalg::conjugate_gradient(&op, pg.view(), 1e-10, 4 * n.max(8))?;

    let full_b = &b + &nu_terms;
    let grad = full_b.t().dot(&cg.x);
    let dropped = nu_terms.t().dot(&cg.x);
    let gap = dropped.dot(&dropped).sqrt();

    Ok(Hypergradient {
        grad,
        per_state_jacobians: None,
        diagnostics: HypergradDiagnostics {
            cg_iterations: Some(cg.iterations),
            cg_residual: Some(cg.residual),
            m_condition_max: None,
            norm_bound: None,
            stated_formula_gap: Some(gap),
        },
    })
}

/// Coordinate-wise central differences of a scalar function.
pub fn central_difference_gradient<F>(
    mut f: F,
    x: &Array1<f64>,
    step: f64,
) -> Result<Array1<f64>>
where
    F: FnMut(ArrayView1<'_, f64>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut g = Array1::<f64>::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp[k] += step;
        let mut xm = x.clone();
        xm[k] -= step;
        g[k] = (f(xp.view())? - f(xm.view())?) / (2.0 * step);
    }
    Ok(g)
}

/// Finite-difference hypergradient: re-runs the full adaptation pipeline at
/// perturbed meta-parameters and differentiates the exact return of the
/// adapted policy. Exact dynamic programming only.
pub fn finite_difference_hypergrad(
    mdp: &TabularMdp,
    meta: &SoftmaxPolicy,
    cfg: &AdaptConfig,
    step: f64,
) -> Result<Hypergradient> {
    if cfg.q_mode != QMode::Exact {
        return Err(Error::Invalid(
            "finite-difference hypergradient requires exact dynamic programming".into(),
        ));
    }
    let x0 = meta.params_flat();
    let tabular = meta.is_tabular();
    let grad = central_difference_gradient(
        |x| {
            let candidate = meta.with_params_flat(x)?;
            let result = if tabular {
                adapt::adapt_tabular(mdp, &candidate, cfg)?
            } else {
                adapt::adapt_linear(mdp, &candidate, cfg)?
            };
            mdp::accumulated_reward(mdp, result.adapted.probs()?.view())
        },
        &x0,
        step,
    )?;
    Ok(Hypergradient {
        grad,
        per_state_jacobians: None,
        diagnostics: HypergradDiagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests_support::random_mdp;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tabular_policy(n_states: usize, n_actions: usize, seed: u64) -> SoftmaxPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SoftmaxPolicy::tabular(Array2::from_shape_fn((n_states, n_actions), |_| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap()
    }

    fn random_linear_policy(
        n_states: usize,
        n_actions: usize,
        n_features: usize,
        seed: u64,
    ) -> SoftmaxPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Array3::from_shape_fn((n_states, n_actions, n_features), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let weights = Array1::from_shape_fn(n_features, |_| rng.gen_range(-0.5..0.5));
        SoftmaxPolicy::linear(weights, features).unwrap()
    }

    /// MDP whose transitions and rewards ignore the action, so advantages
    /// vanish for every policy.
    fn action_independent_mdp(n_states: usize, gamma: f64, seed: u64) -> TabularMdp {
        let base = random_mdp(n_states, 1, gamma, seed);
        let n_actions = 3;
        let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
        let mut reward = Array3::<f64>::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                for s2 in 0..n_states {
                    transition[[s, a, s2]] = base.transition[[s, 0, s2]];
                    reward[[s, a, s2]] = base.reward[[s, 0, 0]];
                }
            }
        }
        TabularMdp::new(transition, reward, gamma, base.rho.clone()).unwrap()
    }

    fn rel_error(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let diff = (a - b).dot(&(a - b)).sqrt();
        let denom = b.dot(b).sqrt().max(1e-10);
        diff / denom
    }

    #[test]
    fn grad_q_vanishes_when_advantages_vanish() {
        let mdp = action_independent_mdp(4, 0.8, 1);
        let meta = random_tabular_policy(4, 3, 2);
        let g = grad_q_all(&mdp, &meta).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn grad_q_norm_bound_at_small_gamma() {
        let mdp = random_mdp(4, 3, 0.01, 3);
        let meta = random_tabular_policy(4, 3, 4);
        let probs = meta.probs().unwrap();
        let tables = crate::mdp::policy_evaluation(&mdp, probs.view()).unwrap();
        let bound = mdp.gamma / (1.0 - mdp.gamma) * tables.max_abs_adv();
        let g = grad_q_all(&mdp, &meta).unwrap();
        for row in g.outer_iter() {
            let norm = row.dot(&row).sqrt();
            assert!(norm <= bound + 1e-12, "norm {norm} > bound {bound}");
        }
    }

    #[test]
    fn grad_q_matches_finite_differences() {
        let mdp = random_mdp(4, 3, 0.8, 5);
        let meta = random_tabular_policy(4, 3, 6);
        let (s, a) = (2, 1);
        let analytic = grad_q_wrt_meta(&mdp, &meta, s, a).unwrap();
        let x0 = meta.params_flat();
        let fd = central_difference_gradient(
            |x| {
                let candidate = meta.with_params_flat(x)?;
                let tables =
                    crate::mdp::policy_evaluation(&mdp, candidate.probs()?.view())?;
                Ok(tables.q[[s, a]])
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(rel_error(&analytic, &fd) < 1e-5, "rel {}", rel_error(&analytic, &fd));
    }

    #[test]
    fn hypergrad_vanishes_when_advantages_vanish() {
        let mdp = action_independent_mdp(4, 0.8, 7);
        let meta = random_tabular_policy(4, 3, 8);
        for metric in DistanceMetric::ALL {
            let cfg = AdaptConfig::exact(metric, 2.0);
            let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
            let hg = hypergrad_tabular(&mdp, &meta, &result, &cfg).unwrap();
            assert!(hg.norm() < 1e-9, "metric {:?}: norm {}", metric, hg.norm());
        }
    }

    #[test]
    fn specialized_assemblies_match_general_route() {
        let mdp = random_mdp(4, 3, 0.8, 9);
        let meta = random_tabular_policy(4, 3, 10);
        for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
            let cfg = AdaptConfig::exact(metric, 3.0);
            let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
            let fast = hypergrad_tabular(&mdp, &meta, &result, &cfg).unwrap();
            let general = hypergrad_tabular_general(&mdp, &meta, &result, &cfg).unwrap();
            let diff = (&fast.grad - &general.grad)
                .iter()
                .map(|d| d.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "metric {:?}: gap {diff}", metric);
        }
    }

    #[test]
    fn per_state_jacobian_rows_sum_to_zero() {
        let mdp = random_mdp(4, 3, 0.8, 11);
        let meta = random_tabular_policy(4, 3, 12);
        for metric in DistanceMetric::ALL {
            let cfg = AdaptConfig::exact(metric, 2.5);
            let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
            let hg = hypergrad_tabular_general(&mdp, &meta, &result, &cfg).unwrap();
            for jac in hg.per_state_jacobians.as_ref().unwrap() {
                let col_sums = jac.sum_axis(ndarray::Axis(0));
                assert!(
                    col_sums.iter().all(|x| x.abs() < 1e-9),
                    "metric {:?}: differentiated rows do not stay on the simplex",
                    metric
                );
            }
        }
    }

    #[test]
    fn tabular_hypergrad_matches_finite_differences() {
        for seed in 0..3u64 {
            let mdp = random_mdp(4, 3, 0.8, 20 + seed);
            let meta = random_tabular_policy(4, 3, 30 + seed);
            for metric in DistanceMetric::ALL {
                let mut cfg = AdaptConfig::exact(metric, 2.0);
                cfg.inner_tol = 1e-12;
                let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
                let hg = hypergrad_tabular(&mdp, &meta, &result, &cfg).unwrap();
                let fd = finite_difference_hypergrad(&mdp, &meta, &cfg, 1e-5).unwrap();
                let rel = rel_error(&hg.grad, &fd.grad);
                assert!(rel < 1e-4, "seed {seed} metric {:?}: rel {rel}", metric);
            }
        }
    }

    #[test]
    fn hypergrad_norm_bounds_hold() {
        let mdp = random_mdp(4, 3, 0.8, 40);
        let meta = random_tabular_policy(4, 3, 41);
        for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
            let cfg = AdaptConfig::exact(metric, 4.0);
            let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
            let hg = hypergrad_tabular(&mdp, &meta, &result, &cfg).unwrap();
            let bound = hg.diagnostics.norm_bound.unwrap();
            assert!(
                hg.norm() <= bound + 1e-12,
                "metric {:?}: {} > {}",
                metric,
                hg.norm(),
                bound
            );
        }
    }

    #[test]
    fn linear_hypergrad_zero_for_zero_reward() {
        let mut mdp = random_mdp(4, 3, 0.8, 50);
        mdp.reward.fill(0.0);
        let meta = random_linear_policy(4, 3, 5, 51);
        let cfg = AdaptConfig::exact(DistanceMetric::SquaredEuclidean, 5.0);
        let result = adapt::adapt_linear(&mdp, &meta, &cfg).unwrap();
        let hg = hypergrad_linear(&mdp, &meta, &result, &cfg).unwrap();
        assert!(hg.norm() < 1e-9, "norm {}", hg.norm());
    }

    #[test]
    fn linear_hypergrad_matches_finite_differences() {
        for seed in 0..2u64 {
            let mdp = random_mdp(4, 3, 0.8, 60 + seed);
            let meta = random_linear_policy(4, 3, 6, 61 + seed);
            let tables =
                crate::mdp::policy_evaluation(&mdp, meta.probs().unwrap().view()).unwrap();
            let (l1, l2, _) = meta.lipschitz();
            let lambda = (6.0 * l1 * l1 + 2.0 * l2) * tables.max_abs_adv() * 2.0 + 0.5;
            let mut cfg = AdaptConfig::exact(DistanceMetric::SquaredEuclidean, lambda);
            cfg.inner_tol = 1e-12;
            cfg.inner_max_iters = 20_000;
            let result = adapt::adapt_linear(&mdp, &meta, &cfg).unwrap();
            let hg = hypergrad_linear(&mdp, &meta, &result, &cfg).unwrap();
            let fd = finite_difference_hypergrad(&mdp, &meta, &cfg, 1e-5).unwrap();
            let rel = rel_error(&hg.grad, &fd.grad);
            assert!(rel < 1e-3, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn linear_kl_hypergrads_match_finite_differences() {
        let mdp = random_mdp(4, 3, 0.8, 70);
        let meta = random_linear_policy(4, 3, 5, 71);
        for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
            let mut cfg = AdaptConfig::exact(metric, 2.5);
            cfg.inner_tol = 1e-12;
            cfg.inner_max_iters = 20_000;
            let result = adapt::adapt_linear(&mdp, &meta, &cfg).unwrap();
            let hg = hypergrad_linear(&mdp, &meta, &result, &cfg).unwrap();
            let fd = finite_difference_hypergrad(&mdp, &meta, &cfg, 1e-5).unwrap();
            let rel = rel_error(&hg.grad, &fd.grad);
            assert!(rel < 1e-3, "metric {:?}: rel {rel}", metric);
        }
    }

    #[test]
    fn one_hot_linear_hypergrad_matches_tabular_for_kl_metrics() {
        // With one-hot features the lower-level problems coincide for the KL
        // metrics, so the hypergradients of the same meta-objective agree.
        let mdp = random_mdp(4, 3, 0.8, 80);
        let tab = random_tabular_policy(4, 3, 81);
        let lin =
            SoftmaxPolicy::linear(tab.params_flat(), SoftmaxPolicy::one_hot_features(4, 3))
                .unwrap();
        for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
            let mut cfg = AdaptConfig::exact(metric, 2.0);
            cfg.inner_tol = 1e-12;
            cfg.inner_max_iters = 20_000;
            let rt = adapt::adapt_tabular(&mdp, &tab, &cfg).unwrap();
            let rl = adapt::adapt_linear(&mdp, &lin, &cfg).unwrap();
            let ht = hypergrad_tabular(&mdp, &tab, &rt, &cfg).unwrap();
            let hl = hypergrad_linear(&mdp, &lin, &rl, &cfg).unwrap();
            let rel = rel_error(&hl.grad, &ht.grad);
            assert!(rel < 1e-5, "metric {:?}: rel {rel}", metric);
        }
    }

    #[test]
    fn stated_formula_gap_vanishes_only_in_the_decoupled_regime() {
        // With one-hot features and a per-state KL distance the per-state
        // stationarity simplification is exact, so the reported gap is tiny;
        // with general features the visitation cross-term survives.
        let mdp = random_mdp(4, 3, 0.8, 200);
        let tab = random_tabular_policy(4, 3, 201);
        let one_hot =
            SoftmaxPolicy::linear(tab.params_flat(), SoftmaxPolicy::one_hot_features(4, 3))
                .unwrap();
        let mut cfg = AdaptConfig::exact(DistanceMetric::ReverseKl, 2.0);
        cfg.inner_tol = 1e-12;
        cfg.inner_max_iters = 20_000;
        let result = adapt::adapt_linear(&mdp, &one_hot, &cfg).unwrap();
        let hg = hypergrad_linear(&mdp, &one_hot, &result, &cfg).unwrap();
        let decoupled_gap = hg.diagnostics.stated_formula_gap.unwrap();
        assert!(decoupled_gap < 1e-8, "decoupled gap {decoupled_gap}");

        let general = random_linear_policy(4, 3, 6, 202);
        let result = adapt::adapt_linear(&mdp, &general, &cfg).unwrap();
        let hg = hypergrad_linear(&mdp, &general, &result, &cfg).unwrap();
        let general_gap = hg.diagnostics.stated_formula_gap.unwrap();
        assert!(
            general_gap > 100.0 * decoupled_gap,
            "general-feature gap {general_gap} not larger than decoupled {decoupled_gap}"
        );
    }

    #[test]
    fn central_differences_recover_linear_coefficients() {
        let c = Array1::from(vec![1.5, -2.0, 0.25]);
        let x = Array1::from(vec![0.3, 0.7, -1.1]);
        let g = central_difference_gradient(|x| Ok(c.dot(&x)), &x, 1e-4).unwrap();
        assert!((&g - &c).iter().all(|d| d.abs() < 1e-9));

        let zero = central_difference_gradient(|_| Ok(0.0), &x, 1e-4).unwrap();
        assert!(zero.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let mdp = random_mdp(4, 3, 0.8, 90);
        let meta = random_tabular_policy(4, 3, 91);
        let mut cfg = AdaptConfig::exact(DistanceMetric::ReverseKl, 2.0);
        cfg.inner_tol = 1e-13;
        let result = adapt::adapt_tabular(&mdp, &meta, &cfg).unwrap();
        let exact = hypergrad_tabular(&mdp, &meta, &result, &cfg).unwrap().grad;
        let mut errors = Vec::new();
        for step in [2e-3, 1e-3, 5e-4] {
            let fd = finite_difference_hypergrad(&mdp, &meta, &cfg, step).unwrap();
            errors.push((&fd.grad - &exact).dot(&(&fd.grad - &exact)).sqrt());
        }
        let slope1 = (errors[0] / errors[1]).log2();
        let slope2 = (errors[1] / errors[2]).log2();
        for slope in [slope1, slope2] {
            assert!(
                (1.8..=2.2).contains(&slope),
                "convergence order {slope} outside [1.8, 2.2] ({errors:?})"
            );
        }
    }
}
