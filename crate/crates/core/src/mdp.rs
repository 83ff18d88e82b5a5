//! Finite MDPs with exact dynamic-programming oracles and Monte-Carlo
//! estimators.
//!
//! Everything here is a pure function of immutable inputs: values and
//! visitation distributions come from dense linear solves (`gamma < 1` keeps
//! the systems nonsingular), and the Monte-Carlo estimators are deterministic
//! given their seed.

use crate::error::{Error, Result};
use crate::linalg::{self, LuSolver};
use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tolerance for probability-vector normalization checks.
const PROB_TOL: f64 = 1e-12;

/// A finite Markov decision process `(S, A, gamma, rho, P, r)`.
///
/// `transition[[s, a, s2]]` is `P(s2 | s, a)` and `reward[[s, a, s2]]` is the
/// reward earned on that transition. Rewards may be stored in any bounded
/// range; [`TabularMdp::reward_span`] gives the width of the range, which is
/// the effective reward bound after the affine shift to `[0, r_max]` (the
/// shift changes every policy's return by the same constant, so optimality
/// gaps are unaffected).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Array3<f64>,
    pub reward: Array3<f64>,
    pub gamma: f64,
    pub rho: Array1<f64>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array3<f64>,
        gamma: f64,
        rho: Array1<f64>,
    ) -> Result<Self> {
        let (s, a, s2) = transition.dim();
        if s == 0 || a == 0 {
            return Err(Error::Invalid("state and action sets must be non-empty".into()));
        }
        if s != s2 {
            return Err(Error::ShapeMismatch(format!(
                "transition tensor is ({s}, {a}, {s2}); first and last axes must agree"
            )));
        }
        let mdp = TabularMdp {
            n_states: s,
            n_actions: a,
            transition,
            reward,
            gamma,
            rho,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Invalid(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.reward.dim() != self.transition.dim() {
            return Err(Error::ShapeMismatch(
                "reward tensor shape differs from transition tensor shape".into(),
            ));
        }
        if self.rho.len() != self.n_states {
            return Err(Error::ShapeMismatch(format!(
                "rho has length {} but there are {} states",
                self.rho.len(),
                self.n_states
            )));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                if row.iter().any(|p| *p < 0.0) {
                    return Err(Error::Invalid(format!(
                        "negative transition probability at state {s}, action {a}"
                    )));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::Invalid(format!(
                        "transition row (s={s}, a={a}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        if self.rho.iter().any(|p| *p < 0.0) {
            return Err(Error::Invalid("rho has negative entries".into()));
        }
        let rho_sum: f64 = self.rho.sum();
        if (rho_sum - 1.0).abs() > PROB_TOL {
            return Err(Error::Invalid(format!("rho sums to {rho_sum}, expected 1")));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Invalid("rewards must be finite".into()));
        }
        Ok(())
    }

    /// `(min, max)` over all reward entries.
    pub fn reward_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in self.reward.iter() {
            lo = lo.min(*r);
            hi = hi.max(*r);
        }
        (lo, hi)
    }

    /// Width of the reward range: the `r_max` of the shifted reward
    /// `r - min r`, which lies in `[0, reward_span]`.
    pub fn reward_span(&self) -> f64 {
        let (lo, hi) = self.reward_bounds();
        hi - lo
    }

    /// State-to-state transition matrix under a fixed policy:
    /// `P_pi(s, s2) = sum_a pi(a|s) P(s2|s, a)`.
    pub fn transition_under(&self, policy: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut p = Array2::<f64>::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..self.n_states {
                    p[[s, s2]] += w * self.transition[[s, a, s2]];
                }
            }
        }
        p
    }

    /// Expected one-step reward of each state-action pair:
    /// `R(s, a) = sum_s2 P(s2|s,a) r(s,a,s2)`.
    pub fn expected_reward(&self) -> Array2<f64> {
        let mut r = Array2::<f64>::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for s2 in 0..self.n_states {
                    r[[s, a]] += self.transition[[s, a, s2]] * self.reward[[s, a, s2]];
                }
            }
        }
        r
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument {
            version: 1,
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            rho: self.rho.to_vec(),
            transition: tensor_to_nested(&self.transition),
            reward: tensor_to_nested(&self.reward),
        }
    }

    pub fn from_document(doc: &MdpDocument) -> Result<Self> {
        if doc.version != 1 {
            return Err(Error::Serialization(format!(
                "unsupported MDP document version {}",
                doc.version
            )));
        }
        let transition = nested_to_tensor(&doc.transition, doc.n_states, doc.n_actions)?;
        let reward = nested_to_tensor(&doc.reward, doc.n_states, doc.n_actions)?;
        TabularMdp::new(transition, reward, doc.gamma, Array1::from(doc.rho.clone()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// Versioned JSON form of a [`TabularMdp`] with nested-array tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
}

fn tensor_to_nested(t: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    let (s, a, s2) = t.dim();
    (0..s)
        .map(|i| {
            (0..a)
                .map(|j| (0..s2).map(|k| t[[i, j, k]]).collect())
                .collect()
        })
        .collect()
}

fn nested_to_tensor(v: &[Vec<Vec<f64>>], s: usize, a: usize) -> Result<Array3<f64>> {
    let mut t = Array3::<f64>::zeros((s, a, s));
    if v.len() != s {
        return Err(Error::Serialization("tensor outer dimension mismatch".into()));
    }
    for (i, plane) in v.iter().enumerate() {
        if plane.len() != a {
            return Err(Error::Serialization("tensor action dimension mismatch".into()));
        }
        for (j, row) in plane.iter().enumerate() {
            if row.len() != s {
                return Err(Error::Serialization("tensor inner dimension mismatch".into()));
            }
            for (k, x) in row.iter().enumerate() {
                t[[i, j, k]] = *x;
            }
        }
    }
    Ok(t)
}

/// State values, action values, and advantages of a fixed policy.
#[derive(Debug, Clone)]
pub struct ValueTables {
    pub v: Array1<f64>,
    pub q: Array2<f64>,
    pub adv: Array2<f64>,
}

impl ValueTables {
    /// Largest `|adv(s, a)|` over all pairs.
    pub fn max_abs_adv(&self) -> f64 {
        self.adv.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

fn check_policy_shape(mdp: &TabularMdp, policy: ArrayView2<'_, f64>) -> Result<()> {
    if policy.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::ShapeMismatch(format!(
            "policy table is {:?} but MDP is ({}, {})",
            policy.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    for s in 0..mdp.n_states {
        let row = policy.row(s);
        if row.iter().any(|p| *p < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "policy row {s} is not a probability distribution (sum {})",
                row.sum()
            )));
        }
    }
    Ok(())
}

/// Solves the Bellman linear system `(I - gamma P_pi) v = r_pi` exactly and
/// derives `q` and `adv = q - v`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: ArrayView2<'_, f64>) -> Result<ValueTables> {
    check_policy_shape(mdp, policy)?;
    let p_pi = mdp.transition_under(policy);
    let r_sa = mdp.expected_reward();
    let mut r_pi = Array1::<f64>::zeros(mdp.n_states);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            r_pi[s] += policy[[s, a]] * r_sa[[s, a]];
        }
    }
    let mut system = Array2::<f64>::eye(mdp.n_states);
    system = system - &(mdp.gamma * &p_pi);
    let v = linalg::solve(system.view(), r_pi.view(), "policy evaluation")?;

    let mut q = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut total = r_sa[[s, a]];
            for s2 in 0..mdp.n_states {
                total += mdp.gamma * mdp.transition[[s, a, s2]] * v[s2];
            }
            q[[s, a]] = total;
        }
    }
    let adv = &q - &v.clone().insert_axis(ndarray::Axis(1));
    Ok(ValueTables { v, q, adv })
}

/// Accumulated reward `J(pi) = sum_s rho(s) v(s)`.
pub fn accumulated_reward(mdp: &TabularMdp, policy: ArrayView2<'_, f64>) -> Result<f64> {
    let tables = policy_evaluation(mdp, policy)?;
    Ok(mdp.rho.dot(&tables.v))
}

fn occupancy_from(
    mdp: &TabularMdp,
    policy: ArrayView2<'_, f64>,
    start: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    // Solves (I - gamma P_pi^T) x = (1 - gamma) * start for each start column.
    let p_pi = mdp.transition_under(policy);
    let mut system = Array2::<f64>::eye(mdp.n_states);
    system = system - &(mdp.gamma * &p_pi.t());
    let solver = LuSolver::new(system.view());
    let mut out = Array2::<f64>::zeros(start.dim());
    for (i, col) in start.outer_iter().enumerate() {
        let rhs = col.mapv(|p| (1.0 - mdp.gamma) * p);
        let x = solver.solve(rhs.view(), "state visitation")?;
        out.row_mut(i).assign(&x);
    }
    Ok(out)
}

/// Discounted state-visitation distribution
/// `nu(s) = (1 - gamma) * sum_t gamma^t P(s_t = s)` with `s_0 ~ rho`.
pub fn state_visitation(mdp: &TabularMdp, policy: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_policy_shape(mdp, policy)?;
    let start = mdp
        .rho
        .view()
        .insert_axis(ndarray::Axis(0))
        .into_owned();
    let nu = occupancy_from(mdp, policy, start.view())?.row(0).to_owned();
    let sum: f64 = nu.sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::NumericalFailure {
            what: "state visitation normalization".into(),
            residual: (sum - 1.0).abs(),
        });
    }
    Ok(nu)
}

/// Discounted state-action visitation from a start pair `(s, a)`: the chain
/// starts at `s_0 ~ P(.|s, a)` and
/// `sigma(s2, a2) = (1 - gamma) * sum_t gamma^t P(s_t = s2, a_t = a2)`.
pub fn state_action_visitation(
    mdp: &TabularMdp,
    policy: ArrayView2<'_, f64>,
    start: (usize, usize),
) -> Result<Array2<f64>> {
    let marginals = state_action_visitation_marginals(mdp, policy)?;
    let (s, a) = start;
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(Error::Invalid(format!("start pair ({s}, {a}) out of range")));
    }
    let mut sigma = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
    for s2 in 0..mdp.n_states {
        for a2 in 0..mdp.n_actions {
            sigma[[s2, a2]] = marginals[[s, a, s2]] * policy[[s2, a2]];
        }
    }
    Ok(sigma)
}

/// State marginals of the visitation from every start pair, as a tensor
/// `[s, a, s2] = sigma_state^{(s,a)}(s2)`. One LU factorization serves all
/// `S * A` right-hand sides.
pub fn state_action_visitation_marginals(
    mdp: &TabularMdp,
    policy: ArrayView2<'_, f64>,
) -> Result<Array3<f64>> {
    check_policy_shape(mdp, policy)?;
    let n = mdp.n_states;
    let mut starts = Array2::<f64>::zeros((n * mdp.n_actions, n));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            starts
                .row_mut(s * mdp.n_actions + a)
                .assign(&mdp.transition.slice(ndarray::s![s, a, ..]));
        }
    }
    let occ = occupancy_from(mdp, policy, starts.view())?;
    let mut out = Array3::<f64>::zeros((n, mdp.n_actions, n));
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let row = occ.row(s * mdp.n_actions + a);
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::NumericalFailure {
                    what: format!("state-action visitation normalization at ({s}, {a})"),
                    residual: (sum - 1.0).abs(),
                });
            }
            out.slice_mut(ndarray::s![s, a, ..]).assign(&row);
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate of the action-value table.
#[derive(Debug, Clone)]
pub struct McQEstimate {
    pub mean: Array2<f64>,
    pub std_err: Array2<f64>,
    pub n_rollouts: usize,
    pub horizon: usize,
    /// Upper bound on the bias from truncating rollouts at `horizon`:
    /// `gamma^horizon * max|r| / (1 - gamma)`.
    pub truncation_bias: f64,
}

impl McQEstimate {
    /// True when the truncation bias is not negligible (always the case at
    /// `horizon = 0`).
    pub fn truncation_warning(&self) -> bool {
        self.horizon == 0 || self.truncation_bias > 1e-6
    }
}

fn sample_index(probs: ndarray::ArrayView1<'_, f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Per-pair truncated-rollout return averages under `policy`, with standard
/// errors. Deterministic given `seed`.
pub fn monte_carlo_q(
    mdp: &TabularMdp,
    policy: ArrayView2<'_, f64>,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<McQEstimate> {
    check_policy_shape(mdp, policy)?;
    if n_rollouts == 0 {
        return Err(Error::Invalid("n_rollouts must be positive".into()));
    }
    let (lo, hi) = mdp.reward_bounds();
    let r_abs = lo.abs().max(hi.abs());
    let truncation_bias = mdp.gamma.powi(horizon as i32) * r_abs / (1.0 - mdp.gamma);

    let mut mean = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
    let mut std_err = Array2::<f64>::zeros((mdp.n_states, mdp.n_actions));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s0 in 0..mdp.n_states {
        for a0 in 0..mdp.n_actions {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n_rollouts {
                let mut ret = 0.0;
                let mut disc = 1.0;
                let mut s = s0;
                let mut a = a0;
                for _ in 0..horizon {
                    let s2 = sample_index(
                        mdp.transition.slice(ndarray::s![s, a, ..]),
                        rng.gen::<f64>(),
                    );
                    ret += disc * mdp.reward[[s, a, s2]];
                    disc *= mdp.gamma;
                    s = s2;
                    a = sample_index(policy.row(s), rng.gen::<f64>());
                }
                sum += ret;
                sum_sq += ret * ret;
            }
            let m = sum / n_rollouts as f64;
            mean[[s0, a0]] = m;
            let var = (sum_sq / n_rollouts as f64 - m * m).max(0.0);
            std_err[[s0, a0]] = (var / n_rollouts as f64).sqrt();
        }
    }
    Ok(McQEstimate {
        mean,
        std_err,
        n_rollouts,
        horizon,
        truncation_bias,
    })
}

/// Seeded construction helpers shared by the test suites of several modules.
#[cfg(any(test, feature = "test-support"))]
pub mod tests_support {
    use super::*;
    use ndarray::{arr1, arr3};

    pub fn single_state_mdp(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(arr3(&[[[1.0]]]), arr3(&[[[r]]]), gamma, arr1(&[1.0])).unwrap()
    }

    /// One state, `n_actions` actions, action-dependent rewards `r * (a + 1)`.
    pub fn single_state_mdp_multiaction(n_actions: usize, r: f64, gamma: f64) -> TabularMdp {
        let transition = Array3::from_elem((1, n_actions, 1), 1.0);
        let reward = Array3::from_shape_fn((1, n_actions, 1), |(_, a, _)| r * (a as f64 + 1.0));
        TabularMdp::new(transition, reward, gamma, arr1(&[1.0])).unwrap()
    }

    /// Dense random MDP with strictly positive transitions and rho.
    pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                for (s2, p) in row.iter().enumerate() {
                    transition[[s, a, s2]] = *p;
                }
            }
        }
        let reward = Array3::from_shape_fn((n_states, n_actions, n_states), |_| rng.gen::<f64>());
        let mut rho: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.1).collect();
        let sum: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|p| *p /= sum);
        TabularMdp::new(transition, reward, gamma, Array1::from(rho)).unwrap()
    }

    /// Seeded random policy table with strictly positive rows.
    pub fn random_policy_table(n_states: usize, n_actions: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array2::<f64>::zeros((n_states, n_actions));
        for s in 0..n_states {
            let mut row: Vec<f64> = (0..n_actions).map(|_| rng.gen::<f64>() + 0.1).collect();
            let sum: f64 = row.iter().sum();
            for (a, w) in row.drain(..).enumerate() {
                p[[s, a]] = w / sum;
            }
        }
        p
    }
}
