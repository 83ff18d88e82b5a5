//! Softmax policies and policy distance metrics.
//!
//! Two parameterizations share one type: a tabular logit table
//! `theta(s, a)`, and a linear score `theta . f(s, a)` over a fixed feature
//! tensor. Probabilities are strictly positive by construction, so the KL
//! metrics never see zeros.

use crate::error::{Error, Result};
use crate::mdp::{self, TabularMdp};
use ndarray::{Array1, Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum SoftmaxPolicy {
    /// `pi(a|s) proportional to exp(theta(s, a))`.
    Tabular { logits: Array2<f64> },
    /// `pi(a|s) proportional to exp(theta . f(s, a))` with features of shape
    /// `(S, A, n)`.
    Linear {
        weights: Array1<f64>,
        features: Array3<f64>,
    },
}

impl SoftmaxPolicy {
    pub fn tabular(logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("tabular logits must be finite".into()));
        }
        Ok(SoftmaxPolicy::Tabular { logits })
    }

    pub fn linear(weights: Array1<f64>, features: Array3<f64>) -> Result<Self> {
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("linear weights must be finite".into()));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("features must be finite".into()));
        }
        if features.dim().2 != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "feature dimension {} does not match weight length {}",
                features.dim().2,
                weights.len()
            )));
        }
        Ok(SoftmaxPolicy::Linear { weights, features })
    }

    pub fn uniform_tabular(n_states: usize, n_actions: usize) -> Self {
        SoftmaxPolicy::Tabular {
            logits: Array2::zeros((n_states, n_actions)),
        }
    }

    /// One-hot features of dimension `S * A`, under which the linear kind
    /// reproduces the tabular kind exactly.
    pub fn one_hot_features(n_states: usize, n_actions: usize) -> Array3<f64> {
        let n = n_states * n_actions;
        Array3::from_shape_fn((n_states, n_actions, n), |(s, a, k)| {
            if k == s * n_actions + a {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn n_states(&self) -> usize {
        match self {
            SoftmaxPolicy::Tabular { logits } => logits.nrows(),
            SoftmaxPolicy::Linear { features, .. } => features.dim().0,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            SoftmaxPolicy::Tabular { logits } => logits.ncols(),
            SoftmaxPolicy::Linear { features, .. } => features.dim().1,
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, SoftmaxPolicy::Tabular { .. })
    }

    pub fn param_count(&self) -> usize {
        match self {
            SoftmaxPolicy::Tabular { logits } => logits.len(),
            SoftmaxPolicy::Linear { weights, .. } => weights.len(),
        }
    }

    /// Parameters as a flat vector (row-major `(s, a)` order for tabular).
    pub fn params_flat(&self) -> Array1<f64> {
        match self {
            SoftmaxPolicy::Tabular { logits } => {
                Array1::from_iter(logits.iter().copied())
            }
            SoftmaxPolicy::Linear { weights, .. } => weights.clone(),
        }
    }

    /// Same kind of policy with replaced parameters.
    pub fn with_params_flat(&self, params: ArrayView1<'_, f64>) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        match self {
            SoftmaxPolicy::Tabular { logits } => SoftmaxPolicy::tabular(
                Array2::from_shape_vec(logits.dim(), params.to_vec())
                    .expect("length checked above"),
            ),
            SoftmaxPolicy::Linear { features, .. } => {
                SoftmaxPolicy::linear(params.to_owned(), features.clone())
            }
        }
    }

    /// Raw per-pair scores: the logits themselves, or `theta . f(s, a)`.
    pub fn scores(&self) -> Array2<f64> {
        match self {
            SoftmaxPolicy::Tabular { logits } => logits.clone(),
            SoftmaxPolicy::Linear { weights, features } => {
                let (s, a, _) = features.dim();
                Array2::from_shape_fn((s, a), |(i, j)| {
                    features.slice(ndarray::s![i, j, ..]).dot(weights)
                })
            }
        }
    }

    /// Row-wise softmax of the scores, computed with max subtraction.
    pub fn probs(&self) -> Result<Array2<f64>> {
        let scores = self.scores();
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("policy scores are not finite".into()));
        }
        let mut out = Array2::<f64>::zeros(scores.dim());
        for (s, row) in scores.outer_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (a, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[[s, a]] = e;
                sum += e;
            }
            for a in 0..row.len() {
                out[[s, a]] /= sum;
            }
        }
        Ok(out)
    }

    /// Gradient of `ln pi(a|s)` with respect to the flat parameter vector.
    ///
    /// Tabular: indicator at `(s, a)` minus the policy row embedded in the
    /// state-`s` block. Linear: `f(s, a)` minus the policy-expected feature
    /// at `s`.
    pub fn log_prob_gradient(&self, s: usize, a: usize) -> Result<Array1<f64>> {
        let probs = self.probs()?;
        match self {
            SoftmaxPolicy::Tabular { logits } => {
                let n_actions = logits.ncols();
                let mut g = Array1::<f64>::zeros(self.param_count());
                for a2 in 0..n_actions {
                    g[s * n_actions + a2] = -probs[[s, a2]];
                }
                g[s * n_actions + a] += 1.0;
                Ok(g)
            }
            SoftmaxPolicy::Linear { features, .. } => {
                let n_actions = features.dim().1;
                let mut expected = Array1::<f64>::zeros(self.param_count());
                for a2 in 0..n_actions {
                    expected = expected
                        + features
                            .slice(ndarray::s![s, a2, ..])
                            .mapv(|x| x * probs[[s, a2]]);
                }
                Ok(&features.slice(ndarray::s![s, a, ..]).to_owned() - &expected)
            }
        }
    }

    /// `(L1, L2, L3)` of the score function: its Lipschitz constant and
    /// those of its first and second parameter derivatives. Tabular scores
    /// have `(1, 0, 0)`; linear scores have constant gradient, so only `L1`
    /// (the largest feature norm) is nonzero.
    pub fn lipschitz(&self) -> (f64, f64, f64) {
        match self {
            SoftmaxPolicy::Tabular { .. } => (1.0, 0.0, 0.0),
            SoftmaxPolicy::Linear { features, .. } => {
                let (s, a, _) = features.dim();
                let mut l1: f64 = 0.0;
                for i in 0..s {
                    for j in 0..a {
                        let norm = features
                            .slice(ndarray::s![i, j, ..])
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt();
                        l1 = l1.max(norm);
                    }
                }
                (l1, 0.0, 0.0)
            }
        }
    }

    pub fn to_document(&self) -> PolicyDocument {
        let (l1, l2, l3) = self.lipschitz();
        match self {
            SoftmaxPolicy::Tabular { logits } => PolicyDocument {
                kind: "tabular".into(),
                theta: logits.iter().copied().collect(),
                shape: vec![logits.nrows(), logits.ncols()],
                features: None,
                lipschitz: [l1, l2, l3],
            },
            SoftmaxPolicy::Linear { weights, features } => PolicyDocument {
                kind: "linear".into(),
                theta: weights.to_vec(),
                shape: vec![features.dim().0, features.dim().1, features.dim().2],
                features: Some(
                    features
                        .outer_iter()
                        .map(|plane| {
                            plane
                                .outer_iter()
                                .map(|row| row.to_vec())
                                .collect::<Vec<_>>()
                        })
                        .collect(),
                ),
                lipschitz: [l1, l2, l3],
            },
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self> {
        match doc.kind.as_str() {
            "tabular" => {
                if doc.shape.len() != 2 {
                    return Err(Error::Serialization("tabular shape must be [S, A]".into()));
                }
                let logits = Array2::from_shape_vec((doc.shape[0], doc.shape[1]), doc.theta.clone())
                    .map_err(|e| Error::Serialization(e.to_string()))?;
                SoftmaxPolicy::tabular(logits)
            }
            "linear" => {
                if doc.shape.len() != 3 {
                    return Err(Error::Serialization("linear shape must be [S, A, n]".into()));
                }
                let nested = doc
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Serialization("linear policy requires features".into()))?;
                let (s, a, n) = (doc.shape[0], doc.shape[1], doc.shape[2]);
                let mut features = Array3::<f64>::zeros((s, a, n));
                for (i, plane) in nested.iter().enumerate() {
                    for (j, row) in plane.iter().enumerate() {
                        for (k, x) in row.iter().enumerate() {
                            features[[i, j, k]] = *x;
                        }
                    }
                }
                SoftmaxPolicy::linear(Array1::from(doc.theta.clone()), features)
            }
            other => Err(Error::Serialization(format!("unknown policy kind {other}"))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// JSON form of a policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub kind: String,
    pub theta: Vec<f64>,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
    pub lipschitz: [f64; 3],
}

/// The three per-state policy distances.
///
/// The first two are KL divergences and are asymmetric; the third is a
/// symmetric squared Euclidean distance (on parameters, or on probability
/// rows for the per-state tabular subproblems).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// `d^2 = KL(first || second)` -- KL from the reference policy.
    ForwardKl,
    /// `d^2 = KL(second || first)` -- KL toward the reference policy.
    ReverseKl,
    /// `d^2 = |theta - theta'|^2`.
    SquaredEuclidean,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::ForwardKl,
        DistanceMetric::ReverseKl,
        DistanceMetric::SquaredEuclidean,
    ];

    pub fn index(&self) -> u8 {
        match self {
            DistanceMetric::ForwardKl => 1,
            DistanceMetric::ReverseKl => 2,
            DistanceMetric::SquaredEuclidean => 3,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(DistanceMetric::ForwardKl),
            2 => Ok(DistanceMetric::ReverseKl),
            3 => Ok(DistanceMetric::SquaredEuclidean),
            _ => Err(Error::Invalid(format!("distance metric index {i} not in 1..=3"))),
        }
    }
}

pub fn kl_divergence(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch("KL arguments differ in length".into()));
    }
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q.iter()) {
        if *qi <= 0.0 || *pi < 0.0 {
            return Err(Error::Invalid(
                "KL divergence requires strictly positive distributions".into(),
            ));
        }
        if *pi > 0.0 {
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Squared per-state distance `d_i^2` between two action distributions.
///
/// For the Euclidean metric the distance is taken on the parameter slices
/// when they are supplied and on the probability rows otherwise.
pub fn per_state_distance_sq(
    metric: DistanceMetric,
    p: ArrayView1<'_, f64>,
    q: ArrayView1<'_, f64>,
    theta_p: Option<ArrayView1<'_, f64>>,
    theta_q: Option<ArrayView1<'_, f64>>,
) -> Result<f64> {
    match metric {
        DistanceMetric::ForwardKl => {
            if p.iter().any(|x| *x <= 0.0) || q.iter().any(|x| *x <= 0.0) {
                return Err(Error::Invalid("KL metrics reject zero entries".into()));
            }
            kl_divergence(p, q)
        }
        DistanceMetric::ReverseKl => {
            if p.iter().any(|x| *x <= 0.0) || q.iter().any(|x| *x <= 0.0) {
                return Err(Error::Invalid("KL metrics reject zero entries".into()));
            }
            kl_divergence(q, p)
        }
        DistanceMetric::SquaredEuclidean => match (theta_p, theta_q) {
            (Some(tp), Some(tq)) => {
                if tp.len() != tq.len() {
                    return Err(Error::ShapeMismatch(
                        "parameter slices differ in length".into(),
                    ));
                }
                Ok(tp
                    .iter()
                    .zip(tq.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum())
            }
            _ => Ok(p
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()),
        },
    }
}

/// Squared policy distance `D_i^2 = E_{s ~ nu^{pi_theta}}[d_i^2(s)]`, with the
/// visitation distribution of the first policy.
///
/// For the Euclidean metric: tabular policies use the per-state probability
/// rows; linear policies use the shared parameter distance (constant in `s`).
pub fn policy_distance_sq(
    mdp: &TabularMdp,
    metric: DistanceMetric,
    pi_theta: &SoftmaxPolicy,
    pi_prime: &SoftmaxPolicy,
) -> Result<f64> {
    if pi_theta.n_states() != pi_prime.n_states()
        || pi_theta.n_actions() != pi_prime.n_actions()
    {
        return Err(Error::ShapeMismatch(
            "policies act on different state-action sets".into(),
        ));
    }
    let p = pi_theta.probs()?;
    let q = pi_prime.probs()?;
    let nu = mdp::state_visitation(mdp, p.view())?;
    if metric == DistanceMetric::SquaredEuclidean {
        if let (SoftmaxPolicy::Linear { weights: wp, .. }, SoftmaxPolicy::Linear { weights: wq, .. }) =
            (pi_theta, pi_prime)
        {
            // Parameter distance is state-independent and nu sums to one.
            return per_state_distance_sq(
                metric,
                p.row(0),
                q.row(0),
                Some(wp.view()),
                Some(wq.view()),
            );
        }
    }
    let mut total = 0.0;
    for s in 0..mdp.n_states {
        if nu[s] == 0.0 {
            continue;
        }
        total += nu[s] * per_state_distance_sq(metric, p.row(s), q.row(s), None, None)?;
    }
    Ok(total)
}

/// Exact policy gradient of the accumulated reward, as a flat vector.
///
/// Tabular entry `(s, a)`: `nu(s) pi(a|s) adv(s, a) / (1 - gamma)`; linear:
/// the visitation-weighted expectation of the score gradient times the
/// advantage.
pub fn exact_policy_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<Array1<f64>> {
    let probs = policy.probs()?;
    let tables = mdp::policy_evaluation(mdp, probs.view())?;
    let nu = mdp::state_visitation(mdp, probs.view())?;
    let scale = 1.0 / (1.0 - mdp.gamma);
    match policy {
        SoftmaxPolicy::Tabular { logits } => {
            let n_actions = logits.ncols();
            let mut g = Array1::<f64>::zeros(policy.param_count());
            for s in 0..mdp.n_states {
                for a in 0..n_actions {
                    g[s * n_actions + a] = scale * nu[s] * probs[[s, a]] * tables.adv[[s, a]];
                }
            }
            Ok(g)
        }
        SoftmaxPolicy::Linear { .. } => {
            let mut g = Array1::<f64>::zeros(policy.param_count());
            for s in 0..mdp.n_states {
                if nu[s] == 0.0 {
                    continue;
                }
                for a in 0..mdp.n_actions {
                    let w = nu[s] * probs[[s, a]];
                    if w == 0.0 {
                        continue;
                    }
                    let grad_ln = policy.log_prob_gradient(s, a)?;
                    g = g + grad_ln.mapv(|x| scale * w * x * tables.adv[[s, a]]);
                }
            }
            Ok(g)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests_support::random_mdp;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tabular(n_states: usize, n_actions: usize, seed: u64) -> SoftmaxPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SoftmaxPolicy::tabular(Array2::from_shape_fn((n_states, n_actions), |_| {
            rng.gen_range(-1.5..1.5)
        }))
        .unwrap()
    }

    #[test]
    fn zero_logits_give_uniform_rows() {
        let p = SoftmaxPolicy::uniform_tabular(2, 3).probs().unwrap();
        for s in 0..2 {
            for a in 0..3 {
                assert!((p[[s, a]] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logit_gap_of_ln_two_gives_one_third_two_thirds() {
        let c = 0.37;
        let policy = SoftmaxPolicy::tabular(array![[c, c + (2.0f64).ln()]]).unwrap();
        let p = policy.probs().unwrap();
        assert!((p[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[[0, 1]] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_linear_matches_tabular() {
        let logits = random_tabular(3, 4, 5);
        let flat = logits.params_flat();
        let features = SoftmaxPolicy::one_hot_features(3, 4);
        let linear = SoftmaxPolicy::linear(flat, features).unwrap();
        let pt = logits.probs().unwrap();
        let pl = linear.probs().unwrap();
        assert!((&pt - &pl).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn nonfinite_logits_rejected() {
        assert!(SoftmaxPolicy::tabular(array![[f64::NAN, 0.0]]).is_err());
        assert!(SoftmaxPolicy::tabular(array![[f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn identical_distributions_have_zero_distance() {
        let p = array![0.2, 0.3, 0.5];
        for metric in DistanceMetric::ALL {
            let d =
                per_state_distance_sq(metric, p.view(), p.view(), None, None).unwrap();
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn forward_kl_of_known_pair() {
        // KL([.5,.5] || [.25,.75]) = .5 ln 2 + .5 ln(2/3).
        let p = array![0.5, 0.5];
        let q = array![0.25, 0.75];
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let d = per_state_distance_sq(DistanceMetric::ForwardKl, p.view(), q.view(), None, None)
            .unwrap();
        assert!((d - expected).abs() < 1e-12, "{d} vs {expected}");
        // Monte-Carlo cross-check: E_{a~p}[ln(p/q)].
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let a = if rng.gen::<f64>() < 0.5 { 0 } else { 1 };
            acc += (p[a] / q[a]).ln();
        }
        let mc = acc / n as f64;
        assert!((mc - expected).abs() < 3e-3, "mc {mc} vs {expected}");
    }

    #[test]
    fn unit_parameter_step_has_unit_euclidean_distance() {
        let tp = array![0.0, 1.0, 2.0];
        let tq = array![0.0, 1.0, 3.0];
        let probs = array![0.3, 0.3, 0.4];
        let d = per_state_distance_sq(
            DistanceMetric::SquaredEuclidean,
            probs.view(),
            probs.view(),
            Some(tp.view()),
            Some(tq.view()),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_entries_rejected_by_kl_metrics() {
        let p = array![1.0, 0.0];
        let q = array![0.5, 0.5];
        for metric in [DistanceMetric::ForwardKl, DistanceMetric::ReverseKl] {
            assert!(per_state_distance_sq(metric, p.view(), q.view(), None, None).is_err());
        }
    }

    #[test]
    fn policy_distance_is_zero_for_identical_policies() {
        let mdp = random_mdp(4, 3, 0.8, 2);
        let pi = random_tabular(4, 3, 10);
        for metric in DistanceMetric::ALL {
            let d = policy_distance_sq(&mdp, metric, &pi, &pi).unwrap();
            assert!(d.abs() < 1e-14);
        }
    }

    #[test]
    fn kl_policy_distance_is_asymmetric() {
        let mdp = random_mdp(4, 3, 0.8, 3);
        let pi = random_tabular(4, 3, 11);
        let pj = random_tabular(4, 3, 12);
        let d_ij = policy_distance_sq(&mdp, DistanceMetric::ForwardKl, &pi, &pj).unwrap();
        let d_ji = policy_distance_sq(&mdp, DistanceMetric::ForwardKl, &pj, &pi).unwrap();
        assert!((d_ij - d_ji).abs() > 1e-6, "expected asymmetry: {d_ij} vs {d_ji}");
    }

    #[test]
    fn single_state_policy_distance_equals_per_state_distance() {
        let mdp = crate::mdp::tests_support::single_state_mdp_multiaction(3, 1.0, 0.8);
        let pi = random_tabular(1, 3, 13);
        let pj = random_tabular(1, 3, 14);
        let p = pi.probs().unwrap();
        let q = pj.probs().unwrap();
        for metric in DistanceMetric::ALL {
            let d_pol = policy_distance_sq(&mdp, metric, &pi, &pj).unwrap();
            let d_state =
                per_state_distance_sq(metric, p.row(0), q.row(0), None, None).unwrap();
            assert!((d_pol - d_state).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradient_for_uniform_two_action_policy() {
        let policy = SoftmaxPolicy::uniform_tabular(2, 2);
        let g = policy.log_prob_gradient(0, 0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] + 0.5).abs() < 1e-15);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn probability_row_gradient_sums_to_zero() {
        // d/dtheta sum_a pi(a|s) = sum_a pi(a|s) grad ln pi(a|s) = 0.
        let policy = random_tabular(3, 4, 20);
        let probs = policy.probs().unwrap();
        for s in 0..3 {
            let mut total = Array1::<f64>::zeros(policy.param_count());
            for a in 0..4 {
                total = total
                    + policy
                        .log_prob_gradient(s, a)
                        .unwrap()
                        .mapv(|x| x * probs[[s, a]]);
            }
            assert!(total.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        for (policy, label) in [
            (random_tabular(3, 3, 30), "tabular"),
            (
                {
                    let mut rng = ChaCha8Rng::seed_from_u64(31);
                    let features = Array3::from_shape_fn((3, 3, 5), |_| rng.gen_range(-1.0..1.0));
                    let weights = Array1::from_shape_fn(5, |_| rng.gen_range(-0.5..0.5));
                    SoftmaxPolicy::linear(weights, features).unwrap()
                },
                "linear",
            ),
        ] {
            let (s, a) = (1, 2);
            let g = policy.log_prob_gradient(s, a).unwrap();
            let x0 = policy.params_flat();
            let h = 1e-6;
            for k in 0..policy.param_count() {
                let mut xp = x0.clone();
                xp[k] += h;
                let mut xm = x0.clone();
                xm[k] -= h;
                let lp = policy.with_params_flat(xp.view()).unwrap().probs().unwrap()[[s, a]].ln();
                let lm = policy.with_params_flat(xm.view()).unwrap().probs().unwrap()[[s, a]].ln();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (g[k] - fd).abs() < 1e-7,
                    "{label} coordinate {k}: {} vs {}",
                    g[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn exact_policy_gradient_matches_finite_differences() {
        let mdp = random_mdp(4, 3, 0.85, 40);
        let policy = random_tabular(4, 3, 41);
        let g = exact_policy_gradient(&mdp, &policy).unwrap();
        let x0 = policy.params_flat();
        let h = 1e-6;
        for k in 0..policy.param_count() {
            let mut xp = x0.clone();
            xp[k] += h;
            let mut xm = x0.clone();
            xm[k] -= h;
            let jp = mdp::accumulated_reward(
                &mdp,
                policy.with_params_flat(xp.view()).unwrap().probs().unwrap().view(),
            )
            .unwrap();
            let jm = mdp::accumulated_reward(
                &mdp,
                policy.with_params_flat(xm.view()).unwrap().probs().unwrap().view(),
            )
            .unwrap();
            let fd = (jp - jm) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                ((g[k] - fd) / denom).abs() < 1e-5,
                "coordinate {k}: {} vs {}",
                g[k],
                fd
            );
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let policy = random_tabular(2, 3, 50);
        let back = SoftmaxPolicy::from_json(&policy.to_json().unwrap()).unwrap();
        assert_eq!(policy, back);

        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let features = Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let weights = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let linear = SoftmaxPolicy::linear(weights, features).unwrap();
        let back = SoftmaxPolicy::from_json(&linear.to_json().unwrap()).unwrap();
        assert_eq!(linear, back);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(seed in 0u64..1000) {
            let policy = random_tabular(3, 4, seed);
            let p = policy.probs().unwrap();
            for s in 0..3 {
                let sum: f64 = p.row(s).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(p.row(s).iter().all(|x| *x > 0.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let policy = random_tabular(3, 4, seed);
            let p = policy.probs().unwrap();
            if let SoftmaxPolicy::Tabular { logits } = &policy {
                let shifted = SoftmaxPolicy::tabular(logits.mapv(|x| x + shift)).unwrap();
                let q = shifted.probs().unwrap();
                prop_assert!((&p - &q).iter().all(|d| d.abs() < 1e-12));
            }
        }

        #[test]
        fn pinsker_chain_holds(seed in 0u64..1000) {
            // Squared total variation is at most half of either KL order.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2usize..6);
            let draw = |rng: &mut ChaCha8Rng| {
                let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let sum: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= sum);
                Array1::from(v)
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let tv: f64 = 0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            let kl_pq = kl_divergence(p.view(), q.view()).unwrap();
            let kl_qp = kl_divergence(q.view(), p.view()).unwrap();
            prop_assert!(tv * tv <= 0.5 * kl_pq + 1e-12);
            prop_assert!(tv * tv <= 0.5 * kl_qp + 1e-12);
        }
    }
}
