//! Monte-Carlo and finite-difference cross-checks behind the `oracle`
//! subcommand: the exact dynamic-programming quantities must agree with
//! independent sampling or numerical differentiation.

use anyhow::{bail, Result};
use metarl::hypergrad;
use metarl::mdp::{self, TabularMdp};
use metarl::policy::{self, SoftmaxPolicy};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_all() -> Result<()> {
    let checks: &[(&str, fn() -> Result<String>)] = &[
        ("q-values-vs-monte-carlo", q_vs_monte_carlo),
        ("visitation-vs-monte-carlo", visitation_vs_monte_carlo),
        ("pair-visitation-vs-monte-carlo", sigma_vs_monte_carlo),
        ("q-gradient-vs-finite-differences", grad_q_vs_fd),
        ("policy-gradient-identity", policy_gradient_identity),
    ];
    let mut failures = 0;
    for (name, run) in checks {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failures > 0 {
        bail!("{failures} oracle check(s) failed");
    }
    Ok(())
}

fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
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
        Array3::from_shape_fn((n_states, n_actions, n_states), |_| rng.gen::<f64>());
    let mut rho: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.1).collect();
    let sum: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|p| *p /= sum);
    TabularMdp::new(transition, reward, gamma, Array1::from(rho)).unwrap()
}

fn uniform(n_states: usize, n_actions: usize) -> Array2<f64> {
    Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64)
}

fn q_vs_monte_carlo() -> Result<String> {
    let mdp = random_mdp(4, 3, 0.8, 21);
    let policy = uniform(4, 3);
    let exact = mdp::policy_evaluation(&mdp, policy.view())?;
    let est = mdp::monte_carlo_q(&mdp, policy.view(), 10_000, 150, 22)?;
    let mut worst_sigma: f64 = 0.0;
    for s in 0..4 {
        for a in 0..3 {
            let err = (est.mean[[s, a]] - exact.q[[s, a]]).abs();
            let allowed = 4.0 * est.std_err[[s, a]] + est.truncation_bias;
            if err > allowed {
                bail!("q({s},{a}) off by {err} (allowed {allowed})");
            }
            if est.std_err[[s, a]] > 0.0 {
                worst_sigma = worst_sigma.max(err / est.std_err[[s, a]]);
            }
        }
    }
    Ok(format!("12 entries within 4 standard errors (worst {worst_sigma:.2} sigma)"))
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

/// Empirical discounted occupancy from truncated rollouts.
fn mc_occupancy(
    mdp: &TabularMdp,
    policy: &Array2<f64>,
    start: &Array1<f64>,
    total_steps: usize,
    seed: u64,
) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = ((1e-9f64).ln() / mdp.gamma.ln()).ceil() as usize;
    let n_rollouts = (total_steps / horizon).max(1);
    let mut est = Array1::<f64>::zeros(mdp.n_states);
    for _ in 0..n_rollouts {
        let mut s = sample_index(start.view(), rng.gen::<f64>());
        let mut disc = 1.0 - mdp.gamma;
        for _ in 0..horizon {
            est[s] += disc;
            let a = sample_index(policy.row(s), rng.gen::<f64>());
            s = sample_index(
                mdp.transition.slice(ndarray::s![s, a, ..]),
                rng.gen::<f64>(),
            );
            disc *= mdp.gamma;
        }
    }
    est.mapv(|x| x / n_rollouts as f64)
}

fn visitation_vs_monte_carlo() -> Result<String> {
    let mdp = random_mdp(5, 3, 0.8, 23);
    let policy = uniform(5, 3);
    let exact = mdp::state_visitation(&mdp, policy.view())?;
    let est = mc_occupancy(&mdp, &policy, &mdp.rho.clone(), 1_000_000, 24);
    let tv: f64 = 0.5
        * exact
            .iter()
            .zip(est.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    if tv > 1e-2 {
        bail!("total variation {tv} above 1e-2");
    }
    Ok(format!("total variation {tv:.2e} over 1e6 rollout steps"))
}

fn sigma_vs_monte_carlo() -> Result<String> {
    let mdp = random_mdp(5, 3, 0.8, 25);
    let policy = uniform(5, 3);
    let (s0, a0) = (2, 1);
    let exact = mdp::state_action_visitation(&mdp, policy.view(), (s0, a0))?;
    let start = mdp.transition.slice(ndarray::s![s0, a0, ..]).to_owned();
    let state_occ = mc_occupancy(&mdp, &policy, &start, 1_000_000, 26);
    let mut tv = 0.0;
    for s in 0..5 {
        for a in 0..3 {
            tv += 0.5 * (exact[[s, a]] - state_occ[s] * policy[[s, a]]).abs();
        }
    }
    if tv > 1e-2 {
        bail!("total variation {tv} above 1e-2");
    }
    Ok(format!("total variation {tv:.2e} from the shifted start"))
}

fn grad_q_vs_fd() -> Result<String> {
    let mdp = random_mdp(4, 3, 0.8, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let meta = SoftmaxPolicy::tabular(Array2::from_shape_fn((4, 3), |_| {
        rng.gen_range(-1.0..1.0)
    }))?;
    let mut worst: f64 = 0.0;
    for (s, a) in [(0, 0), (2, 1), (3, 2)] {
        let analytic = hypergrad::grad_q_wrt_meta(&mdp, &meta, s, a)?;
        let x0 = meta.params_flat();
        let fd = hypergrad::central_difference_gradient(
            |x| {
                let candidate = meta.with_params_flat(x)?;
                Ok(mdp::policy_evaluation(&mdp, candidate.probs()?.view())?.q[[s, a]])
            },
            &x0,
            1e-5,
        )?;
        let diff = (&analytic - &fd).dot(&(&analytic - &fd)).sqrt();
        let rel = diff / fd.dot(&fd).sqrt().max(1e-10);
        if rel > 1e-5 {
            bail!("pair ({s},{a}): relative error {rel}");
        }
        worst = worst.max(rel);
    }
    Ok(format!("3 pairs, worst relative error {worst:.2e}"))
}

fn policy_gradient_identity() -> Result<String> {
    let mdp = random_mdp(4, 3, 0.85, 29);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let meta = SoftmaxPolicy::tabular(Array2::from_shape_fn((4, 3), |_| {
        rng.gen_range(-1.0..1.0)
    }))?;
    let analytic = policy::exact_policy_gradient(&mdp, &meta)?;
    let x0 = meta.params_flat();
    let fd = hypergrad::central_difference_gradient(
        |x| {
            let candidate = meta.with_params_flat(x)?;
            mdp::accumulated_reward(&mdp, candidate.probs()?.view())
        },
        &x0,
        1e-5,
    )?;
    let diff = (&analytic - &fd).dot(&(&analytic - &fd)).sqrt();
    let rel = diff / fd.dot(&fd).sqrt().max(1e-10);
    if rel > 1e-5 {
        bail!("relative error {rel}");
    }
    Ok(format!("score-weighted advantage form, relative error {rel:.2e}"))
}
