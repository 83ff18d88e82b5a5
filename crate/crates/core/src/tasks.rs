//! Seeded generation and persistence of gridworld task distributions.
//!
//! Tasks are frozen-lake-style grids: the agent starts in one corner, the
//! goal sits in the opposite corner, holes are sampled per cell, and both
//! holes and the goal are absorbing. Stepping into the goal earns the goal
//! reward, stepping into a hole earns the hole reward, every other
//! transition earns zero.

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// Probability that any non-start, non-goal cell is a hole.
    pub hole_prob: f64,
    /// Probability of slipping to one of the two perpendicular directions
    /// (split evenly between them).
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub hole_reward: f64,
    pub gamma: f64,
    /// Uniform mass mixed into the initial distribution. Zero gives a point
    /// mass on the start cell; a positive value keeps every state's
    /// visitation probability bounded away from zero.
    pub rho_uniform_mix: f64,
    pub seed: u64,
    /// Layout re-draws allowed before generation fails because no
    /// start-to-goal path exists.
    pub max_retries: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Invalid("grid must be at least 2x2".into()));
        }
        if !(0.0..1.0).contains(&self.hole_prob) {
            return Err(Error::Invalid("hole_prob must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(Error::Invalid("slip_prob must lie in [0, 1]".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Invalid("gamma must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.rho_uniform_mix) {
            return Err(Error::Invalid("rho_uniform_mix must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn start_state(&self) -> usize {
        0
    }

    pub fn goal_state(&self) -> usize {
        self.n_states() - 1
    }
}

/// Named presets for the two benchmark task distributions: 4x4 grids,
/// `gamma = 0.8`, goal reward `+1`, hole reward `-1`, twenty tasks each,
/// differing in how likely holes are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskPreset {
    /// Hole probability 0.3.
    HighVariance,
    /// Hole probability 0.1.
    LowVariance,
}

impl TaskPreset {
    pub fn hole_prob(&self) -> f64 {
        match self {
            TaskPreset::HighVariance => 0.3,
            TaskPreset::LowVariance => 0.1,
        }
    }

    pub fn n_tasks(&self) -> usize {
        20
    }

    pub fn spec(&self, seed: u64) -> GridSpec {
        GridSpec {
            width: 4,
            height: 4,
            hole_prob: self.hole_prob(),
            slip_prob: 0.0,
            goal_reward: 1.0,
            hole_reward: -1.0,
            gamma: 0.8,
            rho_uniform_mix: 0.05,
            seed,
            max_retries: 200,
        }
    }

    pub fn distribution(&self, seed: u64) -> Result<TaskDistribution> {
        make_task_distribution(self.n_tasks(), &self.spec(seed), seed)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskPreset::HighVariance => "high-variance",
            TaskPreset::LowVariance => "low-variance",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "high-variance" | "high" => Ok(TaskPreset::HighVariance),
            "low-variance" | "low" => Ok(TaskPreset::LowVariance),
            other => Err(Error::Invalid(format!("unknown preset {other}"))),
        }
    }
}

const ACTIONS: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)]; // left, down, right, up

fn step_cell(spec: &GridSpec, row: usize, col: usize, action: usize) -> usize {
    let (dr, dc) = ACTIONS[action];
    let nr = row as isize + dr;
    let nc = col as isize + dc;
    if nr < 0 || nr >= spec.height as isize || nc < 0 || nc >= spec.width as isize {
        row * spec.width + col
    } else {
        nr as usize * spec.width + nc as usize
    }
}

fn sample_holes(spec: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = spec.n_states();
    let mut holes = vec![false; n];
    for (cell, hole) in holes.iter_mut().enumerate() {
        if cell == spec.start_state() || cell == spec.goal_state() {
            continue;
        }
        *hole = rng.gen::<f64>() < spec.hole_prob;
    }
    holes
}

fn goal_reachable(spec: &GridSpec, holes: &[bool]) -> bool {
    let n = spec.n_states();
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen[spec.start_state()] = true;
    queue.push_back(spec.start_state());
    while let Some(cell) = queue.pop_front() {
        if cell == spec.goal_state() {
            return true;
        }
        let (row, col) = (cell / spec.width, cell % spec.width);
        for a in 0..4 {
            let next = step_cell(spec, row, col, a);
            if !seen[next] && !holes[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    false
}

fn build_mdp(spec: &GridSpec, holes: &[bool]) -> Result<TabularMdp> {
    let n = spec.n_states();
    let goal = spec.goal_state();
    let mut transition = Array3::<f64>::zeros((n, 4, n));
    let mut reward = Array3::<f64>::zeros((n, 4, n));
    for s in 0..n {
        let absorbing = holes[s] || s == goal;
        for a in 0..4 {
            if absorbing {
                transition[[s, a, s]] = 1.0;
                continue;
            }
            let (row, col) = (s / spec.width, s % spec.width);
            // Intended direction plus the two perpendicular slips.
            let outcomes = [
                (a, 1.0 - spec.slip_prob),
                ((a + 1) % 4, spec.slip_prob / 2.0),
                ((a + 3) % 4, spec.slip_prob / 2.0),
            ];
            for (dir, p) in outcomes {
                if p == 0.0 {
                    continue;
                }
                let s2 = step_cell(spec, row, col, dir);
                transition[[s, a, s2]] += p;
            }
        }
    }
    for s in 0..n {
        let absorbing = holes[s] || s == goal;
        for a in 0..4 {
            for s2 in 0..n {
                if transition[[s, a, s2]] == 0.0 || absorbing {
                    continue;
                }
                if s2 == goal {
                    reward[[s, a, s2]] = spec.goal_reward;
                } else if holes[s2] {
                    reward[[s, a, s2]] = spec.hole_reward;
                }
            }
        }
    }
    let uniform = spec.rho_uniform_mix / n as f64;
    let mut rho = Array1::<f64>::from_elem(n, uniform);
    rho[spec.start_state()] += 1.0 - spec.rho_uniform_mix;
    TabularMdp::new(transition, reward, spec.gamma, rho)
}

/// Generates a gridworld task; deterministic given `spec.seed`. Fails when
/// no hole layout with a start-to-goal path is found within the retry
/// budget.
pub fn generate_frozen_lake(spec: &GridSpec) -> Result<TabularMdp> {
    Ok(generate_frozen_lake_with_layout(spec)?.0)
}

/// Same as [`generate_frozen_lake`], also returning the hole layout.
pub fn generate_frozen_lake_with_layout(spec: &GridSpec) -> Result<(TabularMdp, Vec<bool>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..=spec.max_retries {
        let holes = sample_holes(spec, &mut rng);
        if goal_reachable(spec, &holes) {
            return Ok((build_mdp(spec, &holes)?, holes));
        }
    }
    Err(Error::Generation(format!(
        "no reachable layout within {} retries (hole_prob {})",
        spec.max_retries, spec.hole_prob
    )))
}

/// A finite, weighted set of tasks sharing one state-action shape.
#[derive(Debug, Clone)]
pub struct TaskDistribution {
    pub tasks: Vec<TabularMdp>,
    pub weights: Vec<f64>,
    /// Grid template the tasks were drawn from, when generated here.
    pub spec: Option<GridSpec>,
    pub seed: u64,
}

impl TaskDistribution {
    pub fn new(tasks: Vec<TabularMdp>, weights: Vec<f64>, seed: u64) -> Result<Self> {
        let dist = TaskDistribution {
            tasks,
            weights,
            spec: None,
            seed,
        };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Invalid("task set must be non-empty".into()));
        }
        if self.tasks.len() != self.weights.len() {
            return Err(Error::ShapeMismatch("one weight per task required".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Invalid(format!(
                "weights must be a probability vector (sum {sum})"
            )));
        }
        let shape = (self.tasks[0].n_states, self.tasks[0].n_actions);
        for (i, t) in self.tasks.iter().enumerate() {
            if (t.n_states, t.n_actions) != shape {
                return Err(Error::ShapeMismatch(format!(
                    "task {i} has shape ({}, {}), expected {:?}",
                    t.n_states, t.n_actions, shape
                )));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.tasks[0].n_states
    }

    pub fn n_actions(&self) -> usize {
        self.tasks[0].n_actions
    }

    /// Largest reward-range width across tasks (the effective `r_max` after
    /// shifting rewards to be non-negative).
    pub fn r_max(&self) -> f64 {
        self.tasks.iter().map(|t| t.reward_span()).fold(0.0, f64::max)
    }

    pub fn gamma(&self) -> f64 {
        self.tasks[0].gamma
    }
}

/// Draws `n_tasks` independently seeded gridworlds with uniform weights.
pub fn make_task_distribution(
    n_tasks: usize,
    template: &GridSpec,
    seed: u64,
) -> Result<TaskDistribution> {
    if n_tasks == 0 {
        return Err(Error::Invalid("n_tasks must be at least 1".into()));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let mut spec = template.clone();
        spec.seed = rng.gen::<u64>();
        let task = generate_frozen_lake(&spec)
            .map_err(|e| Error::Generation(format!("task {i}: {e}")))?;
        tasks.push(task);
    }
    let weights = vec![1.0 / n_tasks as f64; n_tasks];
    Ok(TaskDistribution {
        tasks,
        weights,
        spec: Some(template.clone()),
        seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    spec: Option<GridSpec>,
    weights: Vec<f64>,
    files: Vec<String>,
    checksums: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Persists a distribution as one JSON file per task plus a manifest with
/// checksums.
pub fn save_distribution(dist: &TaskDistribution, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut checksums = Vec::new();
    for (i, task) in dist.tasks.iter().enumerate() {
        let name = format!("task_{i:03}.json");
        let text = task.to_json()?;
        checksums.push(sha256_hex(text.as_bytes()));
        std::fs::write(dir.join(&name), text)?;
        files.push(name);
    }
    let manifest = Manifest {
        version: 1,
        seed: dist.seed,
        spec: dist.spec.clone(),
        weights: dist.weights.clone(),
        files,
        checksums,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads a distribution saved by [`save_distribution`], verifying checksums.
pub fn load_distribution(dir: &Path) -> Result<TaskDistribution> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != 1 {
        return Err(Error::Serialization(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut tasks = Vec::with_capacity(manifest.files.len());
    for (name, expected) in manifest.files.iter().zip(manifest.checksums.iter()) {
        let text = std::fs::read_to_string(dir.join(name))?;
        let digest = sha256_hex(text.as_bytes());
        if digest != *expected {
            return Err(Error::Serialization(format!("checksum mismatch for {name}")));
        }
        tasks.push(TabularMdp::from_json(&text)?);
    }
    let dist = TaskDistribution {
        tasks,
        weights: manifest.weights,
        spec: manifest.spec,
        seed: manifest.seed,
    };
    dist.validate()?;
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis;
    use crate::mdp;
    use ndarray::Array2;

    fn open_spec(seed: u64) -> GridSpec {
        GridSpec {
            width: 4,
            height: 4,
            hole_prob: 0.0,
            slip_prob: 0.0,
            goal_reward: 1.0,
            hole_reward: -1.0,
            gamma: 0.8,
            rho_uniform_mix: 0.0,
            seed,
            max_retries: 50,
        }
    }

    #[test]
    fn hole_free_grid_has_positive_optimum_matching_value_iteration() {
        let mdp = generate_frozen_lake(&open_spec(3)).unwrap();
        let (q_star, v_star) = analysis::value_iteration(&mdp, 1e-13);
        // Shortest path on a 4x4 grid is 6 moves; the reward arrives on the
        // step entering the goal, so J* = gamma^5.
        let expected = mdp.gamma.powi(5);
        let j_star = mdp.rho.dot(&v_star);
        assert!((j_star - expected).abs() < 1e-9, "{j_star} vs {expected}");
        assert!(q_star.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn two_by_two_grid_optimal_return_is_hand_computable() {
        let spec = GridSpec {
            width: 2,
            height: 2,
            ..open_spec(1)
        };
        let mdp = generate_frozen_lake(&spec).unwrap();
        let (_, v_star) = analysis::value_iteration(&mdp, 1e-13);
        let j_star = mdp.rho.dot(&v_star);
        assert!((j_star - 0.8f64).abs() < 1e-10, "{j_star}");
    }

    #[test]
    fn same_seed_reproduces_identical_serialization() {
        let preset = TaskPreset::LowVariance;
        let a = generate_frozen_lake(&preset.spec(42)).unwrap();
        let b = generate_frozen_lake(&preset.spec(42)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn distinct_seeds_give_distinct_layouts() {
        let preset = TaskPreset::HighVariance;
        let (_, holes_a) = generate_frozen_lake_with_layout(&preset.spec(1)).unwrap();
        let (_, holes_b) = generate_frozen_lake_with_layout(&preset.spec(2)).unwrap();
        assert_ne!(holes_a, holes_b);
    }

    #[test]
    fn presets_produce_twenty_valid_tasks() {
        for preset in [TaskPreset::HighVariance, TaskPreset::LowVariance] {
            let dist = preset.distribution(7).unwrap();
            assert_eq!(dist.tasks.len(), 20);
            assert_eq!(dist.weights.len(), 20);
            assert!((dist.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for task in &dist.tasks {
                task.validate().unwrap();
                assert_eq!(task.n_states, 16);
                assert_eq!(task.n_actions, 4);
            }
        }
    }

    #[test]
    fn single_task_distribution_has_unit_weight() {
        let dist = make_task_distribution(1, &open_spec(5), 5).unwrap();
        assert_eq!(dist.weights, vec![1.0]);
    }

    #[test]
    fn absorbing_cells_self_loop_with_zero_reward() {
        let preset = TaskPreset::HighVariance;
        let (mdp, holes) = generate_frozen_lake_with_layout(&preset.spec(11)).unwrap();
        for (s, is_hole) in holes.iter().enumerate() {
            if *is_hole || s == 15 {
                for a in 0..4 {
                    assert_eq!(mdp.transition[[s, a, s]], 1.0);
                    assert_eq!(mdp.reward[[s, a, s]], 0.0);
                }
            }
        }
    }

    #[test]
    fn rho_mixture_keeps_visitation_floor_positive() {
        let preset = TaskPreset::LowVariance;
        let mdp = generate_frozen_lake(&preset.spec(13)).unwrap();
        let uniform = Array2::from_elem((16, 4), 0.25);
        let nu = mdp::state_visitation(&mdp, uniform.view()).unwrap();
        let floor = (1.0 - mdp.gamma) * 0.05 / 16.0;
        for s in 0..16 {
            assert!(nu[s] >= floor - 1e-12);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("task-dist-{}", std::process::id()));
        let dist = make_task_distribution(3, &open_spec(9), 9).unwrap();
        save_distribution(&dist, &dir).unwrap();
        let loaded = load_distribution(&dir).unwrap();
        assert_eq!(loaded.tasks.len(), 3);
        for (a, b) in dist.tasks.iter().zip(loaded.tasks.iter()) {
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn impossible_layout_budget_reports_generation_failure() {
        let mut spec = open_spec(1);
        spec.hole_prob = 0.98;
        spec.max_retries = 3;
        let err = generate_frozen_lake(&spec).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }
}
