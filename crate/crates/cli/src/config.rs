//! Experiment configuration: a sectioned key = value file (TOML) with a JSON
//! mirror, plus `--set section.key=value` overrides.

use anyhow::{bail, Context, Result};
use metarl::adapt::{AdaptConfig, QMode};
use metarl::meta::{MetaTrainConfig, StepRule};
use metarl::policy::DistanceMetric;
use metarl::tasks::{GridSpec, TaskDistribution, TaskPreset};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    /// `exact` or `mc` (Monte-Carlo action-value estimation).
    pub mode: String,
    pub task: TaskSection,
    pub adapt: AdaptSection,
    pub meta: MetaSection,
    pub analysis: AnalysisSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: "runs".into(),
            mode: "exact".into(),
            task: TaskSection::default(),
            adapt: AdaptSection::default(),
            meta: MetaSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// `low-variance` or `high-variance`; explicit grid fields below are
    /// used when no preset is named (`"none"` also disables the preset,
    /// since command-line overrides cannot unset a key).
    pub preset: Option<String>,
    pub n_tasks: usize,
    pub width: usize,
    pub height: usize,
    pub hole_prob: f64,
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub hole_reward: f64,
    pub gamma: f64,
    pub rho_uniform_mix: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            preset: Some("low-variance".into()),
            n_tasks: 20,
            width: 4,
            height: 4,
            hole_prob: 0.1,
            slip_prob: 0.0,
            goal_reward: 1.0,
            hole_reward: -1.0,
            gamma: 0.8,
            rho_uniform_mix: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// Distance metric index: 1 (forward KL), 2 (reverse KL), 3 (squared
    /// Euclidean).
    pub metric: u8,
    pub lambda: f64,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Rollouts and horizon for Monte-Carlo action-value estimation
    /// (`mode = "mc"`).
    pub mc_rollouts: usize,
    pub mc_horizon: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            metric: 1,
            lambda: 0.25,
            inner_tol: 1e-10,
            inner_max_iters: 500,
            mc_rollouts: 10_000,
            mc_horizon: 31,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub iterations: usize,
    /// `fixed`, `fixed-with-clip`, or `theorem`.
    pub step_rule: String,
    pub alpha: f64,
    pub clip_norm: f64,
    /// Advantage bound for the theorem step rule (required by that rule).
    pub a_max: Option<f64>,
    pub batch_size: usize,
    pub checkpoint_every: usize,
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            iterations: 500,
            step_rule: "fixed".into(),
            alpha: 3.0,
            clip_norm: 10.0,
            a_max: None,
            batch_size: 20,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Target gap between the softmax approximation and the deterministic
    /// optimum.
    pub tol: f64,
    /// Adaptation steps in meta-test curves.
    pub k_max: usize,
    /// 1, 2, or 3 to evaluate a single metric; 0 evaluates all three.
    pub bound_metric: u8,
    /// Per-metric regularization weights used for the measured adaptation;
    /// defaults follow the preset when omitted.
    pub lambda_train: Option<[f64; 3]>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            tol: 1e-6,
            k_max: 5,
            bound_metric: 0,
            lambda_train: None,
        }
    }
}

impl ExperimentConfig {
    /// Loads a TOML (or `.json`) config file and applies `--set` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                if p.extension().is_some_and(|e| e == "json") {
                    let mut json: serde_json::Value = serde_json::from_str(&text)?;
                    strip_nulls(&mut json);
                    let toml_text = toml::to_string(&json)?;
                    toml::from_str(&toml_text)?
                } else {
                    toml::from_str(&text)?
                }
            }
        };
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        let config: ExperimentConfig = table
            .try_into()
            .context("config does not match the expected schema")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(name) = &self.task.preset {
            if !matches!(name.as_str(), "none" | "") {
                TaskPreset::from_name(name)
                    .map_err(|e| anyhow::anyhow!("task.preset: {e}"))?;
            }
        }
        if !matches!(self.mode.as_str(), "exact" | "mc") {
            bail!("mode must be \"exact\" or \"mc\", got {:?}", self.mode);
        }
        DistanceMetric::from_index(self.adapt.metric)
            .map_err(|e| anyhow::anyhow!("adapt.metric: {e}"))?;
        if !matches!(
            self.meta.step_rule.as_str(),
            "fixed" | "fixed-with-clip" | "theorem"
        ) {
            bail!(
                "meta.step_rule must be \"fixed\", \"fixed-with-clip\" or \"theorem\", got {:?}",
                self.meta.step_rule
            );
        }
        if self.analysis.bound_metric > 3 {
            bail!("analysis.bound_metric must be 0..=3");
        }
        Ok(())
    }

    pub fn metric(&self) -> DistanceMetric {
        DistanceMetric::from_index(self.adapt.metric).expect("validated")
    }

    pub fn preset(&self) -> Option<TaskPreset> {
        match self.task.preset.as_deref() {
            None | Some("none") | Some("") => None,
            Some(name) => Some(TaskPreset::from_name(name).expect("validated")),
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        match self.preset() {
            Some(preset) => {
                let mut spec = preset.spec(self.seed);
                spec.rho_uniform_mix = self.task.rho_uniform_mix;
                spec
            }
            None => GridSpec {
                width: self.task.width,
                height: self.task.height,
                hole_prob: self.task.hole_prob,
                slip_prob: self.task.slip_prob,
                goal_reward: self.task.goal_reward,
                hole_reward: self.task.hole_reward,
                gamma: self.task.gamma,
                rho_uniform_mix: self.task.rho_uniform_mix,
                seed: self.seed,
                max_retries: 200,
            },
        }
    }

    pub fn n_tasks(&self) -> usize {
        match self.preset() {
            Some(preset) => preset.n_tasks(),
            None => self.task.n_tasks,
        }
    }

    pub fn build_distribution(&self) -> Result<TaskDistribution> {
        Ok(metarl::tasks::make_task_distribution(
            self.n_tasks(),
            &self.grid_spec(),
            self.seed,
        )?)
    }

    pub fn q_mode(&self) -> QMode {
        match self.mode.as_str() {
            "mc" => QMode::MonteCarlo {
                n_rollouts: self.adapt.mc_rollouts,
                horizon: self.adapt.mc_horizon,
                seed: self.seed,
            },
            _ => QMode::Exact,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        self.adapt_config_for(self.metric(), self.adapt.lambda)
    }

    pub fn adapt_config_for(&self, metric: DistanceMetric, lambda: f64) -> AdaptConfig {
        AdaptConfig {
            metric,
            lambda,
            q_mode: self.q_mode(),
            inner_tol: self.adapt.inner_tol,
            inner_max_iters: self.adapt.inner_max_iters,
            strict_lambda: false,
        }
    }

    pub fn train_config(&self) -> Result<MetaTrainConfig> {
        let step_rule = match self.meta.step_rule.as_str() {
            "fixed" => StepRule::Fixed {
                alpha: self.meta.alpha,
            },
            "fixed-with-clip" => StepRule::FixedWithClip {
                alpha: self.meta.alpha,
                clip_norm: self.meta.clip_norm,
            },
            "theorem" => StepRule::Theorem {
                a_max: self
                    .meta
                    .a_max
                    .context("meta.a_max is required by the theorem step rule")?,
            },
            _ => unreachable!("validated"),
        };
        Ok(MetaTrainConfig {
            iterations: self.meta.iterations,
            step_rule,
            adapt: self.adapt_config(),
            batch_size: self.meta.batch_size,
            seed: self.seed,
            checkpoint_every: self.meta.checkpoint_every,
        })
    }

    /// Per-metric regularization weights for measured adaptation: explicit
    /// config, else the preset defaults, else the configured lambda.
    pub fn lambda_train(&self) -> [f64; 3] {
        if let Some(v) = self.analysis.lambda_train {
            return v;
        }
        match self.preset() {
            Some(TaskPreset::HighVariance) => [0.5, 0.5, 0.04],
            Some(TaskPreset::LowVariance) => [0.25, 0.25, 0.02],
            None => [self.adapt.lambda; 3],
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Drops `null` entries so a JSON config can pass through TOML, which has no
/// null (absent keys fall back to defaults either way).
fn strip_nulls(value: &mut serde_json::Value) {
    if let serde_json::Value::Object(map) = value {
        map.retain(|_, v| !v.is_null());
        for v in map.values_mut() {
            strip_nulls(v);
        }
    }
}

/// Applies one `section.key=value` override to the parsed table. Values are
/// parsed as TOML literals, falling back to strings.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .with_context(|| format!("override {entry:?} is not of the form key=value"))?;
    // Parse the right-hand side as a TOML literal by wrapping it in a
    // one-entry document; bare words fall back to strings.
    let value: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        bail!("override path {path:?} is empty or malformed");
    }
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override path {path:?} crosses a non-table value"))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "meta.iterations=7".into(),
                "adapt.lambda=0.5".into(),
                "task.preset=\"high-variance\"".into(),
                "mode=\"mc\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.meta.iterations, 7);
        assert_eq!(cfg.adapt.lambda, 0.5);
        assert_eq!(cfg.task.preset.as_deref(), Some("high-variance"));
        assert_eq!(cfg.mode, "mc");
    }

    #[test]
    fn bad_preset_rejected() {
        let err = ExperimentConfig::load(None, &["task.preset=\"nope\"".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let err = ExperimentConfig::load(None, &["meta.typo_field=1".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn json_mirror_round_trip() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json().unwrap();
        let dir = std::env::temp_dir().join(format!("cfg-{}.json", std::process::id()));
        std::fs::write(&dir, json).unwrap();
        let loaded = ExperimentConfig::load(Some(&dir), &[]).unwrap();
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.meta.iterations, cfg.meta.iterations);
        std::fs::remove_file(&dir).unwrap();
    }
}
