//! Problem configuration files and the line-delimited history format.

use crate::evaluator::{BuiltinEvaluator, Evaluator, Fidelity, LatencyModel, SubprocessEvaluator};
use crate::objective::{FomSpec, MetricSet};
use crate::orchestrator::{ObsStatus, Observation, RunConfig};
use crate::space::{Configuration, ParameterSpace, ParameterSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Evaluator section: either a builtin benchmark (optionally with injected
/// latencies) or an external command speaking the line protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_pre_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_post_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_pre: usize,
    pub interval: usize,
    pub n_init: usize,
    pub seed: u64,
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    pub n_candidates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_post: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_pre: 120,
            interval: 4,
            n_init: 10,
            seed: 0,
            gamma_alpha: 0.5,
            gamma_beta: 0.15,
            n_candidates: 64,
            n_post: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfigFile {
    /// May be omitted when the evaluator is a builtin benchmark, which
    /// carries its own space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<Vec<ParameterSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fom: Option<FomSpec>,
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub run: RunSection,
}

impl ProblemConfigFile {
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        let file: Self = serde_json::from_str(&text)?;
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match (&self.evaluator.builtin, &self.evaluator.command) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "evaluator must name either a builtin or a command, not both".into(),
            )),
            (None, None) => Err(ConfigError::Invalid(
                "evaluator must name a builtin benchmark or a command".into(),
            )),
            (None, Some(_)) if self.space.is_none() || self.fom.is_none() => {
                Err(ConfigError::Invalid(
                    "command evaluators require explicit space and fom sections".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Resolves the file into a run configuration and an evaluator.
    /// `speed_factor` scales any injected latencies (0 disables them).
    pub fn build(&self, speed_factor: f64) -> Result<(RunConfig, Box<dyn Evaluator>), ConfigError> {
        let (space, fom, evaluator): (ParameterSpace, FomSpec, Box<dyn Evaluator>) =
            if let Some(name) = &self.evaluator.builtin {
                let mut ev = BuiltinEvaluator::new(name)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if let Some(latency) = &self.evaluator.latency {
                    let mut latency = latency.clone();
                    latency.speed_factor = speed_factor;
                    ev = ev.with_latency(latency);
                }
                let def = ev.def();
                let space = match &self.space {
                    Some(specs) => ParameterSpace::new(specs.clone())
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                    None => def.space.clone(),
                };
                let fom = self.fom.clone().unwrap_or_else(|| def.fom.clone());
                (space, fom, Box::new(ev))
            } else {
                let command = self.evaluator.command.clone().unwrap();
                if command.is_empty() {
                    return Err(ConfigError::Invalid("evaluator command is empty".into()));
                }
                let mut ev = SubprocessEvaluator::new(command);
                if let Some(t) = self.evaluator.timeout_pre_s {
                    ev.timeout_pre = Duration::from_secs_f64(t);
                }
                if let Some(t) = self.evaluator.timeout_post_s {
                    ev.timeout_post = Duration::from_secs_f64(t);
                }
                let space = ParameterSpace::new(self.space.clone().unwrap())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                (space, self.fom.clone().unwrap(), Box::new(ev))
            };

        fom.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut cfg = RunConfig::new(space, fom);
        cfg.n_pre = self.run.n_pre;
        cfg.interval = self.run.interval;
        cfg.n_init = self.run.n_init.min(self.run.n_pre);
        cfg.seed = self.run.seed;
        cfg.gamma_alpha = self.run.gamma_alpha;
        cfg.gamma_beta = self.run.gamma_beta;
        cfg.n_candidates = self.run.n_candidates;
        cfg.n_post = self.run.n_post;
        Ok((cfg, evaluator))
    }
}

/// One line of history.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    pub iter: usize,
    pub fidelity: Fidelity,
    pub config: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective: Option<f64>,
    pub status: ObsStatus,
    pub duration_ms: u64,
}

impl HistoryRecord {
    pub fn from_observation(obs: &Observation, space: &ParameterSpace) -> Self {
        let config = space
            .specs()
            .iter()
            .zip(&obs.config.values)
            .map(|(s, v)| (s.name.clone(), *v))
            .collect();
        Self {
            iter: obs.index,
            fidelity: obs.fidelity,
            config,
            metrics: obs.metrics.clone(),
            fom: obs.fom.as_ref().map(|f| f.raw_fom),
            violation: obs.fom.as_ref().map(|f| f.violation),
            effective: obs.fom.as_ref().map(|f| f.effective),
            status: obs.status,
            duration_ms: obs.duration_ms,
        }
    }

    /// Reconstructs the value vector in the space's parameter order.
    pub fn config_values(&self, space: &ParameterSpace) -> Result<Configuration, ConfigError> {
        let values = space
            .specs()
            .iter()
            .map(|s| {
                self.config
                    .get(&s.name)
                    .copied()
                    .ok_or_else(|| ConfigError::Invalid(format!("record missing parameter `{}`", s.name)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(Configuration { values })
    }
}

pub fn write_history(records: &[HistoryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("history records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRecord>, ConfigError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| ConfigError::Invalid(format!("history line {}: {e}", i + 1)))
        })
        .collect()
}
