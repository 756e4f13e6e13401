use std::path::PathBuf;

use kmq_core::{DistanceMetric, Error, Result, ScorerSpec, SelectionMethod};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Everything a command was asked to do. Validated before any work starts
/// and copied into every file the command writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(default)]
    pub corpus: Vec<PathBuf>,
    #[serde(default)]
    pub scores: Option<PathBuf>,
    #[serde(default)]
    pub method: Option<SelectionMethod>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub ks: Option<Vec<usize>>,
    #[serde(default)]
    pub clustering: Option<PathBuf>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub iterations: Option<usize>,
    pub metric: DistanceMetric,
    pub seed: u64,
    #[serde(default)]
    pub replacement: bool,
    #[serde(default)]
    pub scorer: Option<ScorerSpec>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Command-specific settings.
    #[serde(default)]
    pub options: serde_json::Map<String, Value>,
}

impl RunConfig {
    pub fn new(command: &str, metric: DistanceMetric, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            corpus: Vec::new(),
            scores: None,
            method: None,
            k: None,
            ks: None,
            clustering: None,
            budget: None,
            iterations: None,
            metric,
            seed,
            replacement: false,
            scorer: None,
            out: None,
            state_dir: None,
            threshold: None,
            options: serde_json::Map::new(),
        }
    }

    pub fn option(mut self, key: &str, value: impl Serialize) -> Self {
        self.options
            .insert(key.to_string(), serde_json::to_value(value).expect("plain value"));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == Some(0) {
            return bad("k must be at least 1".into());
        }
        if self.budget == Some(0) {
            return bad("budget must be at least 1".into());
        }
        if self.iterations == Some(0) {
            return bad("at least one iteration is required".into());
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold {t} is outside [0, 1]"));
            }
        }
        if let Some(ks) = &self.ks {
            if ks.is_empty() || ks.windows(2).any(|w| w[1] <= w[0]) {
                return bad("--ks must be a non-empty, strictly increasing list".into());
            }
        }
        if let (Some(b), Some(n)) = (self.budget, self.iterations) {
            if b < n {
                return Err(Error::InvalidBudget(format!("budget {b} is smaller than the {n} iterations")));
            }
        }
        Ok(())
    }

    /// The block embedded in output files.
    pub fn provenance(&self, corpus_sha256: &str) -> Value {
        json!({ "run_config": self, "corpus_sha256": corpus_sha256 })
    }
}

/// Resolves the budget from an absolute value or a fraction of `n`.
pub fn resolve_budget(budget: Option<usize>, ratio: f64, n: usize) -> Result<usize> {
    match budget {
        Some(b) => Ok(b),
        None => {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::InvalidArgument(format!("budget ratio {ratio} is outside (0, 1]")));
            }
            Ok(((n as f64 * ratio).round() as usize).max(1))
        }
    }
}
