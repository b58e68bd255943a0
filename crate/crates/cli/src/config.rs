//! Run configuration shared by `prune`, `baseline` and `sweep`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use taskprune::calibration::Balance;
use taskprune::masking::{Scope, SparsitySpec};
use taskprune::taskaware::{AlphaScale, NormMode, TaskAwareConfig};

use crate::error::{CliError, CliResult};

/// Everything that determines a run's outputs. Reports embed it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub model: PathBuf,
    pub general_corpus: PathBuf,
    pub task_corpus: Option<PathBuf>,
    pub general_eval: Option<PathBuf>,
    pub task_eval: Option<PathBuf>,
    pub task_valid: Option<PathBuf>,
    pub alpha: f64,
    pub layer_alpha: BTreeMap<String, f64>,
    pub alpha_scale: AlphaScale,
    pub norm_mode: NormMode,
    pub sparsity: String,
    pub scope: Scope,
    pub mean_normalize: bool,
    pub seed: u64,
    pub calib_samples: usize,
    pub balance: Balance,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn sparsity_spec(&self) -> CliResult<SparsitySpec> {
        parse_sparsity(&self.sparsity, self.scope)
    }

    pub fn task_aware(&self) -> TaskAwareConfig {
        TaskAwareConfig {
            alpha: self.alpha,
            norm_mode: self.norm_mode,
            alpha_scale: self.alpha_scale,
            mean_normalize: self.mean_normalize,
            layer_alpha: self.layer_alpha.clone(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.sparsity_spec()?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(CliError::Usage(format!("--alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if self.calib_samples == 0 {
            return Err(CliError::Usage("--calib-samples must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn parse_sparsity(text: &str, scope: Scope) -> CliResult<SparsitySpec> {
    SparsitySpec::parse(text, scope).map_err(|e| CliError::Usage(format!("--sparsity {text:?}: {e}")))
}

/// Parses `name=value` pairs.
pub fn parse_layer_alpha(items: &[String]) -> CliResult<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|item| {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--layer-alpha expects NAME=VALUE, got {item:?}")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--layer-alpha {item:?}: {value:?} is not a number")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Usage(format!("--layer-alpha {item:?}: threshold must be finite and >= 0")));
            }
            Ok((name.trim().to_string(), v))
        })
        .collect()
}

/// Parses a comma-separated list; empty entries are an error.
pub fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> CliResult<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(str::trim).collect();
    if items.iter().all(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("{flag} must not be empty")));
    }
    items.into_iter().map(|s| s.parse().map_err(|_| CliError::Usage(format!("{flag}: cannot parse {s:?}")))).collect()
}
