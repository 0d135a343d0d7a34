use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnalysisSettings, ReportError};
use crate::rollout::{ConditionTag, Plan, PolicyRef};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DangerousPolicy {
    /// Dangerous rollouts are failures and are counted in the flags.
    #[default]
    CountAsFailure,
    /// Dangerous rollouts are dropped from every denominator.
    Exclude,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_draws() -> usize {
    4000
}

fn default_level() -> f64 {
    0.95
}

fn default_conditions() -> Vec<ConditionTag> {
    vec![ConditionTag::nominal()]
}

/// Declarative campaign description. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-task comparisons use the Bonferroni level across policies only;
    /// tasks are not adjusted against each other.
    #[serde(default)]
    pub per_test_alpha: Option<f64>,
    #[serde(default = "default_draws")]
    pub dirichlet_draws: usize,
    #[serde(default = "default_level")]
    pub credible_level: f64,
    #[serde(default)]
    pub dangerous: DangerousPolicy,
    pub policies: Vec<PolicyRef>,
    pub tasks: Vec<String>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ConditionTag>,
    pub logs: Vec<PathBuf>,
    #[serde(default)]
    pub rubrics: Option<PathBuf>,
    #[serde(default)]
    pub predicates: Option<PathBuf>,
    /// Planned rollouts per (task, policy, condition), for validation.
    #[serde(default)]
    pub expected_per_cell: Option<i64>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CampaignConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ReportError> {
        let mut cfg: CampaignConfig = toml::from_str(text).map_err(|e| ReportError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ReportError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn settings(&self) -> AnalysisSettings {
        AnalysisSettings {
            alpha: self.alpha,
            per_test_alpha: self.per_test_alpha,
            seed: self.seed,
            dirichlet_draws: self.dirichlet_draws,
            credible_level: self.credible_level,
            dangerous: self.dangerous,
        }
    }

    /// Uniform plan keyed by blinding code; `None` without `expected_per_cell`.
    pub fn plan(&self) -> Option<Plan> {
        self.expected_per_cell.map(|expected| {
            Plan::uniform(
                self.tasks.iter().map(String::as_str),
                self.policies.iter().map(|p| p.blinding_code.as_str()),
                &self.conditions,
                expected,
            )
        })
    }

    fn check(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.policies.len() < 2 {
            return bad("at least 2 policies required".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        if self.logs.is_empty() {
            return bad("no logs".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        let mut codes = std::collections::BTreeSet::new();
        let mut ids = std::collections::BTreeSet::new();
        for p in &self.policies {
            if !ids.insert(&p.policy_id) {
                return bad(format!("duplicate policy id {:?}", p.policy_id));
            }
            if !codes.insert(&p.blinding_code) {
                return bad(format!("duplicate blinding code {:?}", p.blinding_code));
            }
        }
        Ok(())
    }
}
