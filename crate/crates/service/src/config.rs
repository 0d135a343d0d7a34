use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use evalkit::protocol::{Authorization, Role};
use evalkit::report::{AnalysisSettings, DangerousPolicy};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// One static bearer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub token: String,
    pub user_id: String,
    pub role: Role,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_overlay_base() -> String {
    "/overlays".into()
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    /// Append-only JSONL event log; the only persistent state.
    pub event_log: PathBuf,
    #[serde(default)]
    pub rubrics: Option<PathBuf>,
    #[serde(default)]
    pub predicates: Option<PathBuf>,
    /// Prefix joined with an initial condition's overlay asset path.
    #[serde(default = "default_overlay_base")]
    pub overlay_base_url: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub per_test_alpha: Option<f64>,
    #[serde(default = "default_draws")]
    pub dirichlet_draws: usize,
    #[serde(default = "default_level")]
    pub credible_level: f64,
    #[serde(default)]
    pub dangerous: DangerousPolicy,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ServiceConfig {
    pub fn new(event_log: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: default_bind(),
            event_log: event_log.into(),
            rubrics: None,
            predicates: None,
            overlay_base_url: default_overlay_base(),
            seed: 0,
            alpha: default_alpha(),
            per_test_alpha: None,
            dirichlet_draws: default_draws(),
            credible_level: default_level(),
            dangerous: DangerousPolicy::default(),
            tokens: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let mut cfg: ServiceConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn check(&self) -> Result<(), ServiceError> {
        let mut seen = BTreeMap::new();
        for t in &self.tokens {
            if t.token.len() < 8 {
                return Err(ServiceError::Config(format!("token for {:?} is shorter than 8 characters", t.user_id)));
            }
            if seen.insert(t.token.as_str(), ()).is_some() {
                return Err(ServiceError::Config(format!("token for {:?} is not unique", t.user_id)));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ServiceError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
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
}

/// Maps a bearer token to a caller. Swap in another implementation to
/// back tokens with an external identity provider.
pub trait Authenticator: Send + Sync {
    fn authenticate(&self, token: &str) -> Option<Authorization>;
}

/// Tokens listed in the service config.
#[derive(Debug, Clone, Default)]
pub struct StaticTokens {
    tokens: BTreeMap<String, Authorization>,
}

impl StaticTokens {
    pub fn new(entries: &[TokenEntry]) -> Self {
        StaticTokens {
            tokens: entries
                .iter()
                .map(|t| {
                    (
                        t.token.clone(),
                        Authorization {
                            actor_id: t.user_id.clone(),
                            role: t.role,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl Authenticator for StaticTokens {
    fn authenticate(&self, token: &str) -> Option<Authorization> {
        self.tokens.get(token).cloned()
    }
}
