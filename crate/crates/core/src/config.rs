//! Run configuration shared by the library pipeline and the CLI.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::DEFAULT_CUTOFF;
use crate::detect::{ProbeClassifierConfig, DEFAULT_PROBE_STATES};
use crate::fingerprint::DEFAULT_FEW_MAX;
use crate::ingest::{Protocol, SubnetFilter};
use crate::similarity::{FeatureWeights, DEFAULT_GEO_TOLERANCE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Monitoring scope; each implies a default probe threshold ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Backbone,
    Isp,
    Enterprise,
}

impl Scope {
    pub fn default_epsilon(self) -> u64 {
        match self {
            Scope::Backbone => 10,
            Scope::Isp => 5,
            Scope::Enterprise => 0,
        }
    }
}

impl FromStr for Scope {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "backbone" => Ok(Scope::Backbone),
            "isp" => Ok(Scope::Isp),
            "enterprise" => Ok(Scope::Enterprise),
            other => Err(ConfigError::Invalid(format!("unknown scope {other:?}"))),
        }
    }
}

/// All tunables of a run. A JSON config file may set any subset of fields;
/// unspecified ones keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Minimum probes per scanner.
    pub epsilon: u64,
    /// Few/Multiple port boundary.
    pub x: usize,
    /// Similarity cutoff for the dendrogram.
    pub t: f64,
    /// Per-axis geolocation tolerance, degrees.
    pub d: f64,
    pub weights: FeatureWeights,
    pub probe_states: Vec<String>,
    pub protocols: Vec<Protocol>,
    pub geo_db: Option<PathBuf>,
    pub subnet: Option<String>,
    pub strict: bool,
    /// Worker threads for the matrix build; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epsilon: Scope::Backbone.default_epsilon(),
            x: DEFAULT_FEW_MAX,
            t: DEFAULT_CUTOFF,
            d: DEFAULT_GEO_TOLERANCE,
            weights: FeatureWeights::default(),
            probe_states: DEFAULT_PROBE_STATES.iter().map(|s| s.to_string()).collect(),
            protocols: vec![Protocol::Tcp],
            geo_db: None,
            subnet: None,
            strict: false,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn for_scope(scope: Scope) -> Self {
        RunConfig {
            epsilon: scope.default_epsilon(),
            ..RunConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.x < 1 {
            return Err(ConfigError::Invalid("x must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(ConfigError::Invalid(format!(
                "t = {} outside [0, 1]",
                self.t
            )));
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "d = {} must be positive",
                self.d
            )));
        }
        if self.threads == Some(0) {
            return Err(ConfigError::Invalid("threads must be positive".into()));
        }
        self.classifier()?;
        self.subnet_filter()?;
        Ok(())
    }

    pub fn classifier(&self) -> Result<ProbeClassifierConfig, ConfigError> {
        ProbeClassifierConfig::new(
            self.probe_states.iter().cloned(),
            self.protocols.iter().copied(),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn subnet_filter(&self) -> Result<Option<SubnetFilter>, ConfigError> {
        self.subnet
            .as_deref()
            .map(|s| {
                s.parse::<SubnetFilter>()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            })
            .transpose()
    }
}
