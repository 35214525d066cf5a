//! Experiment configuration: a flat TOML table whose keys can each be
//! overridden from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::federated::FederatedConfig;
use crate::gum::GumConfig;
use crate::model::Activation;
use crate::sinkhorn::TransportConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Label used in results.csv; defaults to the dataset file stem.
    pub name: Option<String>,
    pub k: Option<usize>,
    pub m: usize,
    pub rho: u32,
    /// `None` picks 0.01 for StackOverflow-like datasets and 1 otherwise.
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub tau: usize,
    pub adapter_lr: f64,
    pub head_lr: f64,
    pub seed: u64,
    pub adapter_enabled: bool,
    pub activation: Activation,
    pub hidden_dim: Option<usize>,
    pub schedule_updates: Option<usize>,
    pub refresh_warmup: Option<usize>,
    pub kmeans_restarts: usize,
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederatedConfig::default();
        Self {
            dataset: PathBuf::new(),
            name: None,
            k: None,
            m: 4,
            rho: 0,
            lambda: None,
            epsilon: fed.transport.epsilon,
            sinkhorn_iters: fed.transport.max_iters,
            sinkhorn_tol: fed.transport.marginal_tol,
            batch_size: fed.batch_size,
            rounds: fed.rounds,
            local_iters: fed.local_iters,
            tau: fed.gum.tau,
            adapter_lr: fed.adapter_lr,
            head_lr: fed.head_lr,
            seed: 0,
            adapter_enabled: fed.adapter,
            activation: fed.activation,
            hidden_dim: None,
            schedule_updates: None,
            refresh_warmup: None,
            kmeans_restarts: fed.kmeans_restarts,
            threads: 1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (if given), then applies `--key value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::at_path(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in parse_overrides(overrides)? {
            table.insert(key, value);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("`dataset` is required".into()));
        }
        match self.k {
            None => return Err(Error::Config("`k` is required".into())),
            Some(0) => return Err(Error::Config("`k` must be at least 1".into())),
            _ => {}
        }
        self.partition_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        self.federated().validate()
    }

    pub fn clusters(&self) -> usize {
        self.k.unwrap_or(0)
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| {
            let name = format!("{} {}", self.dataset_name(), self.dataset.display()).to_ascii_lowercase();
            if name.contains("stackoverflow") {
                0.01
            } else {
                1.0
            }
        })
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: if self.rho == 0 {
                PartitionMode::Iid
            } else {
                PartitionMode::Skew
            },
            m: self.m,
            rho: self.rho,
            seed: self.seed,
        }
    }

    pub fn federated(&self) -> FederatedConfig {
        FederatedConfig {
            clusters: self.clusters(),
            rounds: self.rounds,
            local_iters: self.local_iters,
            batch_size: self.batch_size,
            lambda: self.resolved_lambda(),
            transport: TransportConfig {
                epsilon: self.epsilon,
                max_iters: self.sinkhorn_iters,
                marginal_tol: self.sinkhorn_tol,
            },
            gum: GumConfig {
                tau: self.tau,
                ..GumConfig::default()
            },
            hidden_dim: self.hidden_dim,
            adapter: self.adapter_enabled,
            activation: self.activation,
            adapter_lr: self.adapter_lr,
            head_lr: self.head_lr,
            schedule_updates: self.schedule_updates,
            refresh_warmup: self.refresh_warmup,
            kmeans_iters: 100,
            kmeans_restarts: self.kmeans_restarts,
            seed: self.seed,
            threads: self.threads,
        }
    }
}

/// `--key value` and `--key=value` pairs; dashes in keys become
/// underscores. Values are read as TOML literals, falling back to strings.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --key flag, found `{arg}`")))?;
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(Error::Config("empty flag name".into()));
        }
        out.push((key.replace('-', "_"), toml_literal(&raw)));
    }
    Ok(out)
}

fn toml_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
