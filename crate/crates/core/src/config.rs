//! Flat JSON run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{NetworkConfig, Protocol, TrainConfig};
use crate::search::SearchConfig;
use crate::search_space::Genotype;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Holdout,
    Loso,
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(Self::Holdout),
            "loso" => Ok(Self::Loso),
            _ => Err(Error::Config(format!("unknown protocol {s:?} (expected holdout or loso)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub search_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_noise: f64,
    pub second_order: bool,
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    /// Resize every sample to `input_size × input_size`; `None` keeps the stored size.
    pub input_size: Option<usize>,
    /// Class names in label order. Required when ingesting a dataset directory.
    pub classes: Option<Vec<String>>,
    pub protocol: ProtocolKind,
    pub test_fraction: f64,
    /// Timed single-image forward passes per fold; 0 skips the measurement.
    pub fps_runs: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            search_epochs: s.epochs,
            train_epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            alpha_lr: s.alpha_lr,
            alpha_noise: s.alpha_noise,
            second_order: false,
            cells: s.n_cells,
            nodes: s.n_nodes,
            channels: s.init_channels,
            input_size: None,
            classes: None,
            protocol: ProtocolKind::Holdout,
            test_fraction: 0.25,
            fps_runs: 100,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.search_config().validate()?;
        if self.cells < 2 {
            return Err(Error::Config(format!("cells must be at least 2, got {}", self.cells)));
        }
        if self.nodes < 4 {
            return Err(Error::Config(format!("nodes must be at least 4, got {}", self.nodes)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.input_size == Some(0) {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        if let Some(classes) = &self.classes {
            if classes.is_empty() {
                return Err(Error::Config("classes must not be empty".into()));
            }
            let mut sorted = classes.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != classes.len() {
                return Err(Error::Config(format!("duplicate class names in {classes:?}")));
            }
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.search_epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            alpha_lr: self.alpha_lr,
            alpha_noise: self.alpha_noise,
            n_cells: self.cells,
            n_nodes: self.nodes,
            init_channels: self.channels,
            seed: self.seed,
            second_order: self.second_order,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn network_config(&self, genotype: Genotype, in_channels: usize, num_classes: usize) -> NetworkConfig {
        NetworkConfig { genotype, n_cells: self.cells, init_channels: self.channels, in_channels, num_classes }
    }

    pub fn protocol(&self) -> Protocol {
        match self.protocol {
            ProtocolKind::Holdout => Protocol::Holdout { test_fraction: self.test_fraction },
            ProtocolKind::Loso => Protocol::Loso,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"seed": 4, "protocol": "loso"}"#).unwrap();
        assert_eq!((partial.seed, partial.protocol, partial.cells), (4, ProtocolKind::Loso, 5));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 4}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"cells": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"classes": ["a", "a"]}"#).is_err());
    }
}
