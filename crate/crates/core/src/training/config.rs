use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit in which the learning-rate step size is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StepUnit {
    Epoch,
    Iteration,
}

/// Every hyperparameter of a training run. TOML keys are the serde names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding width.
    #[serde(rename = "N")]
    pub feature_dim: usize,
    /// Patch feature length.
    #[serde(rename = "P")]
    pub patch_dim: usize,
    /// Gene count.
    #[serde(rename = "n")]
    pub genes: usize,
    /// Attention tokens per embedding.
    #[serde(rename = "T")]
    pub tokens: usize,
    /// Spatial neighbors per spot.
    #[serde(rename = "K")]
    pub neighbors: usize,
    /// Hypergraph convolution layers.
    #[serde(rename = "L")]
    pub layers: usize,
    pub tau_deg: usize,
    pub tau_temp: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub decay_rate: f64,
    pub step_size: usize,
    pub step_unit: StepUnit,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            patch_dim: 128,
            genes: 32,
            tokens: 8,
            neighbors: 8,
            layers: 2,
            tau_deg: 3,
            tau_temp: 0.05,
            lambda1: 1.0,
            lambda2: 0.5,
            lr: 1e-4,
            decay_rate: 0.9,
            step_size: 50,
            step_unit: StepUnit::Epoch,
            batch_size: 8,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("N", self.feature_dim),
            ("P", self.patch_dim),
            ("n", self.genes),
            ("T", self.tokens),
            ("K", self.neighbors),
            ("L", self.layers),
            ("tau_deg", self.tau_deg),
            ("step_size", self.step_size),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.feature_dim.is_multiple_of(self.tokens) {
            return Err(Error::invalid(format!(
                "T = {} must divide N = {}",
                self.tokens, self.feature_dim
            )));
        }
        if self.tau_deg > self.neighbors + 1 {
            return Err(Error::invalid(format!(
                "tau_deg = {} exceeds the K + 1 = {} nodes of a neighborhood",
                self.tau_deg,
                self.neighbors + 1
            )));
        }
        if !(self.tau_temp > 0.0 && self.tau_temp.is_finite()) {
            return Err(Error::invalid("tau_temp must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::invalid("decay_rate must lie in (0, 1]"));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.feature_dim / self.tokens
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let partial: ConfigOverrides = toml::from_str(text).map_err(|e| Error::parse("<config>", e.to_string()))?;
        let mut cfg = Self::default();
        partial.apply(&mut cfg);
        Ok(cfg)
    }
}

/// A sparse set of config values, as read from a TOML file or command-line
/// flags. Absent keys keep their current value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    #[serde(rename = "N")]
    pub feature_dim: Option<usize>,
    #[serde(rename = "P")]
    pub patch_dim: Option<usize>,
    #[serde(rename = "n")]
    pub genes: Option<usize>,
    #[serde(rename = "T")]
    pub tokens: Option<usize>,
    #[serde(rename = "K")]
    pub neighbors: Option<usize>,
    #[serde(rename = "L")]
    pub layers: Option<usize>,
    pub tau_deg: Option<usize>,
    pub tau_temp: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lr: Option<f64>,
    pub decay_rate: Option<f64>,
    pub step_size: Option<usize>,
    pub step_unit: Option<StepUnit>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl ConfigOverrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Values set in `other` win.
    pub fn merged(mut self, other: &Self) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            feature_dim,
            patch_dim,
            genes,
            tokens,
            neighbors,
            layers,
            tau_deg,
            tau_temp,
            lambda1,
            lambda2,
            lr,
            decay_rate,
            step_size,
            step_unit,
            batch_size,
            epochs,
            seed
        );
        self
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            feature_dim,
            patch_dim,
            genes,
            tokens,
            neighbors,
            layers,
            tau_deg,
            tau_temp,
            lambda1,
            lambda2,
            lr,
            decay_rate,
            step_size,
            step_unit,
            batch_size,
            epochs,
            seed
        );
    }
}

/// Learning rate after `step_count` steps of the configured unit:
/// `lr · decay_rate^⌊step_count / step_size⌋`.
pub fn lr_at(step_count: u64, cfg: &TrainConfig) -> f64 {
    let k = step_count / cfg.step_size.max(1) as u64;
    cfg.lr * cfg.decay_rate.powi(k.min(i32::MAX as u64) as i32)
}
