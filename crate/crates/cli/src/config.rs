//! Run configuration file.
//!
//! Unknown keys are rejected. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    HighSim,
    LowSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Residual,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Expected feature dimension; checked against the data when set.
    pub d: Option<usize>,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k0: usize,
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
    pub period: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mmd_sigma: f64,
    /// Noise of generated samples.
    pub noise_sigma: f64,
    pub gen_per_class: usize,
    pub selection: Selection,
    pub domain: Domain,
    pub taxonomy: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d: None,
            tau: 0.07,
            alpha: 1.0,
            beta: 1.0,
            k0: 1,
            k1: 8,
            k2: 3,
            k3: 1,
            period: 8,
            lr: 0.0025,
            batch_size: 8,
            epochs: 20,
            mmd_sigma: 1.0,
            noise_sigma: 0.25,
            gen_per_class: 16,
            selection: Selection::HighSim,
            domain: Domain::Residual,
            taxonomy: None,
            dataset: None,
            generated: None,
            test: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = crate::read(path)?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.taxonomy,
            &mut cfg.dataset,
            &mut cfg.generated,
            &mut cfg.test,
            &mut cfg.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(
            (c.alpha, c.beta, c.k0, c.k1, c.k2, c.k3, c.period),
            (1.0, 1.0, 1, 8, 3, 1, 8)
        );
        assert_eq!(c.lr, 0.0025);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"alpah": 1.0}"#).is_err());
    }
}
