//! Run configuration: a TOML file with one table per concern, then flag
//! overrides on top. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibtag::analysis::ProbeConfig;
use vibtag::annealing::AnnealConfig;
use vibtag::synthetic::SyntheticConfig;
use vibtag::VIBConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: VIBConfig,
    pub anneal: AnnealConfig,
    pub probe: ProbeConfig,
    pub data: DataPaths,
    /// Synthetic corpus used with `--demo`.
    pub demo: SyntheticConfig,
    pub curve: CurveConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

/// Treebank and embedding files per split. Dev is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train_conllu: Option<PathBuf>,
    pub train_emb: Option<PathBuf>,
    pub dev_conllu: Option<PathBuf>,
    pub dev_emb: Option<PathBuf>,
    pub test_conllu: Option<PathBuf>,
    pub test_emb: Option<PathBuf>,
    /// Longer sentences are skipped.
    pub max_len: usize,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            train_conllu: None,
            train_emb: None,
            dev_conllu: None,
            dev_emb: None,
            test_conllu: None,
            test_emb: None,
            max_len: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub betas: Vec<f64>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            betas: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Monte-Carlo samples for the predictiveness term.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 5, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub iterations: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            iterations: 10_000,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section, so bad values fail before any data is read.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.anneal.validate()?;
        let p = &self.probe;
        if p.hidden == 0 || p.epochs == 0 || p.minibatch == 0 || p.test_samples == 0 {
            return Err(CliError::Usage("probe sizes must be positive".into()));
        }
        if self.data.max_len == 0 {
            return Err(CliError::Usage("data.max_len must be positive".into()));
        }
        if self.curve.betas.is_empty() || self.curve.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(CliError::Usage("curve.betas must be a non-empty list of finite β ≥ 0".into()));
        }
        if self.eval.samples == 0 {
            return Err(CliError::Usage("eval.samples must be positive".into()));
        }
        if self.compare.iterations == 0 {
            return Err(CliError::Usage("compare.iterations must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vibtag::encoders::TagMode;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[model]\nbetta = 1.0\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::parse("[demo]\nn_trian = 3\n").is_err());
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let cfg = RunConfig::parse(
            "[model]\nbeta = 0.01\nmode = { kind = \"discrete\", k = 4 }\n[model.decoder]\narc_dim = 7\n[demo]\nn_train = 12\n[curve]\nbetas = [1e-6, 10.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.model.beta, 0.01);
        assert_eq!(cfg.model.mode, TagMode::Discrete { k: 4 });
        assert_eq!(cfg.model.decoder.arc_dim, 7);
        assert_eq!(cfg.demo.n_train, 12);
        assert_eq!(cfg.curve.betas, vec![1e-6, 10.0]);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.curve.betas = vec![-1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.beta = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
