//! Pipeline configuration, read from a single TOML file.
//!
//! ```toml
//! input = "candidates.jsonl"
//! output_dir = "out"
//! seed = 0
//!
//! [sandbox]
//! timeout_seconds = 10.0
//! max_workers = 8
//! interpreter_command = "python3 {script}"
//!
//! [template]
//! bridge_text = "The provided code should satisfy the following assertions:"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dpl::DplHyperparams;
use crate::pairs::{BuildOptions, ConcatTemplate, DEFAULT_BRIDGE};
use crate::sandbox::{ExecutionLimits, SandboxCommand};
use crate::stats::LatentModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    #[serde(flatten)]
    pub limits: ExecutionLimits,
    #[serde(flatten)]
    pub command: SandboxCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub bridge_text: String,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            bridge_text: DEFAULT_BRIDGE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DplConfig {
    pub beta_dpo: f64,
    pub beta_kto: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for DplConfig {
    fn default() -> Self {
        DplConfig {
            beta_dpo: 0.2,
            beta_kto: 0.3,
            lambda_d: 1.0,
            lambda_u: 1.0,
            steps: 200,
            learning_rate: 0.1,
        }
    }
}

impl DplConfig {
    pub fn dpo_hyperparams(&self) -> DplHyperparams<f64> {
        DplHyperparams {
            beta: self.beta_dpo,
            lambda_d: self.lambda_d,
            lambda_u: self.lambda_u,
        }
    }

    pub fn kto_hyperparams(&self) -> DplHyperparams<f64> {
        DplHyperparams {
            beta: self.beta_kto,
            lambda_d: self.lambda_d,
            lambda_u: self.lambda_u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    /// Run cells missing from the cache; when off, the cache must be complete.
    pub execute: bool,
    pub emit_dpo: bool,
    pub emit_kto: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            execute: true,
            emit_dpo: true,
            emit_kto: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub p_code_correct: f64,
    pub p_test_valid: f64,
    pub invalid_test_pass_prob: f64,
    pub j: usize,
    pub n_trials: usize,
    pub confidence: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            p_code_correct: 0.5,
            p_test_valid: 0.6,
            invalid_test_pass_prob: 0.3,
            j: 10,
            n_trials: 100_000,
            confidence: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub forbid_same_code: bool,
    /// Break selection ties randomly (seeded) instead of by lowest index.
    pub random_tie_break: bool,
    pub sandbox: SandboxConfig,
    pub template: TemplateConfig,
    pub dpl: DplConfig,
    pub stages: StageToggles,
    pub simulate: SimulateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            output_dir: PathBuf::from("dstc-out"),
            seed: 0,
            forbid_same_code: false,
            random_tie_break: false,
            sandbox: SandboxConfig::default(),
            template: TemplateConfig::default(),
            dpl: DplConfig::default(),
            stages: StageToggles::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sandbox
            .limits
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sandbox.command.interpreter_command.trim().is_empty() {
            return Err(ConfigError::Invalid("sandbox.interpreter_command is empty".into()));
        }
        self.template()?;
        for h in [self.dpl.dpo_hyperparams(), self.dpl.kto_hyperparams()] {
            h.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.dpl.learning_rate.is_finite() && self.dpl.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("dpl.learning_rate must be positive".into()));
        }
        if !(0.0 < self.simulate.confidence && self.simulate.confidence < 1.0) {
            return Err(ConfigError::Invalid("simulate.confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The input path, which must exist.
    pub fn input_path(&self) -> Result<&Path, ConfigError> {
        let input = self
            .input
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid("no input path configured".into()))?;
        if !input.is_file() {
            return Err(ConfigError::Invalid(format!("input file {} does not exist", input.display())));
        }
        Ok(input)
    }

    pub fn template(&self) -> Result<ConcatTemplate, ConfigError> {
        ConcatTemplate::new(self.template.bridge_text.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn build_options(&self) -> Result<BuildOptions, ConfigError> {
        Ok(BuildOptions {
            template: self.template()?,
            forbid_same_code: self.forbid_same_code,
        })
    }

    pub fn latent_model(&self) -> LatentModel {
        LatentModel {
            p_code_correct: self.simulate.p_code_correct,
            p_test_valid: self.simulate.p_test_valid,
            invalid_test_pass_prob: self.simulate.invalid_test_pass_prob,
            j: self.simulate.j,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.sandbox.limits.timeout_seconds, 10.0);
        assert_eq!(c.dpl.beta_dpo, 0.2);
        assert_eq!(c.dpl.beta_kto, 0.3);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn parses_partial_toml() {
        let c: PipelineConfig = toml::from_str(
            r#"
            input = "in.jsonl"
            seed = 9
            [sandbox]
            timeout_seconds = 2.5
            max_workers = 3
            env_allowlist = ["PATH"]
            [template]
            bridge_text = "Checks:"
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.sandbox.limits.timeout_seconds, 2.5);
        assert_eq!(c.sandbox.limits.max_workers, 3);
        assert_eq!(c.sandbox.command.env_allowlist, vec!["PATH"]);
        assert_eq!(c.sandbox.command.interpreter_command, "python3 {script}");
        assert_eq!(c.template().unwrap().bridge_text(), "Checks:");
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = PipelineConfig::default();
        c.sandbox.limits.timeout_seconds = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.template.bridge_text = " ".into();
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.dpl.beta_kto = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_input_names_path() {
        let c = PipelineConfig {
            input: Some("/no/such/file.jsonl".into()),
            ..PipelineConfig::default()
        };
        assert!(c.input_path().unwrap_err().to_string().contains("/no/such/file.jsonl"));
    }
}
