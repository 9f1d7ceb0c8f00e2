//! The run configuration: one TOML file with a section per component.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CoverageTarget;
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::topic_refiner::TopicConfig;
use crate::trainer::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL corpus; relative paths resolve against the config file.
    pub path: PathBuf,
    /// Chronological train / valid / test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus.jsonl"),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub coverage_target: CoverageTarget,
    /// Tokens ignored by the persona metrics.
    pub stopwords: Vec<String>,
    /// Held-out triplets scored per evaluation (0 = all).
    pub limit: usize,
    /// Profile sizes of the token-amount sweep.
    pub sweep_k_p: Vec<usize>,
    /// Sampling seeds averaged per sweep point.
    pub sweep_seeds: Vec<u64>,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coverage_target: CoverageTarget::History,
            stopwords: Vec::new(),
            limit: 200,
            sweep_k_p: vec![1, 5, 15, 30, 60, 120, 200],
            sweep_seeds: vec![1, 2, 3],
            sample_seed: 1,
        }
    }
}

/// Full-scale reference values, for documentation and `--reference`
/// presets: (key, value).
pub const REFERENCE_VALUES: [(&str, &str); 13] = [
    ("model.encoder.d_model", "768"),
    ("model.generator.d_model", "768"),
    ("model.encoder.heads", "12"),
    ("model.generator.heads", "12"),
    ("model.encoder.layers", "2"),
    ("model.generator.layers", "12"),
    ("topics.topics", "15"),
    ("pipeline.k_u", "10"),
    ("pipeline.k_p", "200 (Weibo-scale corpora) or 30 (Reddit-scale corpora)"),
    ("training.batch_refiner", "128"),
    ("training.batch_generator", "128"),
    ("training.refiner_optimizer.kind", "adam"),
    ("training.generator_optimizer.kind", "adamw-with-warmup"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialisation.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub topics: TopicConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            topics: TopicConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative corpus path is taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.corpus.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.corpus.path = dir.join(&cfg.corpus.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the resolved configuration as `config.toml` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    /// Default configuration annotated with the full-scale reference values.
    pub fn annotated_default() -> Result<String> {
        let mut out = String::from("# Desk-scale defaults. Full-scale reference values:\n");
        for (key, value) in REFERENCE_VALUES {
            out.push_str(&format!("#   {key} = {value}\n"));
        }
        out.push('\n');
        out.push_str(&Self::default().to_toml()?);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.corpus.split;
        if s.iter().any(|r| !(*r > 0.0)) || ((s.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corpus.split must be three positive fractions summing to 1, got {s:?}")));
        }
        let a = self.model.token_refiner.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("model.token_refiner.alpha must lie in (0, 1), got {a}")));
        }
        let p = self.model.generator.top_p;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("model.generator.top_p must lie in (0, 1], got {p}")));
        }
        if self.model.encoder.d_model != self.model.generator.d_model {
            return Err(Error::Config(
                "model.encoder.d_model must equal model.generator.d_model (shared token embeddings)".into(),
            ));
        }
        for (name, v) in [
            ("pipeline.k_u", self.pipeline.k_u),
            ("pipeline.k_p", self.pipeline.k_p),
            ("topics.topics", self.topics.topics),
            ("model.generator.max_len", self.model.generator.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval.sweep_k_p.contains(&0) {
            return Err(Error::Config("eval.sweep_k_p values must be positive".into()));
        }
        self.training.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let annotated = RunConfig::annotated_default().unwrap();
        assert_eq!(RunConfig::from_toml(&annotated).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[training]\nbatch_size = 3\n").unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[corpus]\nsplit = [0.5, 0.5, 0.5]\n").is_err());
        assert!(RunConfig::from_toml("[model.token_refiner]\nalpha = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[training]\nmax_steps = 0\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[pipeline]\nk_p = 5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pipeline.k_p, 5);
        assert_eq!(cfg.training, TrainingConfig::default());
    }
}
