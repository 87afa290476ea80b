//! Experiment configuration: one JSON file with nested sections.

use std::path::{Path, PathBuf};

use dualfuse_core::data::{digest_json, CorpusConfig, Split};
use dualfuse_core::eval::DecodeOptions;
use dualfuse_core::noise::NoisePool;
use dualfuse_core::train::TrainConfig;
use dualfuse_core::{ModelConfig, VariantKind};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: Split,
    pub pools: Vec<NoisePool>,
    pub snrs: Vec<f64>,
    pub decode: DecodeOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Dev,
            pools: vec![NoisePool::A, NoisePool::B],
            snrs: vec![-5.0, 0.0, 5.0],
            decode: DecodeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub variants: Vec<VariantKind>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            variants: VariantKind::ALL.to_vec(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. Every section may be omitted except `seed`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Usage(format!("config file {} not found", path.display())),
            _ => CliError::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if value.get("seed").and_then(serde_json::Value::as_u64).is_none() {
            return Err("`seed` must be set to a non-negative integer".into());
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Ok(cfg.with_seed(None))
    }

    /// Applies a seed override. The one seed drives corpus, model
    /// initialisation, batching and noise.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.corpus.seed = self.seed;
        self.stage1.seed = self.seed;
        self.stage2.seed = self.seed;
        self
    }

    pub fn with_out_dir(mut self, out: Option<PathBuf>) -> Self {
        if let Some(o) = out {
            self.out_dir = o;
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.corpus.vocab != self.model.vocab {
            return Err(CliError::Usage(format!(
                "corpus vocab {} differs from model vocab {}",
                self.corpus.vocab, self.model.vocab
            )));
        }
        if self.corpus.audio_dim != self.model.audio_dim
            || self.corpus.frame_h != self.model.frame_h
            || self.corpus.frame_w != self.model.frame_w
        {
            return Err(CliError::Usage("corpus and model feature shapes differ".into()));
        }
        Ok(())
    }

    /// Digest of everything that determines results. The output directory
    /// is excluded so that identical runs in different places agree.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        digest_json(&serde_json::to_string(&c).expect("config serializes"))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.out_dir.join("corpus.jsonl")
    }

    pub fn manifest_path(&self, pool: NoisePool) -> PathBuf {
        self.out_dir.join(format!("noise_{}.json", pool.as_str()))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.csv")
    }

    pub fn ablation_path(&self) -> PathBuf {
        self.out_dir.join("ablation.csv")
    }
}
