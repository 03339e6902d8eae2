//! Run configuration. Precedence: command-line flags, then the config
//! file, then built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use genref_core::encoder::InputVariant;
use genref_core::pipeline::{ModelDims, PipelineConfig};
use genref_core::train::TrainConfig;
use genref_rating::StudyConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n: usize,
    /// Objects per scene; also the number of image regions.
    pub k: usize,
    /// Train / val / test fractions.
    pub fractions: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2200,
            k: 6,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub attention: usize,
    pub embed: usize,
    pub region_dim: usize,
    pub text_dim: usize,
    pub fused_dim: usize,
    pub n_refine: usize,
    pub variant: InputVariant,
    pub dropout: f64,
    pub max_answer_len: usize,
    pub max_rationale_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::desk(0);
        let p = PipelineConfig::new(d.clone());
        Self {
            hidden: d.hidden,
            attention: d.attention,
            embed: d.embed,
            region_dim: d.region_dim,
            text_dim: d.text_dim,
            fused_dim: d.fused_dim,
            n_refine: p.n_refine,
            variant: p.variant,
            dropout: p.dropout,
            max_answer_len: p.max_answer_len,
            max_rationale_len: p.max_rationale_len,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, regions: usize, vocab: usize) -> ModelDims {
        ModelDims {
            hidden: self.hidden,
            attention: self.attention,
            embed: self.embed,
            region_dim: self.region_dim,
            text_dim: self.text_dim,
            fused_dim: self.fused_dim,
            regions,
            vocab,
        }
    }

    pub fn pipeline(&self, regions: usize, vocab: usize, seed: u64) -> PipelineConfig {
        PipelineConfig {
            n_refine: self.n_refine,
            variant: self.variant,
            dims: self.dims(regions, vocab),
            max_answer_len: self.max_answer_len,
            max_rationale_len: self.max_rationale_len,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub study: StudyConfig,
}

/// Flag values that override the file and defaults when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<InputVariant>,
    pub refine: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.train.seed = self.seed;
        self.study.seed = self.seed;
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        if let Some(n) = o.refine {
            self.model.n_refine = n;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
    }
}
