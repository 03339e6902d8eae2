//! Page operations as plain Rust, so they run and test natively.

use std::ops::ControlFlow;

use genref_core::data::{generate_dataset, Sample, GRID};
use genref_core::experiment::{exact_match, prepare, Prepared};
use genref_core::metrics::{evaluate_corpus, EmbeddingProvider, MetricReport};
use genref_core::nn::tokenize;
use genref_core::pipeline::{block_name, ModelDims, Pipeline, PipelineConfig};
use genref_core::train::{train, TrainConfig};
use genref_core::{Error, Result};
use serde::Serialize;

const EMBED_DIM: usize = 32;

/// Scores hypothesis lines against reference lines, pairing them by line.
pub fn score_lines(hyps: &str, refs: &str, seed: u64) -> Result<MetricReport> {
    let h: Vec<&str> = hyps.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let r: Vec<&str> = refs.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if h.len() != r.len() {
        return Err(Error::Invalid(format!("{} hypothesis lines but {} reference lines", h.len(), r.len())));
    }
    let mut words: Vec<String> = h.iter().chain(&r).flat_map(|l| tokenize(l)).collect();
    words.sort();
    words.dedup();
    let provider = EmbeddingProvider::seeded(&words, EMBED_DIM, seed)?;
    evaluate_corpus(&h, &r, &provider)
}

/// `n` toy-world samples with `k` objects each.
pub fn scenes(seed: u64, n: usize, k: usize) -> Result<Vec<Sample>> {
    Ok(generate_dataset(seed, n, k)?.samples)
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation final-answer exact match, percent.
    pub val_answer_exact: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockAttention {
    pub block: String,
    pub tokens: Vec<String>,
    /// One distribution over the scene objects per emitted token.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionView {
    pub grid: u8,
    pub sample: Sample,
    pub blocks: Vec<BlockAttention>,
}

/// A small model trained one epoch per call on a generated world.
pub struct Demo {
    pipeline: Pipeline,
    data: Prepared,
    train_cfg: TrainConfig,
    epoch: usize,
}

impl Demo {
    pub fn new(seed: u64, n: usize, k: usize) -> Result<Self> {
        let ds = generate_dataset(seed, n, k)?;
        let dims = ModelDims {
            hidden: 32,
            attention: 16,
            embed: 16,
            region_dim: 16,
            text_dim: 16,
            fused_dim: 16,
            regions: k,
            vocab: ds.vocab()?.len(),
        };
        let data = prepare(&ds, [0.8, 0.2, 0.0], &dims, seed)?;
        let mut config = PipelineConfig::new(dims);
        config.dropout = 0.0;
        config.seed = seed;
        let train_cfg = TrainConfig {
            lr: 3e-3,
            decay: 1.0,
            batch_size: 16,
            epochs: 1,
            seed,
            ..TrainConfig::default()
        };
        Ok(Self {
            pipeline: Pipeline::new(config)?,
            data,
            train_cfg,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn val_len(&self) -> usize {
        self.data.val.len()
    }

    /// Optimizer moments restart with every call.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let cfg = TrainConfig {
            seed: self.train_cfg.seed.wrapping_add(self.epoch as u64),
            ..self.train_cfg.clone()
        };
        let report = train(&mut self.pipeline, &self.data.train, &[], &cfg, None, |_, _| ControlFlow::Continue(()))?;
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            train_loss: report.train_losses().last().copied().unwrap_or(f64::NAN),
            val_answer_exact: exact_match(&self.pipeline, &self.data.val)?,
        })
    }

    /// Greedy generation on validation sample `index` with every block's attention.
    pub fn attention(&self, index: usize) -> Result<AttentionView> {
        let (input, raw) = match (self.data.val.get(index), self.data.val_raw.get(index)) {
            (Some(s), Some(r)) => (&s.input, r),
            _ => return Err(Error::Invalid(format!("index {index} out of range for {} samples", self.data.val.len()))),
        };
        let out = self.pipeline.generate(input)?;
        let vocab = &self.data.vocab;
        let blocks = out
            .attention
            .iter()
            .enumerate()
            .map(|(b, weights)| {
                let seq = if b % 2 == 0 { &out.answers[b / 2] } else { &out.rationales[b / 2] };
                BlockAttention {
                    block: block_name(b),
                    tokens: seq.ids().iter().map(|&i| vocab.token(i).to_owned()).collect(),
                    weights: weights.clone(),
                }
            })
            .collect();
        Ok(AttentionView {
            grid: GRID,
            sample: raw.clone(),
            blocks,
        })
    }
}
