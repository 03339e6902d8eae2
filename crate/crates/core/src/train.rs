//! Adam training with per-epoch learning-rate decay, plus the end-to-end
//! finite-difference check of the whole chain.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_cross_entropy, GradCheckReport, GradientMap};
use crate::checkpoint::save_checkpoint;
use crate::encoder::MultimodalInput;
use crate::error::{invalid, Error, Result};
use crate::nn::{Mode, TokenId, TokenSeq, EOS};
use crate::params::ParamStore;
use crate::pipeline::{mix_seed, Pipeline, PipelineConfig, TrainSample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            decay: 0.9,
            batch_size: 16,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return invalid(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be ≥ 1");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.params() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses.
    pub train_loss: f64,
    /// Mean per-sample loss on the validation split (eval mode).
    pub val_loss: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainingReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

/// Browsers without a monotonic clock in std report zero.
#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

/// Runs up to `cfg.epochs` epochs of seeded-shuffled mini-batches; the
/// callback sees each epoch's stats and the updated model and may stop
/// training early. The final parameters are written to `checkpoint` when
/// given.
pub fn train(
    pipeline: &mut Pipeline,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats, &Pipeline) -> ControlFlow<()>,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let elapsed = stopwatch();
    let mut adam = Adam::new(pipeline.store(), cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainingReport {
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoint: None,
    };
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let seed = mix_seed(cfg.seed, epoch as u64, 2 + b as u64);
            let (lb, mut grads) = pipeline.loss_and_gradients(&batch, Mode::Train, seed)?;
            if !lb.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: lb.total,
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(pipeline.store_mut(), &grads);
            loss_sum += lb.total;
            batches += 1;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(pipeline.forward_train(val_set, Mode::Eval, 0)?.total)
        };
        let stats = EpochStats {
            epoch,
            lr: adam.lr(),
            train_loss: loss_sum / batches as f64,
            val_loss,
            elapsed_secs: elapsed(),
        };
        let flow = on_epoch(&stats, pipeline);
        report.epochs.push(stats);
        adam.set_lr(adam.lr() * cfg.decay);
        if flow.is_break() {
            break;
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(pipeline, path)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    Ok(report)
}

/// Random inputs and gold sequences of exactly the configured maximum
/// lengths, for checks that do not need meaningful data.
pub fn random_samples(config: &PipelineConfig, n: usize, seed: u64) -> Vec<TrainSample> {
    let d = &config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut r = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let regions = Tensor::matrix(d.regions, d.region_dim, r(d.regions * d.region_dim)).expect("sizes agree");
            let input = MultimodalInput::new(regions, r(d.text_dim), r(d.text_dim)).expect("finite");
            let mut seq = |len: usize| {
                let mut ids: Vec<TokenId> = (1..len).map(|_| rng.gen_range(4..d.vocab as TokenId)).collect();
                ids.push(EOS);
                TokenSeq::new(ids).expect("well-formed")
            };
            let answer = seq(config.max_answer_len);
            let rationale = seq(config.max_rationale_len);
            TrainSample { input, answer, rationale }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineGradCheck {
    pub report: GradCheckReport,
    /// Largest |∂ℒ/∂V| over the checked samples' region features.
    pub region_grad_max_abs: f64,
    pub num_params: usize,
}

/// Finite-difference check of every parameter of a freshly initialized
/// pipeline on `n_samples` random samples.
pub fn grad_check_pipeline(config: &PipelineConfig, n_samples: usize, epsilon: f64) -> Result<PipelineGradCheck> {
    let pipeline = Pipeline::new(config.clone())?;
    let samples = random_samples(config, n_samples.max(1), mix_seed(config.seed, 7, 7));
    let mut region_grad_max_abs: f64 = 0.0;
    for s in &samples {
        let (_, _, rg) = pipeline.sample_gradients(s)?;
        for v in rg.data() {
            region_grad_max_abs = region_grad_max_abs.max(v.abs());
        }
    }
    let mut store = pipeline.store().clone();
    let report = grad_check_cross_entropy(&mut store, &[], epsilon, |g| pipeline.build_cross_entropy_terms(g, &samples))?;
    Ok(PipelineGradCheck {
        report,
        region_grad_max_abs,
        num_params: pipeline.store().num_scalars(),
    })
}
