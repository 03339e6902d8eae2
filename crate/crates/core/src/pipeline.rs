//! The generation-refinement chain AG → RG → AR → RR.
//!
//! Each block receives the previous block's summary `h^p` (zeros for the
//! first one). Training runs every block teacher-forced and sums the
//! per-block cross-entropies; generation runs every block greedily.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CrossEntropyTerm, GradientMap, Graph, NodeId};
use crate::block::{unroll, BlockContext, BlockDims, BlockParams, Regularizer, SharedParams, UnrollMode};
use crate::block::AttentionParams;
use crate::encoder::{encode, EncoderParams, InputVariant, MultimodalInput};
use crate::error::{invalid, Error, Result};
use crate::nn::{masked_cross_entropy, EmbeddingTable, Mode, TokenSeq};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Layer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// LSTM hidden size `H`.
    pub hidden: usize,
    /// Attention MLP size `A`.
    pub attention: usize,
    /// Word embedding size `E`.
    pub embed: usize,
    /// Region feature size `D`.
    pub region_dim: usize,
    /// Question/caption embedding size `B`.
    pub text_dim: usize,
    /// Fused text size `L`.
    pub fused_dim: usize,
    /// Regions per image `k`.
    pub regions: usize,
    /// Vocabulary size `|V|`.
    pub vocab: usize,
}

impl ModelDims {
    /// Laptop-scale defaults.
    pub fn desk(vocab: usize) -> Self {
        Self {
            hidden: 64,
            attention: 32,
            embed: 32,
            region_dim: 16,
            text_dim: 32,
            fused_dim: 24,
            regions: 6,
            vocab,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            attention: 4,
            embed: 6,
            region_dim: 4,
            text_dim: 6,
            fused_dim: 5,
            regions: 3,
            vocab: 20,
        }
    }

    pub fn block(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden,
            embed: self.embed,
            region_dim: self.region_dim,
            fused_dim: self.fused_dim,
            vocab: self.vocab,
        }
    }

    /// Closed-form count of trainable scalars for `blocks` blocks.
    pub fn param_count(&self, blocks: usize) -> usize {
        let (h, a, e, d, b, l, v) = (
            self.hidden,
            self.attention,
            self.embed,
            self.region_dim,
            self.text_dim,
            self.fused_dim,
            self.vocab,
        );
        let shared = v * e + d * a + h * a + a;
        let encoder = 2 * b * l + 2 * l * l + 2 * (l * l + l);
        let lstm = |input: usize| input * 4 * h + h * 4 * h + 4 * h;
        let per_block = lstm(3 * h + d + l + e) + lstm(3 * h + d + l) + h * v + v;
        shared + encoder + blocks * per_block
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Refinement modules after the generation module (0, 1 or 2).
    pub n_refine: usize,
    pub variant: InputVariant,
    pub dims: ModelDims,
    /// Greedy decoding limits, EOS included.
    pub max_answer_len: usize,
    pub max_rationale_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            n_refine: 1,
            variant: InputVariant::Qic,
            dims,
            max_answer_len: 9,
            max_rationale_len: 13,
            dropout: 0.5,
            seed: 0,
        }
    }

    /// The gradient-check configuration: answers ≤ 3 and rationales ≤ 4 tokens.
    pub fn tiny() -> Self {
        Self {
            max_answer_len: 3,
            max_rationale_len: 4,
            dropout: 0.0,
            ..Self::new(ModelDims::tiny())
        }
    }

    /// Same sizes with a different refinement count and input variant.
    pub fn configure_variant(&self, n_refine: usize, variant: InputVariant) -> Result<Self> {
        if n_refine > 2 {
            return invalid(format!("n_refine must be 0, 1 or 2, got {n_refine}"));
        }
        Ok(Self {
            n_refine,
            variant,
            ..self.clone()
        })
    }

    pub fn num_blocks(&self) -> usize {
        2 + 2 * self.n_refine
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_refine > 2 {
            return invalid(format!("n_refine must be 0, 1 or 2, got {}", self.n_refine));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let d = &self.dims;
        let sizes = [d.hidden, d.attention, d.embed, d.region_dim, d.text_dim, d.fused_dim, d.regions];
        if sizes.contains(&0) || d.vocab < 5 {
            return invalid(format!("degenerate model sizes {d:?}"));
        }
        if self.max_answer_len == 0 || self.max_rationale_len == 0 {
            return invalid("decoding limits must be ≥ 1");
        }
        Ok(())
    }
}

/// Block names in chain order.
pub fn block_name(index: usize) -> String {
    let role = if index % 2 == 0 { "answer" } else { "rationale" };
    let stage = index / 2;
    match (role, stage) {
        ("answer", 0) => "ag".into(),
        ("rationale", 0) => "rg".into(),
        ("answer", 1) => "ar".into(),
        ("rationale", 1) => "rr".into(),
        ("answer", s) => format!("ar{s}"),
        (_, s) => format!("rr{s}"),
    }
}

/// A training example: encoded inputs and gold sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: MultimodalInput,
    pub answer: TokenSeq,
    pub rationale: TokenSeq,
}

/// Per-block losses; `total` is the left-to-right sum of `terms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch-mean cross-entropy of each block.
    pub terms: Vec<f64>,
    pub total: f64,
    /// Summed loss of each sample.
    pub per_sample: Vec<f64>,
    /// Block steps executed over the batch.
    pub steps: usize,
}

/// Log-probabilities of the gold sequences, one factor per block.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLikelihood {
    pub factors: Vec<f64>,
    pub sum: f64,
    /// Per-block, per-step gold log-probabilities.
    pub step_log_probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// A1, A2, ... in chain order.
    pub answers: Vec<TokenSeq>,
    /// R1, R2, ...
    pub rationales: Vec<TokenSeq>,
    /// Per block, per step attention weights (empty without the image).
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl GenerationOutput {
    pub fn final_answer(&self) -> &TokenSeq {
        self.answers.last().expect("at least one answer block")
    }

    pub fn final_rationale(&self) -> &TokenSeq {
        self.rationales.last().expect("at least one rationale block")
    }
}

struct SampleGraph {
    terms: Vec<NodeId>,
    total: NodeId,
    log_probs: Vec<Vec<f64>>,
    /// Per-step logits paired with their gold token.
    scored: Vec<(NodeId, usize)>,
    steps: usize,
}

/// Parameters and wiring of the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    config: PipelineConfig,
    store: ParamStore,
    shared: SharedParams,
    encoder: EncoderParams,
    blocks: Vec<BlockParams>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed and two counters.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(a)) ^ splitmix(b.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

impl Pipeline {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dims;
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::init(&mut store, "emb.w_e", d.vocab, d.embed, &mut rng);
        let attention = AttentionParams::init(&mut store, d.region_dim, d.hidden, d.attention, &mut rng);
        let encoder = EncoderParams::init(&mut store, d.text_dim, d.fused_dim, &mut rng);
        let blocks = (0..config.num_blocks())
            .map(|i| BlockParams::init(&mut store, &block_name(i), d.block(), &mut rng))
            .collect();
        Ok(Self {
            config,
            store,
            shared: SharedParams { embedding, attention },
            encoder,
            blocks,
        })
    }

    /// Replaces every parameter with values from `store`, which must match
    /// names and shapes exactly.
    pub fn with_params(config: PipelineConfig, store: ParamStore) -> Result<Self> {
        let mut p = Self::new(config)?;
        if p.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                p.store.len(),
                store.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in p.store.iter().zip(store.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        p.store = store;
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn shared(&self) -> &SharedParams {
        &self.shared
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    fn check_input(&self, input: &MultimodalInput) -> Result<()> {
        let d = &self.config.dims;
        if input.region_dim() != d.region_dim || input.question.len() != d.text_dim {
            return Err(Error::Shape {
                op: "pipeline_input",
                lhs: vec![input.num_regions(), input.region_dim(), input.question.len()],
                rhs: vec![d.regions, d.region_dim, d.text_dim],
            });
        }
        Ok(())
    }

    fn sample_graph(
        &self,
        g: &mut Graph<'_>,
        sample: &TrainSample,
        reg: &mut Regularizer<'_>,
        regions_grad: bool,
    ) -> Result<(SampleGraph, NodeId)> {
        self.check_input(&sample.input)?;
        let dims = self.config.dims.block();
        let enc = encode(g, &self.encoder, &sample.input, self.config.variant, regions_grad)?;
        let mut summary = g.constant(Tensor::zeros(&[dims.summary()]));
        let mut terms = Vec::with_capacity(self.blocks.len());
        let mut log_probs = Vec::with_capacity(self.blocks.len());
        let mut scored = Vec::new();
        let mut steps = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            let gold = if i % 2 == 0 { &sample.answer } else { &sample.rationale };
            let ctx = BlockContext::new(g, block, &self.shared, dims, &enc, summary)?;
            let out = unroll(g, block, &self.shared, dims, &ctx, UnrollMode::TeacherForced(gold), reg)?;
            let ce = masked_cross_entropy(g, &out.logits, gold)?;
            scored.extend(out.logits.iter().zip(gold.ids()).map(|(&l, &t)| (l, t as usize)));
            steps += out.steps;
            terms.push(ce.loss);
            log_probs.push(ce.log_probs);
            summary = out.summary;
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok((
            SampleGraph {
                terms,
                total,
                log_probs,
                scored,
                steps,
            },
            enc.regions,
        ))
    }

    fn per_sample<T: Send>(
        &self,
        batch: &[TrainSample],
        f: impl Fn(usize, &TrainSample) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            batch.par_iter().enumerate().map(|(i, s)| f(i, s)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            batch.iter().enumerate().map(|(i, s)| f(i, s)).collect()
        }
    }

    fn breakdown(&self, per: &[(Vec<f64>, f64, usize)]) -> LossBreakdown {
        let n = per.len() as f64;
        let mut terms = vec![0.0; self.blocks.len()];
        for (t, _, _) in per {
            for (acc, v) in terms.iter_mut().zip(t) {
                *acc += v;
            }
        }
        terms.iter_mut().for_each(|t| *t /= n);
        let mut total = 0.0;
        for t in &terms {
            total += t;
        }
        LossBreakdown {
            terms,
            total,
            per_sample: per.iter().map(|(_, s, _)| *s).collect(),
            steps: per.iter().map(|(_, _, s)| s).sum(),
        }
    }

    /// Teacher-forced losses of a batch. `seed` drives dropout in train mode.
    pub fn forward_train(&self, batch: &[TrainSample], mode: Mode, seed: u64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return invalid("forward_train on an empty batch");
        }
        let per = self.per_sample(batch, |i, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0));
            let mut reg = Regularizer {
                mode,
                p: self.config.dropout,
                rng: &mut rng,
            };
            let mut g = Graph::new(&self.store);
            let (sg, _) = self.sample_graph(&mut g, s, &mut reg, false)?;
            let terms: Vec<f64> = sg.terms.iter().map(|&t| g.scalar(t)).collect();
            Ok((terms, g.scalar(sg.total), sg.steps))
        })?;
        Ok(self.breakdown(&per))
    }

    /// Losses and batch-mean gradients, reduced in sample order.
    pub fn loss_and_gradients(&self, batch: &[TrainSample], mode: Mode, seed: u64) -> Result<(LossBreakdown, GradientMap)> {
        if batch.is_empty() {
            return invalid("forward_train on an empty batch");
        }
        let per = self.per_sample(batch, |i, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0));
            let mut reg = Regularizer {
                mode,
                p: self.config.dropout,
                rng: &mut rng,
            };
            let mut g = Graph::new(&self.store);
            let (sg, _) = self.sample_graph(&mut g, s, &mut reg, false)?;
            let grads = g.backward(sg.total)?;
            let terms: Vec<f64> = sg.terms.iter().map(|&t| g.scalar(t)).collect();
            Ok(((terms, g.scalar(sg.total), sg.steps), grads))
        })?;
        let mut grads = GradientMap::zeros_like(&self.store);
        for (_, g) in &per {
            grads.accumulate(g);
        }
        grads.scale(1.0 / batch.len() as f64);
        let stats: Vec<_> = per.into_iter().map(|(s, _)| s).collect();
        Ok((self.breakdown(&stats), grads))
    }

    /// Batch-mean loss as a graph node (eval mode), for gradient checks.
    pub fn build_loss(&self, g: &mut Graph<'_>, batch: &[TrainSample]) -> Result<NodeId> {
        if batch.is_empty() {
            return invalid("build_loss on an empty batch");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Regularizer {
            mode: Mode::Eval,
            p: self.config.dropout,
            rng: &mut rng,
        };
        let mut total: Option<NodeId> = None;
        for s in batch {
            let (sg, _) = self.sample_graph(g, s, &mut reg, false)?;
            total = Some(match total {
                None => sg.total,
                Some(t) => g.add(t, sg.total)?,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// The batch-mean loss of [`build_loss`](Self::build_loss) as individual
    /// weighted cross-entropy terms, one per teacher-forced step.
    pub fn build_cross_entropy_terms(&self, g: &mut Graph<'_>, batch: &[TrainSample]) -> Result<Vec<CrossEntropyTerm>> {
        if batch.is_empty() {
            return invalid("build_cross_entropy_terms on an empty batch");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Regularizer {
            mode: Mode::Eval,
            p: self.config.dropout,
            rng: &mut rng,
        };
        let weight = 1.0 / batch.len() as f64;
        let mut out = Vec::new();
        for s in batch {
            let (sg, _) = self.sample_graph(g, s, &mut reg, false)?;
            out.extend(sg.scored.into_iter().map(|(logits, target)| CrossEntropyTerm { logits, target, weight }));
        }
        Ok(out)
    }

    /// Summed loss of one sample with gradients for the parameters and the
    /// region features.
    pub fn sample_gradients(&self, sample: &TrainSample) -> Result<(f64, GradientMap, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Regularizer {
            mode: Mode::Eval,
            p: self.config.dropout,
            rng: &mut rng,
        };
        let mut g = Graph::new(&self.store);
        let (sg, regions) = self.sample_graph(&mut g, sample, &mut reg, true)?;
        let grads = g.backward(sg.total)?;
        let region_grad = grads
            .wrt(regions)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(sample.input.regions.shape()));
        Ok((g.scalar(sg.total), grads, region_grad))
    }

    /// `log P(A₁|F)`, `log P(R₁|F,A₁)`, ... under teacher forcing.
    pub fn joint_log_likelihood(&self, sample: &TrainSample) -> Result<JointLikelihood> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Regularizer {
            mode: Mode::Eval,
            p: self.config.dropout,
            rng: &mut rng,
        };
        let mut g = Graph::new(&self.store);
        let (sg, _) = self.sample_graph(&mut g, sample, &mut reg, false)?;
        let factors: Vec<f64> = sg.terms.iter().map(|&t| -g.scalar(t)).collect();
        let mut sum = 0.0;
        for f in &factors {
            sum += f;
        }
        Ok(JointLikelihood {
            factors,
            sum,
            step_log_probs: sg.log_probs,
        })
    }

    /// Greedy decoding through every block.
    pub fn generate(&self, input: &MultimodalInput) -> Result<GenerationOutput> {
        self.generate_with(input, self.config.max_answer_len, self.config.max_rationale_len)
    }

    pub fn generate_with(&self, input: &MultimodalInput, max_answer: usize, max_rationale: usize) -> Result<GenerationOutput> {
        self.check_input(input)?;
        let dims = self.config.dims.block();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Regularizer {
            mode: Mode::Eval,
            p: self.config.dropout,
            rng: &mut rng,
        };
        let mut g = Graph::new(&self.store);
        let enc = encode(&mut g, &self.encoder, input, self.config.variant, false)?;
        let mut summary = g.constant(Tensor::zeros(&[dims.summary()]));
        let mut out = GenerationOutput {
            answers: Vec::new(),
            rationales: Vec::new(),
            attention: Vec::new(),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let max_len = if i % 2 == 0 { max_answer } else { max_rationale };
            let ctx = BlockContext::new(&mut g, block, &self.shared, dims, &enc, summary)?;
            let u = unroll(&mut g, block, &self.shared, dims, &ctx, UnrollMode::Greedy { max_len }, &mut reg)?;
            if i % 2 == 0 {
                out.answers.push(u.tokens);
            } else {
                out.rationales.push(u.tokens);
            }
            out.attention.push(u.attention);
            summary = u.summary;
        }
        Ok(out)
    }
}
