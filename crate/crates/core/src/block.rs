//! One generation block: an Attention-LSTM feeding soft spatial attention,
//! followed by a Language-LSTM and a word projection.
//!
//! Attention-LSTM input: `h^p ⊕ h^l_{t-1} ⊕ F ⊕ π_t`.
//! Language-LSTM input: `h^p ⊕ V̂_t ⊕ h^a_t ⊕ T`.
//!
//! `h^p`, `F` and `T` are fixed for a whole unroll, so their share of both
//! input projections is computed once per block and reused at every step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::Encoded;
use crate::error::{invalid, Error, Result};
use crate::nn::{dropout, xavier, EmbeddingTable, LstmParams, Mode, TokenId, TokenSeq, BOS, EOS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Attention MLP weights `W_av`, `W_ah`, `W_ay`, shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_av: ParamId,
    pub w_ah: ParamId,
    pub w_ay: ParamId,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, region_dim: usize, hidden: usize, attn: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_av: store.add("attn.w_av", xavier(rng, region_dim, attn, region_dim, attn)),
            w_ah: store.add("attn.w_ah", xavier(rng, hidden, attn, hidden, attn)),
            w_ay: store.add("attn.w_ay", xavier(rng, attn, 1, attn, 1)),
        }
    }

    /// `V · W_av`, the step-independent half of the attention scores.
    pub fn project_regions(&self, g: &mut Graph<'_>, regions: NodeId) -> Result<NodeId> {
        let w = g.param(self.w_av);
        g.matmul(regions, w)
    }

    /// Attention weights and attended feature given projected regions.
    pub fn attend(&self, g: &mut Graph<'_>, projected: NodeId, regions: NodeId, h_a: NodeId) -> Result<(NodeId, NodeId)> {
        let k = g.value(regions).shape()[0];
        let w_ah = g.param(self.w_ah);
        let w_ay = g.param(self.w_ay);
        let hq = g.matmul(h_a, w_ah)?;
        let pre = g.add(projected, hq)?;
        let act = g.tanh(pre);
        let scores = g.matmul(act, w_ay)?;
        let scores = g.reshape(scores, &[k])?;
        let alpha = g.softmax(scores);
        let v_hat = g.matmul(alpha, regions)?;
        Ok((alpha, v_hat))
    }
}

/// `α = softmax_i(W_ayᵀ tanh(W_avᵀ v_i + W_ahᵀ h^a))`, `V̂ = Σ α_i v_i`.
pub fn attention_step(g: &mut Graph<'_>, h_a: NodeId, regions: NodeId, params: &AttentionParams) -> Result<(NodeId, NodeId)> {
    match g.value(regions).shape() {
        [k, _] if *k > 0 => {}
        s => return invalid(format!("attention needs k ≥ 1 regions of shape k × D, got {s:?}")),
    }
    let projected = params.project_regions(g, regions)?;
    params.attend(g, projected, regions, h_a)
}

/// Parameters shared across all blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedParams {
    pub embedding: EmbeddingTable,
    pub attention: AttentionParams,
}

/// Per-block parameters: the two cells and the word head `W_lh`, `b_lh`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub attention_lstm: LstmParams,
    pub language_lstm: LstmParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Sizes a block needs to lay out its inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub hidden: usize,
    pub embed: usize,
    pub region_dim: usize,
    pub fused_dim: usize,
    pub vocab: usize,
}

impl BlockDims {
    pub fn attention_input(&self) -> usize {
        3 * self.hidden + self.region_dim + self.fused_dim + self.embed
    }

    pub fn language_input(&self) -> usize {
        3 * self.hidden + self.region_dim + self.fused_dim
    }

    pub fn summary(&self) -> usize {
        2 * self.hidden
    }
}

impl BlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut impl Rng) -> Self {
        let h = dims.hidden;
        Self {
            attention_lstm: LstmParams::init(store, &format!("{prefix}.att_lstm"), dims.attention_input(), h, rng),
            language_lstm: LstmParams::init(store, &format!("{prefix}.lang_lstm"), dims.language_input(), h, rng),
            head_w: store.add(format!("{prefix}.w_lh"), xavier(rng, h, dims.vocab, h, dims.vocab)),
            head_b: store.add(format!("{prefix}.b_lh"), Tensor::zeros(&[dims.vocab])),
        }
    }
}

/// Hidden and cell states of both cells.
#[derive(Clone, Copy, Debug)]
pub struct BlockState {
    pub h_a: NodeId,
    pub c_a: NodeId,
    pub h_l: NodeId,
    pub c_l: NodeId,
}

impl BlockState {
    pub fn zeros(g: &mut Graph<'_>, hidden: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[hidden]));
        Self {
            h_a: z,
            c_a: z,
            h_l: z,
            c_l: z,
        }
    }
}

/// Dropout settings for one unroll.
pub struct Regularizer<'r> {
    pub mode: Mode,
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Step-invariant inputs of a block, prepared once per unroll.
pub struct BlockContext {
    pub summary_in: NodeId,
    regions: NodeId,
    projected_regions: Option<NodeId>,
    attention_fixed: NodeId,
    language_fixed: NodeId,
}

impl BlockContext {
    /// Prepares the fixed parts of both cell inputs from `h^p`, `F` and `T`.
    pub fn new(
        g: &mut Graph<'_>,
        block: &BlockParams,
        shared: &SharedParams,
        dims: BlockDims,
        encoded: &Encoded,
        summary_in: NodeId,
    ) -> Result<Self> {
        if g.value(summary_in).shape() != [dims.summary()] {
            return Err(Error::Shape {
                op: "block_context",
                lhs: g.value(summary_in).shape().to_vec(),
                rhs: vec![dims.summary()],
            });
        }
        let h = dims.hidden;
        let att = &block.attention_lstm;
        let a1 = att.project_input(g, summary_in, 0)?;
        let a2 = att.project_input(g, encoded.common, 3 * h)?;
        let attention_fixed = g.add(a1, a2)?;
        let lang = &block.language_lstm;
        let l1 = lang.project_input(g, summary_in, 0)?;
        let l2 = lang.project_input(g, encoded.text, 3 * h + dims.region_dim)?;
        let language_fixed = g.add(l1, l2)?;
        let projected_regions = if encoded.image_enabled {
            Some(shared.attention.project_regions(g, encoded.regions)?)
        } else {
            None
        };
        Ok(Self {
            summary_in,
            regions: encoded.regions,
            projected_regions,
            attention_fixed,
            language_fixed,
        })
    }
}

/// Result of a single time step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: BlockState,
    pub logits: NodeId,
    /// `None` when spatial attention is disabled.
    pub alpha: Option<NodeId>,
}

/// Advances both cells by one step on input token `token`.
#[allow(clippy::too_many_arguments)]
pub fn block_step(
    g: &mut Graph<'_>,
    block: &BlockParams,
    shared: &SharedParams,
    dims: BlockDims,
    ctx: &BlockContext,
    state: BlockState,
    token: TokenId,
    reg: &mut Regularizer<'_>,
) -> Result<StepOutput> {
    let h = dims.hidden;
    let pi = shared.embedding.embed(g, token)?;
    let pi = dropout(g, pi, reg.p, reg.mode, reg.rng)?;

    let att = &block.attention_lstm;
    let p_hl = att.project_input(g, state.h_l, 2 * h)?;
    let p_pi = att.project_input(g, pi, 3 * h + dims.region_dim + dims.fused_dim)?;
    let x = g.add(ctx.attention_fixed, p_hl)?;
    let x = g.add(x, p_pi)?;
    let (h_a, c_a) = att.step_projected(g, x, state.h_a, state.c_a)?;

    let lang = &block.language_lstm;
    let mut y = ctx.language_fixed;
    let alpha = match ctx.projected_regions {
        Some(proj) => {
            let (alpha, v_hat) = shared.attention.attend(g, proj, ctx.regions, h_a)?;
            let p_v = lang.project_input(g, v_hat, 2 * h)?;
            y = g.add(y, p_v)?;
            Some(alpha)
        }
        None => None,
    };
    let p_ha = lang.project_input(g, h_a, 2 * h + dims.region_dim)?;
    let y = g.add(y, p_ha)?;
    let (h_l, c_l) = lang.step_projected(g, y, state.h_l, state.c_l)?;

    let out = dropout(g, h_l, reg.p, reg.mode, reg.rng)?;
    let w = g.param(block.head_w);
    let b = g.param(block.head_b);
    let logits = g.matmul(out, w)?;
    let logits = g.add(logits, b)?;
    Ok(StepOutput {
        state: BlockState { h_a, c_a, h_l, c_l },
        logits,
        alpha,
    })
}

/// How a block is driven.
#[derive(Clone, Copy, Debug)]
pub enum UnrollMode<'a> {
    /// Feed gold token `t − 1` at step `t` (BOS first) for `gold.true_length()` steps.
    TeacherForced(&'a TokenSeq),
    /// Feed back the argmax (lowest id on ties) until EOS or `max_len` steps.
    Greedy { max_len: usize },
}

#[derive(Clone, Debug)]
pub struct UnrollOutput {
    /// Raw per-step argmax ids.
    pub emitted: Vec<TokenId>,
    /// Emitted ids closed with EOS.
    pub tokens: TokenSeq,
    pub logits: Vec<NodeId>,
    /// `h^a ⊕ h^l` after the last step.
    pub summary: NodeId,
    /// One attention map per step; empty when attention is disabled.
    pub attention: Vec<Vec<f64>>,
    pub steps: usize,
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn unroll(
    g: &mut Graph<'_>,
    block: &BlockParams,
    shared: &SharedParams,
    dims: BlockDims,
    ctx: &BlockContext,
    mode: UnrollMode<'_>,
    reg: &mut Regularizer<'_>,
) -> Result<UnrollOutput> {
    let steps = match mode {
        UnrollMode::TeacherForced(gold) => gold.true_length(),
        UnrollMode::Greedy { max_len } => {
            if max_len == 0 {
                return invalid("greedy decoding needs max_len ≥ 1");
            }
            max_len
        }
    };
    let mut state = BlockState::zeros(g, dims.hidden);
    let mut input = BOS;
    let mut emitted = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps);
    let mut attention = Vec::with_capacity(steps);
    for t in 0..steps {
        let out = block_step(g, block, shared, dims, ctx, state, input, reg)?;
        state = out.state;
        let best = argmax(g.value(out.logits).data()) as TokenId;
        emitted.push(best);
        logits.push(out.logits);
        if let Some(a) = out.alpha {
            attention.push(g.value(a).data().to_vec());
        }
        input = match mode {
            UnrollMode::TeacherForced(gold) => gold.ids()[t],
            UnrollMode::Greedy { .. } => {
                if best == EOS {
                    break;
                }
                best
            }
        };
    }
    let summary = g.concat(&[state.h_a, state.h_l])?;
    let n = logits.len();
    Ok(UnrollOutput {
        tokens: TokenSeq::from_emitted(&emitted),
        emitted,
        logits,
        summary,
        attention,
        steps: n,
    })
}
