//! Embeddings, the gated LSTM cell, dropout and masked cross-entropy.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token/id mapping with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from content words. Reserved tokens are prepended;
    /// remaining words are deduplicated and sorted.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut content: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        content.sort();
        content.dedup();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        Self::try_from(tokens).map_err(Error::Invalid)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace-tokenizes lowercase text and appends EOS.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids: Vec<TokenId> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.push(EOS);
        TokenSeq { ids }
    }

    /// Text of a sequence, stopping at EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < 5 {
            return Err(format!("vocabulary needs at least 5 entries, got {}", tokens.len()));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(format!("id {i} must be {r}, found {}", tokens[i]));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(format!("duplicate token {t}"));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// A token sequence terminated by EOS. Padding is not stored; use
/// [`TokenSeq::padded`] for a fixed-width view.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    /// A well-formed sequence: non-empty, EOS last and only last, no PAD.
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        match ids.iter().position(|&i| i == EOS) {
            Some(p) if p + 1 == ids.len() => {}
            _ => return invalid(format!("sequence {ids:?} must end with a single EOS")),
        }
        if ids.contains(&PAD) {
            return invalid(format!("sequence {ids:?} contains PAD before EOS"));
        }
        Ok(Self { ids })
    }

    /// Parses a padded id row: PAD may only occur as a suffix after EOS.
    pub fn from_padded(ids: &[TokenId]) -> Result<Self> {
        let end = ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
        Self::new(ids[..end].to_vec())
    }

    /// Wraps a raw greedy emission: cut after the first EOS, or force EOS
    /// into the final slot when none was produced. Degenerate models may
    /// emit reserved ids as content; those are kept as-is.
    pub fn from_emitted(emitted: &[TokenId]) -> Self {
        let mut ids: Vec<TokenId> = match emitted.iter().position(|&i| i == EOS) {
            Some(p) => emitted[..=p].to_vec(),
            None => emitted.to_vec(),
        };
        match ids.last_mut() {
            Some(last) => *last = EOS,
            None => ids.push(EOS),
        }
        Self { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Number of non-PAD tokens including EOS.
    pub fn true_length(&self) -> usize {
        self.ids.len()
    }

    /// Tokens before EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.ids[..self.ids.len() - 1]
    }

    pub fn padded(&self, width: usize) -> Vec<TokenId> {
        let mut v = self.ids.clone();
        v.resize(width.max(v.len()), PAD);
        v
    }
}

/// Xavier-uniform matrix `[rows, cols]`.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// The word embedding matrix `W_e` of shape `[|V|, E]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let w = xavier(rng, vocab_size, dim, vocab_size, dim);
        Self {
            weight: store.add(name, w),
            vocab_size,
            dim,
        }
    }

    /// Row `id` of `W_e`.
    pub fn embed(&self, g: &mut Graph<'_>, id: TokenId) -> Result<NodeId> {
        if id as usize >= self.vocab_size {
            return invalid(format!("token id {id} out of range for vocabulary of {}", self.vocab_size));
        }
        let w = g.param(self.weight);
        let row = g.slice(w, id as usize, 1)?;
        g.reshape(row, &[self.dim])
    }
}

/// Gate weights of one LSTM cell. Columns of `w_ih`, `w_hh` and `bias` are
/// laid out as four `H`-wide blocks: input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let h = hidden;
        let w_ih = xavier(rng, input, 4 * h, input, h);
        let w_hh = xavier(rng, h, 4 * h, h, h);
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        Self {
            w_ih: store.add(format!("{prefix}.w_ih"), w_ih),
            w_hh: store.add(format!("{prefix}.w_hh"), w_hh),
            bias: store.add(format!("{prefix}.bias"), Tensor::vector(b)),
            input,
            hidden,
        }
    }

    /// Contribution `x · W_ih[offset .. offset + len(x)]` of one slice of
    /// the cell input.
    pub fn project_input(&self, g: &mut Graph<'_>, x: NodeId, offset: usize) -> Result<NodeId> {
        let w = g.param(self.w_ih);
        g.matmul_band(x, w, offset)
    }

    /// One step from a precomputed input projection.
    pub fn step_projected(&self, g: &mut Graph<'_>, projected: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden;
        if g.value(h).shape() != [hd] || g.value(c).shape() != [hd] {
            return Err(Error::Shape {
                op: "lstm_cell_step",
                lhs: g.value(h).shape().to_vec(),
                rhs: vec![hd],
            });
        }
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.bias);
        let rec = g.matmul(h, w_hh)?;
        let pre = g.add(projected, rec)?;
        let pre = g.add(pre, b)?;
        let i = g.slice(pre, 0, hd)?;
        let f = g.slice(pre, hd, hd)?;
        let cc = g.slice(pre, 2 * hd, hd)?;
        let o = g.slice(pre, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cc)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// `(h', c')` for input `x` and state `(h, c)`.
    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(x).shape() != [self.input] {
            return Err(Error::Shape {
                op: "lstm_cell_step",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![self.input],
            });
        }
        let projected = self.project_input(g, x, 0)?;
        self.step_projected(g, projected, h, c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Identity in eval mode or when `p == 0`.
pub fn dropout(g: &mut Graph<'_>, x: NodeId, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return invalid(format!("dropout probability {p} outside [0, 1)"));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, m)
}

/// Summed negative log-likelihood of a gold sequence.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: NodeId,
    /// `log p_t(gold_t)` for every scored step.
    pub log_probs: Vec<f64>,
}

/// `−Σ_{t < true_length} log softmax(logits_t)[gold_t]`. Steps past the
/// gold length (padding) are not scored.
pub fn masked_cross_entropy(g: &mut Graph<'_>, logits: &[NodeId], gold: &TokenSeq) -> Result<CrossEntropy> {
    let n = gold.true_length();
    if n > logits.len() {
        return invalid(format!(
            "gold length {n} exceeds the {} available logit steps",
            logits.len()
        ));
    }
    let mut total: Option<NodeId> = None;
    let mut log_probs = Vec::with_capacity(n);
    for (&l, &tok) in logits.iter().zip(gold.ids()) {
        let ls = g.log_softmax(l);
        let lp = g.index(ls, tok as usize)?;
        log_probs.push(g.scalar(lp));
        total = Some(match total {
            None => lp,
            Some(t) => g.add(t, lp)?,
        });
    }
    let sum = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(CrossEntropy {
        loss: g.neg(sum),
        log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn vocab_reserves_first_ids() {
        let v = Vocab::from_words(["the", "cube", "the"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.token(v.id("cube")), "cube");
        assert!(Vocab::from_words(Vec::<String>::new()).is_err());
        assert_eq!(Vocab::from_words(["a"]).unwrap().len(), 5);
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = Vocab::from_words(["b", "a"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("b"), 5);
    }

    #[test]
    fn token_seq_invariants() {
        assert!(TokenSeq::new(vec![5, 6, EOS]).is_ok());
        assert!(TokenSeq::new(vec![5, 6]).is_err());
        assert!(TokenSeq::new(vec![5, EOS, 6, EOS]).is_err());
        assert!(TokenSeq::new(vec![PAD, 5, EOS]).is_err());
        let s = TokenSeq::from_padded(&[7, 8, EOS, PAD, PAD]).unwrap();
        assert_eq!(s.true_length(), 3);
        assert_eq!(s.padded(5), vec![7, 8, EOS, PAD, PAD]);
        assert!(TokenSeq::from_padded(&[7, PAD, EOS]).is_err());
    }

    #[test]
    fn emitted_sequences_get_eos() {
        assert_eq!(TokenSeq::from_emitted(&[5, EOS, 7]).ids(), &[5, EOS]);
        assert_eq!(TokenSeq::from_emitted(&[0, 0, 0]).ids(), &[0, 0, EOS]);
    }

    fn table(store: &mut ParamStore) -> EmbeddingTable {
        let rows: Vec<f64> = (0..5 * 3).map(|i| i as f64).collect();
        let w = store.add("emb", Tensor::matrix(5, 3, rows).unwrap());
        EmbeddingTable {
            weight: w,
            vocab_size: 5,
            dim: 3,
        }
    }

    #[test]
    fn embed_selects_row() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        let mut g = Graph::new(&store);
        let e = t.embed(&mut g, 2).unwrap();
        assert_eq!(g.value(e).data(), &[6.0, 7.0, 8.0]);
        let p = t.embed(&mut g, PAD).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 2.0]);
        assert!(t.embed(&mut g, 5).is_err());
    }

    #[test]
    fn embed_gradient_is_one_hot_row() {
        let mut store = ParamStore::new();
        let t = table(&mut store);
        let mut g = Graph::new(&store);
        let e = t.embed(&mut g, 3).unwrap();
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        let gw = grads.param(t.weight).unwrap();
        for r in 0..5 {
            let expect = if r == 3 { 1.0 } else { 0.0 };
            assert!(gw.row(r).iter().all(|&v| v == expect));
        }
    }

    fn zero_lstm(store: &mut ParamStore, input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_ih: store.add("w_ih", Tensor::zeros(&[input, 4 * hidden])),
            w_hh: store.add("w_hh", Tensor::zeros(&[hidden, 4 * hidden])),
            bias: store.add("b", Tensor::zeros(&[4 * hidden])),
            input,
            hidden,
        }
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![1.0, -4.0, 2.0]));
        let h = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(Tensor::zeros(&[2]));
        let (h2, c2) = p.step(&mut g, x, h, c).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn open_forget_closed_input_passes_memory() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 2, 2);
        {
            let b = store.get_mut(p.bias).data_mut();
            b[0..2].iter_mut().for_each(|v| *v = -1e3);
            b[2..4].iter_mut().for_each(|v| *v = 1e3);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![0.3, 0.4]));
        let h = g.constant(Tensor::vector(vec![0.1, 0.2]));
        let c = g.constant(Tensor::vector(vec![0.7, -0.9]));
        let (_, c2) = p.step(&mut g, x, h, c).unwrap();
        assert_eq!(g.value(c2).data(), &[0.7, -0.9]);
    }

    #[test]
    fn lstm_shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[4]));
        let h = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(p.step(&mut g, x, h, c).is_err());
    }

    #[test]
    fn lstm_step_gradients_match_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let p = LstmParams::init(&mut store, "cell", 4, 3, &mut r);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&mut store, &[], 1e-5, |g| {
            let xn = g.constant(Tensor::vector(x.clone()));
            let hn = g.constant(Tensor::vector(h.clone()));
            let cn = g.constant(Tensor::vector(c.clone()));
            let (h2, c2) = p.step(g, xn, hn, cn)?;
            let wn = g.constant(Tensor::vector(w.clone()));
            let a = g.mul(h2, wn)?;
            let a = g.sum(a);
            let b = g.sum(c2);
            g.add(a, b)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_modes() {
        let mut r = rng();
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::full(&[8], 2.0));
        assert_eq!(dropout(&mut g, x, 0.0, Mode::Train, &mut r).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.5, Mode::Eval, &mut r).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut r).is_err());
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut r).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut r = rng();
        let mut g = Graph::standalone();
        let n = 100_000;
        let x = g.constant(Tensor::full(&[n], 1.0));
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut r).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn uniform_logits_cost_log_vocab_per_step() {
        let mut g = Graph::standalone();
        let logits: Vec<NodeId> = (0..7).map(|_| g.constant(Tensor::zeros(&[20]))).collect();
        let gold = TokenSeq::new(vec![4, 5, 6, 7, 8, 9, EOS]).unwrap();
        let ce = masked_cross_entropy(&mut g, &logits, &gold).unwrap();
        let expect = 7.0 * 20f64.ln();
        assert!((g.scalar(ce.loss) - expect).abs() < 1e-12);
        assert!((expect - 20.97).abs() < 0.01);
    }

    #[test]
    fn certain_gold_costs_nothing() {
        let mut g = Graph::standalone();
        let gold = TokenSeq::new(vec![4, EOS]).unwrap();
        let logits: Vec<NodeId> = gold
            .ids()
            .iter()
            .map(|&t| {
                let mut v = vec![-1e4; 6];
                v[t as usize] = 0.0;
                g.constant(Tensor::vector(v))
            })
            .collect();
        let ce = masked_cross_entropy(&mut g, &logits, &gold).unwrap();
        assert_eq!(g.scalar(ce.loss), 0.0);
    }

    #[test]
    fn gold_longer_than_logits_is_rejected() {
        let mut g = Graph::standalone();
        let logits = vec![g.constant(Tensor::zeros(&[6]))];
        let gold = TokenSeq::new(vec![4, EOS]).unwrap();
        assert!(masked_cross_entropy(&mut g, &logits, &gold).is_err());
    }
}
