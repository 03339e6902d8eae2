//! Fusion of region features, question and caption into the common input
//! `F = V̄ ⊕ T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::nn::xavier;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which modalities feed the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputVariant {
    /// Question, image and caption.
    #[default]
    #[serde(rename = "qic")]
    Qic,
    /// Question and image.
    #[serde(rename = "qi")]
    Qi,
    /// Question and caption; spatial attention is disabled.
    #[serde(rename = "qc")]
    Qc,
}

impl InputVariant {
    pub const ALL: [InputVariant; 3] = [InputVariant::Qic, InputVariant::Qi, InputVariant::Qc];

    pub fn uses_image(self) -> bool {
        self != InputVariant::Qc
    }

    pub fn uses_caption(self) -> bool {
        self != InputVariant::Qi
    }

    pub fn label(self) -> &'static str {
        match self {
            InputVariant::Qic => "Q+I+C",
            InputVariant::Qi => "Q+I",
            InputVariant::Qc => "Q+C",
        }
    }
}

impl std::str::FromStr for InputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qic" | "q+i+c" => Ok(Self::Qic),
            "qi" | "q+i" => Ok(Self::Qi),
            "qc" | "q+c" => Ok(Self::Qc),
            _ => invalid(format!("unknown input variant {s:?} (expected qic, qi or qc)")),
        }
    }
}

/// Raw features of one sample: `k × D` regions plus `B`-dimensional
/// question and caption embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalInput {
    pub regions: Tensor,
    pub question: Vec<f64>,
    pub caption: Vec<f64>,
    pub has_image: bool,
    pub has_caption: bool,
}

impl MultimodalInput {
    pub fn new(regions: Tensor, question: Vec<f64>, caption: Vec<f64>) -> Result<Self> {
        if regions.shape().len() != 2 {
            return invalid(format!("regions must be k × D, got {:?}", regions.shape()));
        }
        if question.len() != caption.len() {
            return Err(Error::Shape {
                op: "multimodal_input",
                lhs: vec![question.len()],
                rhs: vec![caption.len()],
            });
        }
        let all_finite = regions.is_finite() && question.iter().chain(&caption).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("multimodal input".into()));
        }
        Ok(Self {
            regions,
            question,
            caption,
            has_image: true,
            has_caption: true,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn region_dim(&self) -> usize {
        self.regions.shape()[1]
    }

    /// Zeroes the modalities a variant leaves out and clears their flags.
    pub fn with_variant(&self, variant: InputVariant) -> Self {
        let mut out = self.clone();
        if !variant.uses_image() {
            out.regions = Tensor::zeros(self.regions.shape());
            out.has_image = false;
        }
        if !variant.uses_caption() {
            out.caption = vec![0.0; self.caption.len()];
            out.has_caption = false;
        }
        out
    }
}

/// Weights of the question/caption projection and the two-layer map `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub w_q: ParamId,
    pub w_c: ParamId,
    pub w_t: ParamId,
    pub w_g1: ParamId,
    pub b_g1: ParamId,
    pub w_g2: ParamId,
    pub b_g2: ParamId,
    pub text_dim: usize,
    pub fused_dim: usize,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, text_dim: usize, fused_dim: usize, rng: &mut impl Rng) -> Self {
        let (b, l) = (text_dim, fused_dim);
        Self {
            w_q: store.add("enc.w_q", xavier(rng, b, l, b, l)),
            w_c: store.add("enc.w_c", xavier(rng, b, l, b, l)),
            w_t: store.add("enc.w_t", xavier(rng, 2 * l, l, 2 * l, l)),
            w_g1: store.add("enc.w_g1", xavier(rng, l, l, l, l)),
            b_g1: store.add("enc.b_g1", Tensor::zeros(&[l])),
            w_g2: store.add("enc.w_g2", xavier(rng, l, l, l, l)),
            b_g2: store.add("enc.b_g2", Tensor::zeros(&[l])),
            text_dim,
            fused_dim,
        }
    }

    /// `T = g(W_tᵀ(tanh(W_qᵀQ) ⊕ tanh(W_cᵀC)))` with
    /// `g(x) = tanh(W_g2ᵀ relu(W_g1ᵀx + b₁) + b₂)`.
    pub fn fuse_question_caption(&self, g: &mut Graph<'_>, q: NodeId, c: NodeId) -> Result<NodeId> {
        for n in [q, c] {
            if g.value(n).shape() != [self.text_dim] {
                return Err(Error::Shape {
                    op: "fuse_question_caption",
                    lhs: g.value(n).shape().to_vec(),
                    rhs: vec![self.text_dim],
                });
            }
        }
        let w_q = g.param(self.w_q);
        let w_c = g.param(self.w_c);
        let qp = g.matmul(q, w_q)?;
        let qp = g.tanh(qp);
        let cp = g.matmul(c, w_c)?;
        let cp = g.tanh(cp);
        let joined = g.concat(&[qp, cp])?;
        let w_t = g.param(self.w_t);
        let x = g.matmul(joined, w_t)?;

        let (w1, b1, w2, b2) = (
            g.param(self.w_g1),
            g.param(self.b_g1),
            g.param(self.w_g2),
            g.param(self.b_g2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        let o = g.add(o, b2)?;
        Ok(g.tanh(o))
    }
}

/// Arithmetic mean of the region rows.
pub fn mean_pool_regions(g: &mut Graph<'_>, regions: NodeId) -> Result<NodeId> {
    let k = match g.value(regions).shape() {
        [k, _] => *k,
        s => return invalid(format!("mean_pool_regions expects k × D regions, got {s:?}")),
    };
    let ones = g.constant(Tensor::full(&[k], 1.0));
    let total = g.matmul(ones, regions)?;
    Ok(g.scale(total, 1.0 / k as f64))
}

/// `F = V̄ ⊕ T`.
pub fn build_common_input(g: &mut Graph<'_>, v_mean: NodeId, t: NodeId) -> Result<NodeId> {
    g.concat(&[v_mean, t])
}

/// Graph handles for one encoded sample.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Region features `V` (a leaf; unused when the image is disabled).
    pub regions: NodeId,
    pub text: NodeId,
    pub v_mean: NodeId,
    pub common: NodeId,
    pub image_enabled: bool,
}

/// Encodes a sample. Disabled modalities are replaced by zeros; with no
/// image, `V̄` is a zero constant and `V` takes no part in the computation.
pub fn encode(
    g: &mut Graph<'_>,
    params: &EncoderParams,
    input: &MultimodalInput,
    variant: InputVariant,
    regions_require_grad: bool,
) -> Result<Encoded> {
    let input = input.with_variant(variant);
    let regions = g.input(input.regions.clone(), regions_require_grad);
    let q = g.constant(Tensor::vector(input.question.clone()));
    let c = g.constant(Tensor::vector(input.caption.clone()));
    let text = params.fuse_question_caption(g, q, c)?;
    let v_mean = if input.has_image {
        mean_pool_regions(g, regions)?
    } else {
        g.constant(Tensor::zeros(&[input.region_dim()]))
    };
    let common = build_common_input(g, v_mean, text)?;
    Ok(Encoded {
        regions,
        text,
        v_mean,
        common,
        image_enabled: input.has_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_text_gives_zero_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 6, 4, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::zeros(&[6]));
        let c = g.constant(Tensor::zeros(&[6]));
        let t = p.fuse_question_caption(&mut g, q, c).unwrap();
        assert_eq!(g.value(t).data(), &[0.0; 4]);
    }

    #[test]
    fn wrong_text_dim_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 6, 4, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::zeros(&[5]));
        let c = g.constant(Tensor::zeros(&[6]));
        assert!(p.fuse_question_caption(&mut g, q, c).is_err());
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 6, 4, &mut rng);
        for b in [p.b_g1, p.b_g2] {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let q = rand_vec(&mut rng, 6);
        let c = rand_vec(&mut rng, 6);
        let r = grad_check(&mut store, &[p.w_q, p.w_c, p.w_t], 1e-5, |g| {
            let qn = g.constant(Tensor::vector(q.clone()));
            let cn = g.constant(Tensor::vector(c.clone()));
            let t = p.fuse_question_caption(g, qn, cn)?;
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn question_and_caption_are_not_interchangeable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 6, 4, &mut rng);
        let q = rand_vec(&mut rng, 6);
        let c = rand_vec(&mut rng, 6);
        let mut g = Graph::new(&store);
        let (qn, cn) = (g.constant(Tensor::vector(q)), g.constant(Tensor::vector(c)));
        let t1 = p.fuse_question_caption(&mut g, qn, cn).unwrap();
        let t2 = p.fuse_question_caption(&mut g, cn, qn).unwrap();
        assert_ne!(g.value(t1).data(), g.value(t2).data());
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::standalone();
        let v = [0.3, -1.7, 2.25];
        let same = g.constant(Tensor::matrix(3, 3, v.repeat(3)).unwrap());
        let m = mean_pool_regions(&mut g, same).unwrap();
        for (a, b) in g.value(m).data().iter().zip(v) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        let units = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = mean_pool_regions(&mut g, units).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.5]);
        let centered = g.constant(Tensor::matrix(2, 2, vec![1.5, -2.0, -1.5, 2.0]).unwrap());
        let m = mean_pool_regions(&mut g, centered).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 0.0]);
        let flat = g.constant(Tensor::zeros(&[3]));
        assert!(mean_pool_regions(&mut g, flat).is_err());
    }

    #[test]
    fn common_input_is_concatenation() {
        let mut g = Graph::standalone();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let t = g.constant(Tensor::vector(vec![3.0]));
        let f = build_common_input(&mut g, v, t).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0]);
        let z = g.constant(Tensor::zeros(&[2]));
        let f = build_common_input(&mut g, z, t).unwrap();
        assert_eq!(g.value(f).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn disabled_image_makes_f_independent_of_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 6, 4, &mut rng);
        let make = |rng: &mut ChaCha8Rng| {
            MultimodalInput::new(
                Tensor::matrix(3, 5, rand_vec(rng, 15)).unwrap(),
                vec![0.1; 6],
                vec![-0.2; 6],
            )
            .unwrap()
        };
        let a = make(&mut rng);
        let b = make(&mut rng);
        let mut g = Graph::new(&store);
        let ea = encode(&mut g, &p, &a, InputVariant::Qc, false).unwrap();
        let eb = encode(&mut g, &p, &b, InputVariant::Qc, false).unwrap();
        assert_eq!(g.value(ea.common).data(), g.value(eb.common).data());
        assert_eq!(g.value(ea.common).len(), 5 + 4);
        let ea = encode(&mut g, &p, &a, InputVariant::Qic, false).unwrap();
        let eb = encode(&mut g, &p, &b, InputVariant::Qic, false).unwrap();
        assert_ne!(g.value(ea.common).data(), g.value(eb.common).data());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("qc".parse::<InputVariant>().unwrap(), InputVariant::Qc);
        assert_eq!("Q+I+C".parse::<InputVariant>().unwrap(), InputVariant::Qic);
        assert!("qq".parse::<InputVariant>().is_err());
    }
}
