mod common;

use genref_core::autodiff::Graph;
use genref_core::encoder::InputVariant;
use genref_core::nn::{masked_cross_entropy, LstmParams, Mode, TokenSeq, EOS};
use genref_core::params::ParamStore;
use genref_core::pipeline::{Pipeline, PipelineConfig};
use genref_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in finite_vec(7), shift in -50.0f64..50.0) {
        let mut g = Graph::standalone();
        let a = g.constant(Tensor::vector(x.clone()));
        let b = g.constant(Tensor::vector(x.iter().map(|v| v + shift).collect()));
        let sa = g.softmax(a);
        let sb = g.softmax(b);
        let total: f64 = g.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(w in finite_vec(6), x in finite_vec(6), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(w));
        let grads = |which: u8| {
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let xc = g.constant(Tensor::vector(x.clone()));
            let prod = g.mul(p, xc).unwrap();
            let f = g.sum(prod);
            let t = g.tanh(p);
            let sq = g.mul(t, t).unwrap();
            let h = g.sum(sq);
            let out = match which {
                0 => f,
                1 => h,
                _ => {
                    let fa = g.scale(f, alpha);
                    let hb = g.scale(h, beta);
                    g.add(fa, hb).unwrap()
                }
            };
            g.backward(out).unwrap().param(id).unwrap().data().to_vec()
        };
        let (gf, gh, gc) = (grads(0), grads(1), grads(2));
        for i in 0..gf.len() {
            let want = alpha * gf[i] + beta * gh[i];
            prop_assert!((gc[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn lstm_hidden_state_is_bounded(x in finite_vec(5), seed in 0u64..1000, scale in 1.0f64..50.0) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = LstmParams::init(&mut store, "cell", 5, 4, &mut rng);
        let mut g = Graph::new(&store);
        let mut h = g.constant(Tensor::zeros(&[4]));
        let mut c = g.constant(Tensor::zeros(&[4]));
        for _ in 0..6 {
            let xi = g.constant(Tensor::vector(x.iter().map(|v| v * scale).collect()));
            (h, c) = cell.step(&mut g, xi, h, c).unwrap();
            prop_assert!(g.value(h).data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn padding_does_not_change_the_loss(logits in prop::collection::vec(finite_vec(9), 6), len in 1usize..=4, width in 4usize..12) {
        let mut ids: Vec<u32> = (1..len as u32).map(|i| 3 + i).collect();
        ids.push(EOS);
        let gold = TokenSeq::new(ids).unwrap();
        let repadded = TokenSeq::from_padded(&gold.padded(width)).unwrap();
        prop_assert_eq!(&repadded, &gold);
        let mut g = Graph::standalone();
        let nodes: Vec<_> = logits.iter().map(|l| g.constant(Tensor::vector(l.clone()))).collect();
        let full = masked_cross_entropy(&mut g, &nodes, &gold).unwrap();
        let exact = masked_cross_entropy(&mut g, &nodes[..len], &repadded).unwrap();
        prop_assert_eq!(g.scalar(full.loss).to_bits(), g.scalar(exact.loss).to_bits());
    }

    #[test]
    fn likelihood_is_product_of_step_probabilities(seed in 0u64..10_000, la in 1usize..=3, lr in 1usize..=4) {
        let cfg = PipelineConfig::tiny();
        let p = Pipeline::new(PipelineConfig { seed, ..cfg.clone() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, &cfg.dims, la, lr);
        let loss = p.forward_train(std::slice::from_ref(&s), Mode::Eval, 0).unwrap().total;
        let jl = p.joint_log_likelihood(&s).unwrap();
        let product: f64 = jl.step_log_probs.iter().flatten().map(|lp| lp.exp()).product();
        prop_assert!(rel_close((-loss).exp(), product, 1e-9));
        let steps: usize = jl.step_log_probs.iter().map(Vec::len).sum();
        prop_assert_eq!(steps, 2 * (la + lr));
    }
}

#[test]
fn shared_parameters_reach_every_block_and_heads_stay_local() {
    let cfg = PipelineConfig::tiny();
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = random_sample(&mut rng, &cfg.dims, 3, 4);
    let terms = |p: &Pipeline| p.forward_train(std::slice::from_ref(&s), Mode::Eval, 0).unwrap().terms;
    let base = terms(&p);

    let emb = p.shared().embedding.weight;
    let tok = s.answer.ids()[0] as usize;
    let width = p.store().get(emb).shape()[1];
    p.store_mut().get_mut(emb).data_mut()[tok * width] += 0.5;
    let shifted = terms(&p);
    // Block 0 sees the embedding only from its second step on; every block changes.
    for (b, (x, y)) in base.iter().zip(&shifted).enumerate() {
        assert_ne!(x, y, "block {b} ignores the shared embedding");
    }

    let mut p = Pipeline::new(cfg).unwrap();
    let head = p.blocks()[2].head_b;
    p.store_mut().get_mut(head).data_mut()[5] += 0.5;
    let after = terms(&p);
    for (b, (x, y)) in base.iter().zip(&after).enumerate() {
        assert_eq!(x == y, b != 2, "block {b}");
    }
}

#[test]
fn caption_only_variant_ignores_regions() {
    let cfg = PipelineConfig::tiny().configure_variant(1, InputVariant::Qc).unwrap();
    let p = Pipeline::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = random_sample(&mut rng, &cfg.dims, 3, 4);
    let mut b = a.clone();
    b.input.regions.data_mut().iter_mut().for_each(|v| *v = -*v * 3.0);
    let loss = |s| p.forward_train(std::slice::from_ref(s), Mode::Eval, 0).unwrap().total;
    assert_eq!(loss(&a).to_bits(), loss(&b).to_bits());
}
