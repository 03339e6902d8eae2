#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use genref_core::encoder::MultimodalInput;
use genref_core::nn::{TokenId, TokenSeq, EOS};
use genref_core::pipeline::{ModelDims, Pipeline, TrainSample};
use genref_core::tensor::Tensor;
use rand::Rng;

/// LCS by enumerating every subsequence of the shorter input.
pub fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "brute force is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let picked: Vec<&T> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
        if picked.len() <= best {
            continue;
        }
        let mut it = long.iter();
        if picked.iter().all(|p| it.any(|x| x == *p)) {
            best = picked.len();
        }
    }
    best
}

pub fn oracle_rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    let lcs = brute_lcs(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = 1.2 * 1.2;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn grams(tokens: &[&str], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for w in tokens.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}

/// Straightforward per-sample CIDEr with string-keyed n-grams.
pub fn naive_cider(hyps: &[String], refs: &[String]) -> Vec<f64> {
    let docs = refs.len() as f64;
    let mut scores = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let ref_grams: Vec<BTreeMap<String, usize>> = refs
            .iter()
            .map(|r| grams(&r.split_whitespace().collect::<Vec<_>>(), n))
            .collect();
        let weight = |g: &BTreeMap<String, usize>| -> BTreeMap<String, f64> {
            let total: usize = g.values().sum();
            g.iter()
                .map(|(k, &c)| {
                    let df = ref_grams.iter().filter(|m| m.contains_key(k)).count().max(1);
                    (k.clone(), c as f64 / total as f64 * (docs / df as f64).ln())
                })
                .collect()
        };
        for (i, h) in hyps.iter().enumerate() {
            let vh = weight(&grams(&h.split_whitespace().collect::<Vec<_>>(), n));
            let vr = weight(&ref_grams[i]);
            let keys: BTreeSet<&String> = vh.keys().chain(vr.keys()).collect();
            let (mut dot, mut nh, mut nr) = (0.0, 0.0, 0.0);
            for k in keys {
                let a = vh.get(k).copied().unwrap_or(0.0);
                let b = vr.get(k).copied().unwrap_or(0.0);
                dot += a * b;
                nh += a * a;
                nr += b * b;
            }
            if nh > 0.0 && nr > 0.0 {
                scores[i] += dot / (nh.sqrt() * nr.sqrt()) / 4.0;
            }
        }
    }
    scores
}

pub fn random_words(rng: &mut impl Rng, vocab: usize, min: usize, max: usize) -> Vec<String> {
    let len = rng.gen_range(min..=max);
    (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

/// Random input with gold sequences of the given true lengths.
pub fn random_sample(rng: &mut impl Rng, dims: &ModelDims, answer_len: usize, rationale_len: usize) -> TrainSample {
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let regions = Tensor::matrix(dims.regions, dims.region_dim, r(dims.regions * dims.region_dim)).unwrap();
    let input = MultimodalInput::new(regions, r(dims.text_dim), r(dims.text_dim)).unwrap();
    let mut seq = |n: usize| {
        let mut ids: Vec<TokenId> = (1..n).map(|_| rng.gen_range(4..dims.vocab as TokenId)).collect();
        ids.push(EOS);
        TokenSeq::new(ids).unwrap()
    };
    let answer = seq(answer_len);
    let rationale = seq(rationale_len);
    TrainSample { input, answer, rationale }
}

pub fn zero_heads(p: &mut Pipeline) {
    let ids: Vec<_> = p.blocks().iter().flat_map(|b| [b.head_w, b.head_b]).collect();
    for id in ids {
        p.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}
