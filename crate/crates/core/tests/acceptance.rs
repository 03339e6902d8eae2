//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::ops::ControlFlow;
use std::time::Instant;

use genref_core::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use genref_core::data::generate_dataset;
use genref_core::encoder::InputVariant;
use genref_core::experiment::{
    ablation_table, full_grid, learnable_configs, prepare, prepare_fixed, refinement_comparison, run_ablation,
    train_until,
};
use genref_core::metrics::{
    accuracy_report, cider, classify_by_similarity, embedding_metrics, meteor_lite, rouge_l, EmbeddingProvider,
};
use genref_core::nn::{tokenize, Mode};
use genref_core::pipeline::{ModelDims, Pipeline, PipelineConfig};
use genref_core::train::{grad_check_pipeline, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let base = PipelineConfig::tiny();
    let mut lines = Vec::new();
    let mut ok = true;
    for (n, variant) in [(1, InputVariant::Qic), (0, InputVariant::Qic), (1, InputVariant::Qc)] {
        let cfg = base.configure_variant(n, variant).map_err(|e| e.to_string())?;
        let t = Instant::now();
        let gc = grad_check_pipeline(&cfg, 2, 3e-4).map_err(|e| e.to_string())?;
        let secs = t.elapsed().as_secs_f64();
        let pass = gc.report.max_relative_error < 1e-4 && secs < 60.0 && gc.report.checked == gc.num_params;
        let pass = pass && (variant.uses_image() || gc.region_grad_max_abs == 0.0);
        ok &= pass;
        lines.push(format!(
            "n_refine={n} {}: max rel err {:.2e} over {} params in {secs:.1}s",
            variant.label(),
            gc.report.max_relative_error,
            gc.report.checked
        ));
    }
    check(ok, lines.join("; "))
}

fn factorization() -> Outcome {
    let cfg = PipelineConfig::tiny();
    let p = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (la, lr) = (rng.gen_range(1..=cfg.max_answer_len), rng.gen_range(1..=cfg.max_rationale_len));
        let s = random_sample(&mut rng, &cfg.dims, la, lr);
        let loss = p.forward_train(std::slice::from_ref(&s), Mode::Eval, 0).map_err(|e| e.to_string())?.total;
        let jl = p.joint_log_likelihood(&s).map_err(|e| e.to_string())?;
        if jl.factors.len() != 4 {
            return Err(format!("{} factors", jl.factors.len()));
        }
        let product: f64 = jl.factors.iter().map(|f| f.exp()).product();
        let lhs = (-loss).exp();
        worst = worst.max((lhs - product).abs() / lhs.abs().max(product.abs()));
        for (f, steps) in jl.factors.iter().zip(&jl.step_log_probs) {
            let s: f64 = steps.iter().sum();
            worst = worst.max((f - s).abs() / f.abs().max(1e-300));
        }
    }
    check(worst <= 1e-9, format!("worst relative gap {worst:.2e} over 100 samples"))
}

fn uniform_loss() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    for n in 0..=2 {
        let cfg = PipelineConfig::tiny().configure_variant(n, InputVariant::Qic).map_err(|e| e.to_string())?;
        let mut p = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
        zero_heads(&mut p);
        for _ in 0..20 {
            let (la, lr) = (rng.gen_range(1..=cfg.max_answer_len), rng.gen_range(1..=cfg.max_rationale_len));
            let s = random_sample(&mut rng, &cfg.dims, la, lr);
            let got = p.forward_train(std::slice::from_ref(&s), Mode::Eval, 0).map_err(|e| e.to_string())?.total;
            let want = ((n + 1) * (la + lr)) as f64 * (cfg.dims.vocab as f64).ln();
            worst = worst.max((got - want).abs() / want);
        }
    }
    check(worst <= 1e-9, format!("worst relative gap {worst:.2e} over 60 samples"))
}

fn learnability() -> Outcome {
    let t = Instant::now();
    let ds = generate_dataset(2024, 2200, 6).map_err(|e| e.to_string())?;
    let vocab = ds.vocab().map_err(|e| e.to_string())?;
    if vocab.len() > 60 {
        return Err(format!("vocabulary of {} exceeds 60", vocab.len()));
    }
    let (pc, tc) = learnable_configs(vocab.len(), 7);
    let data = prepare_fixed(&ds.samples[..2000], &ds.samples[2000..], vocab, &pc.dims, 7).map_err(|e| e.to_string())?;
    let mut p = Pipeline::new(pc).map_err(|e| e.to_string())?;
    let (report, accs) = train_until(&mut p, &data, &tc, Some(90.0), |s, acc| {
        eprintln!(
            "  epoch {:>2} loss {:.4} val-A2 {:.1}% ({:.0}s)",
            s.epoch + 1,
            s.train_loss,
            acc.unwrap_or(f64::NAN),
            s.elapsed_secs
        );
    })
    .map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let best = accs.iter().copied().fold(0.0, f64::max);
    let epochs = report.epochs.len();
    check(
        best >= 90.0 && epochs <= 30 && secs < 900.0,
        format!("A2 exact match {best:.1}% after {epochs} epochs in {secs:.0}s (vocab {})", data.vocab.len()),
    )
}

fn ablation() -> Outcome {
    let ds = generate_dataset(5, 160, 4).map_err(|e| e.to_string())?;
    let vocab = ds.vocab().map_err(|e| e.to_string())?;
    let dims = ModelDims {
        hidden: 16,
        attention: 8,
        embed: 8,
        region_dim: 16,
        text_dim: 16,
        fused_dim: 8,
        regions: 4,
        vocab: vocab.len(),
    };
    let data = prepare(&ds, [0.75, 0.25, 0.0], &dims, 5).map_err(|e| e.to_string())?;
    let mut base = PipelineConfig::new(dims);
    base.dropout = 0.0;
    let tc = TrainConfig { lr: 3e-3, decay: 1.0, epochs: 5, seed: 5, ..TrainConfig::default() };
    let rows = run_ablation(&data, &base, &tc, &full_grid(), |_| {}).map_err(|e| e.to_string())?;
    let table = ablation_table(&rows);
    let comparison = refinement_comparison(&rows);
    for line in table.lines().chain(comparison.lines()) {
        eprintln!("  {line}");
    }
    check(
        rows.len() == 9 && table.lines().count() == 10 && comparison.lines().count() == 3,
        format!("{} grid cells, comparison reported for 3 variants", rows.len()),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut rouge_mismatch = 0;
    for _ in 0..1000 {
        let h = random_words(&mut rng, 6, 1, 12);
        let r = random_words(&mut rng, 6, 1, 12);
        if rouge_l(&h, &r).map_err(|e| e.to_string())? != oracle_rouge_l(&h, &r) {
            rouge_mismatch += 1;
        }
    }
    let mut cider_gap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let hyps: Vec<String> = (0..n).map(|_| random_words(&mut rng, 8, 1, 10).join(" ")).collect();
        let refs: Vec<String> = (0..n).map(|_| random_words(&mut rng, 8, 1, 10).join(" ")).collect();
        let got = cider(&hyps, &refs).map_err(|e| e.to_string())?;
        for (a, b) in got.per_sample.iter().zip(naive_cider(&hyps, &refs)) {
            cider_gap = cider_gap.max((a - b).abs());
        }
    }
    let four = tokenize("the red cube sits");
    let meteor = meteor_lite(&four, &four).map_err(|e| e.to_string())?;
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let provider = EmbeddingProvider::seeded(&words, 16, 3).map_err(|e| e.to_string())?;
    let mut cos_min: f64 = 1.0;
    let mut cos_max: f64 = 1.0;
    for _ in 0..50 {
        let s = random_words(&mut rng, 20, 1, 8);
        let e = embedding_metrics(&s, &s, &provider).map_err(|e| e.to_string())?;
        for v in [e.emb_avg, e.vec_extrema, e.greedy_match] {
            cos_min = cos_min.min(v);
            cos_max = cos_max.max(v);
        }
    }
    let cos_ok = (cos_min - 1.0).abs() < 1e-12 && (cos_max - 1.0).abs() < 1e-12;
    check(
        rouge_mismatch == 0 && cider_gap <= 1e-9 && meteor == 0.9921875 && cos_ok,
        format!(
            "ROUGE-L mismatches {rouge_mismatch}/1000, CIDEr max gap {cider_gap:.1e}, METEOR-lite {meteor}, cosine range [{cos_min}, {cos_max}]"
        ),
    )
}

fn classification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=50);
        let flags: Vec<(bool, bool)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let r = accuracy_report(&flags).map_err(|e| e.to_string())?;
        if r.overall > r.answer.min(r.rationale) {
            violations += 1;
        }
    }
    let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
    let provider = EmbeddingProvider::seeded(&words, 16, 4).map_err(|e| e.to_string())?;
    let mut flags = Vec::new();
    for _ in 0..50 {
        let a: Vec<String> = (0..4).map(|_| random_words(&mut rng, 30, 2, 6).join(" ")).collect();
        let r: Vec<String> = (0..4).map(|_| random_words(&mut rng, 30, 3, 8).join(" ")).collect();
        let (ga, gr) = (rng.gen_range(0..4), rng.gen_range(0..4));
        let ca = classify_by_similarity(&a[ga], &a, &provider).map_err(|e| e.to_string())?;
        let cr = classify_by_similarity(&r[gr], &r, &provider).map_err(|e| e.to_string())?;
        flags.push((ca.index == ga, cr.index == gr));
    }
    let exact = accuracy_report(&flags).map_err(|e| e.to_string())?;
    check(
        violations == 0 && exact.answer == 100.0 && exact.rationale == 100.0 && exact.overall == 100.0,
        format!(
            "overall bound violations {violations}/1000; exact options {}/{}/{}",
            exact.answer, exact.rationale, exact.overall
        ),
    )
}

fn toy_run(seed: u64) -> Result<(Vec<u64>, Vec<u8>), String> {
    let ds = generate_dataset(9, 64, 3).map_err(|e| e.to_string())?;
    let vocab = ds.vocab().map_err(|e| e.to_string())?;
    let dims = ModelDims { regions: 3, vocab: vocab.len(), ..ModelDims::tiny() };
    let mut pc = PipelineConfig { dims, ..PipelineConfig::tiny() };
    pc.max_answer_len = 9;
    pc.max_rationale_len = 13;
    pc.dropout = 0.5;
    pc.seed = seed;
    let data = prepare(&ds, [0.75, 0.25, 0.0], &pc.dims, seed).map_err(|e| e.to_string())?;
    let tc = TrainConfig { epochs: 3, batch_size: 8, seed, ..TrainConfig::default() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.grck");
    let mut p = Pipeline::new(pc).map_err(|e| e.to_string())?;
    let report = train(&mut p, &data.train, &data.val, &tc, Some(&path), |_, _| ControlFlow::Continue(()))
        .map_err(|e| e.to_string())?;
    let mut trace: Vec<u64> = report.train_losses().iter().map(|l| l.to_bits()).collect();
    trace.extend(report.epochs.iter().filter_map(|e| e.val_loss).map(f64::to_bits));
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    Ok((trace, bytes))
}

fn determinism() -> Outcome {
    let (t1, c1) = toy_run(31)?;
    let (t2, c2) = toy_run(31)?;
    let (t3, _) = toy_run(32)?;
    check(
        t1 == t2 && c1 == c2 && t1 != t3,
        format!(
            "loss traces identical: {}, checkpoints identical: {} ({} bytes), other seed differs: {}",
            t1 == t2,
            c1 == c2,
            c1.len(),
            t1 != t3
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let ds = generate_dataset(11, 48, 3).map_err(|e| e.to_string())?;
    let vocab = ds.vocab().map_err(|e| e.to_string())?;
    let dims = ModelDims { regions: 3, vocab: vocab.len(), ..ModelDims::tiny() };
    let pc = PipelineConfig { dims, max_answer_len: 9, max_rationale_len: 13, ..PipelineConfig::tiny() };
    let data = prepare(&ds, [0.5, 0.5, 0.0], &pc.dims, 11).map_err(|e| e.to_string())?;
    let mut p = Pipeline::new(pc).map_err(|e| e.to_string())?;
    let tc = TrainConfig { epochs: 2, batch_size: 8, lr: 1e-2, ..TrainConfig::default() };
    train(&mut p, &data.train, &[], &tc, None, |_, _| ControlFlow::Continue(())).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.grck");
    save_checkpoint(&p, &path).map_err(|e| e.to_string())?;
    let q = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut same = 0;
    for s in &data.val {
        let a = p.generate(&s.input).map_err(|e| e.to_string())?;
        let b = q.generate(&s.input).map_err(|e| e.to_string())?;
        if a.answers == b.answers && a.rationales == b.rationales {
            same += 1;
        }
    }
    let bytes_equal = encode_checkpoint(q.config(), q.store()).map_err(|e| e.to_string())?
        == std::fs::read(&path).map_err(|e| e.to_string())?;
    check(
        same == data.val.len() && bytes_equal,
        format!("{same}/{} generations identical after reload; re-encoded bytes identical: {bytes_equal}", data.val.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("factorization identity", factorization),
        ("uniform-logit loss", uniform_loss),
        ("metric oracles", metric_oracles),
        ("classification harness", classification),
        ("determinism", determinism),
        ("checkpoint round-trip", checkpoint_round_trip),
        ("ablation harness", ablation),
        ("toy learnability", learnability),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<24} {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
