//! Toy-world experiments: data preparation, generation scoring, and the
//! refinement × input-variant ablation grid.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::data::{split, to_train_samples, Dataset, Question, Sample};
use crate::encoder::InputVariant;
use crate::error::Result;
use crate::metrics::{evaluate_corpus, EmbeddingProvider, MetricReport};
use crate::nn::Vocab;
use crate::pipeline::{ModelDims, Pipeline, PipelineConfig, TrainSample};
use crate::train::{train, EpochStats, TrainConfig, TrainingReport};

/// Encoded train / val / test splits of a toy dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
    pub val_raw: Vec<Sample>,
    pub test_raw: Vec<Sample>,
}

pub fn prepare(ds: &Dataset, fractions: [f64; 3], dims: &ModelDims, seed: u64) -> Result<Prepared> {
    let vocab = ds.vocab()?;
    let s = split(&ds.samples, fractions, seed)?;
    Ok(Prepared {
        train: to_train_samples(&s.train, &vocab, dims, seed)?,
        val: to_train_samples(&s.val, &vocab, dims, seed)?,
        test: to_train_samples(&s.test, &vocab, dims, seed)?,
        val_raw: s.val,
        test_raw: s.test,
        vocab,
    })
}

/// Encodes fixed train / val lists (no shuffling), e.g. the first `n`
/// samples for training and the next `m` for validation.
pub fn prepare_fixed(train_raw: &[Sample], val_raw: &[Sample], vocab: Vocab, dims: &ModelDims, seed: u64) -> Result<Prepared> {
    Ok(Prepared {
        train: to_train_samples(train_raw, &vocab, dims, seed)?,
        val: to_train_samples(val_raw, &vocab, dims, seed)?,
        test: Vec::new(),
        val_raw: val_raw.to_vec(),
        test_raw: Vec::new(),
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    /// Percentage of samples whose final answer equals the gold answer.
    pub answer_exact: f64,
    pub rationale_exact: f64,
    /// Final-answer exact match per question kind, as (kind, correct, total).
    pub answer_exact_by_kind: Vec<(String, usize, usize)>,
    pub answers: MetricReport,
    pub rationales: MetricReport,
    pub generated_answers: Vec<String>,
    pub generated_rationales: Vec<String>,
}

/// Greedy generation on `samples` scored against their gold texts.
pub fn evaluate_generation(
    pipeline: &Pipeline,
    samples: &[TrainSample],
    raw: &[Sample],
    vocab: &Vocab,
    provider: &EmbeddingProvider,
) -> Result<GenerationEval> {
    let mut answers = Vec::with_capacity(samples.len());
    let mut rationales = Vec::with_capacity(samples.len());
    let (mut a_ok, mut r_ok) = (0, 0);
    let mut by_kind: Vec<(String, usize, usize)> = Vec::new();
    for (s, r) in samples.iter().zip(raw) {
        let out = pipeline.generate(&s.input)?;
        let a_hit = out.final_answer() == &s.answer;
        a_ok += usize::from(a_hit);
        r_ok += usize::from(out.final_rationale() == &s.rationale);
        let kind = Question::parse(&r.question).map_or_else(|_| "other".to_owned(), |q| q.kind().to_string());
        match by_kind.iter_mut().find(|k| k.0 == kind) {
            Some(k) => {
                k.1 += usize::from(a_hit);
                k.2 += 1;
            }
            None => by_kind.push((kind, usize::from(a_hit), 1)),
        }
        answers.push(vocab.decode(out.final_answer().ids()));
        rationales.push(vocab.decode(out.final_rationale().ids()));
    }
    by_kind.sort();
    let n = samples.len().max(1) as f64;
    let gold_a: Vec<&str> = raw.iter().map(|r| r.answer.as_str()).collect();
    let gold_r: Vec<&str> = raw.iter().map(|r| r.rationale.as_str()).collect();
    let gen_a: Vec<&str> = answers.iter().map(String::as_str).collect();
    let gen_r: Vec<&str> = rationales.iter().map(String::as_str).collect();
    Ok(GenerationEval {
        answer_exact: 100.0 * a_ok as f64 / n,
        rationale_exact: 100.0 * r_ok as f64 / n,
        answer_exact_by_kind: by_kind,
        answers: evaluate_corpus(&gen_a, &gold_a, provider)?,
        rationales: evaluate_corpus(&gen_r, &gold_r, provider)?,
        generated_answers: answers,
        generated_rationales: rationales,
    })
}

/// Provider over the dataset vocabulary.
pub fn toy_provider(vocab: &Vocab, seed: u64) -> Result<EmbeddingProvider> {
    EmbeddingProvider::seeded(vocab.tokens(), 32, seed)
}

/// Hyperparameters under which the desk-scale model learns the toy world.
pub fn learnable_configs(vocab_size: usize, seed: u64) -> (PipelineConfig, TrainConfig) {
    let mut pc = PipelineConfig::new(ModelDims::desk(vocab_size));
    pc.dropout = 0.0;
    pc.seed = seed;
    let tc = TrainConfig {
        lr: 2e-3,
        decay: 1.0,
        batch_size: 16,
        epochs: 30,
        seed,
        ..TrainConfig::default()
    };
    (pc, tc)
}

/// Trains until `cfg.epochs` or until the validation answer exact match
/// reaches `stop_at` percent, whichever comes first.
pub fn train_until(
    pipeline: &mut Pipeline,
    data: &Prepared,
    cfg: &TrainConfig,
    stop_at: Option<f64>,
    mut log: impl FnMut(&EpochStats, Option<f64>),
) -> Result<(TrainingReport, Vec<f64>)> {
    let mut accs = Vec::new();
    let mut failure = None;
    let report = train(pipeline, &data.train, &data.val, cfg, None, |stats, p| {
        let acc = match stop_at {
            Some(_) => match exact_match(p, &data.val) {
                Ok(a) => Some(a),
                Err(e) => {
                    failure = Some(e);
                    return ControlFlow::Break(());
                }
            },
            None => None,
        };
        log(stats, acc);
        if let Some(a) = acc {
            accs.push(a);
        }
        match (acc, stop_at) {
            (Some(a), Some(t)) if a >= t => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((report, accs))
}

/// Percentage of samples whose greedy final answer matches the gold answer.
pub fn exact_match(pipeline: &Pipeline, samples: &[TrainSample]) -> Result<f64> {
    let mut ok = 0;
    for s in samples {
        if pipeline.generate(&s.input)?.final_answer() == &s.answer {
            ok += 1;
        }
    }
    Ok(100.0 * ok as f64 / samples.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_refine: usize,
    pub variant: InputVariant,
    pub final_train_loss: f64,
    pub answer_exact: f64,
    pub answer_cider: f64,
    pub answer_rouge_l: f64,
    pub rationale_cider: f64,
    pub rationale_rouge_l: f64,
}

/// Trains and evaluates every (refinement count, input variant) pair.
pub fn run_ablation(
    data: &Prepared,
    base: &PipelineConfig,
    cfg: &TrainConfig,
    grid: &[(usize, InputVariant)],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let provider = toy_provider(&data.vocab, base.seed)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &(n, variant) in grid {
        let pc = base.configure_variant(n, variant)?;
        let mut p = Pipeline::new(pc)?;
        let report = train(&mut p, &data.train, &[], cfg, None, |_, _| ControlFlow::Continue(()))?;
        let eval = evaluate_generation(&p, &data.val, &data.val_raw, &data.vocab, &provider)?;
        let row = AblationRow {
            n_refine: n,
            variant,
            final_train_loss: report.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            answer_exact: eval.answer_exact,
            answer_cider: eval.answers.cider.mean,
            answer_rouge_l: eval.answers.rouge_l.mean,
            rationale_cider: eval.rationales.cider.mean,
            rationale_rouge_l: eval.rationales.rouge_l.mean,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// The full {0, 1, 2} × {Q+I+C, Q+I, Q+C} grid.
pub fn full_grid() -> Vec<(usize, InputVariant)> {
    (0..=2)
        .flat_map(|n| InputVariant::ALL.into_iter().map(move |v| (n, v)))
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<8} {:<7} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "refine", "input", "loss", "A-exact", "A-CIDEr", "A-RougeL", "R-CIDEr", "R-RougeL"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:<7} {:>9.4} {:>8.2} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.n_refine,
            r.variant.label(),
            r.final_train_loss,
            r.answer_exact,
            r.answer_cider,
            r.answer_rouge_l,
            r.rationale_cider,
            r.rationale_rouge_l
        ));
    }
    out
}

/// One-line comparison of one refinement module against none, per variant.
pub fn refinement_comparison(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for v in InputVariant::ALL {
        let find = |n| rows.iter().find(|r| r.n_refine == n && r.variant == v);
        if let (Some(r0), Some(r1)) = (find(0), find(1)) {
            out.push_str(&format!(
                "{}: refine 1 vs 0  A-CIDEr {:+.4}  A-RougeL {:+.4}  R-CIDEr {:+.4}  R-RougeL {:+.4}\n",
                v.label(),
                r1.answer_cider - r0.answer_cider,
                r1.answer_rouge_l - r0.answer_rouge_l,
                r1.rationale_cider - r0.rationale_cider,
                r1.rationale_rouge_l - r0.rationale_rouge_l
            ));
        }
    }
    out
}
