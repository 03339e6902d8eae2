use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use genref_core::checkpoint::{canonical_json, load_checkpoint, write_atomic};
use genref_core::data::{generate_dataset, split, to_train_samples, Dataset, Sample};
use genref_core::experiment::{
    ablation_table, evaluate_generation, exact_match, full_grid, prepare, refinement_comparison, run_ablation,
    toy_provider,
};
use genref_core::metrics::{evaluate_corpus, EmbeddingProvider};
use genref_core::nn::{tokenize, Vocab};
use genref_core::pipeline::{block_name, Pipeline, PipelineConfig};
use genref_core::train::{grad_check_pipeline, train};
use genref_rating::{PoolItem, Study, TaskPool};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{Cli, Command, DataCommand, SplitArg};

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(path.clone());
        Ok(path)
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
        let mut text = canonical_json(value)?;
        text.push('\n');
        self.output(name, text.as_bytes())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Data { .. } => "data-gen",
        Command::Train { .. } => "train",
        Command::Generate { .. } => "generate",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Gradcheck { .. } => "gradcheck",
        Command::ServeRatings { .. } => "serve-ratings",
        Command::AttnDump { .. } => "attn-dump",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.global.config.as_deref())?;
    config.apply(&cli.global.overrides());
    fs::create_dir_all(&cli.global.out).with_context(|| format!("creating {}", cli.global.out.display()))?;
    let name = command_name(&cli.command);
    let mut ctx = Ctx {
        manifest: RunManifest::begin(name, &config),
        config,
        out: cli.global.out.clone(),
    };
    let result = dispatch(&mut ctx, cli);
    let status = if result.is_ok() { "ok" } else { "failed" };
    let path = ctx.manifest.finish(&ctx.out, status)?;
    eprintln!("manifest: {}", path.display());
    result
}

fn dispatch(ctx: &mut Ctx, cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data {
            command: DataCommand::Gen { n, k },
        } => data_gen(ctx, n, k),
        Command::Train { data, stop_at } => train_cmd(ctx, data.as_deref(), stop_at),
        Command::Generate {
            model,
            data,
            split,
            limit,
        } => generate(ctx, &model, &data, split, limit),
        Command::Eval { hyps, refs } => eval(ctx, &hyps, &refs),
        Command::Ablate { data } => ablate(ctx, data.as_deref()),
        Command::Gradcheck {
            tiny,
            epsilon,
            tolerance,
        } => gradcheck(ctx, tiny, epsilon, tolerance),
        Command::ServeRatings {
            pool,
            log,
            playlist,
            ground_truth_ratio,
        } => serve(ctx, &pool, log, playlist, ground_truth_ratio, cli.global.port),
        Command::AttnDump { model, data, index } => attn_dump(ctx, &model, &data, index),
    }
}

fn data_gen(ctx: &mut Ctx, n: Option<usize>, k: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        ctx.config.data.n = n;
    }
    if let Some(k) = k {
        ctx.config.data.k = k;
    }
    ctx.manifest.config = ctx.config.clone();
    let ds = generate_dataset(ctx.config.seed, ctx.config.data.n, ctx.config.data.k)?;
    let path = ctx.output("dataset.jsonl", ds.to_jsonl()?.as_bytes())?;
    println!(
        "{} samples, k={}, vocab hash {} -> {}",
        ds.header.n,
        ds.header.k,
        ds.header.vocab_hash,
        path.display()
    );
    Ok(())
}

fn load_dataset(ctx: &Ctx, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::read(p).with_context(|| format!("reading dataset {}", p.display())),
        None => Ok(generate_dataset(ctx.config.seed, ctx.config.data.n, ctx.config.data.k)?),
    }
}

fn vocab_path(model: &Path) -> PathBuf {
    model.with_extension("vocab.json")
}

fn load_vocab(model: &Path) -> Result<Vocab> {
    let path = vocab_path(model);
    let text = fs::read_to_string(&path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    let tokens: Vec<String> = serde_json::from_str(&text)?;
    Vocab::try_from(tokens).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn train_cmd(ctx: &mut Ctx, data: Option<&Path>, stop_at: Option<f64>) -> Result<()> {
    let ds = load_dataset(ctx, data)?;
    let vocab = ds.vocab()?;
    let pc = ctx.config.model.pipeline(ds.header.k, vocab.len(), ctx.config.seed);
    let prepared = prepare(&ds, ctx.config.data.fractions, &pc.dims, ctx.config.seed)?;
    let mut pipeline = Pipeline::new(pc)?;
    println!(
        "training {} parameters on {} samples ({} val)",
        pipeline.store().num_scalars(),
        prepared.train.len(),
        prepared.val.len()
    );
    let mut failure = None;
    let report = train(&mut pipeline, &prepared.train, &prepared.val, &ctx.config.train, None, |s, p| {
        let acc = match stop_at.map(|_| exact_match(p, &prepared.val)) {
            Some(Ok(a)) => Some(a),
            Some(Err(e)) => {
                failure = Some(e);
                return std::ops::ControlFlow::Break(());
            }
            None => None,
        };
        let val = s.val_loss.map_or(String::new(), |v| format!(" val {v:.4}"));
        let acc_text = acc.map_or(String::new(), |a| format!(" val-answer-exact {a:.1}%"));
        println!(
            "epoch {:>3} lr {:.2e} train {:.4}{val}{acc_text} ({:.0}s)",
            s.epoch + 1,
            s.lr,
            s.train_loss,
            s.elapsed_secs
        );
        match (acc, stop_at) {
            (Some(a), Some(t)) if a >= t => std::ops::ControlFlow::Break(()),
            _ => std::ops::ControlFlow::Continue(()),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let bytes = genref_core::checkpoint::encode_checkpoint(pipeline.config(), pipeline.store())?;
    let model = ctx.output("model.grck", &bytes)?;
    let vocab_name = vocab_path(Path::new("model.grck"));
    ctx.json(vocab_name.to_str().expect("utf-8 name"), &vocab.tokens())?;
    ctx.json("train_log.json", &report.epochs)?;
    println!("checkpoint -> {}", model.display());
    Ok(())
}

fn select(ctx: &Ctx, ds: &Dataset, which: SplitArg) -> Result<Vec<Sample>> {
    let s = split(&ds.samples, ctx.config.data.fractions, ctx.config.seed)?;
    Ok(match which {
        SplitArg::Train => s.train,
        SplitArg::Val => s.val,
        SplitArg::Test => s.test,
        SplitArg::All => ds.samples.clone(),
    })
}

fn load_model(model: &Path) -> Result<(Pipeline, Vocab)> {
    let pipeline = load_checkpoint(model).with_context(|| format!("loading {}", model.display()))?;
    let vocab = load_vocab(model)?;
    if vocab.len() != pipeline.config().dims.vocab {
        bail!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            pipeline.config().dims.vocab
        );
    }
    Ok((pipeline, vocab))
}

fn generate(ctx: &mut Ctx, model: &Path, data: &Path, split: SplitArg, limit: Option<usize>) -> Result<()> {
    let (pipeline, vocab) = load_model(model)?;
    let ds = load_dataset(ctx, Some(data))?;
    let dims = pipeline.config().dims.clone();
    let mut raw = select(ctx, &ds, split)?;
    if let Some(l) = limit {
        raw.truncate(l);
    }
    if raw.is_empty() {
        bail!("the selected split is empty");
    }
    let encoded = to_train_samples(&raw, &vocab, &dims, ctx.config.seed)?;
    let provider = toy_provider(&vocab, ctx.config.seed)?;
    let eval = evaluate_generation(&pipeline, &encoded, &raw, &vocab, &provider)?;
    let mut lines = String::new();
    let mut pool = TaskPool::default();
    for (i, s) in raw.iter().enumerate() {
        lines.push_str(&serde_json::to_string(&json!({
            "id": s.id,
            "question": s.question,
            "answer": eval.generated_answers[i],
            "rationale": eval.generated_rationales[i],
            "gold_answer": s.answer,
            "gold_rationale": s.rationale,
        }))?);
        lines.push('\n');
        pool.generated.push(PoolItem {
            sample_id: s.id.clone(),
            question: s.question.clone(),
            answer: eval.generated_answers[i].clone(),
            rationale: eval.generated_rationales[i].clone(),
        });
        pool.ground_truth.push(PoolItem {
            sample_id: s.id.clone(),
            question: s.question.clone(),
            answer: s.answer.clone(),
            rationale: s.rationale.clone(),
        });
    }
    ctx.output("generations.jsonl", lines.as_bytes())?;
    ctx.json("pool.json", &pool)?;
    ctx.json("generation_metrics.json", &eval.answers)?;
    println!("final answer exact match {:.2}% over {} samples", eval.answer_exact, raw.len());
    for (kind, ok, n) in &eval.answer_exact_by_kind {
        println!("  {kind:<6} {ok}/{n}");
    }
    println!("answers:\n{}", eval.answers.table());
    println!("rationales:\n{}", eval.rationales.table());
    ctx.json(
        "generation_report.json",
        &json!({
            "answer_exact": eval.answer_exact,
            "rationale_exact": eval.rationale_exact,
            "answer_exact_by_kind": eval.answer_exact_by_kind,
            "answers": eval.answers,
            "rationales": eval.rationales,
        }),
    )?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_owned)
        .collect())
}

fn eval(ctx: &mut Ctx, hyps: &Path, refs: &Path) -> Result<()> {
    let h = read_lines(hyps)?;
    let r = read_lines(refs)?;
    if h.len() != r.len() {
        bail!("{} hypotheses but {} references", h.len(), r.len());
    }
    let words: Vec<String> = h.iter().chain(&r).flat_map(|l| tokenize(l)).collect();
    let provider = EmbeddingProvider::seeded(&words, 32, ctx.config.seed)?;
    let report = evaluate_corpus(&h, &r, &provider)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.table());
    ctx.json("metrics.json", &report)?;
    Ok(())
}

fn ablate(ctx: &mut Ctx, data: Option<&Path>) -> Result<()> {
    let ds = load_dataset(ctx, data)?;
    let vocab = ds.vocab()?;
    let base = ctx.config.model.pipeline(ds.header.k, vocab.len(), ctx.config.seed);
    let prepared = prepare(&ds, ctx.config.data.fractions, &base.dims, ctx.config.seed)?;
    let rows = run_ablation(&prepared, &base, &ctx.config.train, &full_grid(), |r| {
        println!(
            "refine {} {:<6} loss {:.4} answer-exact {:.1}%",
            r.n_refine,
            r.variant.label(),
            r.final_train_loss,
            r.answer_exact
        );
    })?;
    let text = format!("{}\n{}", ablation_table(&rows), refinement_comparison(&rows));
    print!("{text}");
    ctx.output("ablation.txt", text.as_bytes())?;
    ctx.json("ablation.json", &rows)?;
    Ok(())
}

fn gradcheck(ctx: &mut Ctx, tiny: bool, epsilon: f64, tolerance: f64) -> Result<()> {
    if !tiny {
        bail!("only the tiny configuration is supported; pass --tiny");
    }
    let base = PipelineConfig {
        seed: ctx.config.seed,
        ..PipelineConfig::tiny()
    };
    let cfg = base.configure_variant(ctx.config.model.n_refine, ctx.config.model.variant)?;
    let t = std::time::Instant::now();
    let gc = grad_check_pipeline(&cfg, 2, epsilon)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = &gc.report.worst;
    println!(
        "max relative error {:.3e} over {} parameters (n_refine {}, {}, epsilon {epsilon}, {secs:.1}s)",
        gc.report.max_relative_error,
        gc.report.checked,
        cfg.n_refine,
        cfg.variant.label()
    );
    println!("worst entry: {worst:?}");
    ctx.json(
        "gradcheck.json",
        &json!({
            "max_relative_error": gc.report.max_relative_error,
            "checked": gc.report.checked,
            "region_grad_max_abs": gc.region_grad_max_abs,
            "epsilon": epsilon,
            "tolerance": tolerance,
            "seconds": secs,
            "config": cfg,
        }),
    )?;
    if gc.report.max_relative_error >= tolerance {
        bail!(
            "max relative error {:.3e} is not below {tolerance:e}",
            gc.report.max_relative_error
        );
    }
    Ok(())
}

fn serve(
    ctx: &mut Ctx,
    pool: &Path,
    log: Option<PathBuf>,
    playlist: Option<usize>,
    ratio: Option<f64>,
    port: u16,
) -> Result<()> {
    let text = fs::read_to_string(pool).with_context(|| format!("reading pool {}", pool.display()))?;
    let pool: TaskPool = serde_json::from_str(&text).context("parsing task pool")?;
    if let Some(n) = playlist {
        ctx.config.study.playlist_len = n;
    }
    if let Some(r) = ratio {
        ctx.config.study.ground_truth_ratio = r;
    }
    ctx.manifest.config = ctx.config.clone();
    let log = log.unwrap_or_else(|| ctx.out.join("ratings.jsonl"));
    let study = Arc::new(Study::open(pool, ctx.config.study.clone(), Some(&log))?);
    ctx.manifest.outputs.push(log.clone());
    ctx.manifest.finish(&ctx.out, "serving")?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    println!("rating service on http://{addr} (log {})", log.display());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(genref_rating::server::serve(study, addr))?;
    Ok(())
}

fn attn_dump(ctx: &mut Ctx, model: &Path, data: &Path, index: usize) -> Result<()> {
    let (pipeline, vocab) = load_model(model)?;
    let ds = load_dataset(ctx, Some(data))?;
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| anyhow!("index {index} out of range for {} samples", ds.samples.len()))?;
    let encoded = to_train_samples(std::slice::from_ref(sample), &vocab, &pipeline.config().dims, ctx.config.seed)?;
    let out = pipeline.generate(&encoded[0].input)?;
    let mut blocks = Vec::new();
    for (b, weights) in out.attention.iter().enumerate() {
        let seq = if b % 2 == 0 { &out.answers[b / 2] } else { &out.rationales[b / 2] };
        let tokens: Vec<&str> = seq.ids().iter().map(|&i| vocab.token(i)).collect();
        blocks.push(json!({ "block": block_name(b), "tokens": tokens, "weights": weights }));
    }
    let regions: Vec<_> = sample
        .scene
        .objects
        .iter()
        .map(|o| {
            json!({
                "shape": o.shape.word(),
                "color": o.color.word(),
                "size": o.size.word(),
                "row": o.row,
                "col": o.col,
            })
        })
        .collect();
    let dump = json!({
        "sample_id": sample.id,
        "question": sample.question,
        "regions": regions,
        "blocks": blocks,
    });
    let path = ctx.json("attention.json", &dump)?;
    println!("{} blocks of attention -> {}", blocks_len(&dump), path.display());
    Ok(())
}

fn blocks_len(dump: &serde_json::Value) -> usize {
    dump["blocks"].as_array().map_or(0, Vec::len)
}
