//! Text-generation metrics and the similarity-based multiple-choice harness.
//!
//! Inputs are whitespace tokens. Overlap metrics: ROUGE-L, plain CIDEr and
//! an exact-match METEOR variant. Embedding metrics use an
//! [`EmbeddingProvider`] lookup table.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{fnv1a, XorShift};
use crate::error::{invalid, Result};
use crate::nn::tokenize;

fn nonempty<T>(hyp: &[T], reference: &[T], metric: &str) -> Result<()> {
    if hyp.is_empty() || reference.is_empty() {
        return invalid(format!("{metric} needs non-empty hypothesis and reference"));
    }
    Ok(())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1+β²)PR / (R+β²P)` with β = 1.2.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    nonempty(hyp, reference, "rouge_l")?;
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

type NGram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<NGram<'_>, f64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn tfidf<'a>(counts: &HashMap<NGram<'a>, f64>, idf: &dyn Fn(&NGram<'_>) -> f64) -> HashMap<NGram<'a>, f64> {
    let total: f64 = counts.values().sum();
    counts.iter().map(|(g, c)| (*g, c / total * idf(g))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

pub const CIDER_MAX_N: usize = 4;

/// Plain CIDEr with one reference per hypothesis: for n = 1..=4, cosine of
/// TF-IDF n-gram vectors with IDF `ln(N / max(1, df))` over the reference
/// corpus, averaged over n. No ×10 scaling or length penalty.
pub fn cider<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<CiderScores> {
    if hyps.len() != refs.len() {
        return invalid(format!("cider: {} hypotheses for {} references", hyps.len(), refs.len()));
    }
    if refs.len() < 2 {
        return invalid("cider needs a corpus of at least two references");
    }
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| tokenize(h.as_ref())).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r.as_ref())).collect();
    let n_docs = refs.len() as f64;
    let mut per_sample = vec![0.0; hyps.len()];
    for n in 1..=CIDER_MAX_N {
        let ref_counts: Vec<_> = ref_tokens.iter().map(|t| ngram_counts(t, n)).collect();
        let mut df: HashMap<NGram<'_>, f64> = HashMap::new();
        for c in &ref_counts {
            for g in c.keys() {
                *df.entry(*g).or_insert(0.0) += 1.0;
            }
        }
        let idf = |g: &NGram<'_>| (n_docs / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
        for (i, h) in hyp_tokens.iter().enumerate() {
            let vh = tfidf(&ngram_counts(h, n), &idf);
            let vr = tfidf(&ref_counts[i], &idf);
            let dot: f64 = vh.iter().map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0)).sum();
            let nh = vh.values().map(|w| w * w).sum::<f64>().sqrt();
            let nr = vr.values().map(|w| w * w).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                per_sample[i] += dot / (nh * nr) / CIDER_MAX_N as f64;
            }
        }
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderScores { per_sample, mean })
}

/// Search-node budget for the minimum-chunk alignment before falling back
/// to the greedy alignment.
const METEOR_SEARCH_BUDGET: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeteorDetail {
    pub matches: usize,
    pub chunks: usize,
    pub score: f64,
}

/// Exact-match METEOR: maximize unigram matches, then minimize chunks;
/// `F = 10PR/(R+9P)`, penalty `0.5·(chunks/m)³`.
pub fn meteor_lite<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    Ok(meteor_detail(hyp, reference)?.score)
}

pub fn meteor_detail<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<MeteorDetail> {
    nonempty(hyp, reference, "meteor_lite")?;
    // Candidate reference positions for each hypothesis token.
    let options: Vec<Vec<usize>> = hyp
        .iter()
        .map(|h| (0..reference.len()).filter(|&j| reference[j] == *h).collect())
        .collect();
    let m = max_matching(&options, reference.len());
    if m == 0 {
        return Ok(MeteorDetail {
            matches: 0,
            chunks: 0,
            score: 0.0,
        });
    }
    let chunks = min_chunks(&options, reference.len(), m);
    let (m_f, c_f) = (m as f64, chunks as f64);
    let p = m_f / hyp.len() as f64;
    let r = m_f / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (c_f / m_f).powi(3);
    Ok(MeteorDetail {
        matches: m,
        chunks,
        score: f * (1.0 - penalty),
    })
}

fn max_matching(options: &[Vec<usize>], ref_len: usize) -> usize {
    fn augment(i: usize, options: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &j in &options[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].map_or(true, |o| augment(o, options, owner, seen)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; ref_len];
    (0..options.len())
        .filter(|&i| augment(i, options, &mut owner, &mut vec![false; ref_len]))
        .count()
}

struct ChunkSearch<'a> {
    options: &'a [Vec<usize>],
    target: usize,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn go(&mut self, i: usize, matched: usize, chunks: usize, prev: Option<usize>) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_SEARCH_BUDGET {
            return;
        }
        if matched == self.target {
            self.best = chunks;
            return;
        }
        if i == self.options.len() || matched + (self.options.len() - i) < self.target {
            return;
        }
        // Extending the current chunk first finds good bounds early.
        let mut order: Vec<usize> = self.options[i].iter().copied().filter(|&j| !self.used[j]).collect();
        order.sort_by_key(|&j| (prev.map_or(true, |p| p + 1 != j), j));
        for j in order {
            let extends = prev.is_some_and(|p| p + 1 == j);
            self.used[j] = true;
            self.go(i + 1, matched + 1, chunks + usize::from(!extends), Some(j));
            self.used[j] = false;
        }
        self.go(i + 1, matched, chunks, None);
    }
}

fn greedy_chunks(options: &[Vec<usize>], ref_len: usize, target: usize) -> usize {
    let mut used = vec![false; ref_len];
    let mut prev: Option<usize> = None;
    let mut chunks = 0;
    let mut matched = 0;
    for opts in options {
        if matched == target {
            break;
        }
        let pick = prev
            .map(|p| p + 1)
            .filter(|j| opts.contains(j) && !used[*j])
            .or_else(|| opts.iter().copied().find(|&j| !used[j]));
        match pick {
            Some(j) => {
                if prev.map_or(true, |p| p + 1 != j) {
                    chunks += 1;
                }
                used[j] = true;
                matched += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks
}

fn min_chunks(options: &[Vec<usize>], ref_len: usize, target: usize) -> usize {
    let greedy = greedy_chunks(options, ref_len, target);
    let mut search = ChunkSearch {
        options,
        target,
        used: vec![false; ref_len],
        best: usize::MAX,
        nodes: 0,
    };
    search.go(0, 0, 0, None);
    if search.best == usize::MAX {
        // The greedy pass may stop short of `target`; only trust it when
        // the search produced nothing within budget.
        greedy.max(1)
    } else {
        search.best
    }
}

/// Token vectors for embedding metrics, with a fixed vector for unknown
/// tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProvider {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl EmbeddingProvider {
    pub fn new(table: HashMap<String, Vec<f64>>, unk: Vec<f64>) -> Result<Self> {
        let dim = unk.len();
        if dim == 0 {
            return invalid("embedding dimension must be ≥ 1");
        }
        if let Some((t, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return invalid(format!("vector for {t:?} has {} entries, expected {dim}", v.len()));
        }
        Ok(Self { dim, table, unk })
    }

    /// Seeded pseudo-random vectors for `words`.
    pub fn seeded<S: AsRef<str>>(words: &[S], dim: usize, seed: u64) -> Result<Self> {
        let vec_for = |w: &str| XorShift::vector(seed ^ fnv1a(w.as_bytes()).rotate_left(7), dim);
        let table = words.iter().map(|w| (w.as_ref().to_owned(), vec_for(w.as_ref()))).collect();
        Self::new(table, vec_for("\u{0}unk"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.table.get(token).unwrap_or(&self.unk)
    }

    /// Mean of the token vectors.
    pub fn sentence(&self, tokens: &[String]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for t in tokens {
            for (a, v) in acc.iter_mut().zip(self.vector(t)) {
                *a += v;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Per dimension, the token value of largest magnitude (sign kept).
    pub fn extrema(&self, tokens: &[String]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.dim];
        for t in tokens {
            for (o, &v) in out.iter_mut().zip(self.vector(t)) {
                if v.abs() > o.abs() {
                    *o = v;
                }
            }
        }
        out
    }
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub emb_avg: f64,
    pub vec_extrema: f64,
    pub greedy_match: f64,
    /// Metrics that hit a zero-norm vector and were set to 0.
    pub warnings: Vec<String>,
}

fn greedy_direction(a: &[String], b: &[String], p: &EmbeddingProvider) -> Option<f64> {
    let mut total = 0.0;
    for x in a {
        let best = b
            .iter()
            .filter_map(|y| cosine(p.vector(x), p.vector(y)))
            .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))?;
        total += best;
    }
    Some(total / a.len() as f64)
}

pub fn embedding_metrics<T: AsRef<str>>(hyp: &[T], reference: &[T], provider: &EmbeddingProvider) -> Result<EmbeddingScores> {
    nonempty(hyp, reference, "embedding_metrics")?;
    let h: Vec<String> = hyp.iter().map(|t| t.as_ref().to_owned()).collect();
    let r: Vec<String> = reference.iter().map(|t| t.as_ref().to_owned()).collect();
    let mut warnings = Vec::new();
    let mut guard = |name: &str, v: Option<f64>| {
        v.unwrap_or_else(|| {
            warnings.push(format!("{name}: zero-norm vector, scored 0"));
            0.0
        })
    };
    let emb_avg = guard("emb_avg", cosine(&provider.sentence(&h), &provider.sentence(&r)));
    let vec_extrema = guard("vec_extrema", cosine(&provider.extrema(&h), &provider.extrema(&r)));
    let greedy = match (greedy_direction(&h, &r, provider), greedy_direction(&r, &h, provider)) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    let greedy_match = guard("greedy_match", greedy);
    Ok(EmbeddingScores {
        emb_avg,
        vec_extrema,
        greedy_match,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub index: usize,
    pub scores: Vec<f64>,
}

pub const NUM_OPTIONS: usize = 4;

/// Picks the option whose mean token embedding is most cosine-similar to
/// `generated`; ties go to the lowest index.
pub fn classify_by_similarity<S: AsRef<str>>(generated: &str, options: &[S], provider: &EmbeddingProvider) -> Result<Classification> {
    if options.len() != NUM_OPTIONS {
        return invalid(format!("expected {NUM_OPTIONS} options, got {}", options.len()));
    }
    let g = provider.sentence(&tokenize(generated));
    let scores: Vec<f64> = options
        .iter()
        .map(|o| cosine(&g, &provider.sentence(&tokenize(o.as_ref()))).unwrap_or(0.0))
        .collect();
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(Classification { index, scores })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub answer: f64,
    pub rationale: f64,
    /// Samples with both the answer and the rationale right.
    pub overall: f64,
    pub n: usize,
}

impl AccuracyReport {
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>10} {:>8}\n{:>8.2} {:>10.2} {:>8.2}\n",
            "Answer", "Rationale", "Overall", self.answer, self.rationale, self.overall
        )
    }
}

/// Percentages from per-sample `(answer_correct, rationale_correct)` flags.
pub fn accuracy_report(flags: &[(bool, bool)]) -> Result<AccuracyReport> {
    if flags.is_empty() {
        return invalid("accuracy_report needs at least one sample");
    }
    let n = flags.len();
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(AccuracyReport {
        answer: pct(flags.iter().filter(|f| f.0).count()),
        rationale: pct(flags.iter().filter(|f| f.1).count()),
        overall: pct(flags.iter().filter(|f| f.0 && f.1).count()),
        n,
    })
}

pub const METRIC_NAMES: [&str; 6] = ["rouge_l", "cider", "meteor_lite", "emb_avg", "vec_extrema", "greedy_match"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

impl MetricSeries {
    fn new(per_sample: Vec<f64>) -> Self {
        let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        Self { per_sample, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rouge_l: MetricSeries,
    pub cider: MetricSeries,
    pub meteor_lite: MetricSeries,
    pub emb_avg: MetricSeries,
    pub vec_extrema: MetricSeries,
    pub greedy_match: MetricSeries,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn means(&self) -> [(&'static str, f64); 6] {
        [
            ("rouge_l", self.rouge_l.mean),
            ("cider", self.cider.mean),
            ("meteor_lite", self.meteor_lite.mean),
            ("emb_avg", self.emb_avg.mean),
            ("vec_extrema", self.vec_extrema.mean),
            ("greedy_match", self.greedy_match.mean),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        crate::checkpoint::canonical_json(self)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>8}\n", "metric", "mean");
        for (name, v) in self.means() {
            out.push_str(&format!("{name:<14} {v:>8.4}\n"));
        }
        out
    }
}

/// Every metric over a corpus of hypothesis / reference strings.
pub fn evaluate_corpus<S: AsRef<str>>(hyps: &[S], refs: &[S], provider: &EmbeddingProvider) -> Result<MetricReport> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return invalid(format!("evaluate_corpus: {} hypotheses for {} references", hyps.len(), refs.len()));
    }
    let mut cols: [Vec<f64>; 5] = Default::default();
    let mut warnings = Vec::new();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        let (h, r) = (tokenize(h.as_ref()), tokenize(r.as_ref()));
        if h.is_empty() || r.is_empty() {
            warnings.push(format!("sample {i}: empty text scored 0"));
            cols.iter_mut().for_each(|c| c.push(0.0));
            continue;
        }
        cols[0].push(rouge_l(&h, &r)?);
        cols[1].push(meteor_lite(&h, &r)?);
        let e = embedding_metrics(&h, &r, provider)?;
        warnings.extend(e.warnings.iter().map(|w| format!("sample {i}: {w}")));
        cols[2].push(e.emb_avg);
        cols[3].push(e.vec_extrema);
        cols[4].push(e.greedy_match);
    }
    let cider_scores = if hyps.len() >= 2 {
        cider(hyps, refs)?.per_sample
    } else {
        warnings.push("cider needs two or more samples; scored 0".into());
        vec![0.0; hyps.len()]
    };
    let [rouge, meteor, avg, extrema, greedy] = cols;
    Ok(MetricReport {
        rouge_l: MetricSeries::new(rouge),
        cider: MetricSeries::new(cider_scores),
        meteor_lite: MetricSeries::new(meteor),
        emb_avg: MetricSeries::new(avg),
        vec_extrema: MetricSeries::new(extrema),
        greedy_match: MetricSeries::new(greedy),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn provider() -> EmbeddingProvider {
        EmbeddingProvider::seeded(&["the", "cat", "sat", "on", "mat", "a", "dog"], 16, 3).unwrap()
    }

    #[test]
    fn rouge_examples() {
        let s = toks("the cat sat");
        assert_eq!(rouge_l(&s, &s).unwrap(), 1.0);
        let f = rouge_l(&toks("the cat sat"), &toks("the cat sat on the mat")).unwrap();
        assert!((f - 0.628_865_979_381_443_3).abs() < 1e-12, "{f}");
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert!(rouge_l::<String>(&[], &toks("a")).is_err());
    }

    #[test]
    fn cider_examples() {
        let refs = ["a b c d", "e f g h"];
        let s = cider(&refs, &refs).unwrap();
        assert_eq!(s.per_sample, vec![1.0, 1.0]);
        let s = cider(&["a b c d", "a b c d"], &refs).unwrap();
        assert_eq!(s.per_sample[1], 0.0);
        assert!(cider(&["a"], &["a"]).is_err());
    }

    #[test]
    fn cider_order_invariant() {
        let hyps = ["the cat sat", "a dog sat on the mat", "the mat"];
        let refs = ["the cat sat on the mat", "a dog sat", "on the mat"];
        let a = cider(&hyps, &refs).unwrap().per_sample;
        let b = cider(&[hyps[2], hyps[0], hyps[1]], &[refs[2], refs[0], refs[1]]).unwrap().per_sample;
        assert_eq!(vec![a[2], a[0], a[1]], b);
    }

    #[test]
    fn meteor_examples() {
        let s = toks("a b c d");
        let d = meteor_detail(&s, &s).unwrap();
        assert_eq!((d.matches, d.chunks, d.score), (4, 1, 0.9921875));
        assert_eq!(meteor_lite(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        let d = meteor_detail(&toks("c d a b"), &toks("a b c d")).unwrap();
        assert_eq!((d.matches, d.chunks), (4, 2));
    }

    #[test]
    fn meteor_prefers_fewer_chunks_over_first_match() {
        // Greedy left-to-right would align the first "the" to position 0.
        let d = meteor_detail(&toks("the cat the mat"), &toks("the mat x the cat")).unwrap();
        assert_eq!((d.matches, d.chunks), (4, 2));
    }

    #[test]
    fn embedding_identity_and_symmetry() {
        let p = provider();
        let s = toks("the cat sat");
        let e = embedding_metrics(&s, &s, &p).unwrap();
        for v in [e.emb_avg, e.vec_extrema, e.greedy_match] {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
        let (a, b) = (toks("the cat"), toks("a dog sat on the mat"));
        let ab = embedding_metrics(&a, &b, &p).unwrap().greedy_match;
        let ba = embedding_metrics(&b, &a, &p).unwrap().greedy_match;
        assert_eq!(ab, ba);
    }

    #[test]
    fn orthogonal_tokens_have_zero_average() {
        let mut table = HashMap::new();
        table.insert("x".to_owned(), vec![1.0, 0.0]);
        table.insert("y".to_owned(), vec![0.0, 1.0]);
        let p = EmbeddingProvider::new(table, vec![0.0, 0.0]).unwrap();
        let e = embedding_metrics(&["x"], &["y"], &p).unwrap();
        assert_eq!(e.emb_avg, 0.0);
        let z = embedding_metrics(&["x"], &["unknown"], &p).unwrap();
        assert_eq!(z.emb_avg, 0.0);
        assert_eq!(z.warnings.len(), 3);
    }

    #[test]
    fn classification_rules() {
        let p = provider();
        let opts = ["a dog", "the mat", "the cat sat", "on the mat"];
        let c = classify_by_similarity("the cat sat", &opts, &p).unwrap();
        assert_eq!(c.index, 2);
        assert!((c.scores[2] - 1.0).abs() < 1e-12);
        let same = ["the cat"; 4];
        assert_eq!(classify_by_similarity("a dog", &same, &p).unwrap().index, 0);
        assert!(classify_by_similarity("a", &opts[..3], &p).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let r = accuracy_report(&[(true, false), (true, true), (false, true)]).unwrap();
        assert!((r.answer - 66.666_666).abs() < 1e-3 && (r.rationale - 66.666_666).abs() < 1e-3);
        assert!((r.overall - 33.333_333).abs() < 1e-3);
        let r = accuracy_report(&[(true, true); 5]).unwrap();
        assert_eq!((r.answer, r.rationale, r.overall), (100.0, 100.0, 100.0));
        assert!(r.table().contains("Rationale"));
        assert!(accuracy_report(&[]).is_err());
    }

    #[test]
    fn corpus_report_on_identical_text() {
        let p = provider();
        let texts = ["the cat sat", "a dog sat on the mat"];
        let r = evaluate_corpus(&texts, &texts, &p).unwrap();
        assert_eq!(r.rouge_l.mean, 1.0);
        assert!(r.to_json().unwrap().starts_with("{\"cider\""));
        assert!(r.table().contains("rouge_l"));
    }
}
