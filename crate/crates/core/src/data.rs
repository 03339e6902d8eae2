//! Toy world: grid scenes of attributed objects, templated questions, and
//! grammar-produced answers and rationales.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::encoder::MultimodalInput;
use crate::error::{invalid, Error, Result};
use crate::nn::{tokenize, Vocab};
use crate::pipeline::{ModelDims, TrainSample};
use crate::tensor::Tensor;

pub const GRAMMAR_VERSION: u32 = 1;
pub const GRID: u8 = 4;
const NUMBERS: [&str; 9] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"];
pub const MAX_OBJECTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Ball,
    Cone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Big,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Ball, Shape::Cone];
    pub fn word(self) -> &'static str {
        ["cube", "ball", "cone"][self as usize]
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];
    pub fn word(self) -> &'static str {
        ["red", "blue", "green", "yellow"][self as usize]
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Big];
    pub fn word(self) -> &'static str {
        ["small", "big"][self as usize]
    }
}

fn parse_word<T: Copy>(all: &[T], word: impl Fn(T) -> &'static str, w: &str) -> Option<T> {
    all.iter().copied().find(|&x| word(x) == w)
}

fn number_word(n: u8) -> &'static str {
    NUMBERS[n as usize]
}

fn parse_number(w: &str) -> Option<u8> {
    NUMBERS.iter().position(|&n| n == w).map(|p| p as u8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Grid row, 1-based.
    pub row: u8,
    /// Grid column, 1-based.
    pub col: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    /// `k` objects with independent attributes on distinct grid cells.
    pub fn random(k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 || k > MAX_OBJECTS {
            return invalid(format!("scenes hold 1..={MAX_OBJECTS} objects, got {k}"));
        }
        let mut cells: Vec<(u8, u8)> = (1..=GRID).flat_map(|r| (1..=GRID).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let objects = cells[..k]
            .iter()
            .map(|&(row, col)| Object {
                shape: *Shape::ALL.choose(rng).expect("non-empty"),
                color: *Color::ALL.choose(rng).expect("non-empty"),
                size: *Size::ALL.choose(rng).expect("non-empty"),
                row,
                col,
            })
            .collect();
        Ok(Self { objects })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Dataset(format!("scene with {} objects", self.objects.len())));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(1..=GRID).contains(&o.row) || !(1..=GRID).contains(&o.col) {
                return Err(Error::Dataset(format!("object {i} off the grid at ({}, {})", o.row, o.col)));
            }
            if self.objects[..i].iter().any(|p| (p.row, p.col) == (o.row, o.col)) {
                return Err(Error::Dataset(format!("two objects share cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }

    fn unique<K: PartialEq>(&self, key: impl Fn(&Object) -> K, wanted: &K) -> Option<&Object> {
        let mut hits = self.objects.iter().filter(|o| key(o) == *wanted);
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    }
}

/// Two objects are near when they share a grid row.
pub fn near(a: &Object, b: &Object) -> bool {
    a.row == b.row
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Color,
    Shape,
    Where,
    Why,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 4] = [Self::Color, Self::Shape, Self::Where, Self::Why];
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Color => "color",
            Self::Shape => "shape",
            Self::Where => "where",
            Self::Why => "why",
        })
    }
}

/// A parsed question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    Color { size: Size, shape: Shape },
    Shape { color: Color },
    Where { color: Color, shape: Shape },
    /// Colors are stored in canonical order (`first < second`).
    Why { first: Color, second: Color },
}

impl Question {
    pub fn kind(&self) -> QuestionKind {
        match self {
            Self::Color { .. } => QuestionKind::Color,
            Self::Shape { .. } => QuestionKind::Shape,
            Self::Where { .. } => QuestionKind::Where,
            Self::Why { .. } => QuestionKind::Why,
        }
    }

    pub fn text(&self) -> String {
        match *self {
            Self::Color { size, shape } => format!("what color is the {} {} ?", size.word(), shape.word()),
            Self::Shape { color } => format!("what shape is the {} object ?", color.word()),
            Self::Where { color, shape } => format!("where is the {} {} ?", color.word(), shape.word()),
            Self::Why { first, second } => {
                format!("why is the {} object near the {} object ?", first.word(), second.word())
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t = tokenize(text);
        let w: Vec<&str> = t.iter().map(String::as_str).collect();
        let bad = || Error::Dataset(format!("unrecognized question {text:?}"));
        let color = |s: &str| parse_word(&Color::ALL, Color::word, s).ok_or_else(bad);
        let shape = |s: &str| parse_word(&Shape::ALL, Shape::word, s).ok_or_else(bad);
        let size = |s: &str| parse_word(&Size::ALL, Size::word, s).ok_or_else(bad);
        match w.as_slice() {
            ["what", "color", "is", "the", sz, sh, "?"] => Ok(Self::Color { size: size(sz)?, shape: shape(sh)? }),
            ["what", "shape", "is", "the", c, "object", "?"] => Ok(Self::Shape { color: color(c)? }),
            ["where", "is", "the", c, sh, "?"] => Ok(Self::Where { color: color(c)?, shape: shape(sh)? }),
            ["why", "is", "the", a, "object", "near", "the", b, "object", "?"] => {
                let (first, second) = (color(a)?, color(b)?);
                if first >= second {
                    return Err(bad());
                }
                Ok(Self::Why { first, second })
            }
            _ => Err(bad()),
        }
    }

    /// Answer and rationale implied by `scene`, or an error when the
    /// question's referents are missing or ambiguous.
    pub fn answer(&self, scene: &Scene) -> Result<(String, String)> {
        let missing = || Error::Dataset(format!("{:?} has no unique referent", self.text()));
        let at = |o: &Object| format!("row {} column {}", number_word(o.row), number_word(o.col));
        match *self {
            Self::Color { size, shape } => {
                let o = scene.unique(|o| (o.size, o.shape), &(size, shape)).ok_or_else(missing)?;
                let subject = format!("the {} {}", size.word(), shape.word());
                Ok((
                    format!("{subject} is {}", o.color.word()),
                    format!("{subject} at {} is {}", at(o), o.color.word()),
                ))
            }
            Self::Shape { color } => {
                let o = scene.unique(|o| o.color, &color).ok_or_else(missing)?;
                Ok((
                    format!("the {} object is a {}", color.word(), o.shape.word()),
                    format!("the {} object at {} is a {}", color.word(), at(o), o.shape.word()),
                ))
            }
            Self::Where { color, shape } => {
                let o = scene.unique(|o| (o.color, o.shape), &(color, shape)).ok_or_else(missing)?;
                Ok((
                    format!("it is at {}", at(o)),
                    format!(
                        "the {} {} sits in row {} and column {}",
                        color.word(),
                        shape.word(),
                        number_word(o.row),
                        number_word(o.col)
                    ),
                ))
            }
            Self::Why { first, second } => {
                let a = scene.unique(|o| o.color, &first).ok_or_else(missing)?;
                let b = scene.unique(|o| o.color, &second).ok_or_else(missing)?;
                if !near(a, b) {
                    return Err(Error::Dataset(format!(
                        "{} and {} objects are not near",
                        first.word(),
                        second.word()
                    )));
                }
                let row = number_word(a.row);
                Ok((
                    format!("they are both in row {row}"),
                    format!("the {} object and the {} object sit in row {row}", first.word(), second.word()),
                ))
            }
        }
    }

    /// Tokens of `answer` that carry the answered attribute.
    pub fn attribute_tokens(&self, answer: &str) -> Vec<String> {
        let words = tokenize(answer);
        let keep = |w: &str| match self {
            Self::Color { .. } => parse_word(&Color::ALL, Color::word, w).is_some(),
            Self::Shape { .. } => parse_word(&Shape::ALL, Shape::word, w).is_some(),
            Self::Where { .. } => parse_number(w).is_some(),
            Self::Why { .. } => parse_number(w).is_some(),
        };
        words.into_iter().filter(|w| keep(w)).collect()
    }

    fn candidates(kind: QuestionKind, scene: &Scene) -> Vec<Question> {
        let mut out = Vec::new();
        match kind {
            QuestionKind::Color => {
                for o in &scene.objects {
                    let q = Self::Color { size: o.size, shape: o.shape };
                    if scene.unique(|p| (p.size, p.shape), &(o.size, o.shape)).is_some() {
                        out.push(q);
                    }
                }
            }
            QuestionKind::Shape => {
                for o in &scene.objects {
                    if scene.unique(|p| p.color, &o.color).is_some() {
                        out.push(Self::Shape { color: o.color });
                    }
                }
            }
            QuestionKind::Where => {
                for o in &scene.objects {
                    if scene.unique(|p| (p.color, p.shape), &(o.color, o.shape)).is_some() {
                        out.push(Self::Where { color: o.color, shape: o.shape });
                    }
                }
            }
            QuestionKind::Why => {
                for (i, a) in scene.objects.iter().enumerate() {
                    for b in &scene.objects[i + 1..] {
                        let unique = scene.unique(|p| p.color, &a.color).is_some()
                            && scene.unique(|p| p.color, &b.color).is_some();
                        if unique && a.color != b.color && near(a, b) {
                            let (first, second) = if a.color < b.color { (a.color, b.color) } else { (b.color, a.color) };
                            out.push(Self::Why { first, second });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub scene: Scene,
    pub question: String,
    pub caption: String,
    pub answer: String,
    pub rationale: String,
}

impl Sample {
    /// Re-derives answer and rationale from the scene and checks every
    /// grammar constraint.
    pub fn check(&self) -> Result<()> {
        self.scene.validate()?;
        let q = Question::parse(&self.question)?;
        let (answer, rationale) = q.answer(&self.scene)?;
        let fail = |what: String| Err(Error::Dataset(format!("sample {}: {what}", self.id)));
        if answer != self.answer {
            return fail(format!("answer {:?} but the scene implies {answer:?}", self.answer));
        }
        if rationale != self.rationale {
            return fail(format!("rationale {:?} but the scene implies {rationale:?}", self.rationale));
        }
        let (la, lr) = (tokenize(&answer).len(), tokenize(&rationale).len());
        if !(4..=8).contains(&la) || !(6..=12).contains(&lr) {
            return fail(format!("lengths {la}/{lr} outside 4..=8 / 6..=12"));
        }
        let rationale_tokens = tokenize(&rationale);
        for t in q.attribute_tokens(&answer) {
            if !rationale_tokens.contains(&t) {
                return fail(format!("rationale does not mention {t:?}"));
            }
        }
        Ok(())
    }
}

fn caption(scene: &Scene, rng: &mut impl Rng) -> String {
    let o = scene.objects.choose(rng).expect("non-empty scene");
    format!(
        "a picture of {} objects including a {} {} {}",
        number_word(scene.objects.len() as u8),
        o.size.word(),
        o.color.word(),
        o.shape.word()
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub grammar_version: u32,
    /// FNV-1a hash of the induced vocabulary, as 16 hex digits.
    pub vocab_hash: String,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Draws `n` samples with question kinds in rotation, resampling scenes
/// until the drawn kind has an unambiguous instance.
pub fn generate_dataset(seed: u64, n: usize, k: usize) -> Result<Dataset> {
    if n == 0 {
        return invalid("dataset size must be ≥ 1");
    }
    if k < 2 {
        return invalid(format!("k = {k}: scenes need at least two objects"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let kind = QuestionKind::ALL[i % QuestionKind::ALL.len()];
        let (scene, q) = loop {
            let scene = Scene::random(k, &mut rng)?;
            let cands = Question::candidates(kind, &scene);
            if let Some(q) = cands.choose(&mut rng) {
                break (scene, *q);
            }
        };
        let (answer, rationale) = q.answer(&scene)?;
        samples.push(Sample {
            id: format!("s{i:06}"),
            caption: caption(&scene, &mut rng),
            question: q.text(),
            scene,
            answer,
            rationale,
        });
    }
    let vocab = induce_vocab(&samples)?;
    Ok(Dataset {
        header: DatasetHeader {
            seed,
            grammar_version: GRAMMAR_VERSION,
            vocab_hash: vocab_hash(&vocab),
            n,
            k,
        },
        samples,
    })
}

/// Vocabulary of every question, caption, answer and rationale token.
pub fn induce_vocab(samples: &[Sample]) -> Result<Vocab> {
    let words = samples
        .iter()
        .flat_map(|s| [&s.question, &s.caption, &s.answer, &s.rationale])
        .flat_map(|t| tokenize(t));
    Vocab::from_words(words)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn vocab_hash(vocab: &Vocab) -> String {
    format!("{:016x}", fnv1a(vocab.tokens().join("\n").as_bytes()))
}

impl Dataset {
    pub fn vocab(&self) -> Result<Vocab> {
        induce_vocab(&self.samples)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    /// Parses a JSONL dataset and verifies its header against the samples.
    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| Error::Dataset("empty dataset file".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Dataset(format!("header: {e}")))?;
        if header.grammar_version != GRAMMAR_VERSION {
            return Err(Error::Dataset(format!(
                "grammar version {} (expected {GRAMMAR_VERSION})",
                header.grammar_version
            )));
        }
        let mut samples = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample =
                serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 2)))?;
            samples.push(s);
        }
        if samples.len() != header.n {
            return Err(Error::Dataset(format!("header says {} samples, found {}", header.n, samples.len())));
        }
        let ds = Self { header, samples };
        let hash = vocab_hash(&ds.vocab()?);
        if hash != ds.header.vocab_hash {
            return Err(Error::Dataset(format!(
                "vocabulary hash {hash} does not match header {}",
                ds.header.vocab_hash
            )));
        }
        Ok(ds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded permutation split into train / val / test. Val and test sizes
/// are rounded; train takes the remainder.
pub fn split(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1"));
    }
    let n = samples.len();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    if n_val + n_test > n {
        return invalid(format!("split of {n} samples overflows"));
    }
    let n_train = n - n_val - n_test;
    for (name, f, size) in [("train", fractions[0], n_train), ("val", fractions[1], n_val), ("test", fractions[2], n_test)] {
        if f > 0.0 && size == 0 {
            return Err(Error::Dataset(format!("{name} split would be empty with {n} samples")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|&i| samples[i].clone()).collect();
    Ok(Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// xorshift64* stream in `[-1, 1)`.
pub(crate) struct XorShift(u64);

impl XorShift {
    fn new(seed: u64) -> Self {
        // A zero state would be absorbing.
        Self(crate::pipeline::mix_seed(seed, 0x9e37, 0x79b9) | 1)
    }

    fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        let x = self.0.wrapping_mul(0x2545_f491_4f6c_dd1d);
        (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    pub(crate) fn vector(seed: u64, dim: usize) -> Vec<f64> {
        let mut r = Self::new(seed);
        (0..dim).map(|_| r.next_f64()).collect()
    }
}

/// Seeded attribute codes summed into region features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCodes {
    pub region_dim: usize,
    pub text_dim: usize,
    pub seed: u64,
}

impl FeatureCodes {
    pub fn new(region_dim: usize, text_dim: usize, seed: u64) -> Self {
        Self {
            region_dim,
            text_dim,
            seed,
        }
    }

    fn code(&self, group: &str, value: &str) -> Vec<f64> {
        let scale = 1.0 / (self.region_dim as f64).sqrt();
        let key = fnv1a(format!("{group}:{value}").as_bytes());
        XorShift::vector(self.seed ^ key, self.region_dim)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    }

    pub fn region(&self, o: &Object) -> Vec<f64> {
        let parts = [
            self.code("shape", o.shape.word()),
            self.code("color", o.color.word()),
            self.code("size", o.size.word()),
            self.code("row", number_word(o.row)),
            self.code("col", number_word(o.col)),
        ];
        (0..self.region_dim).map(|j| parts.iter().map(|p| p[j]).sum()).collect()
    }

    pub fn token(&self, token: &str) -> Vec<f64> {
        XorShift::vector(self.seed.rotate_left(17) ^ fnv1a(token.as_bytes()), self.text_dim)
    }

    /// L2-normalized sum of token vectors.
    pub fn text(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.text_dim];
        for t in tokenize(text) {
            for (a, v) in acc.iter_mut().zip(self.token(&t)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc
    }
}

/// Region features (`k × D`) and question / caption embeddings (`B`).
pub fn encode_sample(sample: &Sample, k: usize, region_dim: usize, text_dim: usize, seed: u64) -> Result<MultimodalInput> {
    if sample.scene.objects.len() != k {
        return Err(Error::Dataset(format!(
            "sample {} has {} objects, expected k = {k}",
            sample.id,
            sample.scene.objects.len()
        )));
    }
    let codes = FeatureCodes::new(region_dim, text_dim, seed);
    let data = sample.scene.objects.iter().flat_map(|o| codes.region(o)).collect();
    let regions = Tensor::matrix(k, region_dim, data)?;
    MultimodalInput::new(regions, codes.text(&sample.question), codes.text(&sample.caption))
}

/// Encodes samples for training with the given vocabulary and sizes.
pub fn to_train_samples(samples: &[Sample], vocab: &Vocab, dims: &ModelDims, seed: u64) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainSample {
                input: encode_sample(s, dims.regions, dims.region_dim, dims.text_dim, seed)?,
                answer: vocab.encode(&s.answer),
                rationale: vocab.encode(&s.rationale),
            })
        })
        .collect()
}
