//! Synthetic corpora over a 64-symbol vocabulary: PassKey retrieval, the
//! repeated-segment augmentation and a copy task.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rope::PositionIds;

pub const VOCAB_SIZE: usize = 64;
pub const REPEAT_WEIGHT: f32 = 0.1;
pub const DEFAULT_SEG_LEN: usize = 256;

const WORDS: [&str; 9] = ["the", "pass", "key", "is", ".", "remember", "it", "what", "?"];
const FILLER: &str = "~";
const REPEAT_MARKER: [&str; 3] = ["[repeat", "random", "segment]:"];
const NUM_DATA: usize = VOCAB_SIZE - WORDS.len() - 10 - 1 - REPEAT_MARKER.len();

/// Word-level vocabulary. Ids are laid out as template words, digits `0` to `9`,
/// the filler `~`, the repeat marker and then data symbols `a00`, `a01`, ….
#[derive(Clone, Debug)]
pub struct ToyVocab {
    symbols: Vec<String>,
}

impl Default for ToyVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyVocab {
    pub fn new() -> Self {
        let mut symbols: Vec<String> = WORDS.iter().map(|s| s.to_string()).collect();
        symbols.extend((0..10).map(|d| d.to_string()));
        symbols.push(FILLER.to_string());
        symbols.extend(REPEAT_MARKER.iter().map(|s| s.to_string()));
        symbols.extend((0..NUM_DATA).map(|i| format!("a{i:02}")));
        debug_assert_eq!(symbols.len(), VOCAB_SIZE);
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    fn word(&self, w: &str) -> u32 {
        self.id(w).expect("reserved symbol")
    }

    pub fn digit(&self, d: u32) -> u32 {
        WORDS.len() as u32 + d
    }

    pub fn filler(&self) -> u32 {
        self.word(FILLER)
    }

    pub fn repeat_marker(&self) -> Vec<u32> {
        REPEAT_MARKER.iter().map(|w| self.word(w)).collect()
    }

    /// Ids usable as free data (copy-task symbols, random filler).
    pub fn data_ids(&self) -> std::ops::Range<u32> {
        let start = (VOCAB_SIZE - NUM_DATA) as u32;
        start..VOCAB_SIZE as u32
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Config(format!("unknown symbol {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.symbol(i).ok_or_else(|| Error::Config(format!("id {i} outside vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// A tokenized training or evaluation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedExample {
    pub tokens: Vec<u32>,
    /// Loss weight of each token, applied when predicting it.
    pub weights: Vec<f32>,
    pub positions: PositionIds,
    /// Token range `start..end` scored by exact match.
    pub answer_span: (usize, usize),
}

impl PackedExample {
    pub fn new(tokens: Vec<u32>, weights: Vec<f32>, answer_span: (usize, usize)) -> Result<Self> {
        if tokens.len() != weights.len() {
            return Err(Error::Config(format!("{} tokens but {} weights", tokens.len(), weights.len())));
        }
        if answer_span.0 > answer_span.1 || answer_span.1 > tokens.len() {
            return Err(Error::Config(format!("answer span {answer_span:?} outside {} tokens", tokens.len())));
        }
        let positions = PositionIds::range(0, tokens.len());
        Ok(Self { tokens, weights, positions, answer_span })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets and weights aligned with logits rows `0..len-1`.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<f32>) {
        let t = self.tokens[1..].iter().map(|&x| x as usize).collect();
        (t, self.weights[1..].to_vec())
    }

    /// One dump line: `ids<TAB>weights<TAB>start,end`.
    pub fn dump_line(&self) -> String {
        let mut s = String::new();
        let ids: Vec<String> = self.tokens.iter().map(u32::to_string).collect();
        let ws: Vec<String> = self.weights.iter().map(f32::to_string).collect();
        let _ = write!(s, "{}\t{}\t{},{}", ids.join(","), ws.join(","), self.answer_span.0, self.answer_span.1);
        s
    }

    pub fn parse_dump_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed dump line {line:?}"));
        let mut fields = line.split('\t');
        let (ids, ws, span) = (fields.next().ok_or_else(bad)?, fields.next().ok_or_else(bad)?, fields.next().ok_or_else(bad)?);
        if fields.next().is_some() {
            return Err(bad());
        }
        let tokens = ids.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<Vec<u32>>>()?;
        let weights = ws.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<Vec<f32>>>()?;
        let (a, b) = span.split_once(',').ok_or_else(bad)?;
        Self::new(tokens, weights, (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FillerKind {
    /// The single filler symbol repeated.
    #[default]
    Repeated,
    /// Uniformly random data symbols.
    Random,
}

fn push_filler<R: Rng + ?Sized>(v: &ToyVocab, out: &mut Vec<u32>, n: usize, kind: FillerKind, rng: &mut R) {
    match kind {
        FillerKind::Repeated => out.extend(std::iter::repeat_n(v.filler(), n)),
        FillerKind::Random => {
            let r = v.data_ids();
            out.extend((0..n).map(|_| rng.gen_range(r.clone())));
        }
    }
}

/// `the pass key is K . remember it . K is the pass key .` + filler +
/// `what is the pass key ? K`, with weight 1 on the final key only.
pub fn gen_passkey<R: Rng + ?Sized>(
    vocab: &ToyVocab,
    filler_len: usize,
    key_digits: usize,
    filler: FillerKind,
    rng: &mut R,
) -> Result<PackedExample> {
    if key_digits == 0 {
        return Err(Error::Config("key_digits must be at least 1".into()));
    }
    let key: Vec<u32> = (0..key_digits).map(|_| vocab.digit(rng.gen_range(0..10))).collect();
    let mut t = vocab.encode("the pass key is")?;
    t.extend(&key);
    t.extend(vocab.encode(". remember it .")?);
    t.extend(&key);
    t.extend(vocab.encode("is the pass key .")?);
    push_filler(vocab, &mut t, filler_len, filler, rng);
    t.extend(vocab.encode("what is the pass key ?")?);
    let start = t.len();
    t.extend(&key);
    let mut weights = vec![0.0; t.len()];
    weights[start..].fill(1.0);
    PackedExample::new(t, weights, (start, start + key_digits))
}

/// Random prefix, filler gap, `?`, then the prefix again (weight 1).
pub fn gen_copy_task<R: Rng + ?Sized>(vocab: &ToyVocab, prefix_len: usize, gap_len: usize, rng: &mut R) -> Result<PackedExample> {
    if prefix_len == 0 {
        return Err(Error::Config("prefix_len must be at least 1".into()));
    }
    let r = vocab.data_ids();
    let prefix: Vec<u32> = (0..prefix_len).map(|_| rng.gen_range(r.clone())).collect();
    let mut t = prefix.clone();
    push_filler(vocab, &mut t, gap_len, FillerKind::Repeated, rng);
    t.push(vocab.word("?"));
    let start = t.len();
    t.extend(&prefix);
    let mut weights = vec![0.0; t.len()];
    weights[start..].fill(1.0);
    PackedExample::new(t, weights, (start, start + prefix_len))
}

/// Appends the repeat marker and a copy of a random `seg_len` span. The copy
/// has weight `weight`, the marker weight 0; earlier weights are untouched.
pub fn repeat_segment_augment<R: Rng + ?Sized>(
    vocab: &ToyVocab,
    example: &PackedExample,
    seg_len: usize,
    weight: f32,
    rng: &mut R,
) -> Result<PackedExample> {
    let len = example.len();
    if seg_len == 0 || len < seg_len {
        return Err(Error::SequenceTooShort { len, seg_len });
    }
    let start = rng.gen_range(0..=len - seg_len);
    let mut tokens = example.tokens.clone();
    let mut weights = example.weights.clone();
    let marker = vocab.repeat_marker();
    weights.extend(std::iter::repeat_n(0.0, marker.len()));
    tokens.extend(marker);
    tokens.extend_from_slice(&example.tokens[start..start + seg_len]);
    weights.extend(std::iter::repeat_n(weight, seg_len));
    PackedExample::new(tokens, weights, example.answer_span)
}

/// Whether the argmax of every logits row predicting the answer span equals
/// the answer token. `logits` row `i` predicts token `i + 1`.
pub fn span_exact_match<S: Scalar>(logits: &Tensor<S>, example: &PackedExample) -> bool {
    let (a, b) = example.answer_span;
    (a..b).all(|i| i >= 1 && argmax(logits.row(i - 1)) == example.tokens[i] as usize)
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of per-example exact-match outcomes.
pub fn mean_accuracy(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Which generator a [`TaskSpec`] draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    PassKey,
    Copy,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passkey" => Ok(Self::PassKey),
            "copy" => Ok(Self::Copy),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected passkey or copy)"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PassKey => "passkey",
            Self::Copy => "copy",
        })
    }
}

/// Distribution of training examples: filler (or gap) length uniform in
/// `filler_min..=filler_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub filler_min: usize,
    pub filler_max: usize,
    /// Key digits for PassKey, prefix length for copy.
    pub key_len: usize,
    pub filler: FillerKind,
    /// Append a repeated segment of this length when the example is long enough.
    pub repeat_segment: Option<usize>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::PassKey,
            filler_min: 0,
            filler_max: 512,
            key_len: 3,
            filler: FillerKind::Repeated,
            repeat_segment: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filler_min > self.filler_max {
            return Err(Error::Config(format!(
                "filler_min {} exceeds filler_max {}",
                self.filler_min, self.filler_max
            )));
        }
        if self.key_len == 0 {
            return Err(Error::Config("key_len must be at least 1".into()));
        }
        if self.repeat_segment == Some(0) {
            return Err(Error::Config("repeat segment length must be positive".into()));
        }
        Ok(())
    }

    /// One example with exactly `filler_len` filler (or gap) tokens.
    pub fn generate<R: Rng + ?Sized>(&self, vocab: &ToyVocab, filler_len: usize, rng: &mut R) -> Result<PackedExample> {
        let ex = match self.kind {
            TaskKind::PassKey => gen_passkey(vocab, filler_len, self.key_len, self.filler, rng)?,
            TaskKind::Copy => gen_copy_task(vocab, self.key_len, filler_len, rng)?,
        };
        match self.repeat_segment {
            Some(seg) if seg <= ex.len() => repeat_segment_augment(vocab, &ex, seg, REPEAT_WEIGHT, rng),
            _ => Ok(ex),
        }
    }

    /// Filler length uniform over the whole range.
    pub fn sample<R: Rng + ?Sized>(&self, vocab: &ToyVocab, rng: &mut R) -> Result<PackedExample> {
        let n = rng.gen_range(self.filler_min..=self.filler_max);
        self.generate(vocab, n, rng)
    }

    pub fn to_kv(&self) -> crate::config_text::KvText {
        let mut kv = crate::config_text::KvText::new();
        kv.set("task", self.kind);
        kv.set("filler_min", self.filler_min);
        kv.set("filler_max", self.filler_max);
        kv.set("key_len", self.key_len);
        kv.set("filler", match self.filler {
            FillerKind::Repeated => "repeated",
            FillerKind::Random => "random",
        });
        kv.set("repeat_segment", self.repeat_segment.map_or_else(|| "-".to_string(), |s| s.to_string()));
        kv
    }

    /// Reads the keys written by [`TaskSpec::to_kv`]; absent keys keep their defaults.
    pub fn from_kv(kv: &crate::config_text::KvText) -> Result<Self> {
        let d = Self::default();
        let filler = match kv.get("filler") {
            None | Some("repeated") => FillerKind::Repeated,
            Some("random") => FillerKind::Random,
            Some(other) => return Err(Error::Config(format!("unknown filler kind {other:?}"))),
        };
        let repeat_segment = match kv.get("repeat_segment") {
            None | Some("-") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Config(format!("invalid repeat_segment {v:?}")))?),
        };
        let spec = Self {
            kind: kv.parse_value("task")?.unwrap_or(d.kind),
            filler_min: kv.parse_value("filler_min")?.unwrap_or(d.filler_min),
            filler_max: kv.parse_value("filler_max")?.unwrap_or(d.filler_max),
            key_len: kv.parse_value("key_len")?.unwrap_or(d.key_len),
            filler,
            repeat_segment,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn task_spec_kv_round_trip_and_validation() {
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            filler_min: 3,
            filler_max: 9,
            key_len: 2,
            filler: FillerKind::Random,
            repeat_segment: Some(5),
        };
        assert_eq!(TaskSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert_eq!(TaskSpec::from_kv(&TaskSpec::default().to_kv()).unwrap(), TaskSpec::default());
        let bad = TaskSpec { filler_min: 10, filler_max: 2, ..TaskSpec::default() };
        assert!(bad.validate().is_err());
        assert!("lstm".parse::<TaskKind>().is_err());
    }

    #[test]
    fn task_spec_samples_within_range() {
        let vocab = ToyVocab::new();
        let spec = TaskSpec { filler_min: 2, filler_max: 5, repeat_segment: Some(4), ..TaskSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = gen_passkey(&vocab, 0, 3, FillerKind::Repeated, &mut rng).unwrap().len();
        for _ in 0..50 {
            let ex = spec.sample(&vocab, &mut rng).unwrap();
            let filler = ex.len() - base - vocab.repeat_marker().len() - 4;
            assert!((2..=5).contains(&filler));
        }
    }

    #[test]
    fn vocab_roundtrip() {
        let v = ToyVocab::new();
        assert_eq!(v.len(), 64);
        for id in 0..64u32 {
            let s = v.symbol(id).unwrap();
            assert_eq!(v.id(s), Some(id));
        }
    }

    #[test]
    fn passkey_structure() {
        let v = ToyVocab::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex = gen_passkey(&v, 0, 3, FillerKind::Repeated, &mut rng).unwrap();
        let text = v.decode(&ex.tokens).unwrap();
        assert!(text.ends_with(&format!("what is the pass key ? {}", v.decode(&ex.tokens[ex.answer_span.0..]).unwrap())));
        assert_eq!(ex.weights.iter().sum::<f32>(), 3.0);
    }

    #[test]
    fn augment_full_span() {
        let v = ToyVocab::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = gen_copy_task(&v, 4, 2, &mut rng).unwrap();
        let aug = repeat_segment_augment(&v, &ex, ex.len(), 0.1, &mut rng).unwrap();
        assert_eq!(&aug.tokens[ex.len() + 3..], &ex.tokens[..]);
        assert!(repeat_segment_augment(&v, &ex, ex.len() + 1, 0.1, &mut rng).is_err());
    }

    #[test]
    fn dump_line_roundtrip() {
        let v = ToyVocab::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = gen_passkey(&v, 5, 2, FillerKind::Random, &mut rng).unwrap();
        let aug = repeat_segment_augment(&v, &ex, 4, REPEAT_WEIGHT, &mut rng).unwrap();
        assert_eq!(PackedExample::parse_dump_line(&aug.dump_line()).unwrap(), aug);
    }
}
