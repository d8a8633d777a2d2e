//! Tokenization, vocabulary, document segmentation, dataset ingestion, and
//! the synthetic planted-key-segment corpus generator.

use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token vocabulary with reserved ids 0..4 for `[PAD]`, `[UNK]`, `[CLS]`,
/// `[SEP]`. Ids are dense in `[0, len)`.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, u32>,
}

impl Vocab {
    /// Build from non-reserved tokens; reserved entries are prepended.
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Self::from_lines(all)
    }

    fn from_lines(tokens: Vec<String>) -> Result<Self> {
        let mut index = std::collections::HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(CoreError::Validation(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(CoreError::Validation(format!(
                    "vocabulary line {i} must be the reserved token {want}"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_lines(text.lines().map(str::to_string).collect())
    }
}

/// Lowercase, split on whitespace with punctuation as standalone tokens,
/// then look each word up in the vocabulary; unknown words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<u32>| {
        if !word.is_empty() {
            ids.push(vocab.id(word).unwrap_or(UNK));
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut ids);
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut ids);
            ids.push(vocab.id(&ch.to_string()).unwrap_or(UNK));
        }
    }
    flush(&mut word, &mut ids);
    ids
}

/// A tokenized document padded/truncated to exactly `n·l` tokens, viewed as
/// `n` segments of length `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedDoc {
    pub tokens: Vec<u32>,
    pub n: usize,
    pub l: usize,
    pub label: usize,
    /// Token count before padding/truncation.
    pub raw_length: usize,
}

impl SegmentedDoc {
    pub fn segment(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.l..(i + 1) * self.l]
    }

    /// Tokens of the original text (truncation applied, padding stripped).
    pub fn raw_tokens(&self) -> &[u32] {
        &self.tokens[..self.raw_length.min(self.tokens.len())]
    }
}

/// Validate the segment geometry shared by every consumer of a
/// [`SegmentedDoc`]. The selection rule indexes in units of `l/4`.
pub fn validate_geometry(n: usize, l: usize) -> Result<()> {
    if n < 2 {
        return Err(CoreError::Config(format!("segment count n={n} must be >= 2")));
    }
    if l < 4 {
        return Err(CoreError::Config(format!("segment length l={l} must be >= 4")));
    }
    if l % 4 != 0 {
        return Err(CoreError::Config(format!(
            "segment length l={l} must be divisible by 4"
        )));
    }
    Ok(())
}

/// Truncate to `n·l` tokens, pad the tail with `[PAD]` to exactly `n·l`.
pub fn segment_document(ids: &[u32], n: usize, l: usize, label: usize) -> Result<SegmentedDoc> {
    validate_geometry(n, l)?;
    let total = n * l;
    let raw_length = ids.len().min(total);
    let mut tokens = ids[..raw_length].to_vec();
    tokens.resize(total, PAD);
    Ok(SegmentedDoc {
        tokens,
        n,
        l,
        label,
        raw_length,
    })
}

/// `[CLS] + segment + [SEP]`, applied per segment before any encoder call.
pub fn wrap_specials(segment: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(segment.len() + 2);
    out.push(CLS);
    out.extend_from_slice(segment);
    out.push(SEP);
    out
}

/// One corpus record as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_index: Option<usize>,
}

/// Order-preserving JSONL load. Each line must be an object with a string
/// `text` and an integer `label` (plus an optional `key_index`); labels are
/// validated against the class count.
pub fn load_jsonl(path: &Path, num_classes: usize) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.label >= num_classes {
            return Err(CoreError::Validation(format!(
                "line {}: label {} >= number of classes {}",
                i + 1,
                rec.label,
                num_classes
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn save_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Training split. Labels are freely readable during training.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub docs: Vec<SegmentedDoc>,
    pub planted_keys: Vec<Option<usize>>,
}

/// Held-out split. Labels stay private to the evaluation path so the
/// training pipeline cannot read them before `evaluate`.
#[derive(Debug, Clone)]
pub struct TestSet {
    docs: Vec<SegmentedDoc>,
    planted_keys: Vec<Option<usize>>,
}

impl TrainSet {
    pub fn from_docs(docs: Vec<SegmentedDoc>) -> Self {
        let planted_keys = vec![None; docs.len()];
        TrainSet { docs, planted_keys }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl TestSet {
    pub fn from_docs(docs: Vec<SegmentedDoc>) -> Self {
        let planted_keys = vec![None; docs.len()];
        TestSet { docs, planted_keys }
    }

    pub fn with_keys(docs: Vec<SegmentedDoc>, planted_keys: Vec<Option<usize>>) -> Self {
        TestSet { docs, planted_keys }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub(crate) fn docs(&self) -> &[SegmentedDoc] {
        &self.docs
    }

    pub(crate) fn planted_keys(&self) -> &[Option<usize>] {
        &self.planted_keys
    }
}

/// Seeded shuffle then split; the first `round(len·eval_fraction)` shuffled
/// records become the held-out set.
pub fn split_train_test<T: Clone>(
    items: &[T],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(CoreError::Empty("split_train_test input"));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(CoreError::Config(format!(
            "eval fraction {eval_fraction} must be in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = ((items.len() as f64) * eval_fraction).round() as usize;
    let test = order[..n_test].iter().map(|&i| items[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// Parameters of the synthetic planted-key-segment corpus.
///
/// Every document is `n` segments of noise tokens except one planted
/// segment, which carries `signal_tokens` class-correlated tokens; the
/// planted index is uniform over segments and recorded as ground truth.
/// Class `u` owns the disjoint signal id range
/// `[4 + u·signal_tokens, 4 + (u+1)·signal_tokens)`; everything from the end
/// of the signal ranges to `vocab_size` is the shared noise pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub l: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    /// Class-signal tokens planted inside the key segment of each document.
    pub signal_tokens: usize,
    /// Probability that a distractor position draws a random noise token
    /// instead of the fixed filler token (noise id 0 of the pool).
    pub noise_rate: f64,
    pub docs: usize,
    pub seed: u64,
}

impl SynthSpec {
    fn first_noise_id(&self) -> u32 {
        4 + (self.num_classes * self.signal_tokens) as u32
    }

    pub fn validate(&self) -> Result<()> {
        validate_geometry(self.n, self.l)?;
        if self.num_classes < 2 {
            return Err(CoreError::Config("need at least 2 classes".into()));
        }
        if self.signal_tokens > self.l {
            return Err(CoreError::Config(format!(
                "signal tokens {} exceed segment length {}",
                self.signal_tokens, self.l
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(CoreError::Config(format!(
                "noise rate {} must be in [0, 1]",
                self.noise_rate
            )));
        }
        if self.first_noise_id() as usize >= self.vocab_size {
            return Err(CoreError::Config(format!(
                "vocabulary of {} is too small for disjoint signal and noise pools \
                 ({} classes x {} signal tokens + 4 reserved ids)",
                self.vocab_size, self.num_classes, self.signal_tokens
            )));
        }
        Ok(())
    }

    /// Signal id range for a class.
    pub fn signal_range(&self, class: usize) -> std::ops::Range<u32> {
        let lo = 4 + (class * self.signal_tokens) as u32;
        lo..lo + self.signal_tokens as u32
    }

    /// Vocabulary whose non-reserved tokens are `w{id}`, so emitted text
    /// round-trips through `tokenize` to the generated ids.
    pub fn vocab(&self) -> Vocab {
        Vocab::new((4..self.vocab_size).map(|i| format!("w{i}"))).expect("synthetic vocab")
    }
}

/// Generate the corpus. Deterministic per seed: the same spec yields the
/// same documents and planted indices.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<(SegmentedDoc, usize)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_lo = spec.first_noise_id();
    let noise_hi = spec.vocab_size as u32;
    let filler = noise_lo;
    let mut out = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let label = rng.gen_range(0..spec.num_classes);
        let key = rng.gen_range(0..spec.n);
        let mut tokens = Vec::with_capacity(spec.n * spec.l);
        for seg in 0..spec.n {
            if seg == key {
                // noise segment body, then plant signal tokens at random slots
                let mut body: Vec<u32> = (0..spec.l)
                    .map(|_| {
                        if rng.gen_bool(spec.noise_rate) {
                            rng.gen_range(noise_lo..noise_hi)
                        } else {
                            filler
                        }
                    })
                    .collect();
                let mut slots: Vec<usize> = (0..spec.l).collect();
                slots.shuffle(&mut rng);
                let sig = spec.signal_range(label);
                for (count, &slot) in slots.iter().enumerate().take(spec.signal_tokens) {
                    let _ = count;
                    body[slot] = rng.gen_range(sig.clone());
                }
                tokens.extend(body);
            } else {
                for _ in 0..spec.l {
                    tokens.push(if rng.gen_bool(spec.noise_rate) {
                        rng.gen_range(noise_lo..noise_hi)
                    } else {
                        filler
                    });
                }
            }
        }
        let doc = SegmentedDoc {
            tokens,
            n: spec.n,
            l: spec.l,
            label,
            raw_length: spec.n * spec.l,
        };
        out.push((doc, key));
    }
    Ok(out)
}

/// Render a generated document back to text through the synthetic vocab.
pub fn doc_to_text(doc: &SegmentedDoc, vocab: &Vocab) -> String {
    doc.raw_tokens()
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokenize + segment a batch of records against fixed geometry.
pub fn records_to_docs(
    records: &[Record],
    vocab: &Vocab,
    n: usize,
    l: usize,
) -> Result<(Vec<SegmentedDoc>, Vec<Option<usize>>)> {
    let mut docs = Vec::with_capacity(records.len());
    let mut keys = Vec::with_capacity(records.len());
    for rec in records {
        let ids = tokenize(&rec.text, vocab);
        docs.push(segment_document(&ids, n, l, rec.label)?);
        keys.push(rec.key_index);
    }
    Ok((docs, keys))
}
