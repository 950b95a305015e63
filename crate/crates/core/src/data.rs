//! Byte-level tokenization, the synthetic difficulty corpus, and batching.
//!
//! The synthetic corpus interleaves two kinds of spans:
//!
//! * easy: a run of the alphabet from a random starting letter
//!   (`"klmnopqrstu..."`), where each byte follows from the previous one;
//! * hard: two-digit additions modulo 100 (`"37+58=95;"`) with random
//!   operands, where most bytes are not predictable from the previous one.
//!
//! A sidecar holds one ASCII label per corpus byte, `0` for easy and `1` for
//! hard.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// 256 byte values plus two specials.
pub const VOCAB: usize = 258;
pub const BOS: usize = 256;
pub const SEP: usize = 257;

pub const EASY: u8 = 0;
pub const HARD: u8 = 1;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Drops specials and any id outside the byte range.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub bytes: usize,
    pub seed: u64,
    pub easy_min: usize,
    pub easy_max: usize,
    /// Equations per hard span.
    pub hard_min: usize,
    pub hard_max: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            bytes: 200_000,
            seed: 1,
            easy_min: 16,
            easy_max: 40,
            hard_min: 2,
            hard_max: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bytes == 0 {
            return Err(Error::config("bytes", "must be positive"));
        }
        if self.easy_min == 0 || self.easy_min > self.easy_max {
            return Err(Error::config("easy_min", "need 1 <= easy_min <= easy_max"));
        }
        if self.hard_min == 0 || self.hard_min > self.hard_max {
            return Err(Error::config("hard_min", "need 1 <= hard_min <= hard_max"));
        }
        Ok(())
    }
}

/// Corpus bytes with one difficulty label per byte.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub bytes: Vec<u8>,
    pub labels: Vec<u8>,
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub fn generate(spec: &SyntheticSpec) -> Result<LabeledCorpus> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.seed, 7);
    let mut bytes = Vec::with_capacity(spec.bytes + 64);
    let mut labels = Vec::with_capacity(spec.bytes + 64);
    while bytes.len() < spec.bytes {
        let start = rng.below(26);
        for i in 0..range(&mut rng, spec.easy_min, spec.easy_max) {
            bytes.push(b'a' + ((start + i) % 26) as u8);
            labels.push(EASY);
        }
        for _ in 0..range(&mut rng, spec.hard_min, spec.hard_max) {
            let (a, b) = (rng.below(100), rng.below(100));
            let eq = format!("{a:02}+{b:02}={:02};", (a + b) % 100);
            bytes.extend_from_slice(eq.as_bytes());
            labels.extend(std::iter::repeat_n(HARD, eq.len()));
        }
    }
    bytes.truncate(spec.bytes);
    labels.truncate(spec.bytes);
    Ok(LabeledCorpus { bytes, labels })
}

/// Writes `path` and the label sidecar `path.labels`.
pub fn write_corpus(corpus: &LabeledCorpus, path: &Path) -> Result<()> {
    fs::write(path, &corpus.bytes)?;
    let text: Vec<u8> = corpus.labels.iter().map(|&l| b'0' + l).collect();
    fs::write(labels_path(path), text)?;
    Ok(())
}

pub fn labels_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".labels");
    p.into()
}

/// Reads a corpus and, when present, its label sidecar.
pub fn read_corpus(path: &Path) -> Result<(Vec<u8>, Option<Vec<u8>>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus", path.display())));
    }
    let lp = labels_path(path);
    if !lp.exists() {
        return Ok((bytes, None));
    }
    let raw = fs::read(&lp)?;
    if raw.len() != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} labels for {} bytes",
            lp.display(),
            raw.len(),
            bytes.len()
        )));
    }
    let labels = raw
        .iter()
        .map(|&c| match c {
            b'0' => Ok(EASY),
            b'1' => Ok(HARD),
            _ => Err(Error::Data(format!("{}: bad label byte {c}", lp.display()))),
        })
        .collect::<Result<_>>()?;
    Ok((bytes, Some(labels)))
}

/// Accuracy of the best previous-byte predictor fitted on the corpus
/// itself, split by the label of the predicted byte: `(easy, hard)`.
pub fn unigram_context_accuracy(corpus: &LabeledCorpus) -> (f64, f64) {
    let mut table = vec![[0u32; 256]; 256];
    for w in corpus.bytes.windows(2) {
        table[w[0] as usize][w[1] as usize] += 1;
    }
    let best: Vec<u8> = table
        .iter()
        .map(|row| (0..256).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u8)
        .collect();
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    for (i, w) in corpus.bytes.windows(2).enumerate() {
        let label = corpus.labels[i + 1] as usize;
        total[label] += 1;
        if best[w[0] as usize] == w[1] {
            hit[label] += 1;
        }
    }
    let acc = |k: usize| hit[k] as f64 / total[k].max(1) as f64;
    (acc(0), acc(1))
}

/// Train/eval token streams with optional labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub eval_labels: Option<Vec<u8>>,
}

impl Dataset {
    /// The last `eval_frac` of the corpus is held out.
    pub fn split(bytes: &[u8], labels: Option<&[u8]>, eval_frac: f64, seq: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_frac) {
            return Err(Error::config("eval_frac", "must lie in [0, 1)"));
        }
        let cut = bytes.len() - (bytes.len() as f64 * eval_frac) as usize;
        if cut <= seq || (eval_frac > 0.0 && bytes.len() - cut < seq) {
            return Err(Error::Data(format!(
                "corpus of {} bytes is too short for sequences of {seq}",
                bytes.len()
            )));
        }
        Ok(Self {
            train: encode(&bytes[..cut]),
            eval: encode(&bytes[cut..]),
            eval_labels: labels.map(|l| l[cut..].to_vec()),
        })
    }
}

/// Uniformly placed training windows drawn from a dedicated stream.
#[derive(Clone, Debug)]
pub struct Batcher {
    pub batch: usize,
    pub seq: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(batch: usize, seq: usize, rng: Rng) -> Self {
        Self { batch, seq, rng }
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: Rng) {
        self.rng = rng;
    }

    /// `[batch * seq]` token ids.
    pub fn next(&mut self, stream: &[usize]) -> Vec<usize> {
        let span = stream.len() - self.seq + 1;
        let mut out = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let s = self.rng.below(span);
            out.extend_from_slice(&stream[s..s + self.seq]);
        }
        out
    }
}

/// Consecutive non-overlapping windows; the ragged tail is dropped.
pub fn eval_windows(len: usize, seq: usize) -> impl Iterator<Item = usize> {
    (0..len / seq).map(move |i| i * seq)
}
