//! Data ingestion, vocabularies, and the unigram noise distribution.
//!
//! File formats (UTF-8, LF line endings, no header):
//!
//! * QE data: `source<TAB>target<TAB>score`
//! * parallel data: `source<TAB>target`
//! * vocabulary dump: `token<TAB>frequency`, one line per id in id order
//!
//! Text is lowercased and split on whitespace.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MIN_FREQ: u64 = 1;
pub const DEFAULT_MAX_SIZE: usize = 10_000;

/// Lowercase, then split on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QESample {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    /// z-standardized direct assessment score.
    pub score: f64,
    pub language_pair: String,
}

impl QESample {
    pub fn new(
        source_tokens: Vec<String>,
        target_tokens: Vec<String>,
        score: f64,
        language_pair: impl Into<String>,
    ) -> Result<Self> {
        if source_tokens.is_empty() || target_tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "QE sample needs non-empty source and target".into(),
            ));
        }
        if !score.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite score {score}")));
        }
        Ok(QESample {
            source_tokens,
            target_tokens,
            score,
            language_pair: language_pair.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Splits a record into exactly `n` tab-separated fields with non-empty
/// token lists in the text fields.
fn fields<'a>(path: &Path, lineno: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(parse_error(
            path,
            lineno,
            format!("expected {n} tab-separated fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn non_empty_tokens(path: &Path, lineno: usize, field: &str, what: &str) -> Result<Vec<String>> {
    let toks = tokenize(field);
    if toks.is_empty() {
        return Err(parse_error(path, lineno, format!("empty {what} sentence")));
    }
    Ok(toks)
}

pub fn load_qe_dataset(path: impl AsRef<Path>, pair: &str) -> Result<Vec<QESample>> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let parts = fields(path, lineno, line, 3)?;
        let source_tokens = non_empty_tokens(path, lineno, parts[0], "source")?;
        let target_tokens = non_empty_tokens(path, lineno, parts[1], "target")?;
        let score: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("score `{}` is not a number", parts[2])))?;
        if !score.is_finite() {
            return Err(parse_error(path, lineno, "score is not finite"));
        }
        out.push(QESample {
            source_tokens,
            target_tokens,
            score,
            language_pair: pair.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

/// Writes samples in the format read by [`load_qe_dataset`]. Scores use the
/// shortest representation that parses back to the same `f64`.
pub fn write_qe_dataset(path: impl AsRef<Path>, samples: &[QESample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for s in samples {
        let _ = writeln!(
            buf,
            "{}\t{}\t{}",
            s.source_tokens.join(" "),
            s.target_tokens.join(" "),
            s.score
        );
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let parts = fields(path, lineno, line, 2)?;
        out.push(ParallelPair {
            source_tokens: non_empty_tokens(path, lineno, parts[0], "source")?,
            target_tokens: non_empty_tokens(path, lineno, parts[1], "target")?,
        });
    }
    Ok(out)
}

pub fn write_parallel(path: impl AsRef<Path>, pairs: &[ParallelPair]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for p in pairs {
        let _ = writeln!(buf, "{}\t{}", p.source_tokens.join(" "), p.target_tokens.join(" "));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Content hash of a vocabulary, used to check that ids were produced by the
/// vocabulary a model was built for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabFingerprint(pub String);

impl std::fmt::Display for VocabFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0[..self.0.len().min(12)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
    fingerprint: VocabFingerprint,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let fingerprint = VocabFingerprint(hex::encode(Sha256::digest(
            serialize_vocab(&tokens, &freqs).as_bytes(),
        )));
        Vocab {
            tokens,
            freqs,
            index,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    pub fn fingerprint(&self) -> &VocabFingerprint {
        &self.fingerprint
    }

    /// BOS/EOS-framed ids; unknown tokens map to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Encoded {
        encode(tokens, self)
    }

    /// Inverse of [`Vocab::encode`]: strips the BOS/EOS framing.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS)
            .map(|&id| self.tokens[id].clone())
            .collect()
    }

    /// One `token<TAB>frequency` line per id.
    pub fn to_file_string(&self) -> String {
        serialize_vocab(&self.tokens, &self.freqs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_lines(path)?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parts = fields(path, i + 1, line, 2)?;
            let f: u64 = parts[1]
                .parse()
                .map_err(|_| parse_error(path, i + 1, "frequency is not an integer"))?;
            tokens.push(parts[0].to_string());
            freqs.push(f);
        }
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(parse_error(path, 1, "reserved tokens missing from ids 0..4"));
        }
        Ok(Vocab::from_parts(tokens, freqs))
    }
}

fn serialize_vocab(tokens: &[String], freqs: &[u64]) -> String {
    let mut s = String::new();
    for (t, f) in tokens.iter().zip(freqs) {
        let _ = writeln!(s, "{t}\t{f}");
    }
    s
}

/// Builds a vocabulary from token sequences. Tokens with frequency at least
/// `min_freq` are kept, most frequent first with lexicographic tie-breaking,
/// until the vocabulary (reserved tokens included) reaches `max_size`.
pub fn build_vocab<I, S, T>(corpora: I, min_freq: u64, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if max_size < NUM_RESERVED {
        return Err(Error::InvalidArgument(format!(
            "max_size {max_size} leaves no room for {NUM_RESERVED} reserved tokens"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sentence in corpora {
        for tok in sentence {
            *counts.entry(tok.as_ref().to_string()).or_default() += 1;
        }
    }
    for r in RESERVED_TOKENS {
        counts.remove(r);
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut freqs = vec![0; NUM_RESERVED];
    for (t, c) in ranked {
        tokens.push(t);
        freqs.push(c);
    }
    Ok(Vocab::from_parts(tokens, freqs))
}

/// Token ids tagged with the fingerprint of the vocabulary that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub fingerprint: VocabFingerprint,
}

impl Encoded {
    /// Number of real tokens, excluding the BOS/EOS framing.
    pub fn inner_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Encoded {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().map(|t| vocab.id(t.as_ref())));
    ids.push(EOS);
    Encoded {
        ids,
        fingerprint: vocab.fingerprint.clone(),
    }
}

/// Unigram noise distribution `Q(w)` over a vocabulary, with reserved tokens
/// held at zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    counts: Vec<f64>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

/// `Q(w) ∝ frequency(w)`.
pub fn noise_distribution(vocab: &Vocab) -> Result<NoiseDistribution> {
    NoiseDistribution::with_exponent(vocab, 1.0)
}

/// Maximum resample attempts per requested negative when excluding the positive.
pub const RESAMPLE_FACTOR: usize = 100;

impl NoiseDistribution {
    /// `Q(w) ∝ frequency(w)^exponent`.
    pub fn with_exponent(vocab: &Vocab, exponent: f64) -> Result<Self> {
        let counts: Vec<f64> = vocab
            .freqs()
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                if i < NUM_RESERVED || f == 0 {
                    0.0
                } else {
                    (f as f64).powf(exponent)
                }
            })
            .collect();
        Self::from_counts(counts)
    }

    pub fn from_counts(mut counts: Vec<f64>) -> Result<Self> {
        for c in counts.iter_mut().take(NUM_RESERVED) {
            *c = 0.0;
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidArgument("noise counts must be finite and ≥ 0".into()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateNoise);
        }
        let probs: Vec<f64> = counts.iter().map(|c| c / total).collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        // Pin the last positive entry so a uniform draw in [0, 1) always lands.
        if let Some(last) = probs.iter().rposition(|&p| p > 0.0) {
            for c in &mut cumulative[last..] {
                *c = 1.0;
            }
        }
        Ok(NoiseDistribution {
            counts,
            probs,
            cumulative,
        })
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cumulative.partition_point(|&c| c <= u)
    }
}

/// Draws `k` i.i.d. ids from `Q`, redrawing any draw equal to `exclude`.
pub fn sample_negatives<R: Rng + ?Sized>(
    dist: &NoiseDistribution,
    k: usize,
    exclude: Option<usize>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(ex) = exclude {
        let rest = 1.0 - dist.probs.get(ex).copied().unwrap_or(0.0);
        if rest <= 1e-12 {
            return Err(Error::NegativeSampling {
                exclude: ex,
                attempts: 0,
            });
        }
    }
    let budget = RESAMPLE_FACTOR * k;
    let mut attempts = 0;
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        if attempts == budget {
            return Err(Error::NegativeSampling {
                exclude: exclude.unwrap_or(usize::MAX),
                attempts,
            });
        }
        attempts += 1;
        let id = dist.sample(rng);
        if Some(id) != exclude {
            out.push(id);
        }
    }
    Ok(out)
}
