//! Synthetic corpora: first-order Markov chains over a small vocabulary.
//!
//! A corpus is fully determined by its [`CorpusSpec`]. All randomness derives
//! from `transition_seed` through fixed [`StreamRng`] substreams:
//!
//! | substream | use |
//! |-----------|-----|
//! | 0 | base transition matrix `T0` |
//! | 1 | weak-shift perturbation matrix `P` |
//! | 2 | strong-shift transition matrix |
//! | 16 + 2s / 17 + 2s | train / validation tokens for slot `s` |
//!
//! with slot 0 = base, 1 = weak shift, 2 = strong shift, 3 + i = IID split i.
//!
//! Rows are generated column by column from `Exp(1)^ROW_PEAK` weights; the
//! row's dominant half of the vocabulary receives `DOMINANT_MASS` of the
//! probability and the other half the rest. The base chain's dominant half is
//! the lower half, the strong-shift chain's the upper half.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtpError, Result};
use crate::rng::StreamRng;

pub const TOKEN_MAGIC: &[u8; 8] = b"CTPTOKS1";
pub const TOKEN_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// Share of each row's mass on its dominant half of the vocabulary.
pub const DOMINANT_MASS: f64 = 0.95;
/// Exponent applied to Exp(1) column weights; larger is peakier.
pub const ROW_PEAK: f64 = 2.0;

const SUBSTREAM_BASE: u64 = 0;
const SUBSTREAM_PERTURB: u64 = 1;
const SUBSTREAM_STRONG: u64 = 2;
const SUBSTREAM_TOKENS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShiftKind {
    Base,
    WeakShift { lambda: f64 },
    StrongShift,
    IidSplit { index: u32 },
}

impl ShiftKind {
    fn slot(self) -> u64 {
        match self {
            Self::Base => 0,
            Self::WeakShift { .. } => 1,
            Self::StrongShift => 2,
            Self::IidSplit { index } => 3 + u64::from(index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub vocab_size: u32,
    pub transition_seed: u64,
    pub shift: ShiftKind,
    pub train_tokens: u64,
    pub val_tokens: u64,
}

impl CorpusSpec {
    pub fn new(name: impl Into<String>, vocab_size: u32, transition_seed: u64, shift: ShiftKind) -> Self {
        Self {
            name: name.into(),
            vocab_size,
            transition_seed,
            shift,
            train_tokens: 2_000_000,
            val_tokens: 20_000 * 9,
        }
    }

    pub fn with_tokens(mut self, train_tokens: u64, val_tokens: u64) -> Self {
        self.train_tokens = train_tokens;
        self.val_tokens = val_tokens;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CtpError::InvalidSpec(format!("corpus `{}`: {msg}", self.name)));
        if self.vocab_size < 2 || self.vocab_size > 1 << 16 {
            return bad(format!("vocab_size {} outside [2, 65536]", self.vocab_size));
        }
        match self.shift {
            ShiftKind::WeakShift { lambda } if !(0.0..=1.0).contains(&lambda) => {
                return bad(format!("weak-shift lambda {lambda} outside [0, 1]"));
            }
            ShiftKind::StrongShift if self.vocab_size < 4 => {
                return bad("strong shift needs vocab_size >= 4".into());
            }
            _ => {}
        }
        if self.val_tokens < 2 || self.train_tokens < 2 {
            return bad("train and validation streams need at least one window".into());
        }
        Ok(())
    }
}

/// Row-stochastic `V x V` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    vocab: usize,
    probs: Vec<f64>,
}

impl TransitionMatrix {
    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.probs[from * self.vocab..(from + 1) * self.vocab]
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.vocab)
            .map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Stationary distribution by power iteration from uniform.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab;
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..10_000 {
            let mut next = vec![0.0; v];
            for (i, &p) in pi.iter().enumerate() {
                for (n, q) in next.iter_mut().zip(self.row(i)) {
                    *n += p * q;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: the best achievable per-token cross-entropy.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        pi.iter()
            .enumerate()
            .map(|(i, p)| {
                let h: f64 = self.row(i).iter().filter(|&&q| q > 0.0).map(|q| -q * q.ln()).sum();
                p * h
            })
            .sum()
    }

    fn cumulative_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.probs.len());
        for r in 0..self.vocab {
            let mut acc = 0.0;
            for p in self.row(r) {
                acc += p;
                out.push(acc);
            }
        }
        out
    }
}

fn random_rows(vocab: usize, rng: &mut StreamRng, dominant_upper: bool) -> TransitionMatrix {
    let half = vocab / 2;
    let mut probs = Vec::with_capacity(vocab * vocab);
    for _ in 0..vocab {
        let raw: Vec<f64> = (0..vocab).map(|_| rng.exponential().powf(ROW_PEAK)).collect();
        let in_dominant = |j: usize| (j >= half) == dominant_upper;
        let (mut dom, mut other) = (0.0, 0.0);
        for (j, w) in raw.iter().enumerate() {
            if in_dominant(j) {
                dom += w;
            } else {
                other += w;
            }
        }
        let mut row: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, w)| {
                if in_dominant(j) {
                    DOMINANT_MASS * w / dom
                } else {
                    (1.0 - DOMINANT_MASS) * w / other
                }
            })
            .collect();
        normalize(&mut row);
        probs.extend(row);
    }
    TransitionMatrix { vocab, probs }
}

fn normalize(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= total;
    }
}

/// Transition matrix for a corpus spec.
pub fn transition_matrix(spec: &CorpusSpec) -> Result<TransitionMatrix> {
    spec.validate()?;
    let v = spec.vocab_size as usize;
    let seed = spec.transition_seed;
    let base = || random_rows(v, &mut StreamRng::substream(seed, SUBSTREAM_BASE), false);
    Ok(match spec.shift {
        ShiftKind::Base | ShiftKind::IidSplit { .. } => base(),
        ShiftKind::WeakShift { lambda } => {
            let t0 = base();
            let p = random_rows(v, &mut StreamRng::substream(seed, SUBSTREAM_PERTURB), false);
            let mut probs: Vec<f64> = t0.probs.iter().zip(&p.probs).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
            for row in probs.chunks_exact_mut(v) {
                normalize(row);
            }
            TransitionMatrix { vocab: v, probs }
        }
        ShiftKind::StrongShift => random_rows(v, &mut StreamRng::substream(seed, SUBSTREAM_STRONG), true),
    })
}

fn sample_chain(matrix: &TransitionMatrix, len: u64, mut rng: StreamRng) -> Vec<u16> {
    let v = matrix.vocab;
    let cumulative = matrix.cumulative_rows();
    let mut tokens = Vec::with_capacity(len as usize);
    let mut cur = ((rng.uniform() * v as f64) as usize).min(v - 1);
    for _ in 0..len {
        tokens.push(cur as u16);
        cur = rng.categorical(&cumulative[cur * v..(cur + 1) * v]);
    }
    tokens
}

/// A generated corpus: its chain plus train and validation streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub matrix: TransitionMatrix,
    pub train: TokenStream,
    pub val: TokenStream,
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let matrix = transition_matrix(spec)?;
    let slot = spec.shift.slot();
    let train_rng = StreamRng::substream(spec.transition_seed, SUBSTREAM_TOKENS + 2 * slot);
    let val_rng = StreamRng::substream(spec.transition_seed, SUBSTREAM_TOKENS + 2 * slot + 1);
    let train = TokenStream::new(spec.vocab_size, sample_chain(&matrix, spec.train_tokens, train_rng))?;
    let val = TokenStream::new(spec.vocab_size, sample_chain(&matrix, spec.val_tokens, val_rng))?;
    Ok(Corpus { spec: spec.clone(), matrix, train, val })
}

/// One training example: `context.len()` tokens and the token that follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window<'a> {
    pub context: &'a [u16],
    pub target: u16,
}

/// Immutable token sequence with its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    vocab_size: u32,
    tokens: Vec<u16>,
}

impl TokenStream {
    pub fn new(vocab_size: u32, tokens: Vec<u16>) -> Result<Self> {
        if let Some(i) = tokens.iter().position(|&t| u32::from(t) >= vocab_size) {
            return Err(CtpError::Format(format!("token {} at {i} >= vocab {vocab_size}", tokens[i])));
        }
        Ok(Self { vocab_size, tokens })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    /// Number of complete windows of `context_len` available at starting
    /// positions `0, stride, 2 * stride, ...`.
    pub fn window_count(&self, context_len: usize, stride: usize) -> usize {
        if self.tokens.len() <= context_len {
            0
        } else {
            (self.tokens.len() - context_len - 1) / stride + 1
        }
    }

    /// Tokens `[pos, pos + len)` as context and the token at `pos + len` as target.
    pub fn window(&self, pos: usize, context_len: usize) -> Result<Window<'_>> {
        let end = pos.checked_add(context_len).filter(|&e| e < self.tokens.len());
        match end {
            Some(end) => Ok(Window { context: &self.tokens[pos..end], target: self.tokens[end] }),
            None => Err(CtpError::OutOfRange {
                what: "window position",
                value: pos as u64,
                limit: self.tokens.len().saturating_sub(context_len + 1) as u64,
            }),
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TOKEN_MAGIC)?;
        out.write_all(&TOKEN_VERSION.to_le_bytes())?;
        out.write_all(&self.vocab_size.to_le_bytes())?;
        out.write_all(&(self.tokens.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.tokens.len() * 2);
        for t in &self.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN as usize + 2 * self.tokens.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let (vocab_size, count) = read_header(&mut input)?;
        let mut bytes = vec![0u8; count as usize * 2];
        input.read_exact(&mut bytes).map_err(|e| CtpError::Format(format!("token payload: {e}")))?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(CtpError::Format("trailing bytes after tokens".into()));
        }
        let tokens = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::new(vocab_size, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Reads tokens `[start, start + len)` from a stream file without loading the rest.
    pub fn read_range(path: impl AsRef<Path>, start: u64, len: usize) -> Result<Vec<u16>> {
        let mut file = File::open(path)?;
        let (_, count) = read_header(&mut file)?;
        if start + len as u64 > count {
            return Err(CtpError::OutOfRange { what: "token range end", value: start + len as u64, limit: count });
        }
        file.seek(SeekFrom::Start(HEADER_LEN + 2 * start))?;
        let mut bytes = vec![0u8; len * 2];
        file.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    /// SHA-256 of the serialized stream, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_header<R: Read>(input: &mut R) -> Result<(u32, u64)> {
    let mut header = [0u8; HEADER_LEN as usize];
    input.read_exact(&mut header).map_err(|e| CtpError::Format(format!("token header: {e}")))?;
    if &header[..8] != TOKEN_MAGIC {
        return Err(CtpError::Format("bad token-stream magic".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != TOKEN_VERSION {
        return Err(CtpError::Format(format!("unsupported token-stream version {version}")));
    }
    let vocab = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    Ok((vocab, count))
}

/// Categorical mixture over data sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMixture {
    pub weights: Vec<f64>,
}

impl DomainMixture {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let m = Self { weights };
        m.validate()?;
        Ok(m)
    }

    /// Weights proportional to domain sizes.
    pub fn proportional(sizes: &[f64]) -> Result<Self> {
        let total: f64 = sizes.iter().sum();
        if !(total > 0.0) {
            return Err(CtpError::InvalidSpec("mixture sizes must have positive total".into()));
        }
        Self::new(sizes.iter().map(|s| s / total).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CtpError::InvalidSpec("mixture weights must be finite and non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CtpError::InvalidSpec(format!("mixture weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Index of the source the next window comes from.
    pub fn sample(&self, rng: &mut StreamRng) -> usize {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = self.weights.iter().map(|w| {
            acc += w;
            acc
        }).collect();
        rng.categorical(&cumulative)
    }
}
