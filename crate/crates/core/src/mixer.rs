//! Batch composition for compute-equivalent replay and discrete reservoir sampling.
//!
//! A fraction `x` of every batch comes from earlier data, the remainder from
//! the current dataset, so a replay run consumes exactly as many examples as a
//! run without replay. Replay counts per batch follow a cumulative floor,
//! `floor(x*s*b) - floor(x*s*(b-1))`, so the running total never drifts more
//! than one example from `x*s*b`. Replayed examples are read in the order they
//! were originally seen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DomainMixture, TokenStream, Window};
use crate::error::{CtpError, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayOrder {
    #[default]
    AsSeen,
}

/// What a reader does when a source runs out of windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exhaustion {
    #[default]
    Error,
    /// Restart the source from its first window and count the wrap.
    Wrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySource {
    pub source: String,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub new_source: String,
    #[serde(default)]
    pub replay_sources: Vec<ReplaySource>,
    #[serde(default)]
    pub replay_fraction: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub replay_order: ReplayOrder,
    #[serde(default)]
    pub on_exhaustion: Exhaustion,
}

impl MixPlan {
    pub fn plain(source: impl Into<String>, batch_size: usize) -> Self {
        Self {
            new_source: source.into(),
            replay_sources: Vec::new(),
            replay_fraction: 0.0,
            batch_size,
            replay_order: ReplayOrder::AsSeen,
            on_exhaustion: Exhaustion::Error,
        }
    }

    pub fn with_replay(mut self, source: impl Into<String>, fraction: f64) -> Self {
        self.replay_sources = vec![ReplaySource { source: source.into(), proportion: 1.0 }];
        self.replay_fraction = fraction;
        self
    }

    /// Plan replaying every earlier dataset in its reservoir proportion.
    pub fn from_reservoir(new_source: impl Into<String>, earlier: &[String], state: &ReservoirState, batch_size: usize) -> Result<Self> {
        let props = state.proportions();
        if props.len() != earlier.len() {
            return Err(CtpError::InvalidSpec(format!(
                "reservoir covers {} datasets but {} sources were named",
                props.len(),
                earlier.len()
            )));
        }
        Ok(Self {
            new_source: new_source.into(),
            replay_sources: earlier
                .iter()
                .zip(props)
                .map(|(s, &p)| ReplaySource { source: s.clone(), proportion: p })
                .collect(),
            replay_fraction: if earlier.is_empty() { 0.0 } else { state.alpha },
            batch_size,
            replay_order: ReplayOrder::AsSeen,
            on_exhaustion: Exhaustion::Error,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtpError::InvalidSpec(format!("mix plan: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return bad(format!("replay fraction {} outside [0, 1]", self.replay_fraction));
        }
        if self.replay_fraction > 0.0 {
            if self.replay_sources.is_empty() {
                return bad("replay requested without replay sources".into());
            }
            let sum: f64 = self.replay_sources.iter().map(|r| r.proportion).sum();
            if self.replay_sources.iter().any(|r| !(r.proportion >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("replay proportions sum to {sum}, not 1"));
            }
        }
        Ok(())
    }
}

/// Replay examples in batch `b` (1-based) of size `batch_size` at fraction `x`.
pub fn replay_count(x: f64, batch_size: usize, b: u64) -> usize {
    let per = x * batch_size as f64;
    let cum = |n: u64| (per * n as f64).floor();
    (cum(b) - cum(b - 1)) as usize
}

/// `(replay, new)` example counts for batch `b >= 1`.
pub fn batch_composition(plan: &MixPlan, b: u64) -> Result<(usize, usize)> {
    plan.validate()?;
    if b == 0 {
        return Err(CtpError::OutOfRange { what: "batch index", value: 0, limit: 1 });
    }
    let replay = replay_count(plan.replay_fraction, plan.batch_size, b).min(plan.batch_size);
    Ok((replay, plan.batch_size - replay))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub unique_new: u64,
    pub replayed: u64,
    pub total: u64,
}

/// Token split for continuing on `new_tokens` with replay fraction `x`
/// after pretraining on `old_tokens`; compute stays `old + new`.
pub fn token_budget(old_tokens: u64, new_tokens: u64, x: f64) -> Result<TokenBudget> {
    if !(0.0..=1.0).contains(&x) {
        return Err(CtpError::InvalidSpec(format!("replay fraction {x} outside [0, 1]")));
    }
    let replayed = (x * new_tokens as f64).round() as u64;
    Ok(TokenBudget { unique_new: new_tokens - replayed, replayed, total: old_tokens + new_tokens })
}

/// Splits `total` into integer counts proportional to `weights` by the
/// largest-remainder method; ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Replay-buffer composition under discrete reservoir sampling.
///
/// While training on dataset `i`, the buffer holds data from every `j < i` in
/// proportion
///
/// `p[i][j] = (s_j (1 - alpha)^g_j + sum_{k=j+1}^{i-1} p[k][j] s_k alpha) / sum_{k<i} s_k`
///
/// with `g_0 = 0` and `g_j = 1` otherwise: datasets after the first contribute
/// only their `(1 - alpha)` unique share, and every later stage re-adds the
/// tokens it replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirState {
    pub alpha: f64,
    /// Sizes of the datasets already trained on, `s_0 .. s_{i-1}`.
    pub sizes: Vec<f64>,
    /// `history[i - 1] = p[i][..i]` for every index reached so far.
    pub history: Vec<Vec<f64>>,
}

impl ReservoirState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CtpError::InvalidSpec(format!("replay ratio {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha, sizes: Vec::new(), history: Vec::new() })
    }

    /// Index of the dataset currently being trained on.
    pub fn current_index(&self) -> usize {
        self.sizes.len()
    }

    /// `p[i][..]` for the current index; empty before the first transition.
    pub fn proportions(&self) -> &[f64] {
        self.history.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn proportion(&self, i: usize, j: usize) -> Option<f64> {
        self.history.get(i.checked_sub(1)?)?.get(j).copied()
    }

    /// Records that dataset `i` (of `size` tokens) has been trained on and
    /// moves to index `i + 1`.
    pub fn update(&self, size: f64) -> Result<Self> {
        if !(size > 0.0) || !size.is_finite() {
            return Err(CtpError::InvalidSpec(format!("dataset size {size} must be positive")));
        }
        let mut next = self.clone();
        next.sizes.push(size);
        let i = next.sizes.len();
        let total: f64 = next.sizes.iter().sum();
        let row = (0..i)
            .map(|j| {
                let gamma = if j == 0 { 0 } else { 1 };
                let own = next.sizes[j] * (1.0 - next.alpha).powi(gamma);
                let replayed: f64 = (j + 1..i).map(|k| next.history[k - 1][j] * next.sizes[k] * next.alpha).sum();
                (own + replayed) / total
            })
            .collect();
        next.history.push(row);
        Ok(next)
    }

    /// Builds the state for index `sizes.len()` from scratch.
    pub fn from_sizes(alpha: f64, sizes: &[f64]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(CtpError::InvalidSpec("reservoir needs at least one dataset size".into()));
        }
        sizes.iter().try_fold(Self::new(alpha)?, |st, &s| st.update(s))
    }
}

/// Functional form of [`ReservoirState::update`].
pub fn reservoir_update(state: &ReservoirState, size: f64) -> Result<ReservoirState> {
    state.update(size)
}

/// Where a phase's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataPlan {
    Mix(MixPlan),
    /// Each example's source is drawn from `mixture`; within a source,
    /// windows are read sequentially.
    Mixture {
        sources: Vec<String>,
        mixture: DomainMixture,
        batch_size: usize,
        seed: u64,
    },
}

impl DataPlan {
    pub fn batch_size(&self) -> usize {
        match self {
            DataPlan::Mix(p) => p.batch_size,
            DataPlan::Mixture { batch_size, .. } => *batch_size,
        }
    }

    pub fn source_names(&self) -> Vec<String> {
        match self {
            DataPlan::Mix(p) => {
                let mut v: Vec<_> = p.replay_sources.iter().map(|r| r.source.clone()).collect();
                v.push(p.new_source.clone());
                v
            }
            DataPlan::Mixture { sources, .. } => sources.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataPlan::Mix(p) => p.validate(),
            DataPlan::Mixture { sources, mixture, batch_size, .. } => {
                mixture.validate()?;
                if sources.len() != mixture.weights.len() || *batch_size == 0 {
                    return Err(CtpError::InvalidSpec("mixture sources/weights mismatch or empty batch".into()));
                }
                Ok(())
            }
        }
    }
}

/// Named training streams available to a reader.
pub type Sources<'a> = BTreeMap<String, &'a TokenStream>;

/// Per-source read position, in windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub next_window: u64,
    pub wraps: u64,
}

/// Stateful single-consumer iterator over the batches of a [`DataPlan`].
#[derive(Debug)]
pub struct BatchReader<'a> {
    plan: DataPlan,
    streams: Vec<(String, &'a TokenStream)>,
    cursors: Vec<Cursor>,
    context_len: usize,
    stride: usize,
    batch_index: u64,
    rng: Option<StreamRng>,
    on_exhaustion: Exhaustion,
    last_counts: Vec<usize>,
}

impl<'a> BatchReader<'a> {
    /// Windows are non-overlapping: consecutive windows start `context_len + 1` tokens apart.
    pub fn new(plan: DataPlan, sources: &Sources<'a>, context_len: usize) -> Result<Self> {
        plan.validate()?;
        let mut streams = Vec::new();
        for name in plan.source_names() {
            if streams.iter().any(|(n, _)| *n == name) {
                return Err(CtpError::InvalidSpec(format!("source `{name}` listed twice")));
            }
            let s = sources.get(&name).ok_or_else(|| CtpError::UnknownSource(name.clone()))?;
            streams.push((name, *s));
        }
        let rng = match &plan {
            DataPlan::Mixture { seed, .. } => Some(StreamRng::new(*seed)),
            DataPlan::Mix(_) => None,
        };
        let on_exhaustion = match &plan {
            DataPlan::Mix(p) => p.on_exhaustion,
            DataPlan::Mixture { .. } => Exhaustion::Error,
        };
        let n = streams.len();
        Ok(Self {
            plan,
            streams,
            cursors: vec![Cursor::default(); n],
            context_len,
            stride: context_len + 1,
            batch_index: 0,
            rng,
            on_exhaustion,
            last_counts: vec![0; n],
        })
    }

    pub fn set_exhaustion(&mut self, policy: Exhaustion) {
        self.on_exhaustion = policy;
    }

    /// Source names in reader order: replay sources first, then the new source.
    pub fn source_names(&self) -> Vec<&str> {
        self.streams.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn cursors(&self) -> BTreeMap<String, Cursor> {
        self.streams.iter().map(|(n, _)| n.clone()).zip(self.cursors.iter().copied()).collect()
    }

    /// Restores cursors for any source named in `cursors`.
    pub fn seek(&mut self, cursors: &BTreeMap<String, Cursor>) {
        for ((name, _), cur) in self.streams.iter().zip(self.cursors.iter_mut()) {
            if let Some(c) = cursors.get(name) {
                *cur = *c;
            }
        }
    }

    pub fn rng_state(&self) -> Option<[u64; 4]> {
        self.rng.as_ref().map(StreamRng::state)
    }

    pub fn set_rng_state(&mut self, state: [u64; 4]) {
        if self.rng.is_some() {
            self.rng = Some(StreamRng::from_state(state));
        }
    }

    pub fn batches_read(&self) -> u64 {
        self.batch_index
    }

    /// Examples taken from each source (reader order) in the last batch.
    pub fn last_counts(&self) -> &[usize] {
        &self.last_counts
    }

    fn take(&mut self, src: usize, out: &mut Vec<Window<'a>>) -> Result<()> {
        let (name, stream) = &self.streams[src];
        let available = stream.window_count(self.context_len, self.stride) as u64;
        let cur = &mut self.cursors[src];
        if cur.next_window >= available {
            match self.on_exhaustion {
                Exhaustion::Wrap if available > 0 => {
                    cur.next_window = 0;
                    cur.wraps += 1;
                }
                _ => return Err(CtpError::Exhausted(name.clone())),
            }
        }
        let pos = cur.next_window as usize * self.stride;
        out.push(stream.window(pos, self.context_len)?);
        cur.next_window += 1;
        self.last_counts[src] += 1;
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Vec<Window<'a>>> {
        self.batch_index += 1;
        self.last_counts.iter_mut().for_each(|c| *c = 0);
        let mut out = Vec::with_capacity(self.plan.batch_size());
        match &self.plan {
            DataPlan::Mix(plan) => {
                let (replay, new) = batch_composition(plan, self.batch_index)?;
                let weights: Vec<f64> = plan.replay_sources.iter().map(|r| r.proportion).collect();
                let per_source = largest_remainder(&weights, replay);
                let new_idx = self.streams.len() - 1;
                for (src, count) in per_source.into_iter().enumerate() {
                    for _ in 0..count {
                        self.take(src, &mut out)?;
                    }
                }
                for _ in 0..new {
                    self.take(new_idx, &mut out)?;
                }
            }
            DataPlan::Mixture { mixture, batch_size, .. } => {
                let (mixture, n) = (mixture.clone(), *batch_size);
                for _ in 0..n {
                    let src = mixture.sample(self.rng.as_mut().expect("mixture reader has an rng"));
                    self.take(src, &mut out)?;
                }
            }
        }
        Ok(out)
    }
}

/// Writes `batch,replay,new,<source>...` rows for the first `batches` batches of a plan.
pub fn audit_csv<W: std::io::Write>(plan: &MixPlan, batches: u64, mut out: W) -> Result<()> {
    plan.validate()?;
    write!(out, "batch,replay,new")?;
    for r in &plan.replay_sources {
        write!(out, ",{}", r.source)?;
    }
    writeln!(out, ",{}", plan.new_source)?;
    let weights: Vec<f64> = plan.replay_sources.iter().map(|r| r.proportion).collect();
    for b in 1..=batches {
        let (replay, new) = batch_composition(plan, b)?;
        write!(out, "{b},{replay},{new}")?;
        for c in largest_remainder(&weights, replay) {
            write!(out, ",{c}")?;
        }
        writeln!(out, ",{new}")?;
    }
    Ok(())
}
