//! The training loop: mixed batches, schedule, AdamW, periodic evaluation and
//! phase-to-phase transitions.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use crate::checkpoint::{Checkpoint, Counters, ScheduleMark};
use crate::data::{TokenStream, Window};
use crate::error::{CtpError, Result};
use crate::mixer::{BatchReader, Cursor, DataPlan, Sources};
use crate::model::{eval_loss, loss_and_grad, ModelConfig, Params};
use crate::optim::{adamw_step, clip_gradient, OptimConfig, OptimState};
use crate::schedule::ScheduleSpec;

/// One training phase on one data plan under one schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    pub data: DataPlan,
    pub schedule: ScheduleSpec,
    pub steps: u64,
    /// Schedule step used for the first update. `None` picks it from the
    /// checkpoint: `t_const` when continuing an infinite schedule's constant
    /// phase, otherwise 0 (re-warming).
    #[serde(default)]
    pub schedule_offset: Option<u64>,
    #[serde(default = "default_true")]
    pub reset_optimizer: bool,
    /// Continue reading each source from where the checkpoint left off.
    #[serde(default)]
    pub continue_cursors: bool,
    /// Permit continuing from a checkpoint that has already annealed.
    #[serde(default)]
    pub allow_post_anneal: bool,
}

fn default_true() -> bool {
    true
}

impl PhaseSpec {
    pub fn new(name: impl Into<String>, data: DataPlan, schedule: ScheduleSpec, steps: u64) -> Self {
        Self {
            name: name.into(),
            data,
            schedule,
            steps,
            schedule_offset: None,
            reset_optimizer: true,
            continue_cursors: false,
            allow_post_anneal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CtpError::InvalidSpec(format!("phase `{}` needs steps >= 1", self.name)));
        }
        self.schedule.validate()?;
        self.data.validate()
    }
}

/// A phase attached to its starting state, ready to run.
#[derive(Debug, Clone)]
pub struct BoundPhase {
    pub spec: PhaseSpec,
    pub params: Params,
    pub optim: OptimState,
    pub counters: Counters,
    pub schedule_offset: u64,
    pub cursors: BTreeMap<String, Cursor>,
    pub rngs: BTreeMap<String, [u64; 4]>,
}

/// Starts `phase` from a freshly initialised model.
pub fn start_fresh(config: ModelConfig, phase: PhaseSpec) -> Result<BoundPhase> {
    phase.validate()?;
    let params = Params::init(config)?;
    Ok(BoundPhase {
        schedule_offset: phase.schedule_offset.unwrap_or(0),
        optim: OptimState::new(config),
        params,
        counters: Counters::default(),
        cursors: BTreeMap::new(),
        rngs: BTreeMap::new(),
        spec: phase,
    })
}

/// Binds `next` to the state in `ckpt`.
pub fn continue_from(ckpt: &Checkpoint, next: PhaseSpec) -> Result<BoundPhase> {
    next.validate()?;
    let config = *ckpt.config();
    if let Some(mark) = &ckpt.schedule {
        if mark.is_annealed() {
            if !next.allow_post_anneal {
                return Err(CtpError::PostAnnealResume { step: mark.next_t });
            }
            log::warn!(
                "phase `{}` continues from an annealed checkpoint (schedule step {}); resume from the pre-annealing checkpoint instead",
                next.name,
                mark.next_t
            );
        }
    }
    let continues_constant = ckpt.schedule.as_ref().is_some_and(|mark| {
        mark.in_constant_phase() && next.schedule.kind.is_infinite() && mark.spec.eta_const == next.schedule.eta_const
    });
    let schedule_offset = next
        .schedule_offset
        .unwrap_or(if continues_constant { next.schedule.t_const() } else { 0 });
    let optim = match (&ckpt.optim, next.reset_optimizer) {
        (Some(opt), false) => {
            if opt.m.config() != &config {
                return Err(CtpError::ConfigMismatch("optimizer state shape differs from model".into()));
            }
            opt.clone()
        }
        (None, false) => {
            log::warn!("phase `{}` keeps optimizer state but the checkpoint has none", next.name);
            OptimState::new(config)
        }
        _ => OptimState::new(config),
    };
    Ok(BoundPhase {
        params: ckpt.params.clone(),
        optim,
        counters: ckpt.counters,
        schedule_offset,
        cursors: if next.continue_cursors { ckpt.cursors.clone() } else { BTreeMap::new() },
        rngs: if next.continue_cursors { ckpt.rngs.clone() } else { BTreeMap::new() },
        spec: next,
    })
}

/// Held-out windows of one dataset.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    pub name: String,
    pub windows: Vec<Window<'a>>,
}

impl<'a> EvalSet<'a> {
    /// The first `max_windows` non-overlapping windows of `stream`.
    pub fn from_stream(name: impl Into<String>, stream: &'a TokenStream, context_len: usize, max_windows: usize) -> Result<Self> {
        let stride = context_len + 1;
        let n = stream.window_count(context_len, stride).min(max_windows);
        let windows = (0..n).map(|i| stream.window(i * stride, context_len)).collect::<Result<Vec<_>>>()?;
        if windows.is_empty() {
            return Err(CtpError::InvalidSpec("validation set has no windows".into()));
        }
        Ok(Self { name: name.into(), windows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub eval_every: u64,
    /// Additionally evaluate every `dense_every` steps up to `dense_until`.
    pub dense_until: u64,
    pub dense_every: u64,
    pub summary_window: u64,
    pub summary_stride: u64,
    /// Abort after this many consecutive logs with training loss above `10 ln V`.
    pub divergence_logs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            eval_every: 50,
            dense_until: 0,
            dense_every: 10,
            summary_window: 100,
            summary_stride: 10,
            divergence_logs: 50,
        }
    }
}

impl TrainConfig {
    /// Whether phase step `k` (1-based, after the update) is logged.
    pub fn logs_at(&self, k: u64, steps: u64) -> bool {
        let from_end = steps - k;
        k == steps
            || (self.eval_every > 0 && k.is_multiple_of(self.eval_every))
            || (k <= self.dense_until && self.dense_every > 0 && k.is_multiple_of(self.dense_every))
            || (from_end < self.summary_window && self.summary_stride > 0 && from_end.is_multiple_of(self.summary_stride))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Global step across phases.
    pub step: u64,
    pub phase_step: u64,
    /// Learning rate of the update that produced this row.
    pub lr: f64,
    pub tokens: u64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: String,
    pub datasets: Vec<String>,
    /// Validation losses before the first update.
    pub initial: Vec<f64>,
    pub rows: Vec<Row>,
}

impl RunRecord {
    pub fn dataset_index(&self, name: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| CtpError::UnknownSource(name.to_string()))
    }

    /// Validation-loss series of one dataset as `(phase_step, loss)`.
    pub fn series(&self, name: &str) -> Result<Vec<(u64, f64)>> {
        let i = self.dataset_index(name)?;
        Ok(self.rows.iter().map(|r| (r.phase_step, r.val_loss[i])).collect())
    }

    /// Largest logged loss on `name` over phase steps `1..=until`.
    pub fn peak(&self, name: &str, until: u64) -> Result<f64> {
        let pts: Vec<f64> = self.series(name)?.into_iter().filter(|&(k, _)| k <= until).map(|(_, l)| l).collect();
        if pts.is_empty() {
            return Err(CtpError::InsufficientHistory(format!("no rows of `{name}` within the first {until} steps")));
        }
        Ok(pts.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "step,lr,tokens")?;
        for d in &self.datasets {
            write!(out, ",{d}_val_loss")?;
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(out, "{},{:e},{}", r.step, r.lr, r.tokens)?;
            for v in &r.val_loss {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

/// Mean validation loss per dataset over the last `window` steps, sampled every `stride`.
pub fn final_loss_summary(record: &RunRecord, window: u64, stride: u64) -> Result<BTreeMap<String, f64>> {
    summarize_rows(&record.datasets, record.rows.iter().map(|r| (r.step, r.val_loss.as_slice())), window, stride)
}

/// [`final_loss_summary`] over arbitrary `(step, losses)` rows, e.g. parsed back from a CSV.
pub fn summarize_rows<'r>(
    datasets: &[String],
    rows: impl Iterator<Item = (u64, &'r [f64])> + Clone,
    window: u64,
    stride: u64,
) -> Result<BTreeMap<String, f64>> {
    if stride == 0 || window == 0 {
        return Err(CtpError::InvalidSpec("summary window and stride must be >= 1".into()));
    }
    let last = rows
        .clone()
        .map(|(s, _)| s)
        .max()
        .ok_or_else(|| CtpError::InsufficientHistory("empty record".into()))?;
    let expected = window.div_ceil(stride);
    if last < window {
        return Err(CtpError::InsufficientHistory(format!("record covers fewer than {window} steps")));
    }
    let picked: Vec<&[f64]> = rows
        .filter(|&(s, _)| last - s < window && (last - s) % stride == 0)
        .map(|(_, v)| v)
        .collect();
    if picked.len() as u64 != expected {
        return Err(CtpError::InsufficientHistory(format!(
            "found {} of the {expected} rows needed for the final summary",
            picked.len()
        )));
    }
    Ok(datasets
        .iter()
        .enumerate()
        .map(|(i, d)| (d.clone(), picked.iter().map(|v| v[i]).sum::<f64>() / picked.len() as f64))
        .collect())
}

const MIXTURE_RNG: &str = "mixture";

/// Runs one phase and returns its end-of-phase checkpoint and metrics.
pub fn run_phase(
    bound: BoundPhase,
    sources: &Sources<'_>,
    eval_sets: &[EvalSet<'_>],
    config: &TrainConfig,
) -> Result<(Checkpoint, RunRecord)> {
    let BoundPhase { spec, mut params, mut optim, mut counters, schedule_offset, cursors, rngs } = bound;
    config.optim.validate()?;
    let model = *params.config();
    let last_t = schedule_offset + spec.steps - 1;
    if let Some(end) = spec.schedule.total_steps() {
        if last_t > end {
            return Err(CtpError::OutOfRange { what: "schedule step", value: last_t, limit: end });
        }
    }
    let mut reader = BatchReader::new(spec.data.clone(), sources, model.context_length)?;
    if let Some(v) = sources.values().find(|s| s.vocab_size() as usize > model.vocab_size) {
        return Err(CtpError::ConfigMismatch(format!(
            "source vocabulary {} exceeds model vocabulary {}",
            v.vocab_size(),
            model.vocab_size
        )));
    }
    reader.seek(&cursors);
    if let Some(state) = rngs.get(MIXTURE_RNG) {
        reader.set_rng_state(*state);
    }
    let evaluate = |p: &Params| -> Result<Vec<f64>> { eval_sets.iter().map(|e| eval_loss(p, &e.windows)).collect() };
    let tokens_per_batch = (spec.data.batch_size() * (model.context_length + 1)) as u64;
    let blowup = 10.0 * (model.vocab_size as f64).ln();

    let mut record = RunRecord {
        phase: spec.name.clone(),
        datasets: eval_sets.iter().map(|e| e.name.clone()).collect(),
        initial: evaluate(&params)?,
        rows: Vec::new(),
    };
    let (mut loss_sum, mut loss_n, mut high_logs) = (0.0, 0u64, 0u32);
    for k in 1..=spec.steps {
        let lr = spec.schedule.lr_at(schedule_offset + k - 1)?;
        let batch = reader.next_batch()?;
        let (loss, mut grad) = loss_and_grad(&params, &batch)?;
        clip_gradient(grad.as_mut_slice(), config.optim.clip_norm)?;
        adamw_step(&mut optim, &mut params, &grad, lr, &config.optim)?;
        counters.global_step += 1;
        counters.tokens += tokens_per_batch;
        loss_sum += loss;
        loss_n += 1;
        if config.logs_at(k, spec.steps) {
            let train_loss = loss_sum / loss_n as f64;
            (loss_sum, loss_n) = (0.0, 0);
            high_logs = if train_loss > blowup { high_logs + 1 } else { 0 };
            if config.divergence_logs > 0 && high_logs >= config.divergence_logs {
                return Err(CtpError::Diverged(format!(
                    "phase `{}`: training loss above {blowup:.3} for {high_logs} consecutive logs (step {k}, lr {lr:e})",
                    spec.name
                )));
            }
            record.rows.push(Row {
                step: counters.global_step,
                phase_step: k,
                lr,
                tokens: counters.tokens,
                train_loss,
                val_loss: evaluate(&params)?,
            });
        }
    }
    counters.phases += 1;
    let mut rng_states = BTreeMap::new();
    if let Some(st) = reader.rng_state() {
        rng_states.insert(MIXTURE_RNG.to_string(), st);
    }
    let checkpoint = Checkpoint {
        params,
        optim: Some(optim),
        rngs: rng_states,
        counters,
        schedule: Some(ScheduleMark::new(spec.schedule, schedule_offset + spec.steps)?),
        cursors: reader.cursors(),
    };
    Ok((checkpoint, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenStream;
    use crate::mixer::MixPlan;
    use crate::schedule::ScheduleKind;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 8, context_length: 2, embed_dim: 3, hidden_dim: 5, init_seed: 1 }
    }

    fn stream(n: usize, seed: u64) -> TokenStream {
        let mut rng = crate::rng::StreamRng::new(seed);
        TokenStream::new(8, (0..n).map(|_| (rng.next_u64() % 8) as u16).collect()).unwrap()
    }

    fn mix(batch: usize) -> DataPlan {
        DataPlan::Mix(MixPlan::plain("d0", batch))
    }

    #[test]
    fn zero_lr_single_step() {
        let (train, val) = (stream(300, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 100).unwrap()];
        // the first warmup step has lr 0
        let phase = PhaseSpec::new("p", mix(4), ScheduleSpec::cosine(1e-3, 1e-4, 10, 10), 1);
        let bound = start_fresh(tiny(), phase).unwrap();
        let before = bound.params.clone();
        let (ck, rec) = run_phase(bound, &sources, &evals, &TrainConfig::default()).unwrap();
        assert_eq!(ck.params, before);
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].tokens, 4 * 3);
        assert_eq!(rec.rows[0].val_loss, rec.initial);
    }

    #[test]
    fn token_accounting_ignores_replay() {
        let (a, b, val) = (stream(3000, 1), stream(3000, 3), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &a), ("d1".to_string(), &b)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        for x in [0.0, 0.3, 1.0] {
            let plan = DataPlan::Mix(MixPlan::plain("d1", 5).with_replay("d0", x));
            let phase = PhaseSpec::new("p", plan, ScheduleSpec::constant(1e-3, 0, None), 37);
            let (ck, _) = run_phase(start_fresh(tiny(), phase).unwrap(), &sources, &evals, &TrainConfig::default()).unwrap();
            assert_eq!(ck.counters.tokens, 37 * 5 * 3);
        }
    }

    #[test]
    fn rewarm_versus_constant_continuation() {
        let (train, val) = (stream(3000, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        let inf = ScheduleSpec::infinite(ScheduleKind::InfiniteCosine, 1e-2, 1e-4, 5e-3, 2, 4, Some(10), 4);
        let (ck, _) = run_phase(
            start_fresh(tiny(), PhaseSpec::new("a", mix(2), inf, 16)).unwrap(),
            &sources,
            &evals,
            &TrainConfig::default(),
        )
        .unwrap();
        let bound = continue_from(&ck, PhaseSpec::new("b", mix(2), inf, 5)).unwrap();
        assert_eq!(bound.schedule_offset, inf.t_const());
        assert_eq!(inf.lr_at(bound.schedule_offset).unwrap(), 5e-3);
        assert!(bound.optim.is_zero());
        let (_, rec) = run_phase(bound, &sources, &evals, &TrainConfig::default()).unwrap();
        assert_eq!(rec.rows[0].lr, 5e-3);

        let cos = ScheduleSpec::cosine(1e-2, 1e-3, 3, 10);
        let bound = continue_from(&ck, PhaseSpec::new("c", mix(2), cos, 5)).unwrap();
        assert_eq!(bound.schedule_offset, 0);
        assert_eq!(cos.lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn post_anneal_guard() {
        let (train, val) = (stream(3000, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        let inf = ScheduleSpec::infinite(ScheduleKind::InfiniteCosine, 1e-2, 1e-4, 5e-3, 2, 4, Some(4), 4);
        let (ck, _) = run_phase(
            start_fresh(tiny(), PhaseSpec::new("a", mix(2), inf, 14)).unwrap(),
            &sources,
            &evals,
            &TrainConfig::default(),
        )
        .unwrap();
        let next = PhaseSpec::new("b", mix(2), inf, 3);
        assert!(matches!(continue_from(&ck, next.clone()), Err(CtpError::PostAnnealResume { step: 14 })));
        let bound = continue_from(&ck, PhaseSpec { allow_post_anneal: true, ..next }).unwrap();
        assert_eq!(bound.schedule_offset, 0);
    }

    #[test]
    fn keeps_optimizer_when_asked() {
        let (train, val) = (stream(3000, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        let sched = ScheduleSpec::constant(1e-3, 0, None);
        let (ck, _) = run_phase(
            start_fresh(tiny(), PhaseSpec::new("a", mix(2), sched, 6)).unwrap(),
            &sources,
            &evals,
            &TrainConfig::default(),
        )
        .unwrap();
        let keep = PhaseSpec { reset_optimizer: false, continue_cursors: true, ..PhaseSpec::new("b", mix(2), sched, 1) };
        let bound = continue_from(&ck, keep).unwrap();
        assert_eq!(bound.optim.t, 6);
        assert_eq!(bound.cursors["d0"].next_window, 12);
    }

    #[test]
    fn exhaustion_is_reported() {
        let (train, val) = (stream(30, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        let phase = PhaseSpec::new("p", mix(4), ScheduleSpec::constant(1e-3, 0, None), 10);
        let err = run_phase(start_fresh(tiny(), phase).unwrap(), &sources, &evals, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, CtpError::Exhausted(ref s) if s == "d0"), "{err}");
    }

    #[test]
    fn divergence_detector() {
        let (train, val) = (stream(3000, 1), stream(90, 2));
        let sources: Sources = [("d0".to_string(), &train)].into_iter().collect();
        let evals = [EvalSet::from_stream("d0", &val, 2, 10).unwrap()];
        let phase = PhaseSpec::new("p", mix(2), ScheduleSpec::constant(50.0, 0, None), 200);
        let cfg = TrainConfig {
            optim: OptimConfig { weight_decay: 0.0, clip_norm: 1e9, ..Default::default() },
            eval_every: 1,
            divergence_logs: 3,
            ..Default::default()
        };
        match run_phase(start_fresh(tiny(), phase).unwrap(), &sources, &evals, &cfg) {
            Err(CtpError::Diverged(msg)) => assert!(msg.contains("consecutive")),
            Err(CtpError::Numerical { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.rows.len())),
        }
    }

    fn record(losses: &[(u64, f64)]) -> RunRecord {
        RunRecord {
            phase: "p".into(),
            datasets: vec!["d0".into()],
            initial: vec![0.0],
            rows: losses
                .iter()
                .map(|&(s, l)| Row { step: s, phase_step: s, lr: 0.0, tokens: 0, train_loss: 0.0, val_loss: vec![l] })
                .collect(),
        }
    }

    #[test]
    fn summary_of_constant_and_linear_series() {
        let constant = record(&(1..=200).map(|s| (s, 2.5)).collect::<Vec<_>>());
        assert_eq!(final_loss_summary(&constant, 100, 10).unwrap()["d0"], 2.5);
        let linear = record(&(1..=200).map(|s| (s, s as f64)).collect::<Vec<_>>());
        let direct = (0..10).map(|i| (200 - 10 * i) as f64).sum::<f64>() / 10.0;
        assert_eq!(final_loss_summary(&linear, 100, 10).unwrap()["d0"], direct);
        let short = record(&(1..=50).map(|s| (s, 1.0)).collect::<Vec<_>>());
        assert!(matches!(final_loss_summary(&short, 100, 10), Err(CtpError::InsufficientHistory(_))));
    }

    #[test]
    fn log_schedule() {
        let cfg = TrainConfig { eval_every: 50, dense_until: 20, dense_every: 5, ..Default::default() };
        let logged: Vec<u64> = (1..=300).filter(|&k| cfg.logs_at(k, 300)).collect();
        assert_eq!(&logged[..5], &[5, 10, 15, 20, 50]);
        assert!(logged.contains(&210) && logged.contains(&290) && logged.contains(&300));
        assert!(!logged.contains(&205));
    }
}
