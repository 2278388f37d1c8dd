//! Desk-scale experiment presets.
//!
//! Budgets: the 300B-token pretraining phase maps to 20k steps and the 200B
//! continuation to 14k steps, batch 32, context 8, vocabulary 64. `scale`
//! multiplies every step budget.

use super::experiment::{ArmSpec, Check, ExperimentSpec, Metric, Rule};
use crate::data::{CorpusSpec, DomainMixture, ShiftKind};
use crate::error::{CtpError, Result};
use crate::mixer::{DataPlan, MixPlan, ReservoirState};
use crate::model::ModelConfig;
use crate::schedule::{percent_to_steps, ScheduleKind, ScheduleSpec};
use crate::trainer::{PhaseSpec, TrainConfig};

pub const PRESETS: [&str; 8] = [
    "warmup-sweep",
    "rewarm-sweep",
    "replay-sweep",
    "continual-vs-union",
    "same-data-rewarm",
    "infinite-vs-cosine",
    "three-splits",
    "domain-incremental",
];

pub const DEFAULT_SEED: u64 = 7;
pub const VOCAB: u32 = 64;
pub const CONTEXT: usize = 8;
pub const BATCH: usize = 32;
pub const PRETRAIN_STEPS: u64 = 20_000;
pub const CONTINUE_STEPS: u64 = 14_000;
/// One of three IID splits sharing the pretraining budget.
pub const SPLIT_STEPS: u64 = 6_667;
/// Reference learning rates (3e-4, 3e-5, 1.65e-4) are multiplied by this.
/// At the reference values the desk model is still learning-rate limited
/// after pretraining, so raising the rate only helps.
pub const LR_MULTIPLIER: f64 = 10.0;
pub const ETA_MAX: f64 = 3e-4 * LR_MULTIPLIER;
pub const ETA_MIN: f64 = 3e-5 * LR_MULTIPLIER;
pub const ETA_CONST: f64 = 1.65e-4 * LR_MULTIPLIER;
pub const WARMUP_PCT: f64 = 1.0;
pub const WEAK_LAMBDA: f64 = 0.5;
pub const EVAL_WINDOWS: usize = 2000;
pub const REPLAY_FRACTIONS: [f64; 6] = [0.0, 0.01, 0.05, 0.10, 0.25, 0.50];
/// Continual arm's replay fraction per shift, as chosen for the union comparison.
pub const WEAK_REPLAY: f64 = 0.05;
pub const STRONG_REPLAY: f64 = 0.25;
/// Replay ratio for discrete reservoir sampling across domains.
pub const RESERVOIR_ALPHA: f64 = 0.05;
/// Domain sizes in billions of tokens, largest first.
pub const DOMAINS: [(&str, f64); 7] = [
    ("commoncrawl", 155.89),
    ("c4", 79.87),
    ("github", 15.63),
    ("arxiv", 13.25),
    ("book", 12.58),
    ("wikipedia", 11.96),
    ("stackexchange", 10.09),
];

/// Root seed: `CTP_SEED` if set and numeric, else [`DEFAULT_SEED`].
pub fn root_seed() -> u64 {
    std::env::var("CTP_SEED").ok().and_then(|s| s.trim().parse().ok()).unwrap_or(DEFAULT_SEED)
}

struct Desk {
    scale: f64,
    seed: u64,
}

impl Desk {
    fn steps(&self, n: u64) -> u64 {
        ((n as f64 * self.scale).round() as u64).max(10)
    }

    fn pretrain(&self) -> u64 {
        self.steps(PRETRAIN_STEPS)
    }

    fn cont(&self) -> u64 {
        self.steps(CONTINUE_STEPS)
    }

    fn tokens(&self, steps: u64) -> u64 {
        (steps as f64 * (BATCH * (CONTEXT + 1)) as f64 * 1.1).ceil() as u64 + CONTEXT as u64 + 1
    }

    fn corpus(&self, name: &str, seed: u64, shift: ShiftKind, steps: u64, eval_windows: usize) -> CorpusSpec {
        CorpusSpec::new(name, VOCAB, seed, shift).with_tokens(self.tokens(steps), ((eval_windows + 1) * (CONTEXT + 1)) as u64)
    }

    /// `d0`, `weak` and `strong`, shared by every two-dataset preset.
    fn shift_corpora(&self) -> Vec<CorpusSpec> {
        vec![
            self.corpus("d0", self.seed, ShiftKind::Base, self.pretrain() + self.cont(), EVAL_WINDOWS),
            self.corpus("weak", self.seed, ShiftKind::WeakShift { lambda: WEAK_LAMBDA }, self.cont(), EVAL_WINDOWS),
            self.corpus("strong", self.seed, ShiftKind::StrongShift, self.cont(), EVAL_WINDOWS),
        ]
    }

    fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB as usize,
            context_length: CONTEXT,
            embed_dim: 8,
            hidden_dim: 32,
            init_seed: self.seed.wrapping_add(1),
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            eval_every: ((100.0 * self.scale).round() as u64).max(1),
            dense_until: self.cont() / 10,
            dense_every: ((10.0 * self.scale).round() as u64).max(1),
            ..TrainConfig::default()
        }
    }

    fn experiment(&self, name: &str, corpora: Vec<CorpusSpec>, eval: &[&str], arms: Vec<ArmSpec>, checks: Vec<Check>) -> ExperimentSpec {
        ExperimentSpec {
            name: name.to_string(),
            seed: self.seed,
            model: self.model(),
            train: self.train(),
            corpora,
            eval: eval.iter().map(|s| s.to_string()).collect(),
            eval_windows: EVAL_WINDOWS,
            arms,
            checks,
        }
    }

    fn pretrain_phase(&self) -> PhaseSpec {
        let p = self.pretrain();
        PhaseSpec::new("pretrain", plain("d0"), ScheduleSpec::cosine_fit(ETA_MAX, ETA_MIN, WARMUP_PCT, p), p)
    }

    /// Re-warm to `eta_max` over `warmup_pct` and re-decay to a tenth of it.
    fn rewarm(&self, eta_max: f64, warmup_pct: f64) -> ScheduleSpec {
        ScheduleSpec::cosine_fit(eta_max, eta_max / 10.0, warmup_pct, self.cont())
    }

    fn continue_phase(&self, new: &str, replay: f64, schedule: ScheduleSpec) -> PhaseSpec {
        let data = if replay > 0.0 {
            DataPlan::Mix(MixPlan::plain(new, BATCH).with_replay("d0", replay))
        } else {
            plain(new)
        };
        PhaseSpec::new("continue", data, schedule, self.cont())
    }

    fn union_phase(&self, new: &str) -> Result<PhaseSpec> {
        let (p, c) = (self.pretrain(), self.cont());
        let data = DataPlan::Mixture {
            sources: vec!["d0".into(), new.into()],
            mixture: DomainMixture::proportional(&[p as f64, c as f64])?,
            batch_size: BATCH,
            seed: self.seed.wrapping_add(2),
        };
        Ok(PhaseSpec::new("union", data, ScheduleSpec::cosine_fit(ETA_MAX, ETA_MIN, WARMUP_PCT, p + c), p + c))
    }

    /// Infinite schedule over `total` steps: warmup 1%, cooldown 60%, constant 25%, anneal the rest.
    fn infinite(&self, kind: ScheduleKind, total: u64) -> ScheduleSpec {
        let (w, cd, c) = (percent_to_steps(WARMUP_PCT, total), percent_to_steps(60.0, total), percent_to_steps(25.0, total));
        ScheduleSpec::infinite(kind, ETA_MAX, ETA_MIN, ETA_CONST, w, cd, Some(c), total - w - cd - c)
    }
}

fn plain(source: &str) -> DataPlan {
    DataPlan::Mix(MixPlan::plain(source, BATCH))
}

fn arm(name: impl Into<String>, group: &str, phases: Vec<PhaseSpec>, avg_over: &[&str]) -> ArmSpec {
    ArmSpec {
        name: name.into(),
        group: group.to_string(),
        phases,
        avg_over: avg_over.iter().map(|s| s.to_string()).collect(),
    }
}

fn check(name: impl Into<String>, rule: Rule) -> Check {
    Check { name: name.into(), rule }
}

fn fin(arm: &str, dataset: &str) -> Metric {
    Metric::Final { arm: arm.into(), dataset: dataset.into() }
}

fn pct_label(x: f64) -> String {
    let p = x * 100.0;
    if p.fract() == 0.0 {
        format!("{p:.0}")
    } else {
        format!("{p}")
    }
}

const SHIFT_EVAL: [&str; 3] = ["d0", "weak", "strong"];
const SHIFTS: [&str; 2] = ["weak", "strong"];

/// Builds a named preset. `scale` in (0, 1] shrinks every step budget.
pub fn preset(name: &str, scale: f64, seed: u64) -> Result<ExperimentSpec> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(CtpError::InvalidSpec(format!("scale {scale} outside (0, 1]")));
    }
    let desk = Desk { scale, seed };
    let spec = match name {
        "warmup-sweep" => warmup_sweep(&desk),
        "rewarm-sweep" => rewarm_sweep(&desk),
        "replay-sweep" => replay_sweep(&desk)?,
        "continual-vs-union" => continual_vs_union(&desk)?,
        "same-data-rewarm" => same_data_rewarm(&desk),
        "infinite-vs-cosine" => infinite_vs_cosine(&desk),
        "three-splits" => three_splits(&desk),
        "domain-incremental" => domain_incremental(&desk)?,
        other => return Err(CtpError::UnknownPreset(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

fn warmup_sweep(d: &Desk) -> ExperimentSpec {
    let pcts = [0.0, 0.5, 1.0, 2.0];
    let names: Vec<String> = pcts.iter().map(|p| format!("warmup-{p}")).collect();
    let arms = pcts
        .iter()
        .zip(&names)
        .map(|(&p, n)| arm(n, "weak", vec![d.pretrain_phase(), d.continue_phase("weak", 0.0, d.rewarm(ETA_MAX, p))], &["d0", "weak"]))
        .collect();
    let span = |ds: &str| Rule::RelSpan { metrics: names.iter().map(|n| fin(n, ds)).collect(), tol: 0.01 };
    let peak = |n: &str| Metric::Peak { arm: n.into(), dataset: "d0".into(), fraction: 0.02 };
    let checks = vec![
        check("final-d0-span", span("d0")),
        check("final-weak-span", span("weak")),
        check("no-warmup-peak-exceeds-2pct", Rule::Greater { a: peak(&names[0]), b: peak(&names[3]) }),
    ];
    d.experiment("warmup-sweep", d.shift_corpora(), &SHIFT_EVAL, arms, checks)
}

fn rewarm_sweep(d: &Desk) -> ExperimentSpec {
    let mut arms = Vec::new();
    let mut checks = Vec::new();
    for g in SHIFTS {
        let mut add = |suffix: &str, s: ScheduleSpec| {
            arms.push(arm(format!("{g}-{suffix}"), g, vec![d.pretrain_phase(), d.continue_phase(g, 0.0, s)], &["d0", g]));
        };
        add("const-min", ScheduleSpec::constant(ETA_MIN, 0, None));
        add("const-max", ScheduleSpec::constant(ETA_MAX, percent_to_steps(WARMUP_PCT, d.cont()), None));
        for (label, eta) in [("half", ETA_MAX / 2.0), ("1x", ETA_MAX), ("2x", ETA_MAX * 2.0)] {
            add(&format!("rewarm-{label}"), d.rewarm(eta, WARMUP_PCT));
        }
    }
    for label in ["half", "1x", "2x"] {
        checks.push(check(
            format!("strong-const-min-above-rewarm-{label}"),
            Rule::Greater { a: fin("strong-const-min", "strong"), b: fin(&format!("strong-rewarm-{label}"), "strong") },
        ));
    }
    d.experiment("rewarm-sweep", d.shift_corpora(), &SHIFT_EVAL, arms, checks)
}

fn replay_sweep(d: &Desk) -> Result<ExperimentSpec> {
    let mut arms = Vec::new();
    for g in SHIFTS {
        for x in REPLAY_FRACTIONS {
            let phases = vec![d.pretrain_phase(), d.continue_phase(g, x, d.rewarm(ETA_MAX, WARMUP_PCT))];
            arms.push(arm(format!("{g}-replay-{}", pct_label(x)), g, phases, &["d0", g]));
        }
        arms.push(arm(format!("{g}-union"), g, vec![d.union_phase(g)?], &["d0", g]));
    }
    let strong: Vec<String> = REPLAY_FRACTIONS.iter().map(|&x| format!("strong-replay-{}", pct_label(x))).collect();
    let checks = vec![
        check("strong-d0-non-increasing-in-replay", Rule::NonIncreasing { metrics: strong.iter().map(|n| fin(n, "d0")).collect() }),
        check(
            "strong-d1-5pct-close-to-0pct",
            Rule::WithinAbs { a: fin("strong-replay-5", "strong"), b: fin("strong-replay-0", "strong"), tol: 0.05 },
        ),
    ];
    Ok(d.experiment("replay-sweep", d.shift_corpora(), &SHIFT_EVAL, arms, checks))
}

fn continual_vs_union(d: &Desk) -> Result<ExperimentSpec> {
    let mut arms = Vec::new();
    let mut checks = Vec::new();
    for (g, x) in [("weak", WEAK_REPLAY), ("strong", STRONG_REPLAY)] {
        let rewarm = d.rewarm(ETA_MAX, WARMUP_PCT);
        arms.push(arm(format!("{g}-d0-only"), g, vec![d.pretrain_phase()], &["d0", g]));
        arms.push(arm(format!("{g}-rewarm"), g, vec![d.pretrain_phase(), d.continue_phase(g, 0.0, rewarm)], &["d0", g]));
        let replay = format!("{g}-rewarm-replay-{}", pct_label(x));
        arms.push(arm(&replay, g, vec![d.pretrain_phase(), d.continue_phase(g, x, rewarm)], &["d0", g]));
        arms.push(arm(format!("{g}-union"), g, vec![d.union_phase(g)?], &["d0", g]));
        let const_min = d.continue_phase(g, 0.0, ScheduleSpec::constant(ETA_MIN, 0, None));
        arms.push(arm(format!("{g}-const-min"), g, vec![d.pretrain_phase(), const_min], &["d0", g]));
        if g == "strong" {
            for other in [format!("{g}-rewarm"), replay.clone()] {
                checks.push(check(
                    format!("{g}-const-min-above-{}", other.trim_start_matches("strong-")),
                    Rule::Greater { a: fin(&format!("{g}-const-min"), g), b: fin(&other, g) },
                ));
            }
        }
        checks.push(check(
            format!("{g}-continual-avg-within-5pct-of-union"),
            Rule::WithinRel { a: Metric::Avg { arm: replay }, b: Metric::Avg { arm: format!("{g}-union") }, tol: 0.05 },
        ));
    }
    Ok(d.experiment("continual-vs-union", d.shift_corpora(), &SHIFT_EVAL, arms, checks))
}

fn same_data_rewarm(d: &Desk) -> ExperimentSpec {
    let same = |s: ScheduleSpec| PhaseSpec { continue_cursors: true, ..d.continue_phase("d0", 0.0, s) };
    let mut arms = vec![arm("const-min", "d0", vec![d.pretrain_phase(), same(ScheduleSpec::constant(ETA_MIN, 0, None))], &["d0"])];
    let etas = [("half", ETA_MAX / 2.0), ("1x", ETA_MAX), ("2x", ETA_MAX * 2.0)];
    for (label, eta) in etas {
        arms.push(arm(format!("rewarm-{label}"), "d0", vec![d.pretrain_phase(), same(d.rewarm(eta, WARMUP_PCT))], &["d0"]));
    }
    let excess = |label: &str| Metric::PeakExcess {
        arm: format!("rewarm-{label}"),
        baseline: "const-min".into(),
        dataset: "d0".into(),
        fraction: 0.1,
    };
    let checks = vec![
        check("rewarm-peak-excess-at-least-0.02", Rule::AtLeast { a: excess("1x"), value: 0.02 }),
        check("peak-excess-ordered-by-eta-max", Rule::NonIncreasing { metrics: vec![excess("2x"), excess("1x"), excess("half")] }),
    ];
    d.experiment("same-data-rewarm", d.shift_corpora(), &SHIFT_EVAL, arms, checks)
}

fn infinite_vs_cosine(d: &Desk) -> ExperimentSpec {
    let p = d.pretrain();
    let inf = |kind| PhaseSpec::new("pretrain", plain("d0"), d.infinite(kind, p), p);
    let arms = vec![
        arm("cosine", "d0", vec![d.pretrain_phase()], &["d0"]),
        arm("cosine-inf", "d0", vec![inf(ScheduleKind::InfiniteCosine)], &["d0"]),
        arm("invsqrt-inf", "d0", vec![inf(ScheduleKind::InfiniteInvSqrt)], &["d0"]),
    ];
    let checks = ["cosine-inf", "invsqrt-inf"]
        .iter()
        .map(|a| check(format!("{a}-within-2pct-of-cosine"), Rule::WithinRel { a: fin(a, "d0"), b: fin("cosine", "d0"), tol: 0.02 }))
        .collect();
    d.experiment("infinite-vs-cosine", d.shift_corpora(), &SHIFT_EVAL, arms, checks)
}

fn three_splits(d: &Desk) -> ExperimentSpec {
    let s = d.steps(SPLIT_STEPS);
    let splits: Vec<String> = (0..3).map(|k| format!("split{k}")).collect();
    let corpora = (0..3u32).map(|k| d.corpus(&splits[k as usize], d.seed, ShiftKind::IidSplit { index: k }, s, EVAL_WINDOWS)).collect();
    let eval: Vec<&str> = splits.iter().map(String::as_str).collect();
    let mut arms = Vec::new();
    let mut checks = Vec::new();

    let mut cosine = Vec::new();
    for (k, split) in splits.iter().enumerate() {
        cosine.push(PhaseSpec::new(format!("cosine-{split}"), plain(split), ScheduleSpec::cosine_fit(ETA_MAX, ETA_MIN, WARMUP_PCT, s), s));
        arms.push(arm(format!("repeated-cosine@{k}"), "cosine", cosine.clone(), &eval));
    }

    for (kind, label) in [(ScheduleKind::InfiniteCosine, "cosine-inf"), (ScheduleKind::InfiniteInvSqrt, "invsqrt-inf")] {
        // Split 0 fixes warmup and cooldown; T_ann is what remains after the 25% constant span.
        let first = d.infinite(kind, s);
        let t_ann = first.anneal_steps;
        let mut history: Vec<PhaseSpec> = Vec::new();
        for (k, split) in splits.iter().enumerate() {
            let main = if k == 0 {
                first
            } else {
                ScheduleSpec { constant_steps: Some(s - t_ann), ..first }
            };
            history.push(PhaseSpec::new(format!("{label}-{split}"), plain(split), main, s - t_ann));
            let fork = main.t_ann().expect("bounded constant phase");
            let tail = |name: String, schedule: ScheduleSpec| PhaseSpec {
                schedule_offset: Some(fork),
                reset_optimizer: false,
                continue_cursors: true,
                ..PhaseSpec::new(name, plain(split), schedule, t_ann)
            };
            let mut annealed = history.clone();
            annealed.push(tail(format!("{label}-{split}-anneal"), main));
            arms.push(arm(format!("{label}@{k}"), label, annealed, &eval));
            let open = ScheduleSpec { constant_steps: main.constant_steps.map(|c| c + t_ann), ..main };
            history.push(tail(format!("{label}-{split}-constant"), open));
            checks.push(check(
                format!("{label}-split{k}-within-2pct-of-repeated-cosine"),
                Rule::WithinRel {
                    a: Metric::Avg { arm: format!("{label}@{k}") },
                    b: Metric::Avg { arm: format!("repeated-cosine@{k}") },
                    tol: 0.02,
                },
            ));
        }
    }
    d.experiment("three-splits", corpora, &eval, arms, checks)
}

fn domain_incremental(d: &Desk) -> Result<ExperimentSpec> {
    let total: f64 = DOMAINS.iter().map(|(_, s)| s).sum();
    let budget = d.pretrain();
    let steps: Vec<u64> = DOMAINS.iter().map(|(_, s)| ((budget as f64 * s / total).round() as u64).max(10)).collect();
    let names: Vec<String> = DOMAINS.iter().map(|(n, _)| n.to_string()).collect();
    let mut corpora = vec![d.corpus("d0", d.seed, ShiftKind::Base, d.pretrain(), 1000)];
    for (k, n) in names.iter().enumerate() {
        corpora.push(d.corpus(n, d.seed.wrapping_add(100 + k as u64), ShiftKind::Base, steps[k], 1000));
    }
    let mut eval: Vec<&str> = vec!["d0"];
    eval.extend(names.iter().map(String::as_str));

    let window = (CONTEXT + 1) as f64 * BATCH as f64;
    let sum: u64 = steps.iter().sum();
    let mixture = DataPlan::Mixture {
        sources: names.clone(),
        mixture: DomainMixture::proportional(&DOMAINS.map(|(_, s)| s))?,
        batch_size: BATCH,
        seed: d.seed.wrapping_add(2),
    };
    let mut arms = vec![arm(
        "mixture",
        "mixture",
        vec![d.pretrain_phase(), PhaseSpec::new("mixture", mixture, ScheduleSpec::cosine_fit(ETA_MAX, ETA_MIN, WARMUP_PCT, sum), sum)],
        &eval,
    )];
    for (label, alpha) in [("sequential-reservoir", RESERVOIR_ALPHA), ("sequential-no-replay", 0.0)] {
        let mut phases = vec![d.pretrain_phase()];
        let mut state = ReservoirState::new(alpha)?.update(d.pretrain() as f64 * window)?;
        let mut earlier = vec!["d0".to_string()];
        for (k, n) in names.iter().enumerate() {
            let plan = if alpha > 0.0 { MixPlan::from_reservoir(n, &earlier, &state, BATCH)? } else { MixPlan::plain(n, BATCH) };
            phases.push(PhaseSpec::new(n, DataPlan::Mix(plan), ScheduleSpec::cosine_fit(ETA_MAX, ETA_MIN, WARMUP_PCT, steps[k]), steps[k]));
            state = state.update(steps[k] as f64 * window)?;
            earlier.push(n.clone());
        }
        arms.push(arm(label, "sequential", phases, &eval));
    }
    let mut spec = d.experiment("domain-incremental", corpora, &eval, arms, Vec::new());
    spec.eval_windows = 1000;
    spec.train.dense_until = 0;
    Ok(spec)
}
