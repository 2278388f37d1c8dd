//! Learning-rate schedules.
//!
//! Two families are supported:
//!
//! * linear warmup followed by a cosine decay from `eta_max` to `eta_min`
//!   ([`ScheduleKind::CosineDecay`]);
//! * four-phase "infinite" schedules: warmup, a one-time cooldown from
//!   `eta_max` to `eta_const` (cosine or inverse-square-root shaped), an
//!   arbitrarily long constant phase, and a short exponential anneal down to
//!   `eta_min`.
//!
//! Phases occupy half-open step intervals; a boundary step belongs to the later
//! phase, except that step 0 is always `Warmup`. All arithmetic is `f64`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    CosineDecay,
    InfiniteCosine,
    InfiniteInvSqrt,
    /// Linear warmup to `eta_max`, then flat at `eta_max`.
    Constant,
}

impl ScheduleKind {
    pub fn is_infinite(self) -> bool {
        matches!(self, Self::InfiniteCosine | Self::InfiniteInvSqrt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Cooldown,
    Constant,
    Annealing,
    Decay,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Cooldown => "cooldown",
            Self::Constant => "constant",
            Self::Annealing => "annealing",
            Self::Decay => "decay",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Warmup => 0,
            Self::Cooldown => 1,
            Self::Constant => 2,
            Self::Annealing => 3,
            Self::Decay => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Warmup,
            1 => Self::Cooldown,
            2 => Self::Constant,
            3 => Self::Annealing,
            4 => Self::Decay,
            _ => return None,
        })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_steepness() -> f64 {
    10.0
}

/// Full parameterization of a learning-rate schedule, in steps.
///
/// For `CosineDecay`, `anneal_steps` is the length of the cosine decay. For
/// `Constant`, `constant_steps` is the flat span after warmup. `constant_steps
/// == None` declares the constant phase open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    #[serde(default)]
    pub eta_const: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub cooldown_steps: u64,
    #[serde(default)]
    pub constant_steps: Option<u64>,
    #[serde(default)]
    pub anneal_steps: u64,
    #[serde(default = "default_steepness")]
    pub invsqrt_steepness: f64,
}

impl ScheduleSpec {
    pub fn cosine(eta_max: f64, eta_min: f64, warmup_steps: u64, decay_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::CosineDecay,
            eta_max,
            eta_min,
            eta_const: 0.0,
            warmup_steps,
            cooldown_steps: 0,
            constant_steps: Some(0),
            anneal_steps: decay_steps,
            invsqrt_steepness: default_steepness(),
        }
    }

    /// Cosine schedule fit to `total_steps`, warming up for `warmup_percent` of them.
    pub fn cosine_fit(eta_max: f64, eta_min: f64, warmup_percent: f64, total_steps: u64) -> Self {
        let warmup = percent_to_steps(warmup_percent, total_steps).min(total_steps);
        Self::cosine(eta_max, eta_min, warmup, total_steps - warmup)
    }

    pub fn constant(eta: f64, warmup_steps: u64, constant_steps: Option<u64>) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            eta_max: eta,
            eta_min: eta,
            eta_const: eta,
            warmup_steps,
            cooldown_steps: 0,
            constant_steps,
            anneal_steps: 0,
            invsqrt_steepness: default_steepness(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn infinite(
        kind: ScheduleKind,
        eta_max: f64,
        eta_min: f64,
        eta_const: f64,
        warmup_steps: u64,
        cooldown_steps: u64,
        constant_steps: Option<u64>,
        anneal_steps: u64,
    ) -> Self {
        Self {
            kind,
            eta_max,
            eta_min,
            eta_const,
            warmup_steps,
            cooldown_steps,
            constant_steps,
            anneal_steps,
            invsqrt_steepness: default_steepness(),
        }
    }

    pub fn with_steepness(mut self, alpha_inv: f64) -> Self {
        self.invsqrt_steepness = alpha_inv;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CtpError::InvalidSpec(format!("schedule: {msg}")));
        let finite = [self.eta_max, self.eta_min, self.eta_const, self.invsqrt_steepness];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.eta_max <= 0.0 {
            return bad("eta_max must be > 0");
        }
        if self.eta_min < 0.0 || self.eta_min > self.eta_max {
            return bad("need 0 <= eta_min <= eta_max");
        }
        match self.kind {
            ScheduleKind::CosineDecay => {
                if self.anneal_steps == 0 {
                    return bad("cosine decay needs anneal_steps >= 1");
                }
            }
            ScheduleKind::InfiniteCosine | ScheduleKind::InfiniteInvSqrt => {
                if !(self.eta_min <= self.eta_const && self.eta_const <= self.eta_max) {
                    return bad("need eta_min <= eta_const <= eta_max");
                }
                if self.eta_const <= 0.0 {
                    return bad("eta_const must be > 0");
                }
                if self.kind == ScheduleKind::InfiniteInvSqrt && self.invsqrt_steepness <= 0.0 {
                    return bad("invsqrt_steepness must be > 0");
                }
            }
            ScheduleKind::Constant => {
                if self.constant_steps == Some(0) && self.warmup_steps == 0 {
                    return bad("empty constant schedule");
                }
            }
        }
        let spans = [self.warmup_steps, self.cooldown_steps, self.constant_steps.unwrap_or(0), self.anneal_steps];
        if spans.iter().try_fold(0u64, |acc, s| acc.checked_add(*s)).is_none() {
            return bad("total step count overflows");
        }
        Ok(())
    }

    /// Step at which the cooldown starts (end of warmup).
    pub fn t_cd(&self) -> u64 {
        self.warmup_steps
    }

    /// Step at which the constant phase starts.
    pub fn t_const(&self) -> u64 {
        match self.kind {
            ScheduleKind::InfiniteCosine | ScheduleKind::InfiniteInvSqrt => self.warmup_steps + self.cooldown_steps,
            _ => self.warmup_steps,
        }
    }

    /// Step at which annealing (or cosine decay) starts, if reachable.
    pub fn t_ann(&self) -> Option<u64> {
        match self.kind {
            ScheduleKind::CosineDecay => Some(self.warmup_steps),
            ScheduleKind::InfiniteCosine | ScheduleKind::InfiniteInvSqrt => {
                self.constant_steps.map(|c| self.t_const() + c)
            }
            ScheduleKind::Constant => None,
        }
    }

    /// Last valid step, or `None` for open-ended schedules.
    pub fn total_steps(&self) -> Option<u64> {
        match self.kind {
            ScheduleKind::Constant => self.constant_steps.map(|c| self.warmup_steps + c),
            _ => self.t_ann().map(|t| t + self.anneal_steps),
        }
    }

    fn check_range(&self, t: u64) -> Result<()> {
        match self.total_steps() {
            Some(end) if t > end => Err(CtpError::OutOfRange { what: "step", value: t, limit: end }),
            _ => Ok(()),
        }
    }

    pub fn phase_of(&self, t: u64) -> Result<Phase> {
        self.check_range(t)?;
        if t == 0 || t < self.warmup_steps {
            return Ok(Phase::Warmup);
        }
        Ok(match self.kind {
            ScheduleKind::CosineDecay => Phase::Decay,
            ScheduleKind::Constant => Phase::Constant,
            ScheduleKind::InfiniteCosine | ScheduleKind::InfiniteInvSqrt => {
                if self.t_ann().is_some_and(|t_ann| t >= t_ann) {
                    Phase::Annealing
                } else if t >= self.t_const() {
                    Phase::Constant
                } else {
                    Phase::Cooldown
                }
            }
        })
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        let phase = self.phase_of(t)?;
        Ok(self.lr_in_phase(phase, t as f64))
    }

    /// Evaluates one phase's closed form at `t`, even outside that phase's
    /// interval. Degenerate (zero-length) spans evaluate to the phase's start value.
    pub fn lr_in_phase(&self, phase: Phase, t: f64) -> f64 {
        let frac = |start: u64, span: u64| if span == 0 { 0.0 } else { (t - start as f64) / span as f64 };
        match phase {
            Phase::Warmup => {
                if self.warmup_steps == 0 {
                    self.eta_max
                } else {
                    self.eta_max * t / self.warmup_steps as f64
                }
            }
            Phase::Decay => {
                let x = frac(self.warmup_steps, self.anneal_steps);
                self.eta_min + (self.eta_max - self.eta_min) / 2.0 * ((PI * x).cos() + 1.0)
            }
            Phase::Cooldown => {
                let x = frac(self.t_cd(), self.cooldown_steps);
                match self.kind {
                    ScheduleKind::InfiniteInvSqrt => {
                        let h = |x: f64| 1.0 / (1.0 + self.invsqrt_steepness * x).sqrt() - 1.0;
                        self.eta_max + (self.eta_const - self.eta_max) / h(1.0) * h(x)
                    }
                    _ => self.eta_const + (self.eta_max - self.eta_const) / 2.0 * (1.0 + (PI * x).cos()),
                }
            }
            Phase::Constant => match self.kind {
                ScheduleKind::Constant => self.eta_max,
                _ => self.eta_const,
            },
            Phase::Annealing => {
                let start = self.t_ann().unwrap_or(u64::MAX);
                let x = frac(start, self.anneal_steps);
                self.eta_const * (self.eta_min / self.eta_const).powf(x)
            }
        }
    }

    /// Latest pre-annealing step of an infinite schedule: the checkpoint to
    /// continue from when more data arrives.
    pub fn resume_point(&self) -> Result<u64> {
        if !self.kind.is_infinite() {
            return Err(CtpError::Unsupported(format!("resume_point on {:?} schedule", self.kind)));
        }
        self.t_ann()
            .ok_or_else(|| CtpError::Unsupported("resume_point on an open-ended constant phase".into()))
    }

    /// Phase-boundary steps in order: `(phase, first step)` for every non-empty phase.
    pub fn boundaries(&self) -> Vec<(Phase, u64)> {
        let mut out = vec![(Phase::Warmup, 0)];
        match self.kind {
            ScheduleKind::CosineDecay => out.push((Phase::Decay, self.warmup_steps)),
            ScheduleKind::Constant => out.push((Phase::Constant, self.warmup_steps)),
            _ => {
                if self.cooldown_steps > 0 {
                    out.push((Phase::Cooldown, self.t_cd()));
                }
                out.push((Phase::Constant, self.t_const()));
                if let Some(t_ann) = self.t_ann() {
                    out.push((Phase::Annealing, t_ann));
                }
            }
        }
        out
    }
}

/// Percent of `total` steps, rounded half up.
pub fn percent_to_steps(percent: f64, total: u64) -> u64 {
    (percent / 100.0 * total as f64 + 0.5).floor() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unbounded {
    Unbounded,
}

/// A phase length given either in steps or as a percentage of a total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Span {
    Steps(u64),
    Percent { percent: f64 },
    Open(Unbounded),
}

impl Default for Span {
    fn default() -> Self {
        Span::Steps(0)
    }
}

impl Span {
    fn resolve(self, total: u64) -> Option<u64> {
        match self {
            Span::Steps(s) => Some(s),
            Span::Percent { percent } => Some(percent_to_steps(percent, total)),
            Span::Open(_) => None,
        }
    }
}

/// Schedule description with spans that may be relative to `total_steps`;
/// the on-disk config format for schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub eta_max: f64,
    pub eta_min: f64,
    #[serde(default)]
    pub eta_const: f64,
    #[serde(default)]
    pub total_steps: u64,
    #[serde(default)]
    pub warmup: Span,
    #[serde(default)]
    pub cooldown: Span,
    #[serde(default)]
    pub constant: Span,
    /// Remaining steps (`total - others`) when omitted for a cosine decay.
    #[serde(default)]
    pub anneal: Option<Span>,
    #[serde(default = "default_steepness")]
    pub invsqrt_steepness: f64,
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<ScheduleSpec> {
        let total = self.total_steps;
        let warmup = self.warmup.resolve(total).ok_or_else(|| bad_span("warmup"))?;
        let cooldown = self.cooldown.resolve(total).ok_or_else(|| bad_span("cooldown"))?;
        let constant = self.constant.resolve(total);
        let anneal = match self.anneal {
            Some(span) => span.resolve(total).ok_or_else(|| bad_span("anneal"))?,
            None => total.saturating_sub(warmup + cooldown + constant.unwrap_or(0)),
        };
        let spec = ScheduleSpec {
            kind: self.kind,
            eta_max: self.eta_max,
            eta_min: self.eta_min,
            eta_const: self.eta_const,
            warmup_steps: warmup,
            cooldown_steps: if self.kind.is_infinite() { cooldown } else { 0 },
            constant_steps: match self.kind {
                ScheduleKind::CosineDecay => Some(0),
                _ => constant,
            },
            anneal_steps: if self.kind == ScheduleKind::Constant { 0 } else { anneal },
            invsqrt_steepness: self.invsqrt_steepness,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn bad_span(name: &str) -> CtpError {
    CtpError::InvalidSpec(format!("schedule: {name} span cannot be unbounded"))
}

/// Writes `step,lr,phase` rows for every step of a bounded schedule (or the
/// first `limit` steps of an open-ended one).
pub fn dump_csv<W: std::io::Write>(spec: &ScheduleSpec, limit: Option<u64>, mut out: W) -> Result<()> {
    spec.validate()?;
    let last = match (spec.total_steps(), limit) {
        (Some(end), Some(l)) => end.min(l),
        (Some(end), None) => end,
        (None, Some(l)) => l,
        (None, None) => {
            return Err(CtpError::InvalidSpec("open-ended schedule needs a step limit".into()));
        }
    };
    writeln!(out, "step,lr,phase")?;
    for t in 0..=last {
        writeln!(out, "{},{},{}", t, spec.lr_at(t)?, spec.phase_of(t)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAX: f64 = 3e-4;
    const MIN: f64 = 3e-5;
    const CONST: f64 = 1.65e-4;

    fn inf(kind: ScheduleKind) -> ScheduleSpec {
        ScheduleSpec::infinite(kind, MAX, MIN, CONST, 10, 60, Some(25), 5)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn cosine_endpoints() {
        let s = ScheduleSpec::cosine(MAX, MIN, 100, 900);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), MAX);
        assert!(rel(s.lr_at(1000).unwrap(), MIN) < 1e-12);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn cosine_midpoint_is_mean() {
        let s = ScheduleSpec::cosine(MAX, MIN, 0, 1000);
        assert!(rel(s.lr_at(500).unwrap(), (MAX + MIN) / 2.0) < 1e-15);
    }

    #[test]
    fn zero_warmup_starts_at_max() {
        let s = ScheduleSpec::cosine(MAX, MIN, 0, 50);
        assert_eq!(s.lr_at(0).unwrap(), MAX);
        assert_eq!(s.phase_of(0).unwrap(), Phase::Warmup);
        assert_eq!(s.phase_of(1).unwrap(), Phase::Decay);
    }

    #[test]
    fn infinite_cosine_cooldown_midpoint() {
        let s = ScheduleSpec::infinite(ScheduleKind::InfiniteCosine, MAX, MIN, CONST, 10, 60, Some(25), 5);
        let mid = s.lr_at(10 + 30).unwrap();
        assert!(rel(mid, 2.325e-4) < 1e-12, "{mid}");
    }

    #[test]
    fn invsqrt_cooldown_endpoints() {
        let s = inf(ScheduleKind::InfiniteInvSqrt);
        assert!(rel(s.lr_at(s.t_cd()).unwrap(), MAX) < 1e-15);
        assert!(rel(s.lr_at(s.t_const()).unwrap(), CONST) < 1e-12);
    }

    #[test]
    fn phase_boundaries() {
        let s = inf(ScheduleKind::InfiniteCosine);
        assert_eq!(s.phase_of(0).unwrap(), Phase::Warmup);
        assert_eq!(s.phase_of(9).unwrap(), Phase::Warmup);
        assert_eq!(s.phase_of(10).unwrap(), Phase::Cooldown);
        assert_eq!(s.phase_of(11).unwrap(), Phase::Cooldown);
        assert_eq!(s.phase_of(70).unwrap(), Phase::Constant);
        assert_eq!(s.phase_of(95).unwrap(), Phase::Annealing);
        assert_eq!(s.phase_of(100).unwrap(), Phase::Annealing);
        assert!(matches!(s.phase_of(101), Err(CtpError::OutOfRange { .. })));
    }

    #[test]
    fn resume_point_sums_spans() {
        let spec = ScheduleConfig {
            kind: ScheduleKind::InfiniteCosine,
            eta_max: MAX,
            eta_min: MIN,
            eta_const: CONST,
            total_steps: 100,
            warmup: Span::Percent { percent: 10.0 },
            cooldown: Span::Percent { percent: 60.0 },
            constant: Span::Percent { percent: 25.0 },
            anneal: Some(Span::Percent { percent: 5.0 }),
            invsqrt_steepness: 10.0,
        }
        .resolve()
        .unwrap();
        assert_eq!(spec.resume_point().unwrap(), 10 + 60 + 25);
        assert_eq!(spec.total_steps(), Some(100));
        assert!(ScheduleSpec::constant(1e-3, 0, None).resume_point().is_err());
        assert!(ScheduleSpec::cosine(MAX, MIN, 1, 10).resume_point().is_err());
    }

    #[test]
    fn open_ended_constant_phase() {
        let s = ScheduleSpec::infinite(ScheduleKind::InfiniteCosine, MAX, MIN, CONST, 5, 10, None, 5);
        assert_eq!(s.total_steps(), None);
        assert_eq!(s.lr_at(1_000_000_000).unwrap(), CONST);
        assert!(s.resume_point().is_err());
    }

    #[test]
    fn percent_rounds_half_up() {
        assert_eq!(percent_to_steps(1.0, 150), 2);
        assert_eq!(percent_to_steps(0.5, 14000), 70);
        assert_eq!(percent_to_steps(1.0, 149), 1);
    }

    #[test]
    fn validation_rejects_bad_orderings() {
        let mut s = inf(ScheduleKind::InfiniteCosine);
        s.eta_const = 4e-4;
        assert!(s.validate().is_err());
        let s = ScheduleSpec::cosine(1e-4, 2e-4, 1, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_json_accepts_steps_percent_and_unbounded() {
        let json = r#"{"kind":"infinite-inv-sqrt","eta_max":3e-4,"eta_min":3e-5,"eta_const":1.65e-4,
            "total_steps":1000,"warmup":{"percent":1},"cooldown":600,"constant":"unbounded","anneal":10}"#;
        let cfg: ScheduleConfig = serde_json::from_str(json).unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.cooldown_steps, 600);
        assert_eq!(s.constant_steps, None);
    }

    #[test]
    fn dump_has_header_and_all_steps() {
        let s = ScheduleSpec::cosine(MAX, MIN, 2, 8);
        let mut buf = Vec::new();
        dump_csv(&s, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,lr,phase");
        assert_eq!(lines.len(), 12);
        assert!(lines[3].ends_with(",decay"));
    }

    fn arb_infinite() -> impl Strategy<Value = ScheduleSpec> {
        (
            prop_oneof![Just(ScheduleKind::InfiniteCosine), Just(ScheduleKind::InfiniteInvSqrt)],
            1e-5f64..1e-2,
            0.0f64..1.0,
            0.0f64..1.0,
            1u64..200,
            1u64..400,
            1u64..200,
            1u64..200,
            0.1f64..50.0,
        )
            .prop_map(|(kind, max, a, b, w, cd, c, ann, steep)| {
                let lo = a.min(b);
                let hi = a.max(b).max(lo + 1e-3);
                let min = max * lo * 0.5;
                let konst = (max * hi).max(min + 1e-12).min(max);
                ScheduleSpec::infinite(kind, max, min, konst, w, cd, Some(c), ann).with_steepness(steep)
            })
    }

    proptest! {
        #[test]
        fn infinite_schedules_are_continuous(s in arb_infinite()) {
            let tol = 1e-12 * s.eta_max;
            let checks = [
                (Phase::Warmup, s.t_cd()),
                (Phase::Cooldown, s.t_const()),
                (Phase::Constant, s.t_ann().unwrap()),
            ];
            for (earlier, t) in checks {
                let left = s.lr_in_phase(earlier, t as f64);
                let right = s.lr_at(t).unwrap();
                prop_assert!((left - right).abs() <= tol, "{earlier:?} at {t}: {left} vs {right}");
            }
            prop_assert!((s.lr_at(s.total_steps().unwrap()).unwrap() - s.eta_min).abs() <= tol);
        }

        #[test]
        fn cooldowns_stay_between_const_and_max(s in arb_infinite()) {
            for t in s.t_cd()..=s.t_const() {
                let lr = s.lr_at(t).unwrap();
                prop_assert!(lr <= s.eta_max * (1.0 + 1e-12) && lr >= s.eta_const * (1.0 - 1e-12));
            }
        }
    }
}
