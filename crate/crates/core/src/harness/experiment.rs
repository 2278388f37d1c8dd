use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::error::{CtpError, Result};
use crate::mixer::DataPlan;
use crate::model::ModelConfig;
use crate::trainer::{PhaseSpec, TrainConfig};

/// A set of arms sharing corpora, model shape and training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpora: Vec<CorpusSpec>,
    /// Corpora whose validation split is tracked, in column order.
    pub eval: Vec<String>,
    pub eval_windows: usize,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub checks: Vec<Check>,
}

/// One sequence of phases. Arms whose phase lists share a prefix reuse its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub group: String,
    pub phases: Vec<PhaseSpec>,
    /// Datasets averaged into the arm's AVG loss.
    pub avg_over: Vec<String>,
}

/// A scalar read off an arm's final phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum Metric {
    /// Final-loss summary of one dataset.
    Final { arm: String, dataset: String },
    /// Mean of the arm's final losses over its `avg_over` datasets.
    Avg { arm: String },
    /// Highest logged loss within the first `fraction` of the final phase.
    Peak { arm: String, dataset: String, fraction: f64 },
    /// Highest `arm - baseline` loss gap at shared log steps within the first `fraction`.
    PeakExcess { arm: String, baseline: String, dataset: String, fraction: f64 },
}

impl Metric {
    pub fn arms(&self) -> Vec<&str> {
        match self {
            Metric::Final { arm, .. } | Metric::Avg { arm } | Metric::Peak { arm, .. } => vec![arm],
            Metric::PeakExcess { arm, baseline, .. } => vec![arm, baseline],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Metric::Final { arm, dataset } => format!("final[{arm}:{dataset}]"),
            Metric::Avg { arm } => format!("avg[{arm}]"),
            Metric::Peak { arm, dataset, fraction } => format!("peak[{arm}:{dataset}@{:.0}%]", fraction * 100.0),
            Metric::PeakExcess { arm, baseline, dataset, fraction } => {
                format!("excess[{arm}-{baseline}:{dataset}@{:.0}%]", fraction * 100.0)
            }
        }
    }
}

/// Ordinal assertion over metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case")]
pub enum Rule {
    /// Each metric is `<=` the one before it.
    NonIncreasing { metrics: Vec<Metric> },
    /// `a > b`.
    Greater { a: Metric, b: Metric },
    /// `a >= value`.
    AtLeast { a: Metric, value: f64 },
    /// `|a - b| <= tol`.
    WithinAbs { a: Metric, b: Metric, tol: f64 },
    /// `|a - b| <= tol * |b|`.
    WithinRel { a: Metric, b: Metric, tol: f64 },
    /// `(max - min) / min < tol`.
    RelSpan { metrics: Vec<Metric>, tol: f64 },
}

impl Rule {
    pub fn metrics(&self) -> Vec<&Metric> {
        match self {
            Rule::NonIncreasing { metrics } | Rule::RelSpan { metrics, .. } => metrics.iter().collect(),
            Rule::Greater { a, b } | Rule::WithinAbs { a, b, .. } | Rule::WithinRel { a, b, .. } => vec![a, b],
            Rule::AtLeast { a, .. } => vec![a],
        }
    }

    /// Evaluates the rule given metric values in [`Rule::metrics`] order.
    /// Returns pass/fail and a one-line explanation.
    pub fn judge(&self, values: &[f64]) -> (bool, String) {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        match self {
            Rule::NonIncreasing { .. } => (values.windows(2).all(|w| w[1] <= w[0]), format!("non-increasing: [{}]", fmt(values))),
            Rule::Greater { .. } => (values[0] > values[1], format!("{:.4} > {:.4}", values[0], values[1])),
            Rule::AtLeast { value, .. } => (values[0] >= *value, format!("{:.4} >= {value}", values[0])),
            Rule::WithinAbs { tol, .. } => {
                let d = (values[0] - values[1]).abs();
                (d <= *tol, format!("|{:.4} - {:.4}| = {d:.4} <= {tol}", values[0], values[1]))
            }
            Rule::WithinRel { tol, .. } => {
                let r = (values[0] - values[1]).abs() / values[1].abs();
                (r <= *tol, format!("|{:.4} - {:.4}| / {:.4} = {r:.4} <= {tol}", values[0], values[1], values[1]))
            }
            Rule::RelSpan { tol, .. } => {
                let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = values.iter().copied().fold(f64::INFINITY, f64::min);
                let span = (max - min) / min;
                (span < *tol, format!("span {span:.5} < {tol} over [{}]", fmt(values)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub rule: Rule,
}

impl ExperimentSpec {
    pub fn arm(&self, name: &str) -> Option<&ArmSpec> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn corpus(&self, name: &str) -> Option<&CorpusSpec> {
        self.corpora.iter().find(|c| c.name == name)
    }

    /// Moves every seed of this experiment by the same offset so that `seed` becomes the root seed.
    pub fn reseed(&mut self, seed: u64) {
        let delta = seed.wrapping_sub(self.seed);
        self.seed = seed;
        self.model.init_seed = self.model.init_seed.wrapping_add(delta);
        for c in &mut self.corpora {
            c.transition_seed = c.transition_seed.wrapping_add(delta);
        }
        for p in self.arms.iter_mut().flat_map(|a| a.phases.iter_mut()) {
            if let DataPlan::Mixture { seed, .. } = &mut p.data {
                *seed = seed.wrapping_add(delta);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(CtpError::InvalidSpec(format!("experiment `{}`: {m}", self.name)));
        for (i, c) in self.corpora.iter().enumerate() {
            c.validate()?;
            if c.vocab_size as usize > self.model.vocab_size {
                return bad(format!("corpus `{}` vocabulary exceeds the model's", c.name));
            }
            if self.corpora[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("corpus `{}` defined twice", c.name));
            }
        }
        for e in &self.eval {
            if self.corpus(e).is_none() {
                return bad(format!("eval set `{e}` is not a corpus"));
            }
        }
        for (i, arm) in self.arms.iter().enumerate() {
            if self.arms[..i].iter().any(|o| o.name == arm.name) {
                return bad(format!("arm `{}` defined twice", arm.name));
            }
            if arm.phases.is_empty() {
                return bad(format!("arm `{}` has no phases", arm.name));
            }
            for p in &arm.phases {
                p.validate()?;
                for s in p.data.source_names() {
                    if self.corpus(&s).is_none() {
                        return Err(CtpError::UnknownSource(s));
                    }
                }
            }
            for d in &arm.avg_over {
                if !self.eval.contains(d) {
                    return bad(format!("arm `{}` averages over untracked dataset `{d}`", arm.name));
                }
            }
        }
        for check in &self.checks {
            for m in check.rule.metrics() {
                for a in m.arms() {
                    if self.arm(a).is_none() {
                        return bad(format!("check `{}` names unknown arm `{a}`", check.name));
                    }
                }
            }
        }
        Ok(())
    }
}
