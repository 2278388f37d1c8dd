use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::experiment::Metric;
use super::runner::{ArmResult, ExperimentResult};
use crate::error::{CtpError, Result};
use crate::trainer::final_loss_summary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub group: String,
    pub final_loss: BTreeMap<String, f64>,
    pub avg: f64,
    pub steps: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub experiment: String,
    pub datasets: Vec<String>,
    pub arms: Vec<ArmSummary>,
    pub checks: Vec<CheckResult>,
}

impl ComparisonReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Plain-text table of final losses followed by check outcomes.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let width = self.arms.iter().map(|a| a.name.len()).max().unwrap_or(3).max(3);
        writeln!(s, "experiment: {}", self.experiment).unwrap();
        write!(s, "{:width$}", "arm").unwrap();
        for d in &self.datasets {
            write!(s, " {d:>10}").unwrap();
        }
        writeln!(s, " {:>10}", "AVG").unwrap();
        for a in &self.arms {
            write!(s, "{:width$}", a.name).unwrap();
            for d in &self.datasets {
                write!(s, " {:>10.4}", a.final_loss[d]).unwrap();
            }
            writeln!(s, " {:>10.4}", a.avg).unwrap();
        }
        for c in &self.checks {
            writeln!(s, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).unwrap();
        }
        s
    }
}

/// Summary window for an arm: the configured window, shortened to fit a short final phase.
fn summary_window(result: &ExperimentResult, arm: &ArmResult) -> (u64, u64) {
    let stride = result.spec.train.summary_stride.max(1);
    let steps = arm.last().rows.last().map_or(0, |r| r.phase_step);
    let window = result.spec.train.summary_window.min(steps);
    ((window / stride).max(1) * stride, stride)
}

pub fn final_losses(result: &ExperimentResult, arm: &ArmResult) -> Result<BTreeMap<String, f64>> {
    let (window, stride) = summary_window(result, arm);
    final_loss_summary(arm.last(), window, stride).map_err(|e| CtpError::Arm { arm: arm.name.clone(), source: Box::new(e) })
}

fn avg(arm: &ArmResult, finals: &BTreeMap<String, f64>) -> f64 {
    arm.avg_over.iter().map(|d| finals[d]).sum::<f64>() / arm.avg_over.len().max(1) as f64
}

fn until(arm: &ArmResult, fraction: f64) -> u64 {
    let steps = arm.last().rows.last().map_or(0, |r| r.phase_step);
    (fraction * steps as f64).round() as u64
}

pub fn metric_value(result: &ExperimentResult, metric: &Metric) -> Result<f64> {
    match metric {
        Metric::Final { arm, dataset } => {
            let a = result.arm(arm)?;
            final_losses(result, a)?
                .get(dataset)
                .copied()
                .ok_or_else(|| CtpError::UnknownSource(dataset.clone()))
        }
        Metric::Avg { arm } => {
            let a = result.arm(arm)?;
            Ok(avg(a, &final_losses(result, a)?))
        }
        Metric::Peak { arm, dataset, fraction } => {
            let a = result.arm(arm)?;
            a.last().peak(dataset, until(a, *fraction))
        }
        Metric::PeakExcess { arm, baseline, dataset, fraction } => {
            let (a, b) = (result.arm(arm)?, result.arm(baseline)?);
            let limit = until(a, *fraction);
            let base: BTreeMap<u64, f64> = b.last().series(dataset)?.into_iter().collect();
            a.last()
                .series(dataset)?
                .into_iter()
                .filter(|(k, _)| *k <= limit)
                .filter_map(|(k, l)| base.get(&k).map(|bl| l - bl))
                .reduce(f64::max)
                .ok_or_else(|| CtpError::InsufficientHistory(format!("no shared log steps between `{arm}` and `{baseline}`")))
        }
    }
}

/// Summaries and check outcomes, computed from the run records alone.
pub fn build_report(result: &ExperimentResult) -> Result<ComparisonReport> {
    let mut arms = Vec::with_capacity(result.arms.len());
    for a in &result.arms {
        let finals = final_losses(result, a)?;
        let last = a.last().rows.last().ok_or_else(|| CtpError::InsufficientHistory(format!("arm `{}` logged nothing", a.name)))?;
        arms.push(ArmSummary {
            name: a.name.clone(),
            group: a.group.clone(),
            avg: avg(a, &finals),
            final_loss: finals,
            steps: last.step,
            tokens: last.tokens,
        });
    }
    let mut checks = Vec::with_capacity(result.spec.checks.len());
    for c in &result.spec.checks {
        let values = c.rule.metrics().into_iter().map(|m| metric_value(result, m)).collect::<Result<Vec<_>>>()?;
        let (passed, detail) = c.rule.judge(&values);
        checks.push(CheckResult { name: c.name.clone(), passed, detail });
    }
    Ok(ComparisonReport {
        experiment: result.spec.name.clone(),
        datasets: result.spec.eval.clone(),
        arms,
        checks,
    })
}
