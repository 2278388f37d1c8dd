use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::experiment::ExperimentSpec;
use super::plot::emit_plots;
use super::report::{build_report, ComparisonReport};
use crate::data::{gen_corpus, Corpus, CorpusSpec};
use crate::error::{CtpError, Result};
use crate::mixer::Sources;
use crate::trainer::{continue_from, run_phase, start_fresh, Checkpoint, EvalSet, PhaseSpec, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub group: String,
    pub avg_over: Vec<String>,
    /// One record per phase, in order.
    pub records: Vec<RunRecord>,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

impl ArmResult {
    pub fn last(&self) -> &RunRecord {
        self.records.last().expect("arms have at least one phase")
    }

    /// All phases' rows as one CSV, steps counted globally.
    pub fn to_csv(&self) -> String {
        let mut merged = self.records[0].clone();
        merged.rows = self.records.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        merged.to_csv()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn arm(&self, name: &str) -> Result<&ArmResult> {
        self.arms
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CtpError::InvalidSpec(format!("no arm named `{name}`")))
    }
}

type PhaseOutcome = Rc<(Checkpoint, RunRecord)>;

/// Runs experiments, memoising generated corpora and completed phase prefixes
/// so arms (and experiments) that share a history train it once.
#[derive(Default)]
pub struct Runner {
    corpora: HashMap<String, Rc<Corpus>>,
    phases: HashMap<String, PhaseOutcome>,
    pub phases_run: usize,
    pub phases_reused: usize,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn corpus(&mut self, spec: &CorpusSpec) -> Result<Rc<Corpus>> {
        let key = serde_json::to_string(spec)?;
        if let Some(c) = self.corpora.get(&key) {
            return Ok(c.clone());
        }
        log::info!("generating corpus `{}` ({} train tokens)", spec.name, spec.train_tokens);
        let c = Rc::new(gen_corpus(spec)?);
        self.corpora.insert(key, c.clone());
        Ok(c)
    }

    pub fn run(&mut self, spec: &ExperimentSpec) -> Result<ExperimentResult> {
        spec.validate()?;
        let corpora: Vec<Rc<Corpus>> = spec.corpora.iter().map(|c| self.corpus(c)).collect::<Result<_>>()?;
        let by_name: BTreeMap<&str, &Corpus> = corpora.iter().map(|c| (c.spec.name.as_str(), c.as_ref())).collect();
        let sources: Sources = by_name.iter().map(|(n, c)| (n.to_string(), &c.train)).collect();
        let l = spec.model.context_length;
        let eval_sets: Vec<EvalSet> = spec
            .eval
            .iter()
            .map(|e| EvalSet::from_stream(e.clone(), &by_name[e.as_str()].val, l, spec.eval_windows))
            .collect::<Result<_>>()?;
        let eval_specs: Vec<&CorpusSpec> = spec.eval.iter().map(|e| &by_name[e.as_str()].spec).collect();
        let context = json!({
            "model": spec.model,
            "train": spec.train,
            "eval": eval_specs,
            "eval_windows": spec.eval_windows,
        });

        let mut arms = Vec::with_capacity(spec.arms.len());
        for arm in &spec.arms {
            let mut prev: Option<PhaseOutcome> = None;
            let mut records = Vec::with_capacity(arm.phases.len());
            for i in 0..arm.phases.len() {
                let key = prefix_key(&context, &arm.phases[..=i], &by_name)?;
                let outcome = match self.phases.get(&key) {
                    Some(o) => {
                        self.phases_reused += 1;
                        o.clone()
                    }
                    None => {
                        let phase = arm.phases[i].clone();
                        log::info!("arm `{}`: phase `{}` ({} steps)", arm.name, phase.name, phase.steps);
                        let wrap = |e: CtpError| CtpError::Arm { arm: arm.name.clone(), source: Box::new(e) };
                        let bound = match &prev {
                            None => start_fresh(spec.model, phase),
                            Some(o) => continue_from(&o.0, phase),
                        }
                        .map_err(wrap)?;
                        let o = Rc::new(run_phase(bound, &sources, &eval_sets, &spec.train).map_err(wrap)?);
                        self.phases_run += 1;
                        self.phases.insert(key, o.clone());
                        o
                    }
                };
                let mut record = outcome.1.clone();
                record.phase = arm.phases[i].name.clone();
                records.push(record);
                prev = Some(outcome);
            }
            arms.push(ArmResult {
                name: arm.name.clone(),
                group: arm.group.clone(),
                avg_over: arm.avg_over.clone(),
                records,
                checkpoint: prev.map(|o| o.0.clone()),
            });
        }
        Ok(ExperimentResult { spec: spec.clone(), arms })
    }
}

/// Cache key of a phase prefix: everything that influences its outcome, minus names.
fn prefix_key(context: &serde_json::Value, phases: &[PhaseSpec], corpora: &BTreeMap<&str, &Corpus>) -> Result<String> {
    let mut used = BTreeMap::new();
    let anon: Vec<PhaseSpec> = phases
        .iter()
        .map(|p| {
            for s in p.data.source_names() {
                used.insert(s.clone(), &corpora[s.as_str()].spec);
            }
            PhaseSpec { name: String::new(), ..p.clone() }
        })
        .collect();
    Ok(serde_json::to_string(&json!({ "context": context, "sources": used, "phases": anon }))?)
}

/// Writes `spec.json`, `result.json`, `report.json`, `report.txt`, one CSV and
/// checkpoint per arm under `arms/`, and SVG plots under `plots/`.
pub fn write_outputs(result: &ExperimentResult, report: &ComparisonReport, out: &Path) -> Result<()> {
    let arms_dir = out.join("arms");
    std::fs::create_dir_all(&arms_dir)?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(&result.spec)?)?;
    std::fs::write(out.join("result.json"), serde_json::to_string(result)?)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(out.join("report.txt"), report.render())?;
    for arm in &result.arms {
        std::fs::write(arms_dir.join(format!("{}.csv", arm.name)), arm.to_csv())?;
        if let Some(ck) = &arm.checkpoint {
            ck.save(arms_dir.join(format!("{}.ckpt", arm.name)))?;
        }
    }
    write_plots(result, &out.join("plots"))
}

pub fn write_plots(result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let runs: Vec<(String, Vec<RunRecord>)> = result.arms.iter().map(|a| (a.name.clone(), a.records.clone())).collect();
    for (file, svg) in emit_plots(&runs) {
        std::fs::write(dir.join(file), svg)?;
    }
    Ok(())
}

/// Loads a result written by [`write_outputs`] and rebuilds its report.
pub fn load_report(out: &Path) -> Result<(ExperimentResult, ComparisonReport)> {
    let result: ExperimentResult = serde_json::from_slice(&std::fs::read(out.join("result.json"))?)?;
    let report = build_report(&result)?;
    Ok((result, report))
}
