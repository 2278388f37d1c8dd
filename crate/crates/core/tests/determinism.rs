//! Reproducibility: reruns, checkpoint round trips and byte-identical outputs.

mod common;

use common::{corpus, files, model, small_spec, train};
use ctp::data::{gen_corpus, ShiftKind};
use ctp::harness::{build_report, write_outputs, Runner};
use ctp::mixer::{DataPlan, MixPlan, Sources};
use ctp::schedule::ScheduleSpec;
use ctp::trainer::{continue_from, final_loss_summary, run_phase, start_fresh, Checkpoint, EvalSet, PhaseSpec};

#[test]
fn reruns_write_identical_bytes() {
    let spec = small_spec();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&d1, &d2] {
        // A fresh runner each time: nothing is shared between the two runs.
        let result = Runner::new().run(&spec).unwrap();
        let report = build_report(&result).unwrap();
        write_outputs(&result, &report, d.path()).unwrap();
    }
    let (a, b) = (files(d1.path()), files(d2.path()));
    assert!(a.contains_key("arms/replay-25.csv") && a.contains_key("plots/val_a.svg") && a.contains_key("arms/replay-0.ckpt"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{k} differs between runs");
    }
}

#[test]
fn identical_arms_share_history_and_summaries() {
    let spec = small_spec();
    let mut runner = Runner::new();
    let result = runner.run(&spec).unwrap();
    // pre once, each distinct continuation once
    assert_eq!((runner.phases_run, runner.phases_reused), (3, 3));
    let report = build_report(&result).unwrap();
    let (x, y) = (report.arm("replay-0").unwrap(), report.arm("replay-0-again").unwrap());
    assert_eq!(x.final_loss, y.final_loss);
    let avg = (x.final_loss["a"] + x.final_loss["b"]) / 2.0;
    assert_eq!(x.avg, avg);
}

#[test]
fn csv_recomputes_the_final_summary() {
    let spec = small_spec();
    let result = Runner::new().run(&spec).unwrap();
    let rec = result.arm("replay-25").unwrap().last();
    let csv = rec.to_csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["step", "lr", "tokens", "a_val_loss", "b_val_loss"]);
    let rows: Vec<(u64, Vec<f64>)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[3..].iter().map(|v| v.parse().unwrap()).collect())
        })
        .collect();
    // Mean over the rows at last, last-10, last-20, last-30.
    let last = rows.last().unwrap().0;
    let picked: Vec<&Vec<f64>> = rows.iter().filter(|(s, _)| [last, last - 10, last - 20, last - 30].contains(s)).map(|(_, v)| v).collect();
    assert_eq!(picked.len(), 4);
    let summary = final_loss_summary(rec, 40, 10).unwrap();
    for (i, d) in ["a", "b"].iter().enumerate() {
        let mean = picked.iter().map(|v| v[i]).sum::<f64>() / 4.0;
        assert!((summary[*d] - mean).abs() < 1e-12, "{d}: {} vs {mean}", summary[*d]);
    }
}

#[test]
fn checkpoint_resume_equals_uninterrupted_training() {
    let (a, b) = (gen_corpus(&corpus("a", ShiftKind::Base)).unwrap(), gen_corpus(&corpus("b", ShiftKind::StrongShift)).unwrap());
    let sources: Sources = [("a".to_string(), &a.train), ("b".to_string(), &b.train)].into_iter().collect();
    let evals = vec![EvalSet::from_stream("a", &a.val, 4, 50).unwrap()];
    let schedule = ScheduleSpec::cosine(1e-2, 1e-3, 4, 36);
    let data = DataPlan::Mix(MixPlan::plain("b", 8).with_replay("a", 0.3));
    let cfg = train();

    let whole = run_phase(start_fresh(model(), PhaseSpec::new("whole", data.clone(), schedule, 40)).unwrap(), &sources, &evals, &cfg).unwrap().0;

    let first = run_phase(start_fresh(model(), PhaseSpec::new("first", data.clone(), schedule, 25)).unwrap(), &sources, &evals, &cfg).unwrap().0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), first.to_bytes());
    let rest = PhaseSpec {
        schedule_offset: Some(25),
        reset_optimizer: false,
        continue_cursors: true,
        ..PhaseSpec::new("rest", data, schedule, 15)
    };
    let resumed = run_phase(continue_from(&loaded, rest).unwrap(), &sources, &evals, &cfg).unwrap().0;

    let bits = |c: &Checkpoint| c.params.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&whole), bits(&resumed));
    assert_eq!(whole.cursors, resumed.cursors);
    assert_eq!(whole.counters.tokens, resumed.counters.tokens);
}
