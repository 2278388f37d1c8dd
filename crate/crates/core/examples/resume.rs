//! Pretrains a small model, saves a checkpoint, then continues on a shifted
//! corpus twice: once re-warming and once at a constant low learning rate.

use std::collections::BTreeMap;

use ctp::data::{gen_corpus, CorpusSpec, ShiftKind};
use ctp::mixer::{DataPlan, MixPlan, Sources};
use ctp::model::ModelConfig;
use ctp::schedule::ScheduleSpec;
use ctp::trainer::{continue_from, run_phase, start_fresh, Checkpoint, EvalSet, PhaseSpec, TrainConfig};

fn main() -> ctp::Result<()> {
    let d0 = gen_corpus(&CorpusSpec::new("d0", 64, 7, ShiftKind::Base).with_tokens(1_000_000, 18_000))?;
    let d1 = gen_corpus(&CorpusSpec::new("d1", 64, 7, ShiftKind::StrongShift).with_tokens(700_000, 18_000))?;
    let sources: Sources = BTreeMap::from([("d0".to_string(), &d0.train), ("d1".to_string(), &d1.train)]);
    let evals = vec![EvalSet::from_stream("d0", &d0.val, 8, 1000)?, EvalSet::from_stream("d1", &d1.val, 8, 1000)?];
    let model = ModelConfig { vocab_size: 64, context_length: 8, embed_dim: 8, hidden_dim: 32, init_seed: 1 };
    let cfg = TrainConfig { eval_every: 500, ..TrainConfig::default() };

    let pre = PhaseSpec::new("pretrain", DataPlan::Mix(MixPlan::plain("d0", 32)), ScheduleSpec::cosine_fit(3e-3, 3e-4, 1.0, 3000), 3000);
    let (ckpt, rec) = run_phase(start_fresh(model, pre)?, &sources, &evals, &cfg)?;
    println!("pretrain: d0 {:.4}", rec.rows.last().unwrap().val_loss[0]);

    let path = std::env::temp_dir().join("ctp-example.ckpt");
    ckpt.save(&path)?;
    let ckpt = Checkpoint::load(&path)?;

    let plan = DataPlan::Mix(MixPlan::plain("d1", 32).with_replay("d0", 0.05));
    for (name, schedule) in [
        ("re-warm", ScheduleSpec::cosine_fit(3e-3, 3e-4, 1.0, 2000)),
        ("constant-min", ScheduleSpec::constant(3e-4, 0, None)),
    ] {
        let (_, rec) = run_phase(continue_from(&ckpt, PhaseSpec::new(name, plan.clone(), schedule, 2000))?, &sources, &evals, &cfg)?;
        let last = rec.rows.last().unwrap();
        println!("{name:<13} d0 {:.4}  d1 {:.4}", last.val_loss[0], last.val_loss[1]);
    }
    Ok(())
}
