//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use ctp::data::{gen_corpus, CorpusSpec, ShiftKind, Window};
use ctp::harness::{ArmSpec, ExperimentSpec};
use ctp::mixer::{DataPlan, MixPlan};
use ctp::model::{loss_and_grad, ModelConfig, Params, Tensor};
use ctp::rng::StreamRng;
use ctp::schedule::ScheduleSpec;
use ctp::trainer::{PhaseSpec, TrainConfig};

const COORDS_PER_TENSOR: usize = 20;
const EPS: f64 = 1e-5;

fn batch_loss(params: &Params, batch: &[Window<'_>]) -> f64 {
    loss_and_grad(params, batch).unwrap().0
}

/// Checks 20 coordinates per tensor of a random model config and returns the worst relative error.
pub fn check_config(seed: u64) -> f64 {
    let mut rng = StreamRng::new(seed);
    let pick = |rng: &mut StreamRng, lo: u64, hi: u64| lo + rng.next_u64() % (hi - lo + 1);
    let config = ModelConfig {
        vocab_size: pick(&mut rng, 3, 24) as usize,
        context_length: pick(&mut rng, 1, 6) as usize,
        embed_dim: pick(&mut rng, 1, 6) as usize,
        hidden_dim: pick(&mut rng, 2, 12) as usize,
        init_seed: seed,
    };
    let mut params = Params::init(config).unwrap();
    // Non-zero biases so their gradients are exercised away from the origin.
    for t in [Tensor::B1, Tensor::B2] {
        for b in params.tensor_mut(t) {
            *b = rng.symmetric(0.5);
        }
    }
    let n = 5;
    let tokens: Vec<u16> = (0..n * (config.context_length + 1)).map(|_| (rng.next_u64() % config.vocab_size as u64) as u16).collect();
    let batch: Vec<Window> = tokens
        .chunks(config.context_length + 1)
        .map(|c| Window { context: &c[..config.context_length], target: c[config.context_length] })
        .collect();

    let (_, grad) = loss_and_grad(&params, &batch).unwrap();
    let mut worst: f64 = 0.0;
    for t in Tensor::ALL {
        let range = config.range(t);
        for _ in 0..COORDS_PER_TENSOR.min(range.len()) {
            let i = range.start + (rng.next_u64() % range.len() as u64) as usize;
            let orig = params.as_slice()[i];
            params.as_mut_slice()[i] = orig + EPS;
            let up = batch_loss(&params, &batch);
            params.as_mut_slice()[i] = orig - EPS;
            let down = batch_loss(&params, &batch);
            params.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grad.as_slice()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}


/// Train-stream SHA-256 of 10k-token corpora with transition seed 7.
pub fn golden_cases() -> Vec<(ShiftKind, &'static str)> {
    vec![
        (ShiftKind::Base, "7c3af6276f3e436d12aace65fbe34ddff40b983485c1b2601c17d9a64664c0af"),
        (ShiftKind::WeakShift { lambda: 0.5 }, "4b9cb2c44a82cc210f1b7fd7220550c997d42c6eb255447d2c57e89150470422"),
        (ShiftKind::StrongShift, "64a0f14a56abeb3f44cf57da2b3d0af40ab51daf7025d736e50126d84030a6ac"),
        (ShiftKind::IidSplit { index: 1 }, "82cfd31f90437a5f998660f88696731522bfcc58c639188492e02e3b6df9ff25"),
    ]
}

pub fn golden_spec(shift: ShiftKind) -> CorpusSpec {
    CorpusSpec::new("golden", 64, 7, shift).with_tokens(10_000, 900)
}

/// `(shift, expected, actual)` for every golden case.
pub fn golden_checksums() -> Vec<(ShiftKind, &'static str, String)> {
    golden_cases()
        .into_iter()
        .map(|(shift, want)| {
            let got = gen_corpus(&golden_spec(shift)).unwrap().train.checksum();
            (shift, want, got)
        })
        .collect()
}

// Tiny two-corpus experiment for reproducibility checks.

pub fn model() -> ModelConfig {
    ModelConfig { vocab_size: 16, context_length: 4, embed_dim: 4, hidden_dim: 8, init_seed: 3 }
}

pub fn corpus(name: &str, shift: ShiftKind) -> CorpusSpec {
    CorpusSpec::new(name, 16, 11, shift).with_tokens(60_000, 2_000)
}

pub fn train() -> TrainConfig {
    TrainConfig { eval_every: 20, dense_until: 30, dense_every: 5, summary_window: 40, summary_stride: 10, ..TrainConfig::default() }
}

pub fn small_spec() -> ExperimentSpec {
    let pre = PhaseSpec::new("pre", DataPlan::Mix(MixPlan::plain("a", 8)), ScheduleSpec::cosine(1e-2, 1e-3, 5, 115), 120);
    let cont = |x: f64| {
        let data = DataPlan::Mix(MixPlan::plain("b", 8).with_replay("a", x));
        PhaseSpec::new("cont", data, ScheduleSpec::cosine(1e-2, 1e-3, 2, 78), 80)
    };
    let arm = |name: &str, phases| ArmSpec { name: name.into(), group: String::new(), phases, avg_over: vec!["a".into(), "b".into()] };
    ExperimentSpec {
        name: "tiny".into(),
        seed: 0,
        model: model(),
        train: train(),
        corpora: vec![corpus("a", ShiftKind::Base), corpus("b", ShiftKind::StrongShift)],
        eval: vec!["a".into(), "b".into()],
        eval_windows: 100,
        arms: vec![
            arm("replay-0", vec![pre.clone(), cont(0.0)]),
            arm("replay-25", vec![pre.clone(), cont(0.25)]),
            arm("replay-0-again", vec![pre, cont(0.0)]),
        ],
        checks: Vec::new(),
    }
}

pub fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "arms", "plots"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

