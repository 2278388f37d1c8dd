//! Reservoir proportions against a token-level simulation of replay.

use ctp::mixer::ReservoirState;
use ctp::rng::StreamRng;

/// Trains on each dataset in turn. From dataset 1 on, an `alpha` share of
/// each dataset's token budget is replaced by tokens drawn uniformly from
/// everything seen before it. Returns the fraction of seen tokens per source
/// at the start of the last dataset.
fn simulate(sizes: &[usize], alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut seen: Vec<usize> = Vec::new();
    for (k, &s) in sizes.iter().enumerate().take(sizes.len() - 1) {
        let replay = if k == 0 { 0 } else { (alpha * s as f64).round() as usize };
        let frozen = seen.len();
        let mut drawn = Vec::with_capacity(replay);
        for _ in 0..replay {
            drawn.push(seen[(rng.next_u64() % frozen as u64) as usize]);
        }
        seen.extend(drawn);
        seen.extend(std::iter::repeat_n(k, s - replay));
    }
    let mut counts = vec![0usize; sizes.len() - 1];
    for &j in &seen {
        counts[j] += 1;
    }
    counts.iter().map(|&c| c as f64 / seen.len() as f64).collect()
}

#[test]
fn recurrence_matches_simulated_replay() {
    let mut rng = StreamRng::new(99);
    for trial in 0..8 {
        let n = 3 + (trial % 4);
        let sizes: Vec<usize> = (0..n).map(|_| 20_000 + (rng.next_u64() % 60_000) as usize).collect();
        let alpha = [0.05, 0.25, 0.5, 0.8][trial % 4];
        let sim = simulate(&sizes, alpha, &mut rng);
        let f: Vec<f64> = sizes[..n - 1].iter().map(|&s| s as f64).collect();
        let state = ReservoirState::from_sizes(alpha, &f).unwrap();
        let p = state.proportions();
        assert_eq!(p.len(), sim.len());
        for (j, (a, b)) in p.iter().zip(&sim).enumerate() {
            assert!((a - b).abs() < 0.01, "trial {trial} source {j}: recurrence {a} simulation {b}");
        }
    }
}
