//! Tiny fixed-context next-token model.
//!
//! `logits = W2 · gelu(W1 · [E[x_1]; ...; E[x_L]] + b1) + b2`, trained with mean
//! cross-entropy. Gradients are derived by hand for each layer. All parameters
//! live in one flat `f64` buffer so the optimizer can treat them uniformly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{CtpError, Result};
use crate::rng::StreamRng;

const GELU_C: f64 = 0.7978845608;
const GELU_K: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab_size, self.context_length, self.embed_dim, self.hidden_dim].contains(&0) {
            return Err(CtpError::InvalidSpec("model dimensions must all be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.context_length * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        v * d + (self.input_dim() * h + h) + (h * v + v)
    }

    pub fn range(&self, tensor: Tensor) -> Range<usize> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let sizes = [v * d, h * self.input_dim(), h, v * h, v];
        let idx = tensor as usize;
        let start: usize = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    /// `V x d` token embeddings.
    Embed = 0,
    /// `h x (L*d)` hidden weights.
    W1 = 1,
    B1 = 2,
    /// `V x h` output weights.
    W2 = 3,
    B2 = 4,
}

impl Tensor {
    pub const ALL: [Tensor; 5] = [Tensor::Embed, Tensor::W1, Tensor::B1, Tensor::W2, Tensor::B2];

    pub fn is_bias(self) -> bool {
        matches!(self, Tensor::B1 | Tensor::B2)
    }
}

/// Model parameters, or a gradient with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    config: ModelConfig,
    data: Vec<f64>,
}

pub type ModelState = Params;

impl Params {
    pub fn zeros(config: ModelConfig) -> Self {
        Self { config, data: vec![0.0; config.param_count()] }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. The
    /// embedding table is a lookup (fan-in 1).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = StreamRng::new(config.init_seed);
        let fan_ins = [(Tensor::Embed, 1), (Tensor::W1, config.input_dim()), (Tensor::W2, config.hidden_dim)];
        for (tensor, fan_in) in fan_ins {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in p.tensor_mut(tensor) {
                *w = rng.symmetric(bound);
            }
        }
        Ok(p)
    }

    pub fn from_vec(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        if data.len() != config.param_count() {
            return Err(CtpError::ConfigMismatch(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                data.len()
            )));
        }
        Ok(Self { config, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.config.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.config.range(t);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_tokens(&self, context: &[u16]) -> Result<()> {
        if context.len() != self.config.context_length {
            return Err(CtpError::InvalidSpec(format!(
                "context has {} tokens, model expects {}",
                context.len(),
                self.config.context_length
            )));
        }
        if let Some(&t) = context.iter().find(|&&t| usize::from(t) >= self.config.vocab_size) {
            return Err(CtpError::OutOfRange { what: "token", value: t.into(), limit: self.config.vocab_size as u64 - 1 });
        }
        Ok(())
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Concatenated context embeddings.
    pub z: Vec<f64>,
    /// Hidden pre-activations.
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(params: &Params, context: &[u16]) -> Result<Activations> {
    params.check_tokens(context)?;
    let cfg = params.config;
    let (d, h, v, n) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.input_dim());
    let embed = params.tensor(Tensor::Embed);
    let mut z = Vec::with_capacity(n);
    for &tok in context {
        let t = usize::from(tok);
        z.extend_from_slice(&embed[t * d..(t + 1) * d]);
    }
    let w1 = params.tensor(Tensor::W1);
    let pre: Vec<f64> = params
        .tensor(Tensor::B1)
        .iter()
        .enumerate()
        .map(|(j, b)| b + dot(&w1[j * n..(j + 1) * n], &z))
        .collect();
    let hidden: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
    let w2 = params.tensor(Tensor::W2);
    let logits = params
        .tensor(Tensor::B2)
        .iter()
        .enumerate()
        .map(|(k, b)| b + dot(&w2[k * h..(k + 1) * h], &hidden))
        .collect();
    debug_assert_eq!(w2.len(), v * h);
    Ok(Activations { z, pre, hidden, logits })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln sum exp(logits)`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Negative log-likelihood of `window.target` in nats.
pub fn example_loss(params: &Params, window: &Window<'_>) -> Result<f64> {
    let act = forward(params, window.context)?;
    Ok(log_sum_exp(&act.logits) - act.logits[usize::from(window.target)])
}

/// Mean cross-entropy over `batch` and its gradient. Examples are accumulated
/// in batch order.
pub fn loss_and_grad(params: &Params, batch: &[Window<'_>]) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return Err(CtpError::InvalidSpec("empty batch".into()));
    }
    let cfg = params.config;
    let (d, h, v, n) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size, cfg.input_dim());
    let scale = 1.0 / batch.len() as f64;
    let mut grad = Params::zeros(cfg);
    let mut total = 0.0;
    let w1 = params.tensor(Tensor::W1);
    let w2 = params.tensor(Tensor::W2);
    let r_embed = cfg.range(Tensor::Embed);
    let r_w1 = cfg.range(Tensor::W1);
    let r_b1 = cfg.range(Tensor::B1);
    let r_w2 = cfg.range(Tensor::W2);
    let r_b2 = cfg.range(Tensor::B2);
    let mut dlogits = vec![0.0; v];
    let mut dpre = vec![0.0; h];
    let mut dz = vec![0.0; n];

    for (index, ex) in batch.iter().enumerate() {
        let target = usize::from(ex.target);
        if target >= v {
            return Err(CtpError::OutOfRange { what: "target token", value: target as u64, limit: v as u64 - 1 });
        }
        let act = forward(params, ex.context)?;
        let lse = log_sum_exp(&act.logits);
        let loss = lse - act.logits[target];
        if !loss.is_finite() {
            return Err(CtpError::Numerical { index, detail: format!("loss {loss}") });
        }
        total += loss;

        for (g, l) in dlogits.iter_mut().zip(&act.logits) {
            *g = (l - lse).exp() * scale;
        }
        dlogits[target] -= scale;

        let g = grad.as_mut_slice();
        for (gb, dl) in g[r_b2.clone()].iter_mut().zip(&dlogits) {
            *gb += dl;
        }
        let gw2 = &mut g[r_w2.clone()];
        for (k, &dl) in dlogits.iter().enumerate() {
            for (gw, a) in gw2[k * h..(k + 1) * h].iter_mut().zip(&act.hidden) {
                *gw += dl * a;
            }
        }
        dpre.iter_mut().for_each(|x| *x = 0.0);
        for (k, &dl) in dlogits.iter().enumerate() {
            for (dp, w) in dpre.iter_mut().zip(&w2[k * h..(k + 1) * h]) {
                *dp += dl * w;
            }
        }
        for (dp, &x) in dpre.iter_mut().zip(&act.pre) {
            *dp *= gelu_grad(x);
        }
        for (gb, dp) in g[r_b1.clone()].iter_mut().zip(&dpre) {
            *gb += dp;
        }
        let gw1 = &mut g[r_w1.clone()];
        for (j, &dp) in dpre.iter().enumerate() {
            for (gw, zi) in gw1[j * n..(j + 1) * n].iter_mut().zip(&act.z) {
                *gw += dp * zi;
            }
        }
        dz.iter_mut().for_each(|x| *x = 0.0);
        for (j, &dp) in dpre.iter().enumerate() {
            for (dzi, w) in dz.iter_mut().zip(&w1[j * n..(j + 1) * n]) {
                *dzi += dp * w;
            }
        }
        let ge = &mut g[r_embed.clone()];
        for (slot, &tok) in ex.context.iter().enumerate() {
            let t = usize::from(tok);
            for (ge, dzi) in ge[t * d..(t + 1) * d].iter_mut().zip(&dz[slot * d..(slot + 1) * d]) {
                *ge += dzi;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Mean NLL over `windows`, summed in order.
pub fn eval_loss(params: &Params, windows: &[Window<'_>]) -> Result<f64> {
    if windows.is_empty() {
        return Err(CtpError::InvalidSpec("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for w in windows {
        total += example_loss(params, w)?;
    }
    Ok(total / windows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> ModelConfig {
        ModelConfig { vocab_size: 7, context_length: 3, embed_dim: 2, hidden_dim: 5, init_seed: seed }
    }

    fn batch() -> Vec<(Vec<u16>, u16)> {
        vec![(vec![0, 1, 2], 3), (vec![6, 6, 0], 1), (vec![4, 2, 5], 6)]
    }

    fn windows(b: &[(Vec<u16>, u16)]) -> Vec<Window<'_>> {
        b.iter().map(|(c, t)| Window { context: c, target: *t }).collect()
    }

    #[test]
    fn parameter_count() {
        let c = cfg(0);
        assert_eq!(c.param_count(), 7 * 2 + (6 * 5 + 5) + (5 * 7 + 7));
        assert_eq!(c.range(Tensor::B2).end, c.param_count());
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let p = Params::zeros(cfg(0));
        let b = batch();
        let (loss, grad) = loss_and_grad(&p, &windows(&b)).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-15);
        let mut expected = vec![3.0 / 7.0 / 3.0; 7];
        for (_, t) in &b {
            expected[*t as usize] -= 1.0 / 3.0;
        }
        for (g, e) in grad.tensor(Tensor::B2).iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15);
        }
        assert!((eval_loss(&p, &windows(&b)).unwrap() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn repeated_tokens_repeat_embedding_blocks() {
        let p = Params::init(cfg(3)).unwrap();
        let act = forward(&p, &[4, 4, 1]).unwrap();
        assert_eq!(act.z[0..2], act.z[2..4]);
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let p = Params::init(cfg(9)).unwrap();
        let b = batch();
        let mut doubled = b.clone();
        doubled.extend(b.clone());
        let (l1, g1) = loss_and_grad(&p, &windows(&b)).unwrap();
        let (l2, g2) = loss_and_grad(&p, &windows(&doubled)).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn eval_ignores_order() {
        let p = Params::init(cfg(5)).unwrap();
        let b = batch();
        let mut rev = windows(&b);
        let fwd = eval_loss(&p, &rev).unwrap();
        rev.reverse();
        assert!((fwd - eval_loss(&p, &rev).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = Params::zeros(cfg(0));
        assert!(forward(&p, &[0, 1, 7]).is_err());
        assert!(forward(&p, &[0, 1]).is_err());
        let ctx = [0u16, 1, 2];
        assert!(loss_and_grad(&p, &[Window { context: &ctx, target: 9 }]).is_err());
        assert!(loss_and_grad(&p, &[]).is_err());
    }

    #[test]
    fn non_finite_loss_reports_index() {
        let mut p = Params::zeros(cfg(0));
        p.tensor_mut(Tensor::B2)[0] = f64::INFINITY;
        let b = batch();
        match loss_and_grad(&p, &windows(&b)) {
            Err(CtpError::Numerical { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Params::init(cfg(1)).unwrap();
        assert_eq!(a, Params::init(cfg(1)).unwrap());
        assert_ne!(a, Params::init(cfg(2)).unwrap());
        assert!(a.tensor(Tensor::B1).iter().all(|&b| b == 0.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.tensor(Tensor::W1).iter().all(|w| w.abs() < bound));
    }
}
