//! Independent references shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use cftlab::engine::model::{loss_and_grads_params, loss_params};
use cftlab::engine::{Layout, ModelConfig, ParamSet, Sequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn two_layer(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size,
        max_seq_len: 16,
    }
}

/// Seeded weights with layer-norm gains and biases moved off identity.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::<f64>::init(Arc::new(Layout::new(cfg)), seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (spec, buf) in p.layout.clone().specs().iter().zip(p.data.iter_mut()) {
        if spec.name.contains("ln") {
            for v in buf.iter_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn random_batch(vocab: usize, seed: u64) -> Vec<Sequence> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let len = r.random_range(5..9);
            Sequence {
                tokens: (0..len).map(|_| r.random_range(4..vocab as u32)).collect(),
                prompt_len: r.random_range(1..4),
            }
        })
        .collect()
}

pub fn central(p: &mut ParamSet<f64>, t: usize, i: usize, eps: f64, batch: &[&Sequence]) -> f64 {
    let orig = p.data[t][i];
    p.data[t][i] = orig + eps;
    let up = loss_params(p, None, batch).unwrap();
    p.data[t][i] = orig - eps;
    let down = loss_params(p, None, batch).unwrap();
    p.data[t][i] = orig;
    (up - down) / (2.0 * eps)
}

/// Central difference at `eps` with its second-order error cancelled
/// against the estimate at `eps / 2`.
pub fn richardson(p: &mut ParamSet<f64>, t: usize, i: usize, eps: f64, batch: &[&Sequence]) -> f64 {
    (4.0 * central(p, t, i, eps / 2.0, batch) - central(p, t, i, eps, batch)) / 3.0
}

/// Largest relative and absolute gap between analytic and finite-difference
/// gradients over every entry of every tensor, for each seed in `seeds`.
pub fn gradient_check(seeds: std::ops::Range<u64>) -> (f64, f64) {
    let cfg = two_layer(11);
    let eps = 1e-3;
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    for seed in seeds {
        let params = random_params(&cfg, seed);
        let seqs = random_batch(cfg.vocab_size, 100 + seed);
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let analytic = loss_and_grads_params(&params, None, &refs).unwrap().grads;
        let mut p = params.clone();
        for t in 0..p.data.len() {
            for i in 0..p.data[t].len() {
                let numeric = richardson(&mut p, t, i, eps, &refs);
                let a = analytic.data[t][i];
                let gap = (a - numeric).abs();
                worst = worst.max(gap / a.abs().max(numeric.abs()).max(1e-6));
                worst_abs = worst_abs.max(gap);
            }
        }
    }
    (worst, worst_abs)
}

fn layer_norm(x: &[f64], ln: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    (0..d).map(|j| (x[j] - mean) / (var + 1e-5).sqrt() * ln[j] + ln[d + j]).collect()
}

/// `x (1 x rows) · W (rows x cols)`.
fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|c| x.iter().enumerate().map(|(r, v)| v * w[r * cols + c]).sum()).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Position-by-position decoder written for clarity rather than speed.
pub fn naive_logits(p: &ParamSet<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &p.layout.config;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let get = |name: &str| p.get(name).unwrap();
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..d)
                .map(|i| {
                    let angle = t as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                    get("embed")[tok as usize * d + i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect();
    for l in 0..cfg.n_layers {
        let a: Vec<Vec<f64>> = h.iter().map(|x| layer_norm(x, get(&format!("layer{l}.ln1")))).collect();
        let mut z = vec![vec![0.0; d]; tokens.len()];
        for head in 0..nh {
            let proj = |k: &str| -> Vec<Vec<f64>> {
                a.iter().map(|x| vecmat(x, get(&format!("layer{l}.head{head}.{k}")), hd)).collect()
            };
            let (q, k, v) = (proj("Q"), proj("K"), proj("V"));
            for i in 0..tokens.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in 0..hd {
                        z[i][head * hd + c] += e[j] / sum * v[j][c];
                    }
                }
            }
        }
        for i in 0..tokens.len() {
            let att = vecmat(&z[i], get(&format!("layer{l}.O")), d);
            for j in 0..d {
                h[i][j] += att[j];
            }
            let b = layer_norm(&h[i], get(&format!("layer{l}.ln2")));
            let g: Vec<f64> = vecmat(&b, get(&format!("layer{l}.ff1")), cfg.d_ff).into_iter().map(gelu).collect();
            let f = vecmat(&g, get(&format!("layer{l}.ff2")), d);
            for j in 0..d {
                h[i][j] += f[j];
            }
        }
    }
    h.iter().map(|x| vecmat(x, get("head"), cfg.vocab_size)).collect()
}

