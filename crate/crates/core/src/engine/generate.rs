//! Autoregressive decoding with a per-layer key/value cache.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{fused_qkv, gelu, layer_norm, positional, validate_tokens};
use super::params::ParamSet;
use super::tensor::matmul;
use super::EngineError;
use crate::corpus::vocab::EOS;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Decode {
    #[default]
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Index of the largest logit; the lowest id wins exact ties.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_k(logits: &[f32], k: usize, rng: &mut rng::LabRng) -> u32 {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.max(1));
    let m = f64::from(logits[idx[0]]);
    let w: Vec<f64> = idx.iter().map(|&i| (f64::from(logits[i]) - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &wi) in idx.iter().zip(&w) {
        if u < wi {
            return i as u32;
        }
        u -= wi;
    }
    *idx.last().expect("k >= 1") as u32
}

/// Inference-only view of a checkpoint in f32 with fused attention weights.
pub struct Generator {
    params: ParamSet<f32>,
    fused: Vec<Vec<f32>>,
    pos: Vec<f32>,
}

struct Cache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl Generator {
    pub fn new(ckpt: &Checkpoint) -> Result<Self, EngineError> {
        let params = ckpt.params::<f32>()?;
        let cfg = &params.layout.config;
        let fused = (0..cfg.n_layers).map(|l| fused_qkv(&params, l)).collect();
        let pos = positional(cfg.max_seq_len, cfg.d_model);
        Ok(Self { params, fused, pos })
    }

    fn step(&self, cache: &mut Cache, token: u32) -> Vec<f32> {
        let layout = &self.params.layout;
        let cfg = &layout.config;
        let (d, hd, nh, dff, vocab) = (
            cfg.d_model,
            cfg.head_dim(),
            cfg.n_heads,
            cfg.d_ff,
            cfg.vocab_size,
        );
        let t = cache.len;
        let embed = &self.params.data[layout.embed()];
        let mut x: Vec<f32> = (0..d)
            .map(|j| embed[token as usize * d + j] + self.pos[t * d + j])
            .collect();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut a = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut rstd = vec![0.0; 1];
        let mut qkv = vec![0.0; 3 * d];
        let mut z = vec![0.0; d];
        let mut att = vec![0.0; d];
        let mut u = vec![0.0; dff];
        let mut f = vec![0.0; d];
        for layer in 0..cfg.n_layers {
            layer_norm(&x, &self.params.data[layout.ln1(layer)], d, &mut a, &mut xhat, &mut rstd);
            matmul(&a, &self.fused[layer], &mut qkv, 1, d, 3 * d);
            cache.k[layer].extend_from_slice(&qkv[d..2 * d]);
            cache.v[layer].extend_from_slice(&qkv[2 * d..]);
            let (kc, vc) = (&cache.k[layer], &cache.v[layer]);
            for h in 0..nh {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut s: Vec<f32> = (0..=t)
                    .map(|j| {
                        let k = &kc[j * d + h * hd..j * d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                    })
                    .collect();
                let m = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in &mut s {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                let out = &mut z[h * hd..(h + 1) * hd];
                out.fill(0.0);
                for (j, p) in s.iter().enumerate() {
                    let p = p / sum;
                    let v = &vc[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            matmul(&z, &self.params.data[layout.out(layer)], &mut att, 1, d, d);
            for (xi, ai) in x.iter_mut().zip(&att) {
                *xi += ai;
            }
            layer_norm(&x, &self.params.data[layout.ln2(layer)], d, &mut a, &mut xhat, &mut rstd);
            matmul(&a, &self.params.data[layout.ff1(layer)], &mut u, 1, d, dff);
            for v in &mut u {
                *v = gelu(*v);
            }
            matmul(&u, &self.params.data[layout.ff2(layer)], &mut f, 1, dff, d);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
        }
        cache.len += 1;
        let mut logits = vec![0.0; vocab];
        matmul(&x, &self.params.data[layout.head()], &mut logits, 1, d, vocab);
        logits
    }

    /// New tokens after `prompt`, excluding the terminating `<eos>`.
    pub fn generate(&self, prompt: &[u32], decode: Decode, max_new: usize) -> Result<Vec<u32>, EngineError> {
        let cfg = &self.params.layout.config;
        if max_new == 0 {
            return Err(EngineError::InvalidArgument("max_new must be >= 1".into()));
        }
        if prompt.len() >= cfg.max_seq_len {
            return Err(EngineError::PromptTooLong {
                len: prompt.len(),
                max: cfg.max_seq_len - 1,
            });
        }
        validate_tokens(&self.params.layout, prompt)?;
        let mut cache = Cache {
            k: vec![Vec::new(); cfg.n_layers],
            v: vec![Vec::new(); cfg.n_layers],
            len: 0,
        };
        let mut logits = Vec::new();
        for &tok in prompt {
            logits = self.step(&mut cache, tok);
        }
        let mut rng = match decode {
            Decode::TopK { seed, .. } => Some(rng::stream(seed, "engine.generate")),
            Decode::Greedy => None,
        };
        let mut out = Vec::new();
        while out.len() < max_new {
            let next = match (decode, rng.as_mut()) {
                (Decode::TopK { k, .. }, Some(r)) => sample_top_k(&logits, k, r),
                _ => argmax(&logits),
            };
            if next == EOS {
                break;
            }
            out.push(next);
            if cache.len >= cfg.max_seq_len || out.len() == max_new {
                break;
            }
            logits = self.step(&mut cache, next);
        }
        Ok(out)
    }
}

pub fn generate(ckpt: &Checkpoint, prompt: &[u32], decode: Decode, max_new: usize) -> Result<Vec<u32>, EngineError> {
    Generator::new(ckpt)?.generate(prompt, decode, max_new)
}
