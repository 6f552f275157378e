//! Low-rank adapters over attention projections.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Tensor};
use super::config::ModelConfig;
use super::model::AdapterParams;
use super::params::{Layout, TensorRole};
use super::tensor::Real;
use super::EngineError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFactors {
    /// `rows(target) x rank`
    pub a: Tensor,
    /// `rank x cols(target)`
    pub b: Tensor,
}

/// Adapter state; the effective weight of each target is `W + scale * A B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub scale: f32,
    pub factors: BTreeMap<String, AdapterFactors>,
}

/// Every per-head Q/K/V tensor and every output projection.
pub fn attention_targets(config: &ModelConfig) -> Vec<String> {
    Layout::new(config)
        .specs()
        .iter()
        .filter(|s| s.role.is_attention_projection())
        .map(|s| s.name.clone())
        .collect()
}

impl LowRankAdapter {
    /// `A` drawn from N(0, 1/rows), `B = 0`, so the adapter starts as a no-op.
    pub fn new(
        ckpt: &Checkpoint,
        targets: &[String],
        rank: usize,
        scale: f32,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if rank == 0 || rank >= ckpt.config.d_model {
            return Err(EngineError::InvalidAdapter(format!(
                "rank {rank} must be in 1..{}",
                ckpt.config.d_model
            )));
        }
        let mut rng = rng::stream(seed, "engine.adapter");
        let mut factors = BTreeMap::new();
        for name in targets {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| EngineError::InvalidAdapter(format!("target {name} not in checkpoint")))?;
            let (rows, cols) = (t.shape[0], t.shape[1]);
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
            let mut a = Tensor::zeros(vec![rows, rank]);
            for v in &mut a.data {
                *v = normal.sample(&mut rng) as f32;
            }
            factors.insert(
                name.clone(),
                AdapterFactors {
                    a,
                    b: Tensor::zeros(vec![rank, cols]),
                },
            );
        }
        Ok(Self { rank, scale, factors })
    }

    pub fn validate(&self, ckpt: &Checkpoint) -> Result<(), EngineError> {
        if self.rank == 0 || self.rank >= ckpt.config.d_model {
            return Err(EngineError::InvalidAdapter(format!(
                "rank {} must be in 1..{}",
                self.rank, ckpt.config.d_model
            )));
        }
        let layout = ckpt.layout();
        for (name, f) in &self.factors {
            let idx = layout
                .index_of(name)
                .ok_or_else(|| EngineError::InvalidAdapter(format!("target {name} not in checkpoint")))?;
            let spec = &layout.specs()[idx];
            if !matches!(spec.role, TensorRole::Proj { .. } | TensorRole::Out { .. }) {
                return Err(EngineError::InvalidAdapter(format!(
                    "target {name} is not an attention projection"
                )));
            }
            let want_a = vec![spec.shape[0], self.rank];
            let want_b = vec![self.rank, spec.shape[1]];
            if f.a.shape != want_a || f.a.data.len() != want_a.iter().product::<usize>() {
                return Err(EngineError::ShapeMismatch {
                    tensor: format!("{name}.A"),
                    expected: want_a,
                    found: f.a.shape.clone(),
                });
            }
            if f.b.shape != want_b || f.b.data.len() != want_b.iter().product::<usize>() {
                return Err(EngineError::ShapeMismatch {
                    tensor: format!("{name}.B"),
                    expected: want_b,
                    found: f.b.shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn to_params<F: Real>(&self, layout: &Layout) -> AdapterParams<F> {
        let mut a = vec![None; layout.len()];
        let mut b = vec![None; layout.len()];
        for (name, f) in &self.factors {
            if let Some(i) = layout.index_of(name) {
                a[i] = Some(super::tensor::convert::<f32, F>(&f.a.data));
                b[i] = Some(super::tensor::convert::<f32, F>(&f.b.data));
            }
        }
        AdapterParams {
            rank: self.rank,
            scale: F::of(f64::from(self.scale)),
            a,
            b,
        }
    }

    pub(crate) fn update_from<F: Real>(&mut self, layout: &Layout, p: &AdapterParams<F>) {
        for (name, f) in self.factors.iter_mut() {
            let i = layout.index_of(name).expect("validated target");
            if let (Some(a), Some(b)) = (&p.a[i], &p.b[i]) {
                f.a.data = a.iter().map(|v| v.f64() as f32).collect();
                f.b.data = b.iter().map(|v| v.f64() as f32).collect();
            }
        }
    }
}

/// Folds the adapter into its target tensors. Non-target tensors, and
/// target entries whose low-rank delta is exactly zero, keep their bits.
pub fn merge_adapter(ckpt: &Checkpoint, adapter: &LowRankAdapter) -> Result<Checkpoint, EngineError> {
    adapter.validate(ckpt)?;
    let mut out = ckpt.clone();
    let scale = f64::from(adapter.scale);
    let r = adapter.rank;
    for (name, f) in &adapter.factors {
        let t = out.tensors.get_mut(name).expect("validated target");
        let (rows, cols) = (t.shape[0], t.shape[1]);
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += f64::from(f.a.data[i * r + k]) * f64::from(f.b.data[k * cols + j]);
                }
                let delta = scale * acc;
                if delta != 0.0 {
                    let w = &mut t.data[i * cols + j];
                    *w = (f64::from(*w) + delta) as f32;
                }
            }
        }
    }
    out.provenance.parent_checkpoint_id = Some(ckpt.id());
    out.provenance.phase_tag = format!("{}+merged", ckpt.provenance.phase_tag);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn base() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ff: 2,
            vocab_size: 0,
            max_seq_len: 4,
        };
        Checkpoint::zeros(&cfg, &Vocab::build(["a"])).unwrap()
    }

    #[test]
    fn rank_one_outer_product() {
        let c = base();
        let mut factors = BTreeMap::new();
        factors.insert(
            "layer0.O".to_string(),
            AdapterFactors {
                a: Tensor {
                    shape: vec![2, 1],
                    data: vec![1.0, 0.0],
                },
                b: Tensor {
                    shape: vec![1, 2],
                    data: vec![0.0, 2.0],
                },
            },
        );
        let ad = LowRankAdapter {
            rank: 1,
            scale: 1.0,
            factors,
        };
        let m = merge_adapter(&c, &ad).unwrap();
        assert_eq!(m.tensor("layer0.O").unwrap().data, vec![0.0, 2.0, 0.0, 0.0]);
        for (name, t) in &c.tensors {
            if name != "layer0.O" {
                assert!(t.bits_eq(&m.tensors[name]));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = base();
        let mut factors = BTreeMap::new();
        factors.insert(
            "layer0.O".to_string(),
            AdapterFactors {
                a: Tensor::zeros(vec![3, 1]),
                b: Tensor::zeros(vec![1, 2]),
            },
        );
        let ad = LowRankAdapter {
            rank: 1,
            scale: 1.0,
            factors,
        };
        assert!(matches!(
            merge_adapter(&c, &ad),
            Err(EngineError::ShapeMismatch { .. })
        ));
        assert!(LowRankAdapter::new(&c, &["layer0.O".into()], 2, 1.0, 0).is_err());
    }

    #[test]
    fn targets_cover_attention() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            max_seq_len: 4,
        };
        let t = attention_targets(&cfg);
        assert_eq!(t.len(), 2 * (2 * 3 + 1));
        assert!(t.contains(&"layer1.head0.V".to_string()));
        assert!(t.contains(&"layer0.O".to_string()));
    }
}
