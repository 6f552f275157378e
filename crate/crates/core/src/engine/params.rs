//! Canonical tensor layout and in-memory parameter sets.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::tensor::Real;
use crate::rng;

/// Per-head attention projection kind. Ordered `K < Q < V` (lexicographic).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjKind {
    K,
    Q,
    V,
}

impl ProjKind {
    pub const ALL: [ProjKind; 3] = [ProjKind::K, ProjKind::Q, ProjKind::V];

    pub fn letter(self) -> &'static str {
        match self {
            ProjKind::K => "K",
            ProjKind::Q => "Q",
            ProjKind::V => "V",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "K" => Some(ProjKind::K),
            "Q" => Some(ProjKind::Q),
            "V" => Some(ProjKind::V),
            _ => None,
        }
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

/// What a tensor is, structurally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embed,
    Head,
    Proj { layer: usize, head: usize, kind: ProjKind },
    Out { layer: usize },
    Ff1 { layer: usize },
    Ff2 { layer: usize },
    Ln1 { layer: usize },
    Ln2 { layer: usize },
}

impl TensorRole {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            TensorRole::Embed | TensorRole::Head => None,
            TensorRole::Proj { layer, .. }
            | TensorRole::Out { layer }
            | TensorRole::Ff1 { layer }
            | TensorRole::Ff2 { layer }
            | TensorRole::Ln1 { layer }
            | TensorRole::Ln2 { layer } => Some(layer),
        }
    }

    pub fn is_attention_projection(&self) -> bool {
        matches!(self, TensorRole::Proj { .. } | TensorRole::Out { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn proj_name(layer: usize, head: usize, kind: ProjKind) -> String {
    format!("layer{layer}.head{head}.{kind}")
}

/// Index of every named tensor for one architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub config: ModelConfig,
    specs: Vec<TensorSpec>,
    by_name: BTreeMap<String, usize>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let hd = config.head_dim();
        let mut specs = Vec::new();
        specs.push(TensorSpec {
            name: "embed".into(),
            shape: vec![config.vocab_size, d],
            role: TensorRole::Embed,
        });
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                for kind in [ProjKind::Q, ProjKind::K, ProjKind::V] {
                    specs.push(TensorSpec {
                        name: proj_name(layer, head, kind),
                        shape: vec![d, hd],
                        role: TensorRole::Proj { layer, head, kind },
                    });
                }
            }
            let rest = [
                ("O", vec![d, d], TensorRole::Out { layer }),
                ("ff1", vec![d, config.d_ff], TensorRole::Ff1 { layer }),
                ("ff2", vec![config.d_ff, d], TensorRole::Ff2 { layer }),
                ("ln1", vec![2, d], TensorRole::Ln1 { layer }),
                ("ln2", vec![2, d], TensorRole::Ln2 { layer }),
            ];
            for (suffix, shape, role) in rest {
                specs.push(TensorSpec {
                    name: format!("layer{layer}.{suffix}"),
                    shape,
                    role,
                });
            }
        }
        specs.push(TensorSpec {
            name: "head".into(),
            shape: vec![d, config.vocab_size],
            role: TensorRole::Head,
        });
        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            config: config.clone(),
            specs,
            by_name,
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    fn per_layer(&self) -> usize {
        3 * self.config.n_heads + 5
    }

    pub fn embed(&self) -> usize {
        0
    }

    pub fn head(&self) -> usize {
        self.specs.len() - 1
    }

    pub fn proj(&self, layer: usize, head: usize, kind: ProjKind) -> usize {
        let k = match kind {
            ProjKind::Q => 0,
            ProjKind::K => 1,
            ProjKind::V => 2,
        };
        1 + layer * self.per_layer() + 3 * head + k
    }

    fn tail(&self, layer: usize, off: usize) -> usize {
        1 + layer * self.per_layer() + 3 * self.config.n_heads + off
    }

    pub fn out(&self, layer: usize) -> usize {
        self.tail(layer, 0)
    }
    pub fn ff1(&self, layer: usize) -> usize {
        self.tail(layer, 1)
    }
    pub fn ff2(&self, layer: usize) -> usize {
        self.tail(layer, 2)
    }
    pub fn ln1(&self, layer: usize) -> usize {
        self.tail(layer, 3)
    }
    pub fn ln2(&self, layer: usize) -> usize {
        self.tail(layer, 4)
    }

    /// All tensor indices belonging to transformer block `layer`.
    pub fn layer_tensors(&self, layer: usize) -> std::ops::Range<usize> {
        let start = 1 + layer * self.per_layer();
        start..start + self.per_layer()
    }
}

/// A full set of model tensors (or gradients) in compute precision.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    pub layout: Arc<Layout>,
    pub data: Vec<Vec<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = layout.specs().iter().map(|s| vec![F::zero(); s.numel()]).collect();
        Self { layout, data }
    }

    /// Seeded initialisation: unit-variance embeddings, fan-in scaled
    /// projections, identity layer norms.
    pub fn init(layout: Arc<Layout>, seed: u64) -> Self {
        let cfg = layout.config.clone();
        let mut set = Self::zeros(layout.clone());
        let mut rng = rng::stream(seed, "engine.init");
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for (spec, buf) in layout.specs().iter().zip(set.data.iter_mut()) {
            let std = match spec.role {
                TensorRole::Embed => 1.0,
                TensorRole::Proj { .. } | TensorRole::Ff1 { .. } => 1.0 / (cfg.d_model as f64).sqrt(),
                TensorRole::Out { .. } => residual_scale / (cfg.d_model as f64).sqrt(),
                TensorRole::Ff2 { .. } => residual_scale / (cfg.d_ff as f64).sqrt(),
                TensorRole::Head => 1.0 / (cfg.d_model as f64).sqrt(),
                TensorRole::Ln1 { .. } | TensorRole::Ln2 { .. } => {
                    let d = cfg.d_model;
                    for (i, v) in buf.iter_mut().enumerate() {
                        *v = if i < d { F::one() } else { F::zero() };
                    }
                    continue;
                }
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in buf.iter_mut() {
                // round through f32 so both precisions start from identical weights
                *v = F::of(f64::from(normal.sample(&mut rng) as f32));
            }
        }
        set
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.layout.index_of(name).map(|i| self.data[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<F>> {
        self.layout.index_of(name).map(move |i| &mut self.data[i])
    }

    pub fn convert<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            layout: self.layout.clone(),
            data: self.data.iter().map(|t| super::tensor::convert(t)).collect(),
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in &mut self.data {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet<F>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }
}
