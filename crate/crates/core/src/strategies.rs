//! Phase-2 mitigation plans: random and most-changed freezing, generative
//! and English replay, and the low-rank adapter baseline.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::mix::replay_count;
use crate::corpus::{self, CorpusError, Dataset, Example, Lang};
use crate::engine::{
    attention_targets, encode_prompt, merge_adapter, train_phase, Checkpoint, Decode, EngineError, Generator,
    Layout, LowRankAdapter, ModelConfig, PhaseOutput, ProjKind, TrainConfig,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("k = {k} exceeds the {available} candidate regions")]
    TooManyRegions { k: usize, available: usize },
    #[error("checkpoints differ in architecture at: {0:?}")]
    ArchitectureMismatch(Vec<String>),
    #[error("strategy {strategy} needs input `{input}`")]
    MissingInput { strategy: String, input: &'static str },
    #[error("replay subset is empty")]
    EmptyReplay,
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("mask file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One freezable parameter region: a whole block, or one per-head
/// projection. Orders by `(layer, kind, head)` with whole layers first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Region {
    pub layer: usize,
    pub proj: Option<(ProjKind, usize)>,
}

impl Region {
    pub fn layer(layer: usize) -> Self {
        Self { layer, proj: None }
    }

    pub fn proj(layer: usize, kind: ProjKind, head: usize) -> Self {
        Self {
            layer,
            proj: Some((kind, head)),
        }
    }

    fn tensor_indices(&self, layout: &Layout) -> Result<Vec<usize>, EngineError> {
        let cfg = &layout.config;
        if self.layer >= cfg.n_layers {
            return Err(EngineError::InvalidMask(format!(
                "layer {} out of range (n_layers = {})",
                self.layer, cfg.n_layers
            )));
        }
        match self.proj {
            None => Ok(layout.layer_tensors(self.layer).collect()),
            Some((kind, head)) => {
                if head >= cfg.n_heads {
                    return Err(EngineError::InvalidMask(format!(
                        "head {head} out of range (n_heads = {})",
                        cfg.n_heads
                    )));
                }
                Ok(vec![layout.proj(self.layer, head, kind)])
            }
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.proj {
            None => write!(f, "layer={}", self.layer),
            Some((kind, head)) => write!(f, "layer={} kind={kind} head={head}", self.layer),
        }
    }
}

impl FromStr for Region {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mut layer, mut kind, mut head) = (None, None, None);
        for part in s.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            match k {
                "layer" => layer = Some(v.parse::<usize>().map_err(|e| format!("layer: {e}"))?),
                "kind" => kind = Some(ProjKind::parse(v).ok_or_else(|| format!("kind must be K, Q or V, got `{v}`"))?),
                "head" => head = Some(v.parse::<usize>().map_err(|e| format!("head: {e}"))?),
                _ => return Err(format!("unknown key `{k}`")),
            }
        }
        let layer = layer.ok_or("missing layer")?;
        match (kind, head) {
            (None, None) => Ok(Region::layer(layer)),
            (Some(k), Some(h)) => Ok(Region::proj(layer, k, h)),
            _ => Err("kind and head must appear together".into()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub heuristic: String,
    pub k: usize,
    pub seed: Option<u64>,
    pub granularity: Option<Granularity>,
    pub sources: Vec<String>,
    pub warnings: Vec<String>,
}

/// Parameter regions excluded from optimizer updates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub regions: BTreeSet<Region>,
    pub provenance: MaskProvenance,
}

impl FreezeMask {
    pub fn new(regions: impl IntoIterator<Item = Region>) -> Self {
        Self {
            regions: regions.into_iter().collect(),
            provenance: MaskProvenance::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), EngineError> {
        self.tensor_indices(&Layout::new(config)).map(|_| ())
    }

    /// Indices into `layout` of every frozen tensor.
    pub fn tensor_indices(&self, layout: &Layout) -> Result<BTreeSet<usize>, EngineError> {
        let mut out = BTreeSet::new();
        for r in &self.regions {
            out.extend(r.tensor_indices(layout)?);
        }
        Ok(out)
    }

    /// Names of every frozen tensor.
    pub fn tensor_names(&self, layout: &Layout) -> Result<Vec<String>, EngineError> {
        Ok(self
            .tensor_indices(layout)?
            .into_iter()
            .map(|i| layout.specs()[i].name.clone())
            .collect())
    }

    /// Replaces every projection region by its whole layer.
    pub fn promote_to_layers(&self) -> FreezeMask {
        let mut m = self.clone();
        m.regions = self.regions.iter().map(|r| Region::layer(r.layer)).collect();
        m.provenance.heuristic = format!("{}+layers", self.provenance.heuristic);
        m
    }

    /// Canonical text: `#`-prefixed provenance header, then one sorted
    /// region per line.
    pub fn to_text(&self) -> String {
        let p = &self.provenance;
        let mut s = format!("# heuristic={} k={}", p.heuristic, p.k);
        if let Some(seed) = p.seed {
            s.push_str(&format!(" seed={seed}"));
        }
        if let Some(g) = p.granularity {
            s.push_str(&format!(" granularity={g}"));
        }
        if !p.sources.is_empty() {
            s.push_str(&format!(" sources={}", p.sources.join(",")));
        }
        s.push('\n');
        for w in &p.warnings {
            s.push_str(&format!("# warning: {w}\n"));
        }
        for r in &self.regions {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StrategyError> {
        let mut mask = FreezeMask::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(w) = line.strip_prefix("# warning: ") {
                mask.provenance.warnings.push(w.to_string());
            } else if let Some(h) = line.strip_prefix('#') {
                for part in h.split_whitespace() {
                    let Some((k, v)) = part.split_once('=') else { continue };
                    let bad = |m: String| StrategyError::Parse { line: i + 1, message: m };
                    match k {
                        "heuristic" => mask.provenance.heuristic = v.to_string(),
                        "k" => mask.provenance.k = v.parse().map_err(|e| bad(format!("k: {e}")))?,
                        "seed" => mask.provenance.seed = Some(v.parse().map_err(|e| bad(format!("seed: {e}")))?),
                        "granularity" => mask.provenance.granularity = Some(v.parse().map_err(bad)?),
                        "sources" => mask.provenance.sources = v.split(',').map(str::to_string).collect(),
                        _ => {}
                    }
                }
            } else {
                let r = line.parse::<Region>().map_err(|m| StrategyError::Parse {
                    line: i + 1,
                    message: m,
                })?;
                mask.regions.insert(r);
            }
        }
        Ok(mask)
    }
}

/// Whole layers drawn without replacement from the transformer blocks.
pub fn lf_random(config: &ModelConfig, k: usize, seed: u64) -> Result<FreezeMask, StrategyError> {
    if k > config.n_layers {
        return Err(StrategyError::TooManyRegions {
            k,
            available: config.n_layers,
        });
    }
    let mut r = rng::stream(seed, "strategies.lf_random");
    let layers = rng::sample_without_replacement(config.n_layers, k, &mut r);
    let mut mask = FreezeMask::new(layers.into_iter().map(Region::layer));
    mask.provenance = MaskProvenance {
        heuristic: "lf_h1".into(),
        k,
        seed: Some(seed),
        ..MaskProvenance::default()
    };
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Whole transformer blocks.
    Layer,
    /// Top `k` per-head projections for each of K, Q and V separately.
    #[default]
    PerKindPerHead,
    /// Top `k` per-head projections from one pool of all kinds.
    CombinedPool,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Layer => "layer",
            Granularity::PerKindPerHead => "per-kind-per-head",
            Granularity::CombinedPool => "combined-pool",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layer" => Ok(Granularity::Layer),
            "per-kind-per-head" => Ok(Granularity::PerKindPerHead),
            "combined-pool" => Ok(Granularity::CombinedPool),
            _ => Err(format!("unknown granularity `{s}`")),
        }
    }
}

/// Regions with their change score, sorted by descending score, ties in
/// region order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRanking {
    pub entries: Vec<(Region, f64)>,
}

impl ChangeRanking {
    pub fn new(mut entries: Vec<(Region, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = Region> + '_ {
        self.entries.iter().take(k).map(|e| e.0)
    }
}

fn region_change(base: &Checkpoint, phase1: &Checkpoint, layout: &Layout, region: Region) -> f64 {
    let idx = region.tensor_indices(layout).expect("region built from the layout");
    idx.iter()
        .map(|&i| {
            let name = &layout.specs()[i].name;
            base.tensors[name]
                .data
                .iter()
                .zip(&phase1.tensors[name].data)
                .map(|(a, b)| {
                    let d = f64::from(*b) - f64::from(*a);
                    d * d
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// L2 change of every candidate region between `base` and `phase1`.
pub fn change_ranking(
    base: &Checkpoint,
    phase1: &Checkpoint,
    regions: impl IntoIterator<Item = Region>,
) -> Result<ChangeRanking, StrategyError> {
    let diff = base.architecture_diff(phase1);
    if !diff.is_empty() || base.config != phase1.config {
        return Err(StrategyError::ArchitectureMismatch(diff));
    }
    let layout = base.layout();
    Ok(ChangeRanking::new(
        regions
            .into_iter()
            .map(|r| (r, region_change(base, phase1, &layout, r)))
            .collect(),
    ))
}

fn proj_regions(cfg: &ModelConfig, kind: ProjKind) -> Vec<Region> {
    (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_heads).map(move |h| Region::proj(l, kind, h)))
        .collect()
}

/// Freezes the regions that moved most during Phase 1.
pub fn lf_top_changed(
    base: &Checkpoint,
    phase1: &Checkpoint,
    k: usize,
    granularity: Granularity,
) -> Result<FreezeMask, StrategyError> {
    let cfg = &base.config;
    let pools: Vec<Vec<Region>> = match granularity {
        Granularity::Layer => vec![(0..cfg.n_layers).map(Region::layer).collect()],
        Granularity::PerKindPerHead => ProjKind::ALL.iter().map(|&kd| proj_regions(cfg, kd)).collect(),
        Granularity::CombinedPool => vec![ProjKind::ALL.iter().flat_map(|&kd| proj_regions(cfg, kd)).collect()],
    };
    let mut regions = BTreeSet::new();
    let mut warnings = Vec::new();
    for pool in pools {
        if k > pool.len() {
            return Err(StrategyError::TooManyRegions {
                k,
                available: pool.len(),
            });
        }
        let ranking = change_ranking(base, phase1, pool)?;
        let chosen: Vec<&(Region, f64)> = ranking.entries.iter().take(k).collect();
        if k > 0 {
            let cutoff = chosen[k - 1].1;
            if ranking.entries.get(k).is_some_and(|e| e.1 == cutoff) {
                let w = format!("tie at change score {cutoff:e}; broken in (layer, kind, head) order");
                if cutoff == 0.0 {
                    log::warn!("lf_top_changed: zero change between checkpoints; {w}");
                    warnings.push(format!("zero change: {w}"));
                } else {
                    warnings.push(w);
                }
            }
        }
        regions.extend(chosen.iter().map(|e| e.0));
    }
    warnings.dedup();
    Ok(FreezeMask {
        regions,
        provenance: MaskProvenance {
            heuristic: "lf_h2".into(),
            k,
            seed: None,
            granularity: Some(granularity),
            sources: vec![base.id(), phase1.id()],
            warnings,
        },
    })
}

/// Replay set from a Phase-1 model's own answers to English instructions.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub dataset: Dataset,
    /// Examples where the model emitted `<eos>` immediately.
    pub empty_outputs: usize,
}

pub fn generate_replay(
    phase1: &Checkpoint,
    english_counterpart: &Dataset,
    decode: Decode,
    max_new: usize,
) -> Result<Replay, StrategyError> {
    let g = Generator::new(phase1)?;
    let mut examples = Vec::with_capacity(english_counterpart.len());
    let mut empty = 0;
    for ex in &english_counterpart.examples {
        let prompt = encode_prompt(&phase1.vocab, ex)?;
        let out = g.generate(&prompt, decode, max_new)?;
        if out.is_empty() {
            empty += 1;
        }
        examples.push(Example {
            output: phase1.vocab.detokenize(&out),
            language: Lang::EN,
            ..ex.clone()
        });
    }
    let id = format!("GR({})", english_counterpart.id);
    let dataset = Dataset::new(id, examples, english_counterpart.metadata.seed)
        .with_languages(english_counterpart.metadata.languages.clone())
        .with_provenance(format!("GR from {}", phase1.id()));
    Ok(Replay {
        dataset,
        empty_outputs: empty,
    })
}

/// Seeded subset of the English counterpart with its original outputs.
pub fn english_replay_subset(english_counterpart: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, StrategyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StrategyError::BadFraction(fraction));
    }
    let n = replay_count(fraction, english_counterpart.len());
    if n == 0 {
        return Err(StrategyError::EmptyReplay);
    }
    let mut r = rng::stream(seed, "strategies.english_replay");
    let order = rng::permutation(english_counterpart.len(), &mut r);
    let examples = order[..n].iter().map(|&i| english_counterpart.examples[i].clone()).collect();
    Ok(Dataset::new(format!("ER({})", english_counterpart.id), examples, seed)
        .with_languages(english_counterpart.metadata.languages.clone())
        .with_provenance("ER"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    None,
    LfH1 { k: usize, seed: u64 },
    LfH2 { k: usize, granularity: Granularity },
    Gr { fraction: f64 },
    Er { fraction: f64 },
    Lora { rank: usize },
}

impl Strategy {
    /// Row label: `none`, `LF_H1`, `LF_H2`, `GR_10`, `ER_10`, `LORA`.
    pub fn label(&self) -> String {
        let pct = |f: f64| (f * 100.0).round() as u64;
        match self {
            Strategy::None => "none".into(),
            Strategy::LfH1 { .. } => "LF_H1".into(),
            Strategy::LfH2 { .. } => "LF_H2".into(),
            Strategy::Gr { fraction } => format!("GR_{}", pct(*fraction)),
            Strategy::Er { fraction } => format!("ER_{}", pct(*fraction)),
            Strategy::Lora { .. } => "LORA".into(),
        }
    }
}

/// Everything a plan may draw on; which fields are required depends on
/// the strategy.
#[derive(Debug, Clone, Copy)]
pub struct PlanInputs<'a> {
    pub phase2: &'a Dataset,
    pub base: Option<&'a Checkpoint>,
    pub phase1: Option<&'a Checkpoint>,
    pub english_counterpart: Option<&'a Dataset>,
    /// Precomputed generative replay set; built from `phase1` when absent.
    pub replay: Option<&'a Dataset>,
    pub seed: u64,
    pub decode: Decode,
    pub max_new: usize,
    pub lora_scale: f32,
}

impl<'a> PlanInputs<'a> {
    pub fn new(phase2: &'a Dataset) -> Self {
        Self {
            phase2,
            base: None,
            phase1: None,
            english_counterpart: None,
            replay: None,
            seed: 0,
            decode: Decode::Greedy,
            max_new: 16,
            lora_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Plan {
    pub strategy: Strategy,
    pub dataset: Dataset,
    pub freeze_mask: Option<FreezeMask>,
    pub adapter: Option<LowRankAdapter>,
}

pub fn build_phase2_plan(strategy: Strategy, inputs: &PlanInputs<'_>) -> Result<Phase2Plan, StrategyError> {
    let need = |input: &'static str| StrategyError::MissingInput {
        strategy: strategy.label(),
        input,
    };
    let plain = || inputs.phase2.clone();
    let (dataset, freeze_mask, adapter) = match strategy {
        Strategy::None => (plain(), None, None),
        Strategy::LfH1 { k, seed } => {
            let p1 = inputs.phase1.ok_or_else(|| need("phase1"))?;
            (plain(), Some(lf_random(&p1.config, k, seed)?), None)
        }
        Strategy::LfH2 { k, granularity } => {
            let base = inputs.base.ok_or_else(|| need("base"))?;
            let p1 = inputs.phase1.ok_or_else(|| need("phase1"))?;
            (plain(), Some(lf_top_changed(base, p1, k, granularity)?), None)
        }
        Strategy::Gr { fraction } => {
            let replay = match inputs.replay {
                Some(r) => r.clone(),
                None => {
                    let p1 = inputs.phase1.ok_or_else(|| need("phase1"))?;
                    let ec = inputs.english_counterpart.ok_or_else(|| need("english_counterpart"))?;
                    generate_replay(p1, ec, inputs.decode, inputs.max_new)?.dataset
                }
            };
            (corpus::mix(inputs.phase2, &replay, fraction, inputs.seed)?, None, None)
        }
        Strategy::Er { fraction } => {
            let ec = inputs.english_counterpart.ok_or_else(|| need("english_counterpart"))?;
            (corpus::mix(inputs.phase2, ec, fraction, inputs.seed)?, None, None)
        }
        Strategy::Lora { rank } => {
            let p1 = inputs.phase1.ok_or_else(|| need("phase1"))?;
            let targets = attention_targets(&p1.config);
            let ad = LowRankAdapter::new(p1, &targets, rank, inputs.lora_scale, inputs.seed)?;
            (plain(), None, Some(ad))
        }
    };
    Ok(Phase2Plan {
        strategy,
        dataset,
        freeze_mask,
        adapter,
    })
}

/// Trains Phase 2 from `phase1` under the plan. Adapter plans return the
/// merged checkpoint alongside the trained factors.
pub fn execute_plan(plan: &Phase2Plan, phase1: &Checkpoint, cfg: &TrainConfig) -> Result<PhaseOutput, StrategyError> {
    let mut out = train_phase(phase1, &plan.dataset, cfg, plan.freeze_mask.as_ref(), plan.adapter.as_ref())?;
    if let Some(ad) = &out.adapter {
        let prov = out.checkpoint.provenance.clone();
        out.checkpoint = merge_adapter(phase1, ad)?;
        out.checkpoint.provenance = crate::engine::Provenance {
            phase_tag: "trained+merged".into(),
            ..prov
        };
    }
    Ok(out)
}
