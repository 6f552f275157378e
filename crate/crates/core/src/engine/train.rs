//! Phase training: AdamW with linear warmup and cosine decay, freeze-mask
//! aware updates, and optional low-rank adapter training.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::adapter::LowRankAdapter;
use super::checkpoint::{Checkpoint, Provenance};
use super::config::{Precision, TrainConfig};
use super::model::{loss_and_grads_params, AdapterParams, Sequence};
use super::tensor::Real;
use super::EngineError;
use crate::corpus::{vocab, Dataset, Example, Vocab};
use crate::rng;
use crate::strategies::FreezeMask;

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{:e},{:.9}", e.step, e.epoch, e.lr, e.loss);
        }
        s
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub checkpoint: Checkpoint,
    /// Trained adapter factors when the phase ran in adapter mode.
    pub adapter: Option<LowRankAdapter>,
    pub log: TrainingLog,
}

fn tokenize_strict(vocab: &Vocab, text: &str, out: &mut Vec<u32>, unknown: &mut Vec<String>) {
    let enc = vocab.tokenize(text);
    out.extend(enc.ids);
    unknown.extend(enc.unknown_tokens);
}

/// `<bos> instruction input`, with no in-context exemplars.
pub fn encode_prompt(vocab: &Vocab, ex: &Example) -> Result<Vec<u32>, EngineError> {
    let mut ids = vec![vocab::BOS];
    let mut unknown = Vec::new();
    tokenize_strict(vocab, &ex.instruction, &mut ids, &mut unknown);
    tokenize_strict(vocab, &ex.input, &mut ids, &mut unknown);
    if unknown.is_empty() {
        Ok(ids)
    } else {
        Err(EngineError::UnknownTokens(unknown))
    }
}

/// Prompt followed by `output <eos>`; loss applies to the response part.
pub fn encode_example(vocab: &Vocab, ex: &Example) -> Result<Sequence, EngineError> {
    let mut tokens = encode_prompt(vocab, ex)?;
    let prompt_len = tokens.len();
    let mut unknown = Vec::new();
    tokenize_strict(vocab, &ex.output, &mut tokens, &mut unknown);
    if !unknown.is_empty() {
        return Err(EngineError::UnknownTokens(unknown));
    }
    tokens.push(vocab::EOS);
    Ok(Sequence { tokens, prompt_len })
}

struct AdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> AdamState<F> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        }
    }

    fn step(&mut self, w: &mut [F], g: &[F], lr: f64, t: usize, cfg: &TrainConfig) {
        let b1 = F::of(cfg.optimizer.beta1);
        let b2 = F::of(cfg.optimizer.beta2);
        let eps = F::of(cfg.optimizer.eps);
        let bc1 = F::of(1.0 - cfg.optimizer.beta1.powi(t as i32));
        let bc2 = F::of(1.0 - cfg.optimizer.beta2.powi(t as i32));
        let lr = F::of(lr);
        let decay = F::one() - lr * F::of(cfg.weight_decay);
        let one = F::one();
        for i in 0..w.len() {
            let gi = g[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * gi;
            self.v[i] = b2 * self.v[i] + (one - b2) * gi * gi;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            if cfg.weight_decay != 0.0 {
                w[i] *= decay;
            }
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Trains one phase. Frozen tensors and, in adapter mode, every base
/// tensor are returned bit-identical.
pub fn train_phase(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    freeze_mask: Option<&FreezeMask>,
    adapter: Option<&LowRankAdapter>,
) -> Result<PhaseOutput, EngineError> {
    cfg.validate()?;
    if freeze_mask.is_some_and(|m| !m.is_empty()) && adapter.is_some() {
        return Err(EngineError::AdapterAndMask);
    }
    match cfg.precision {
        Precision::F32 => run::<f32>(ckpt, dataset, cfg, freeze_mask, adapter),
        Precision::F64 => run::<f64>(ckpt, dataset, cfg, freeze_mask, adapter),
    }
}

fn run<F: Real>(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &TrainConfig,
    freeze_mask: Option<&FreezeMask>,
    adapter: Option<&LowRankAdapter>,
) -> Result<PhaseOutput, EngineError> {
    let mut params = ckpt.params::<F>()?;
    let layout = params.layout.clone();
    let frozen: BTreeSet<usize> = match freeze_mask {
        Some(m) => m.tensor_indices(&layout)?,
        None => BTreeSet::new(),
    };
    if let Some(ad) = adapter {
        ad.validate(ckpt)?;
    }
    let mut adapter_params: Option<AdapterParams<F>> = adapter.map(|a| a.to_params(&layout));

    let seqs = dataset
        .examples
        .iter()
        .map(|ex| encode_example(&ckpt.vocab, ex))
        .collect::<Result<Vec<_>, _>>()?;
    for s in &seqs {
        super::model::validate_tokens(&layout, &s.tokens)?;
    }
    if seqs.is_empty() {
        return Err(EngineError::EmptyBatch);
    }

    let bs = cfg.global_batch_size;
    let steps_per_epoch = seqs.len().div_ceil(bs);
    let total = steps_per_epoch * cfg.epochs;

    let mut base_state: Vec<Option<AdamState<F>>> = layout
        .specs()
        .iter()
        .enumerate()
        .map(|(i, s)| (adapter.is_none() && !frozen.contains(&i)).then(|| AdamState::new(s.numel())))
        .collect();
    let mut adapter_state: Vec<Option<(AdamState<F>, AdamState<F>)>> = match &adapter_params {
        Some(ap) => ap
            .a
            .iter()
            .zip(&ap.b)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some((AdamState::new(a.len()), AdamState::new(b.len()))),
                _ => None,
            })
            .collect(),
        None => Vec::new(),
    };

    let mut log = TrainingLog::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &format!("engine.shuffle.{epoch}"));
        let order = rng::permutation(seqs.len(), &mut r);
        for chunk in order.chunks(bs) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let lr = cfg.lr_at(step, total);
            let out = loss_and_grads_params(&params, adapter_params.as_ref(), &batch)?;
            if !out.loss.is_finite() {
                return Err(EngineError::NonFiniteLoss { step });
            }
            let t = step + 1;
            match (&mut adapter_params, out.adapter) {
                (Some(ap), Some(ag)) => {
                    for (i, st) in adapter_state.iter_mut().enumerate() {
                        if let Some((sa, sb)) = st {
                            let (Some(a), Some(ga)) = (ap.a[i].as_mut(), ag.a[i].as_ref()) else {
                                continue;
                            };
                            sa.step(a, ga, lr, t, cfg);
                            let (Some(b), Some(gb)) = (ap.b[i].as_mut(), ag.b[i].as_ref()) else {
                                continue;
                            };
                            sb.step(b, gb, lr, t, cfg);
                        }
                    }
                }
                _ => {
                    for (i, st) in base_state.iter_mut().enumerate() {
                        if let Some(st) = st {
                            st.step(&mut params.data[i], &out.grads.data[i], lr, t, cfg);
                        }
                    }
                }
            }
            log.entries.push(LogEntry {
                step,
                epoch,
                lr,
                loss: out.loss,
            });
            step += 1;
        }
    }

    let provenance = Provenance {
        phase_tag: "trained".into(),
        parent_checkpoint_id: Some(ckpt.id()),
        dataset_id: Some(dataset.id.clone()),
        seed: cfg.seed,
    };
    let (checkpoint, adapter_out) = match (adapter, adapter_params) {
        (Some(ad), Some(ap)) => {
            let mut trained = ad.clone();
            trained.update_from(&layout, &ap);
            let mut c = ckpt.clone();
            c.provenance = provenance;
            (c, Some(trained))
        }
        _ => {
            let mut c = Checkpoint::from_params(&params, ckpt.vocab.clone(), provenance);
            // frozen tensors are copied verbatim from the input
            for &i in &frozen {
                let name = &layout.specs()[i].name;
                c.tensors.insert(name.clone(), ckpt.tensors[name].clone());
            }
            (c, None)
        }
    };
    Ok(PhaseOutput {
        checkpoint,
        adapter: adapter_out,
        log,
    })
}

/// Gradients of the mean response-token loss for `batch`, by tensor name.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    batch: &[Example],
) -> Result<(f64, std::collections::BTreeMap<String, Vec<f64>>), EngineError> {
    let params = ckpt.params::<f64>()?;
    let seqs = batch
        .iter()
        .map(|ex| encode_example(&ckpt.vocab, ex))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let out = loss_and_grads_params(&params, None, &refs)?;
    let names = params.layout.specs().iter().map(|s| s.name.clone());
    Ok((out.loss, names.zip(out.grads.data).collect()))
}
