//! Dataset embedding similarity over pluggable embedders, and model
//! parameter difference with max-normalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Example};
use crate::engine::Checkpoint;
use crate::rng;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("sample of {requested} requested from {available} examples")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("mean embedding of {0} is (numerically) zero")]
    DegenerateEmbedding(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no precomputed embedding for example {0}")]
    MissingEmbedding(usize),
    #[error("embedding for example {0} is not finite")]
    NonFinite(usize),
    #[error("checkpoints differ in architecture at: {0:?}")]
    ArchitectureMismatch(Vec<String>),
    #[error("cannot normalize: {0}")]
    Normalize(String),
    #[error("embedding file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps an example to a fixed-length vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    /// Signed feature hashing of surface n-grams (orders `1..=n`).
    HashedNgram { d: usize, n: usize, seed: u64 },
    /// Language-blind structure: family, lengths and the repetition
    /// pattern of the input, hashed into `d` dimensions.
    TaskSignature { d: usize },
    /// Vectors read from a file, looked up by example index.
    Precomputed { vectors: BTreeMap<usize, Vec<f64>>, source: String },
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    example_index: usize,
    vector: Vec<f64>,
}

fn hash_into(v: &mut [f64], seed: u64, feature: &str, weight: f64) {
    let h = rng::fnv1a(seed, feature.as_bytes());
    let idx = (h % v.len() as u64) as usize;
    let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
    v[idx] += sign * weight;
}

/// Each token replaced by the index of its first occurrence.
fn repetition_pattern(text: &str) -> String {
    let mut seen: Vec<&str> = Vec::new();
    text.split_whitespace()
        .map(|t| match seen.iter().position(|s| *s == t) {
            Some(i) => i.to_string(),
            None => {
                seen.push(t);
                (seen.len() - 1).to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl Embedder {
    pub fn task_signature() -> Self {
        Embedder::TaskSignature { d: 64 }
    }

    pub fn hashed_ngram(seed: u64) -> Self {
        Embedder::HashedNgram { d: 256, n: 2, seed }
    }

    pub fn load_precomputed(path: impl AsRef<Path>) -> Result<Self, SimilarityError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut vectors = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EmbeddingRecord = serde_json::from_str(line).map_err(|e| SimilarityError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            vectors.insert(r.example_index, r.vector);
        }
        Ok(Embedder::Precomputed {
            vectors,
            source: path.as_ref().display().to_string(),
        })
    }

    pub fn describe(&self) -> String {
        match self {
            Embedder::HashedNgram { d, n, seed } => format!("hashed-ngram(d={d},n={n},seed={seed})"),
            Embedder::TaskSignature { d } => format!("task-signature(d={d})"),
            Embedder::Precomputed { source, .. } => format!("precomputed({source})"),
        }
    }

    /// Embedding of `ex`, which sits at `index` in its dataset.
    pub fn embed(&self, ex: &Example, index: usize) -> Result<Vec<f64>, SimilarityError> {
        let v = match self {
            Embedder::HashedNgram { d, n, seed } => {
                let mut v = vec![0.0; *d];
                let toks: Vec<&str> = [&ex.instruction, &ex.input, &ex.output]
                    .iter()
                    .flat_map(|s| s.split_whitespace())
                    .collect();
                for order in 1..=*n {
                    for w in toks.windows(order) {
                        hash_into(&mut v, *seed, &w.join(" "), 1.0);
                    }
                }
                v
            }
            Embedder::TaskSignature { d } => {
                let mut v = vec![0.0; *d];
                let fam = ex.task_family.name();
                let n_in = ex.input.split_whitespace().count();
                let n_out = ex.output.split_whitespace().count();
                hash_into(&mut v, 0, &format!("family={fam}"), 4.0);
                hash_into(&mut v, 0, &format!("in_len={n_in}"), 1.0);
                hash_into(&mut v, 0, &format!("out_len={n_out}"), 1.0);
                hash_into(&mut v, 0, &format!("pattern={}", repetition_pattern(&ex.input)), 1.0);
                hash_into(&mut v, 0, &format!("instr_len={}", ex.instruction.split_whitespace().count()), 1.0);
                v
            }
            Embedder::Precomputed { vectors, .. } => {
                vectors.get(&index).cloned().ok_or(SimilarityError::MissingEmbedding(index))?
            }
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SimilarityError::NonFinite(index));
        }
        Ok(v)
    }
}

/// How many examples enter the mean embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSize {
    All,
    N(usize),
}

impl SampleSize {
    /// The 500-example sample used for dataset embeddings by default.
    pub const DEFAULT: SampleSize = SampleSize::N(500);

    /// `N(n)` capped at the dataset size.
    pub fn resolve(self, len: usize) -> usize {
        match self {
            SampleSize::All => len,
            SampleSize::N(n) => n.min(len),
        }
    }
}

/// Unit-norm mean embedding of a seeded sample of `ds`.
pub fn embed_dataset(ds: &Dataset, emb: &Embedder, sample: SampleSize, seed: u64) -> Result<Vec<f64>, SimilarityError> {
    if ds.is_empty() {
        return Err(SimilarityError::EmptyDataset(ds.id.clone()));
    }
    let n = match sample {
        SampleSize::All => ds.len(),
        SampleSize::N(n) if n > ds.len() => {
            return Err(SimilarityError::SampleTooLarge {
                requested: n,
                available: ds.len(),
            })
        }
        SampleSize::N(0) => return Err(SimilarityError::EmptyDataset(ds.id.clone())),
        SampleSize::N(n) => n,
    };
    let mut idx = if n == ds.len() {
        (0..n).collect()
    } else {
        rng::sample_without_replacement(ds.len(), n, &mut rng::stream(seed, "similarity.sample"))
    };
    idx.sort_unstable();
    let mut mean: Vec<f64> = Vec::new();
    for &i in &idx {
        let v = emb.embed(&ds.examples[i], i)?;
        if mean.is_empty() {
            mean = vec![0.0; v.len()];
        } else if v.len() != mean.len() {
            return Err(SimilarityError::DimensionMismatch(mean.len(), v.len()));
        }
        for (m, x) in mean.iter_mut().zip(&v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    normalize(mean, &ds.id)
}

fn normalize(mut v: Vec<f64>, id: &str) -> Result<Vec<f64>, SimilarityError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if norm == 0.0 || norm <= 1e-12 * scale.max(1e-300) || !norm.is_finite() {
        return Err(SimilarityError::DegenerateEmbedding(id.to_string()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Dot product of two unit embeddings.
pub fn des_embeddings(e1: &[f64], e2: &[f64]) -> Result<f64, SimilarityError> {
    if e1.len() != e2.len() {
        return Err(SimilarityError::DimensionMismatch(e1.len(), e2.len()));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| a * b).sum())
}

pub fn des(d1: &Dataset, d2: &Dataset, emb: &Embedder, sample: SampleSize, seed: u64) -> Result<f64, SimilarityError> {
    des_embeddings(&embed_dataset(d1, emb, sample, seed)?, &embed_dataset(d2, emb, sample, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpdMode {
    /// Mean over named tensors of the L2 norm of their difference.
    #[default]
    TensorWise,
    /// Mean over individual scalars of their absolute difference.
    ScalarWise,
}

pub fn mpd(c1: &Checkpoint, c2: &Checkpoint) -> Result<f64, SimilarityError> {
    mpd_with(c1, c2, MpdMode::TensorWise)
}

pub fn mpd_with(c1: &Checkpoint, c2: &Checkpoint, mode: MpdMode) -> Result<f64, SimilarityError> {
    let diff = c1.architecture_diff(c2);
    if !diff.is_empty() {
        return Err(SimilarityError::ArchitectureMismatch(diff));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (name, t1) in &c1.tensors {
        let t2 = &c2.tensors[name];
        let sq = t1.data.iter().zip(&t2.data).map(|(a, b)| {
            let d = f64::from(*a) - f64::from(*b);
            d * d
        });
        match mode {
            MpdMode::TensorWise => {
                total += sq.sum::<f64>().sqrt();
                count += 1;
            }
            MpdMode::ScalarWise => {
                total += sq.map(f64::sqrt).sum::<f64>();
                count += t1.data.len();
            }
        }
    }
    if count == 0 {
        return Err(SimilarityError::ArchitectureMismatch(Vec::new()));
    }
    Ok(total / count as f64)
}

pub fn normalize_mpd(raw: &[f64]) -> Result<Vec<f64>, SimilarityError> {
    if raw.is_empty() {
        return Err(SimilarityError::Normalize("empty list".into()));
    }
    if raw.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(SimilarityError::Normalize("scores must be finite and non-negative".into()));
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(SimilarityError::Normalize("all scores are zero".into()));
    }
    Ok(raw.iter().map(|x| x / max).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub a: String,
    pub b: String,
    pub des: Option<f64>,
    pub mpd_raw: Option<f64>,
    pub mpd_normalized: Option<f64>,
    pub embedder: String,
    pub samples: usize,
    /// Which checkpoints the MPD compares, e.g. `siblings-from-base`.
    pub mpd_pairing: String,
}

pub const REPORT_HEADER: &str = "a,b,des,mpd_raw,mpd_normalized,embedder,samples,mpd_pairing";

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.9}")).unwrap_or_default()
}

impl SimilarityReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.a,
            self.b,
            opt(self.des),
            opt(self.mpd_raw),
            opt(self.mpd_normalized),
            self.embedder,
            self.samples,
            self.mpd_pairing
        )
    }

    pub fn text(&self) -> String {
        let mut s = format!("{} vs {}\n", self.a, self.b);
        if let Some(d) = self.des {
            let _ = writeln!(s, "  DES = {d:.4} ({}, {} samples)", self.embedder, self.samples);
        }
        if let Some(m) = self.mpd_raw {
            let _ = write!(s, "  MPD = {m:.6}");
            if let Some(n) = self.mpd_normalized {
                let _ = write!(s, " (normalized {n:.3})");
            }
            let _ = writeln!(s, " [{}]", self.mpd_pairing);
        }
        s
    }
}

/// Fills `mpd_normalized` for every report carrying a raw MPD, dividing by
/// the largest raw value in the set.
pub fn normalize_reports(reports: &mut [SimilarityReport]) -> Result<(), SimilarityError> {
    let raw: Vec<f64> = reports.iter().filter_map(|r| r.mpd_raw).collect();
    if raw.is_empty() {
        return Ok(());
    }
    let norm = normalize_mpd(&raw)?;
    let mut it = norm.into_iter();
    for r in reports.iter_mut().filter(|r| r.mpd_raw.is_some()) {
        r.mpd_normalized = it.next();
    }
    Ok(())
}

pub fn reports_csv(reports: &[SimilarityReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
