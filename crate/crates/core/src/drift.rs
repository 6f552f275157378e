//! Activation-drift diagnostics: mean hidden activations per layer, their
//! covariances, drift norms between checkpoints and a PCA projection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::engine::{encode_prompt, model, Checkpoint, EngineError};
use crate::linalg;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("need at least 2 prompts for covariances, got {0}")]
    TooFewPrompts(usize),
    #[error("prompt {0} is empty after tokenization")]
    EmptyPrompt(usize),
    #[error("need at least 2 layers for the global covariance, got {0}")]
    TooFewLayers(usize),
    #[error("summaries are not comparable: {0}")]
    Mismatch(String),
    #[error("projection needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// How a prompt's per-position block outputs collapse to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    PositionMean,
    LastToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub model_id: String,
    pub prompt_set_id: String,
    /// `l x d`: row `i` is the mean over prompts of layer `i`'s pooled output.
    pub x: Vec<Vec<f64>>,
    /// Per layer, the `d x d` row-major covariance over prompts.
    pub per_layer_cov: Vec<Vec<f64>>,
    pub n: usize,
    pub d: usize,
    pub pooling: Pooling,
}

/// Covariance of `rows` (each of length `d`) with `1/(n-1)` normalization.
pub fn covariance(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len();
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut c = vec![0.0; d * d];
    for r in rows {
        let z: Vec<f64> = r.iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..d {
            if z[i] == 0.0 {
                continue;
            }
            for j in i..d {
                c[i * d + j] += z[i] * z[j];
            }
        }
    }
    let k = 1.0 / (n as f64 - 1.0);
    for i in 0..d {
        for j in i..d {
            let v = c[i * d + j] * k;
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    c
}

/// Per-prompt pooled block outputs, indexed `[prompt][layer]`.
pub fn pooled_activations(model_ckpt: &Checkpoint, prompts: &Dataset, pooling: Pooling) -> Result<Vec<Vec<Vec<f64>>>, DriftError> {
    let params = model_ckpt.params::<f64>()?;
    let d = model_ckpt.config.d_model;
    let mut out = Vec::with_capacity(prompts.len());
    for (i, ex) in prompts.examples.iter().enumerate() {
        let tokens = encode_prompt(&model_ckpt.vocab, ex)?;
        if tokens.len() <= 1 {
            return Err(DriftError::EmptyPrompt(i));
        }
        let (_, caps) = model::forward_params(&params, None, &tokens, true)?;
        let caps = caps.expect("capture requested");
        let t = tokens.len();
        let per_layer = caps
            .iter()
            .map(|h| match pooling {
                Pooling::PositionMean => (0..d)
                    .map(|j| (0..t).map(|p| h[p * d + j]).sum::<f64>() / t as f64)
                    .collect(),
                Pooling::LastToken => h[(t - 1) * d..t * d].to_vec(),
            })
            .collect();
        out.push(per_layer);
    }
    Ok(out)
}

/// Builds a summary from pooled vectors `[prompt][layer][d]`.
pub fn summarize(
    model_id: &str,
    prompt_set_id: &str,
    pooled: &[Vec<Vec<f64>>],
    pooling: Pooling,
) -> Result<ActivationSummary, DriftError> {
    let n = pooled.len();
    if n < 2 {
        return Err(DriftError::TooFewPrompts(n));
    }
    let l = pooled[0].len();
    let d = pooled[0].first().map_or(0, Vec::len);
    let mut x = Vec::with_capacity(l);
    let mut per_layer_cov = Vec::with_capacity(l);
    for layer in 0..l {
        let rows: Vec<Vec<f64>> = pooled.iter().map(|p| p[layer].clone()).collect();
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        x.push(mean);
        per_layer_cov.push(covariance(&rows, d));
    }
    Ok(ActivationSummary {
        model_id: model_id.to_string(),
        prompt_set_id: prompt_set_id.to_string(),
        x,
        per_layer_cov,
        n,
        d,
        pooling,
    })
}

pub fn capture(model_ckpt: &Checkpoint, prompts: &Dataset) -> Result<ActivationSummary, DriftError> {
    capture_with(model_ckpt, prompts, Pooling::PositionMean)
}

pub fn capture_with(model_ckpt: &Checkpoint, prompts: &Dataset, pooling: Pooling) -> Result<ActivationSummary, DriftError> {
    if prompts.len() < 2 {
        return Err(DriftError::TooFewPrompts(prompts.len()));
    }
    let pooled = pooled_activations(model_ckpt, prompts, pooling)?;
    summarize(&model_ckpt.id(), &prompts.id, &pooled, pooling)
}

/// Covariance across layers of the layer-mean-centred `X`, divided by `l - 1`.
pub fn global_cov(summary: &ActivationSummary) -> Result<Vec<f64>, DriftError> {
    let l = summary.x.len();
    if l < 2 {
        return Err(DriftError::TooFewLayers(l));
    }
    Ok(covariance(&summary.x, summary.d))
}

fn diff_norm(a: &[f64], b: &[f64], d: usize, norm: MatrixNorm) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    match norm {
        MatrixNorm::Frobenius => diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
        MatrixNorm::Spectral => linalg::spectral_norm_symmetric(&diff, d),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub a: String,
    pub b: String,
    pub prompt_set_id: String,
    pub global_cov_diff: f64,
    pub per_layer_diff: Vec<f64>,
    pub norm: MatrixNorm,
}

impl DriftReport {
    pub fn mean_layer_diff(&self) -> f64 {
        self.per_layer_diff.iter().sum::<f64>() / self.per_layer_diff.len().max(1) as f64
    }

    /// `layer,diff` rows; the global covariance difference is a comment.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# a={} b={} prompts={} norm={:?} global_cov_diff={:.9}\nlayer,diff\n",
            self.a, self.b, self.prompt_set_id, self.norm, self.global_cov_diff
        );
        for (i, v) in self.per_layer_diff.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:.9}");
        }
        s
    }
}

pub fn drift_norms(a: &ActivationSummary, b: &ActivationSummary) -> Result<DriftReport, DriftError> {
    drift_norms_with(a, b, MatrixNorm::Frobenius)
}

pub fn drift_norms_with(a: &ActivationSummary, b: &ActivationSummary, norm: MatrixNorm) -> Result<DriftReport, DriftError> {
    if a.prompt_set_id != b.prompt_set_id {
        return Err(DriftError::Mismatch(format!(
            "prompt sets {} and {}",
            a.prompt_set_id, b.prompt_set_id
        )));
    }
    if a.x.len() != b.x.len() || a.d != b.d || a.per_layer_cov.len() != b.per_layer_cov.len() {
        return Err(DriftError::Mismatch(format!(
            "shapes {}x{} and {}x{}",
            a.x.len(),
            a.d,
            b.x.len(),
            b.d
        )));
    }
    let d = a.d;
    let global_cov_diff = diff_norm(&global_cov(a)?, &global_cov(b)?, d, norm);
    let per_layer_diff = a
        .per_layer_cov
        .iter()
        .zip(&b.per_layer_cov)
        .map(|(x, y)| diff_norm(x, y, d, norm))
        .collect();
    Ok(DriftReport {
        a: a.model_id.clone(),
        b: b.model_id.clone(),
        prompt_set_id: a.prompt_set_id.clone(),
        global_cov_diff,
        per_layer_diff,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub model: String,
    pub layer: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Unit principal axes, each with its first nonzero loading positive.
    pub axes: [Vec<f64>; 2],
    pub warnings: Vec<String>,
}

impl Projection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,layer,x,y\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{:.9},{:.9}", p.model, p.layer, p.x, p.y);
        }
        s
    }
}

fn sign_fix(mut v: Vec<f64>) -> Vec<f64> {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale.max(1e-300)) {
        if *first < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    v
}

/// Projects every `(model, layer)` row of `X` onto the top two principal
/// axes of the pooled, mean-centred rows.
pub fn project2d(summaries: &[ActivationSummary]) -> Result<Projection, DriftError> {
    let rows: Vec<(&str, usize, &Vec<f64>)> = summaries
        .iter()
        .flat_map(|s| s.x.iter().enumerate().map(move |(l, r)| (s.model_id.as_str(), l, r)))
        .collect();
    if rows.len() < 3 {
        return Err(DriftError::TooFewRows(rows.len()));
    }
    let d = rows[0].2.len();
    if rows.iter().any(|r| r.2.len() != d) {
        return Err(DriftError::Mismatch("row widths differ".into()));
    }
    let plain: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
    let cov = covariance(&plain, d);
    let (vals, vecs) = linalg::symmetric_eigen(&cov, d);
    let mut warnings = Vec::new();
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let mut axes = [
        sign_fix(vecs[0].clone()),
        sign_fix(vecs.get(1).cloned().unwrap_or_else(|| vec![0.0; d])),
    ];
    if d < 2 || vals.get(1).copied().unwrap_or(0.0) <= 1e-12 * top.max(1e-300) {
        warnings.push("pooled rows have rank < 2; second axis zeroed".to_string());
        log::warn!("project2d: pooled rows have rank < 2; second axis zeroed");
        axes[1] = vec![0.0; d];
    }
    let mut mu = vec![0.0; d];
    for r in &plain {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= plain.len() as f64;
    }
    let points = rows
        .iter()
        .map(|(model, layer, r)| {
            let z: Vec<f64> = r.iter().zip(&mu).map(|(v, m)| v - m).collect();
            let dot = |a: &[f64]| z.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            ProjectedPoint {
                model: model.to_string(),
                layer: *layer,
                x: dot(&axes[0]),
                y: dot(&axes[1]),
            }
        })
        .collect();
    Ok(Projection { points, axes, warnings })
}

/// Per-layer drift curves, one series per labelled report.
pub fn drift_svg(title: &str, reports: &[(String, &DriftReport)]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = reports
        .iter()
        .map(|(name, r)| {
            (
                name.clone(),
                r.per_layer_diff.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect(),
            )
        })
        .collect();
    crate::svg::line_chart(title, "layer", "covariance drift", &series)
}
