//! Pre-norm decoder-only transformer: packed-batch forward pass with
//! hand-derived reverse-mode gradients.
//!
//! Sequences of a batch are packed row-wise into one `N x d` activation
//! matrix so the dense projections run as single GEMMs; attention is
//! evaluated per sequence segment with a causal mask.

use super::params::{Layout, ParamSet, ProjKind};
use super::tensor::{matmul, matmul_nt, matmul_nt_acc, matmul_tn_acc, Real};
use super::EngineError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// One tokenised training sequence: prompt tokens followed by response
/// tokens. Only positions predicting a response token carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl Sequence {
    pub fn target_count(&self) -> usize {
        self.tokens.len().saturating_sub(self.prompt_len.max(1))
    }
}

/// Low-rank factors in compute precision, indexed like the layout.
#[derive(Debug, Clone)]
pub struct AdapterParams<F> {
    pub rank: usize,
    pub scale: F,
    pub a: Vec<Option<Vec<F>>>,
    pub b: Vec<Option<Vec<F>>>,
}

impl<F: Real> AdapterParams<F> {
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Option<Vec<F>>>| {
            v.iter()
                .map(|t| t.as_ref().map(|x| vec![F::zero(); x.len()]))
                .collect()
        };
        Self {
            rank: self.rank,
            scale: self.scale,
            a: z(&self.a),
            b: z(&self.b),
        }
    }
}

pub(crate) struct Packed<'a> {
    pub seqs: Vec<&'a [u32]>,
    pub starts: Vec<usize>,
    pub rows: usize,
}

impl<'a> Packed<'a> {
    pub fn new(seqs: Vec<&'a [u32]>) -> Self {
        let mut starts = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for s in &seqs {
            starts.push(rows);
            rows += s.len();
        }
        Self { seqs, starts, rows }
    }
}

pub fn validate_tokens(layout: &Layout, tokens: &[u32]) -> Result<(), EngineError> {
    let cfg = &layout.config;
    if tokens.is_empty() {
        return Err(EngineError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(EngineError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(EngineError::TokenOutOfVocab {
            token: t,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Fixed sinusoidal position code, `t x d`.
pub fn positional<F: Real>(t: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

pub(crate) fn gelu<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * u * u)
}

pub(crate) fn layer_norm<F: Real>(
    x: &[F],
    ln: &[F],
    d: usize,
    y: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * ln[j] + ln[d + j];
        }
    }
}

fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    ln: &[F],
    d: usize,
    dx: &mut [F],
    dln: &mut [F],
) {
    let inv_d = F::one() / F::of(d as f64);
    let mut dxh = vec![F::zero(); d];
    for r in 0..rstd.len() {
        let row = r * d;
        let mut s1 = F::zero();
        let mut s2 = F::zero();
        for j in 0..d {
            let g = dy[row + j];
            let xh = xhat[row + j];
            dln[j] += g * xh;
            dln[d + j] += g;
            dxh[j] = g * ln[j];
            s1 += dxh[j];
            s2 += dxh[j] * xh;
        }
        let m1 = s1 * inv_d;
        let m2 = s2 * inv_d;
        for j in 0..d {
            dx[row + j] += rstd[r] * (dxh[j] - m1 - xhat[row + j] * m2);
        }
    }
}

/// Concatenates per-head Q, K, V into one `d x 3d` matrix, column blocks
/// `[Q_0..Q_H | K_0..K_H | V_0..V_H]`.
pub(crate) fn fused_qkv<F: Real>(params: &ParamSet<F>, layer: usize) -> Vec<F> {
    let l = &params.layout;
    let cfg = &l.config;
    let (d, hd) = (cfg.d_model, cfg.head_dim());
    let mut w = vec![F::zero(); d * 3 * d];
    for h in 0..cfg.n_heads {
        for (block, kind) in [ProjKind::Q, ProjKind::K, ProjKind::V].into_iter().enumerate() {
            let src = &params.data[l.proj(layer, h, kind)];
            for i in 0..d {
                let dst = i * 3 * d + block * d + h * hd;
                w[dst..dst + hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
            }
        }
    }
    w
}

fn qkv_block(kind: ProjKind) -> usize {
    match kind {
        ProjKind::Q => 0,
        ProjKind::K => 1,
        ProjKind::V => 2,
    }
}

struct LayerCache<F> {
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    a: Vec<F>,
    w_qkv: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    z: Vec<F>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    b: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

pub(crate) struct ForwardOut<F> {
    pub logits: Vec<F>,
    pub captures: Option<Vec<Vec<F>>>,
    cache: Option<(Vec<LayerCache<F>>, Vec<F>)>,
}

/// `out (n x cols, row stride rs) += scale * (x A) B` for one adapted target.
#[allow(clippy::too_many_arguments)]
fn adapter_apply<F: Real>(
    x: &[F],
    n: usize,
    din: usize,
    fa: &[F],
    fb: &[F],
    rank: usize,
    scale: F,
    cols: usize,
    out: &mut [F],
    rs: usize,
) {
    let mut xa = vec![F::zero(); n * rank];
    matmul(x, fa, &mut xa, n, din, rank);
    for v in &mut xa {
        *v *= scale;
    }
    F::gemm(n, rank, cols, &xa, rank as isize, 1, fb, cols as isize, 1, F::one(), out, rs as isize);
}

pub(crate) fn forward_packed<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&AdapterParams<F>>,
    packed: &Packed<'_>,
    keep_cache: bool,
    capture: bool,
) -> ForwardOut<F> {
    let layout = &params.layout;
    let cfg = &layout.config;
    let (d, hd, nh, dff, vocab) = (
        cfg.d_model,
        cfg.head_dim(),
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
    );
    let n = packed.rows;
    let max_t = packed.seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let pos = positional::<F>(max_t, d);
    let scale = F::one() / F::of(hd as f64).sqrt();

    let mut h = vec![F::zero(); n * d];
    let embed = &params.data[layout.embed()];
    for (s, seq) in packed.seqs.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let r = packed.starts[s] + t;
            let e = &embed[tok as usize * d..(tok as usize + 1) * d];
            for j in 0..d {
                h[r * d + j] = e[j] + pos[t * d + j];
            }
        }
    }
    let prob_offsets: Vec<usize> = packed
        .seqs
        .iter()
        .scan(0usize, |acc, s| {
            let o = *acc;
            *acc += nh * s.len() * s.len();
            Some(o)
        })
        .collect();
    let prob_len: usize = packed.seqs.iter().map(|s| nh * s.len() * s.len()).sum();

    let mut caches = Vec::new();
    let mut captures = capture.then(Vec::new);
    for layer in 0..cfg.n_layers {
        let ln1 = &params.data[layout.ln1(layer)];
        let mut a = vec![F::zero(); n * d];
        let mut xhat1 = vec![F::zero(); n * d];
        let mut rstd1 = vec![F::zero(); n];
        layer_norm(&h, ln1, d, &mut a, &mut xhat1, &mut rstd1);

        let w_qkv = fused_qkv(params, layer);
        let mut qkv = vec![F::zero(); n * 3 * d];
        matmul(&a, &w_qkv, &mut qkv, n, d, 3 * d);
        if let Some(ad) = adapter {
            for hh in 0..nh {
                for kind in ProjKind::ALL {
                    let idx = layout.proj(layer, hh, kind);
                    if let (Some(fa), Some(fb)) = (&ad.a[idx], &ad.b[idx]) {
                        let off = qkv_block(kind) * d + hh * hd;
                        adapter_apply(&a, n, d, fa, fb, ad.rank, ad.scale, hd, &mut qkv[off..], 3 * d);
                    }
                }
            }
        }

        let mut probs = vec![F::zero(); prob_len];
        let mut z = vec![F::zero(); n * d];
        for (s, seq) in packed.seqs.iter().enumerate() {
            let t_len = seq.len();
            let o = packed.starts[s];
            for hh in 0..nh {
                let p_off = prob_offsets[s] + hh * t_len * t_len;
                let p = &mut probs[p_off..p_off + t_len * t_len];
                F::gemm(
                    t_len,
                    hd,
                    t_len,
                    &qkv[o * 3 * d + hh * hd..],
                    (3 * d) as isize,
                    1,
                    &qkv[o * 3 * d + d + hh * hd..],
                    1,
                    (3 * d) as isize,
                    F::zero(),
                    p,
                    t_len as isize,
                );
                for i in 0..t_len {
                    let row = &mut p[i * t_len..(i + 1) * t_len];
                    let mut m = F::neg_infinity();
                    for v in row.iter_mut().take(i + 1) {
                        *v *= scale;
                        m = m.max(*v);
                    }
                    let mut sum = F::zero();
                    for v in row.iter_mut().take(i + 1) {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for (j, v) in row.iter_mut().enumerate() {
                        if j <= i {
                            *v /= sum;
                        } else {
                            *v = F::zero();
                        }
                    }
                }
                F::gemm(
                    t_len,
                    t_len,
                    hd,
                    p,
                    t_len as isize,
                    1,
                    &qkv[o * 3 * d + 2 * d + hh * hd..],
                    (3 * d) as isize,
                    1,
                    F::zero(),
                    &mut z[o * d + hh * hd..],
                    d as isize,
                );
            }
        }

        let wo = &params.data[layout.out(layer)];
        let mut att = vec![F::zero(); n * d];
        matmul(&z, wo, &mut att, n, d, d);
        if let Some(ad) = adapter {
            let idx = layout.out(layer);
            if let (Some(fa), Some(fb)) = (&ad.a[idx], &ad.b[idx]) {
                adapter_apply(&z, n, d, fa, fb, ad.rank, ad.scale, d, &mut att, d);
            }
        }
        for (x, y) in h.iter_mut().zip(&att) {
            *x += *y;
        }

        let ln2 = &params.data[layout.ln2(layer)];
        let mut b = vec![F::zero(); n * d];
        let mut xhat2 = vec![F::zero(); n * d];
        let mut rstd2 = vec![F::zero(); n];
        layer_norm(&h, ln2, d, &mut b, &mut xhat2, &mut rstd2);
        let mut u = vec![F::zero(); n * dff];
        matmul(&b, &params.data[layout.ff1(layer)], &mut u, n, d, dff);
        let g: Vec<F> = u.iter().map(|&x| gelu(x)).collect();
        let mut f = vec![F::zero(); n * d];
        matmul(&g, &params.data[layout.ff2(layer)], &mut f, n, dff, d);
        for (x, y) in h.iter_mut().zip(&f) {
            *x += *y;
        }
        if let Some(c) = captures.as_mut() {
            c.push(h.clone());
        }
        if keep_cache {
            caches.push(LayerCache {
                xhat1,
                rstd1,
                a,
                w_qkv,
                qkv,
                probs,
                z,
                xhat2,
                rstd2,
                b,
                u,
                g,
            });
        }
    }

    let mut logits = vec![F::zero(); n * vocab];
    matmul(&h, &params.data[layout.head()], &mut logits, n, d, vocab);
    ForwardOut {
        logits,
        captures,
        cache: keep_cache.then_some((caches, h)),
    }
}

/// Adapter gradient contribution for one target given the dense weight
/// gradient `dw (din x dout)` and the upstream gradient `dout (n x dout)`.
#[allow(clippy::too_many_arguments)]
fn adapter_backward<F: Real>(
    dw: &[F],
    dout: &[F],
    dout_rs: usize,
    n: usize,
    din: usize,
    cols: usize,
    fa: &[F],
    fb: &[F],
    rank: usize,
    scale: F,
    ga: &mut [F],
    gb: &mut [F],
    dx: &mut [F],
) {
    // dA = s * dW * B^T ; dB = s * A^T * dW
    let mut tmp_a = vec![F::zero(); din * rank];
    matmul_nt(dw, fb, &mut tmp_a, din, cols, rank);
    for (g, t) in ga.iter_mut().zip(&tmp_a) {
        *g += scale * *t;
    }
    let mut tmp_b = vec![F::zero(); rank * cols];
    F::gemm(rank, din, cols, fa, 1, rank as isize, dw, cols as isize, 1, F::zero(), &mut tmp_b, cols as isize);
    for (g, t) in gb.iter_mut().zip(&tmp_b) {
        *g += scale * *t;
    }
    // dx += s * (dout B^T) A^T
    let mut db = vec![F::zero(); n * rank];
    F::gemm(n, cols, rank, dout, dout_rs as isize, 1, fb, 1, cols as isize, F::zero(), &mut db, rank as isize);
    for v in &mut db {
        *v *= scale;
    }
    matmul_nt_acc(&db, fa, dx, n, rank, din);
}

pub(crate) fn backward_packed<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&AdapterParams<F>>,
    packed: &Packed<'_>,
    fwd: ForwardOut<F>,
    dlogits: &[F],
    grads: &mut ParamSet<F>,
    mut agrads: Option<&mut AdapterParams<F>>,
) {
    let layout = params.layout.clone();
    let cfg = &layout.config;
    let (d, hd, nh, dff, vocab) = (
        cfg.d_model,
        cfg.head_dim(),
        cfg.n_heads,
        cfg.d_ff,
        cfg.vocab_size,
    );
    let n = packed.rows;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let (caches, h_final) = fwd.cache.expect("forward run without cache");

    matmul_tn_acc(&h_final, dlogits, &mut grads.data[layout.head()], d, n, vocab);
    let mut dh = vec![F::zero(); n * d];
    matmul_nt(dlogits, &params.data[layout.head()], &mut dh, n, vocab, d);

    let prob_offsets: Vec<usize> = packed
        .seqs
        .iter()
        .scan(0usize, |acc, s| {
            let o = *acc;
            *acc += nh * s.len() * s.len();
            Some(o)
        })
        .collect();

    for layer in (0..cfg.n_layers).rev() {
        let c = &caches[layer];
        // feed-forward
        let mut dg = vec![F::zero(); n * dff];
        matmul_tn_acc(&c.g, &dh, &mut grads.data[layout.ff2(layer)], dff, n, d);
        matmul_nt(&dh, &params.data[layout.ff2(layer)], &mut dg, n, d, dff);
        for (x, &u) in dg.iter_mut().zip(&c.u) {
            *x *= gelu_grad(u);
        }
        matmul_tn_acc(&c.b, &dg, &mut grads.data[layout.ff1(layer)], d, n, dff);
        let mut db = vec![F::zero(); n * d];
        matmul_nt(&dg, &params.data[layout.ff1(layer)], &mut db, n, dff, d);
        let mut dh2 = dh.clone();
        {
            let ln2 = &params.data[layout.ln2(layer)];
            let dln2 = &mut grads.data[layout.ln2(layer)];
            layer_norm_backward(&db, &c.xhat2, &c.rstd2, ln2, d, &mut dh2, dln2);
        }

        // output projection
        let out_idx = layout.out(layer);
        let mut dwo = vec![F::zero(); d * d];
        matmul_tn_acc(&c.z, &dh2, &mut dwo, d, n, d);
        let mut dz = vec![F::zero(); n * d];
        matmul_nt(&dh2, &params.data[out_idx], &mut dz, n, d, d);
        if let (Some(ad), Some(ag)) = (adapter, agrads.as_deref_mut()) {
            if let (Some(fa), Some(fb)) = (&ad.a[out_idx], &ad.b[out_idx]) {
                let ga = ag.a[out_idx].as_mut().expect("adapter grad slot");
                let gb = ag.b[out_idx].as_mut().expect("adapter grad slot");
                adapter_backward(&dwo, &dh2, d, n, d, d, fa, fb, ad.rank, ad.scale, ga, gb, &mut dz);
            }
        }
        for (g, w) in grads.data[out_idx].iter_mut().zip(&dwo) {
            *g += *w;
        }

        // attention
        let mut dqkv = vec![F::zero(); n * 3 * d];
        for (s, seq) in packed.seqs.iter().enumerate() {
            let t_len = seq.len();
            let o = packed.starts[s];
            let mut dp = vec![F::zero(); t_len * t_len];
            for hh in 0..nh {
                let p_off = prob_offsets[s] + hh * t_len * t_len;
                let p = &c.probs[p_off..p_off + t_len * t_len];
                // dp = dz_h v^T
                F::gemm(
                    t_len,
                    hd,
                    t_len,
                    &dz[o * d + hh * hd..],
                    d as isize,
                    1,
                    &c.qkv[o * 3 * d + 2 * d + hh * hd..],
                    1,
                    (3 * d) as isize,
                    F::zero(),
                    &mut dp,
                    t_len as isize,
                );
                // dv = p^T dz_h
                F::gemm(
                    t_len,
                    t_len,
                    hd,
                    p,
                    1,
                    t_len as isize,
                    &dz[o * d + hh * hd..],
                    d as isize,
                    1,
                    F::zero(),
                    &mut dqkv[o * 3 * d + 2 * d + hh * hd..],
                    (3 * d) as isize,
                );
                // softmax backward, folded with the score scale
                for i in 0..t_len {
                    let row = i * t_len;
                    let mut dot = F::zero();
                    for j in 0..=i {
                        dot += p[row + j] * dp[row + j];
                    }
                    for j in 0..t_len {
                        dp[row + j] = if j <= i {
                            p[row + j] * (dp[row + j] - dot) * scale
                        } else {
                            F::zero()
                        };
                    }
                }
                // dq = ds k
                F::gemm(
                    t_len,
                    t_len,
                    hd,
                    &dp,
                    t_len as isize,
                    1,
                    &c.qkv[o * 3 * d + d + hh * hd..],
                    (3 * d) as isize,
                    1,
                    F::zero(),
                    &mut dqkv[o * 3 * d + hh * hd..],
                    (3 * d) as isize,
                );
                // dk = ds^T q
                F::gemm(
                    t_len,
                    t_len,
                    hd,
                    &dp,
                    1,
                    t_len as isize,
                    &c.qkv[o * 3 * d + hh * hd..],
                    (3 * d) as isize,
                    1,
                    F::zero(),
                    &mut dqkv[o * 3 * d + d + hh * hd..],
                    (3 * d) as isize,
                );
            }
        }

        let mut dw_qkv = vec![F::zero(); d * 3 * d];
        matmul_tn_acc(&c.a, &dqkv, &mut dw_qkv, d, n, 3 * d);
        let mut da = vec![F::zero(); n * d];
        matmul_nt(&dqkv, &c.w_qkv, &mut da, n, 3 * d, d);
        for hh in 0..nh {
            for kind in ProjKind::ALL {
                let idx = layout.proj(layer, hh, kind);
                let col = qkv_block(kind) * d + hh * hd;
                // gather the dense block gradient
                let mut block = vec![F::zero(); d * hd];
                for i in 0..d {
                    block[i * hd..(i + 1) * hd]
                        .copy_from_slice(&dw_qkv[i * 3 * d + col..i * 3 * d + col + hd]);
                }
                if let (Some(ad), Some(ag)) = (adapter, agrads.as_deref_mut()) {
                    if let (Some(fa), Some(fb)) = (&ad.a[idx], &ad.b[idx]) {
                        let ga = ag.a[idx].as_mut().expect("adapter grad slot");
                        let gb = ag.b[idx].as_mut().expect("adapter grad slot");
                        adapter_backward(
                            &block,
                            &dqkv[col..],
                            3 * d,
                            n,
                            d,
                            hd,
                            fa,
                            fb,
                            ad.rank,
                            ad.scale,
                            ga,
                            gb,
                            &mut da,
                        );
                    }
                }
                for (g, w) in grads.data[idx].iter_mut().zip(&block) {
                    *g += *w;
                }
            }
        }

        let mut dh_in = dh2;
        {
            let ln1 = &params.data[layout.ln1(layer)];
            let dln1 = &mut grads.data[layout.ln1(layer)];
            layer_norm_backward(&da, &c.xhat1, &c.rstd1, ln1, d, &mut dh_in, dln1);
        }
        dh = dh_in;
    }

    let gembed = &mut grads.data[layout.embed()];
    for (s, seq) in packed.seqs.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let r = packed.starts[s] + t;
            let dst = &mut gembed[tok as usize * d..(tok as usize + 1) * d];
            for j in 0..d {
                dst[j] += dh[r * d + j];
            }
        }
    }
}

/// Gradients of the batch loss with respect to base tensors and, when an
/// adapter is active, its factors.
pub struct BatchGrads<F> {
    pub loss: f64,
    pub grads: ParamSet<F>,
    pub adapter: Option<AdapterParams<F>>,
}

/// Mean next-token cross-entropy over all response positions of the
/// batch, with gradients.
pub fn loss_and_grads_params<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&AdapterParams<F>>,
    batch: &[&Sequence],
) -> Result<BatchGrads<F>, EngineError> {
    if batch.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    for s in batch {
        validate_tokens(&params.layout, &s.tokens)?;
    }
    let count: usize = batch.iter().map(|s| s.target_count()).sum();
    if count == 0 {
        return Err(EngineError::NoTargets);
    }
    let packed = Packed::new(batch.iter().map(|s| s.tokens.as_slice()).collect());
    let fwd = forward_packed(params, adapter, &packed, true, false);
    let vocab = params.layout.config.vocab_size;
    let mut dlogits = vec![F::zero(); packed.rows * vocab];
    let inv = 1.0 / count as f64;
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; vocab];
    for (s, seq) in batch.iter().enumerate() {
        let o = packed.starts[s];
        for t in seq.prompt_len.max(1) - 1..seq.tokens.len() - 1 {
            let row = (o + t) * vocab;
            let target = seq.tokens[t + 1] as usize;
            let lg = &fwd.logits[row..row + vocab];
            let m = lg.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let mut z = 0.0;
            for (p, v) in probs.iter_mut().zip(lg) {
                *p = (v.f64() - m).exp();
                z += *p;
            }
            loss += m + z.ln() - lg[target].f64();
            for (j, p) in probs.iter().enumerate() {
                let y = if j == target { 1.0 } else { 0.0 };
                dlogits[row + j] = F::of((p / z - y) * inv);
            }
        }
    }
    let mut grads = ParamSet::zeros(params.layout.clone());
    let mut agrads = adapter.map(AdapterParams::zeros_like);
    backward_packed(params, adapter, &packed, fwd, &dlogits, &mut grads, agrads.as_mut());
    Ok(BatchGrads {
        loss: loss * inv,
        grads,
        adapter: agrads,
    })
}

/// Logits (`len x vocab`) and optional per-block outputs for one sequence.
pub fn forward_params<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&AdapterParams<F>>,
    tokens: &[u32],
    capture: bool,
) -> Result<(Vec<F>, Option<Vec<Vec<F>>>), EngineError> {
    validate_tokens(&params.layout, tokens)?;
    let packed = Packed::new(vec![tokens]);
    let out = forward_packed(params, adapter, &packed, false, capture);
    Ok((out.logits, out.captures))
}

/// Mean loss only, for finite-difference checks.
pub fn loss_params<F: Real>(
    params: &ParamSet<F>,
    adapter: Option<&AdapterParams<F>>,
    batch: &[&Sequence],
) -> Result<f64, EngineError> {
    if batch.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let count: usize = batch.iter().map(|s| s.target_count()).sum();
    if count == 0 {
        return Err(EngineError::NoTargets);
    }
    let vocab = params.layout.config.vocab_size;
    let mut loss = 0.0;
    for s in batch {
        let (logits, _) = forward_params(params, adapter, &s.tokens, false)?;
        for t in s.prompt_len.max(1) - 1..s.tokens.len() - 1 {
            let lg = &logits[t * vocab..(t + 1) * vocab];
            let m = lg.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let z: f64 = lg.iter().map(|v| (v.f64() - m).exp()).sum();
            loss += m + z.ln() - lg[s.tokens[t + 1] as usize].f64();
        }
    }
    Ok(loss / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::ModelConfig;
    use std::sync::Arc;

    fn tiny() -> Arc<Layout> {
        Arc::new(Layout::new(&ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab_size: 9,
            max_seq_len: 10,
        }))
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (gelu(u + e) - gelu(u - e)) / (2.0 * e);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn packing_matches_single_sequence_forward() {
        let p = ParamSet::<f64>::init(tiny(), 2);
        let a = [1u32, 2, 3, 4];
        let b = [5u32, 6];
        let packed = Packed::new(vec![&a[..], &b[..]]);
        let both = forward_packed(&p, None, &packed, false, false).logits;
        let (la, _) = forward_params(&p, None, &a, false).unwrap();
        let (lb, _) = forward_params(&p, None, &b, false).unwrap();
        let v = 9;
        for (x, y) in both[..4 * v].iter().zip(&la) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[4 * v..].iter().zip(&lb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = ParamSet::<f64>::init(tiny(), 3);
        let (long, _) = forward_params(&p, None, &[1, 2, 3, 4, 5], false).unwrap();
        let (short, _) = forward_params(&p, None, &[1, 2, 3], false).unwrap();
        for (x, y) in long[..3 * 9].iter().zip(&short) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = ParamSet::<f64>::init(tiny(), 0);
        assert!(matches!(
            forward_params(&p, None, &[1, 99], false),
            Err(EngineError::TokenOutOfVocab { token: 99, .. })
        ));
        assert!(matches!(
            forward_params(&p, None, &[1; 11], false),
            Err(EngineError::SequenceTooLong { len: 11, max: 10 })
        ));
        let s = Sequence {
            tokens: vec![1, 2],
            prompt_len: 2,
        };
        assert!(matches!(loss_and_grads_params(&p, None, &[&s]), Err(EngineError::NoTargets)));
        assert!(matches!(
            loss_and_grads_params::<f64>(&p, None, &[]),
            Err(EngineError::EmptyBatch)
        ));
    }

    #[test]
    fn loss_only_path_agrees() {
        let p = ParamSet::<f64>::init(tiny(), 4);
        let s1 = Sequence {
            tokens: vec![1, 4, 5, 6, 2],
            prompt_len: 2,
        };
        let s2 = Sequence {
            tokens: vec![1, 7, 3, 2],
            prompt_len: 3,
        };
        let g = loss_and_grads_params(&p, None, &[&s1, &s2]).unwrap();
        let l = loss_params(&p, None, &[&s1, &s2]).unwrap();
        assert!((g.loss - l).abs() < 1e-12);
    }
}
