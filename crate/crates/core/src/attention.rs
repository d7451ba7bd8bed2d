//! Softmax attention (kept as a reference) and linear attention with the
//! `elu + 1` feature map, plus the multi-head wrapper used inside the
//! correlation-augmentation layers.

use crate::error::{invalid, shape, Result};
use crate::rng::Rng;
use crate::tensorops::layers::{Module, Parameter};
use crate::tensorops::ops;
use crate::tensorops::Tensor;

/// Lower clamp on linear-attention denominators.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(shape("attention inputs must be matrices"));
    }
    if q.cols() != k.cols() || k.rows() != v.rows() || q.rows() == 0 || k.rows() == 0 {
        return Err(shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Saved softmax weights of [`standard_attention_forward`].
#[derive(Debug, Clone)]
pub struct StandardAttentionCache {
    weights: Tensor,
}

/// Row `i` of the output is `sum_j w_ij v_j` with
/// `w_ij = softmax_j(q_i . k_j / sqrt(D))`.
pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    standard_attention_forward(q, k, v).map(|(y, _)| y)
}

pub fn standard_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, StandardAttentionCache)> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = ops::matmul_nt(q, k)?.scale(scale);
    let weights = ops::softmax_rows(&scores);
    let out = ops::matmul(&weights, v)?;
    Ok((out, StandardAttentionCache { weights }))
}

/// Gradients `(dq, dk, dv)` of standard attention.
pub fn standard_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &StandardAttentionCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let w = &cache.weights;
    let (dw, dv) = ops::matmul_backward(w, v, dy);
    let mut ds = dw.clone();
    for r in 0..w.rows() {
        let wr = w.row(r);
        let dr = dw.row(r);
        let inner: f64 = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (&wv, &g)) in ds.row_mut(r).iter_mut().zip(wr.iter().zip(dr)) {
            *o = wv * (g - inner) * scale;
        }
    }
    let dq = ops::matmul(&ds, k).expect("shapes from forward");
    let dk = ops::matmul_tn(&ds, q).expect("shapes from forward");
    (dq, dk, dv)
}

/// Intermediate values of [`linear_attention_forward`].
#[derive(Debug, Clone)]
pub struct LinearAttentionCache {
    phi_q: Tensor,
    phi_k: Tensor,
    kv: Tensor,
    z: Vec<f64>,
    out: Tensor,
    den: Vec<f64>,
    clamped: Vec<bool>,
}

/// Linear attention, computed as `phi(q_i) (sum_j phi(k_j)^T v_j)` over
/// `phi(q_i) . sum_j phi(k_j)` in `O(N D^2)`.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    linear_attention_forward(q, k, v).map(|(y, _)| y)
}

pub fn linear_attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, LinearAttentionCache)> {
    check_qkv(q, k, v)?;
    let phi_q = ops::elu_plus_one(q);
    let phi_k = ops::elu_plus_one(k);
    let kv = ops::matmul_tn(&phi_k, v)?;
    let d = q.cols();
    let mut z = vec![0.0; d];
    for r in 0..phi_k.rows() {
        for (acc, x) in z.iter_mut().zip(phi_k.row(r)) {
            *acc += x;
        }
    }
    let mut out = ops::matmul(&phi_q, &kv)?;
    let mut den = Vec::with_capacity(q.rows());
    let mut clamped = Vec::with_capacity(q.rows());
    for r in 0..q.rows() {
        let raw: f64 = phi_q.row(r).iter().zip(&z).map(|(a, b)| a * b).sum();
        let dr = raw.max(DENOMINATOR_FLOOR);
        clamped.push(raw < DENOMINATOR_FLOOR);
        den.push(dr);
        for o in out.row_mut(r) {
            *o /= dr;
        }
    }
    let cache = LinearAttentionCache {
        phi_q,
        phi_k,
        kv,
        z,
        out: out.clone(),
        den,
        clamped,
    };
    Ok((out, cache))
}

/// Gradients `(dq, dk, dv)` of linear attention.
pub fn linear_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &LinearAttentionCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = q.rows();
    let d = q.cols();
    let mut dnum = dy.clone();
    let mut dden = vec![0.0; n];
    for (r, dd) in dden.iter_mut().enumerate() {
        if !cache.clamped[r] {
            let s: f64 = dy
                .row(r)
                .iter()
                .zip(cache.out.row(r))
                .map(|(a, b)| a * b)
                .sum();
            *dd = -s / cache.den[r];
        }
        for g in dnum.row_mut(r) {
            *g /= cache.den[r];
        }
    }
    let mut dphi_q = ops::matmul_nt(&dnum, &cache.kv).expect("shapes from forward");
    for (r, dd) in dden.iter().enumerate() {
        for (o, zk) in dphi_q.row_mut(r).iter_mut().zip(&cache.z) {
            *o += dd * zk;
        }
    }
    let dkv = ops::matmul_tn(&cache.phi_q, &dnum).expect("shapes from forward");
    let mut dz = vec![0.0; d];
    for (r, dd) in dden.iter().enumerate() {
        for (acc, x) in dz.iter_mut().zip(cache.phi_q.row(r)) {
            *acc += dd * x;
        }
    }
    let mut dphi_k = ops::matmul_nt(v, &dkv).expect("shapes from forward");
    for r in 0..dphi_k.rows() {
        for (o, g) in dphi_k.row_mut(r).iter_mut().zip(&dz) {
            *o += g;
        }
    }
    let dv = ops::matmul(&cache.phi_k, &dkv).expect("shapes from forward");
    (
        ops::elu_plus_one_backward(q, &dphi_q),
        ops::elu_plus_one_backward(k, &dphi_k),
        dv,
    )
}

/// Projection weights of one multi-head linear-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub w_o: Parameter,
    heads: usize,
}

impl AttentionParams {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(format!(
                "{heads} heads do not divide dimension {dim}"
            )));
        }
        let mut w = |suffix: &str| {
            Parameter::new(format!("{name}.{suffix}"), Tensor::glorot(dim, dim, rng))
        };
        Ok(Self {
            w_q: w("w_q"),
            w_k: w("w_k"),
            w_v: w("w_v"),
            w_o: w("w_o"),
            heads,
        })
    }

    /// Explicit projections, e.g. identities in tests.
    pub fn from_weights(
        name: &str,
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        heads: usize,
    ) -> Result<Self> {
        let dim = w_q.cols();
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [dim, dim] {
                return Err(shape(format!(
                    "projection must be {dim}x{dim}, got {:?}",
                    w.shape()
                )));
            }
        }
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(format!(
                "{heads} heads do not divide dimension {dim}"
            )));
        }
        Ok(Self {
            w_q: Parameter::new(format!("{name}.w_q"), w_q),
            w_k: Parameter::new(format!("{name}.w_k"), w_k),
            w_v: Parameter::new(format!("{name}.w_v"), w_v),
            w_o: Parameter::new(format!("{name}.w_o"), w_o),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.value.cols()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Runs linear attention independently on every slice of `x (B x N x D)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MultiHeadCache)> {
        if x.rank() != 3 || x.cols() != self.dim() || x.shape()[0] == 0 || x.shape()[1] == 0 {
            return Err(shape(format!(
                "multi-head attention expects B x N x {}, got {:?}",
                self.dim(),
                x.shape()
            )));
        }
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = x.reshape(&[b * n, d])?;
        let q = ops::matmul(&flat, &self.w_q.value)?;
        let k = ops::matmul(&flat, &self.w_k.value)?;
        let v = ops::matmul(&flat, &self.w_v.value)?;
        let dh = d / self.heads;
        let mut heads_out = Tensor::zeros(&[b * n, d]);
        let mut caches = Vec::with_capacity(b * self.heads);
        for s in 0..b {
            for h in 0..self.heads {
                let qs = block(&q, s * n, n, h * dh, dh);
                let ks = block(&k, s * n, n, h * dh, dh);
                let vs = block(&v, s * n, n, h * dh, dh);
                let (o, c) = linear_attention_forward(&qs, &ks, &vs)?;
                put_block(&mut heads_out, &o, s * n, h * dh);
                caches.push(HeadCache {
                    q: qs,
                    k: ks,
                    v: vs,
                    attn: c,
                });
            }
        }
        let out = ops::matmul(&heads_out, &self.w_o.value)?.into_reshape(&[b, n, d])?;
        Ok((
            out,
            MultiHeadCache {
                input: flat,
                heads_out,
                heads: caches,
                shape: [b, n, d],
            },
        ))
    }

    /// Accumulates projection gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &MultiHeadCache, dy: &Tensor) -> Tensor {
        let [b, n, d] = cache.shape;
        let dy = dy.reshape(&[b * n, d]).expect("gradient matches output");
        let (dheads, dwo) = ops::matmul_backward(&cache.heads_out, &self.w_o.value, &dy);
        self.w_o.accumulate(&dwo);
        let dh = d / self.heads;
        let mut dq = Tensor::zeros(&[b * n, d]);
        let mut dk = Tensor::zeros(&[b * n, d]);
        let mut dv = Tensor::zeros(&[b * n, d]);
        for s in 0..b {
            for h in 0..self.heads {
                let hc = &cache.heads[s * self.heads + h];
                let g = block(&dheads, s * n, n, h * dh, dh);
                let (gq, gk, gv) = linear_attention_backward(&hc.q, &hc.k, &hc.v, &hc.attn, &g);
                put_block(&mut dq, &gq, s * n, h * dh);
                put_block(&mut dk, &gk, s * n, h * dh);
                put_block(&mut dv, &gv, s * n, h * dh);
            }
        }
        let mut dx = Tensor::zeros(&[b * n, d]);
        for (w, g) in [
            (&mut self.w_q, &dq),
            (&mut self.w_k, &dk),
            (&mut self.w_v, &dv),
        ] {
            let (dxi, dw) = ops::matmul_backward(&cache.input, &w.value, g);
            w.accumulate(&dw);
            dx.add_assign(&dxi).expect("same shape");
        }
        dx.into_reshape(&[b, n, d]).expect("shape")
    }
}

impl Module for AttentionParams {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: LinearAttentionCache,
}

/// Saved state of [`AttentionParams::forward`].
#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    input: Tensor,
    heads_out: Tensor,
    heads: Vec<HeadCache>,
    shape: [usize; 3],
}

/// Free-function form of [`AttentionParams::forward`].
pub fn multi_head_linear_attention(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    params.forward(x).map(|(y, _)| y)
}

fn block(t: &Tensor, row0: usize, rows: usize, col0: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        data.extend_from_slice(&t.row(r)[col0..col0 + cols]);
    }
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn put_block(t: &mut Tensor, src: &Tensor, row0: usize, col0: usize) {
    let cols = src.cols();
    for r in 0..src.rows() {
        t.row_mut(row0 + r)[col0..col0 + cols].copy_from_slice(src.row(r));
    }
}
