//! Forward and backward functions for every tensor operation the model uses.

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::BinaryMask;
use crate::tensorops::Tensor;

/// Norm floor used by [`cosine_rows`]; a zero row has similarity 0.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance offset inside [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-10;

fn check_rank(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(shape(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a (m x k) . b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(a, 2, "matmul")?;
    check_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape(format!("matmul: {:?} x {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)).expect("shape computed"))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T . b` for `a (k x m)`, `b (k x n)`.
fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a . b^T` for `a (m x k)`, `b (n x k)`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = a_row
                .iter()
                .zip(&b[j * k..(j + 1) * k])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// Gradients of [`matmul`]: `(dy . b^T, a^T . dy)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let da = matmul_nt_raw(dy.data(), b.data(), m, n, k);
    let db = matmul_tn_raw(a.data(), dy.data(), m, k, n);
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

/// `a . b^T` for matrices with equal column counts.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(a, 2, "matmul_nt")?;
    check_rank(b, 2, "matmul_nt")?;
    if a.cols() != b.cols() {
        return Err(shape(format!(
            "matmul_nt: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    Ok(Tensor::new(vec![m, n], matmul_nt_raw(a.data(), b.data(), m, k, n)).expect("shape"))
}

/// `a^T . b` for matrices with equal row counts.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(a, 2, "matmul_tn")?;
    check_rank(b, 2, "matmul_tn")?;
    if a.rows() != b.rows() {
        return Err(shape(format!(
            "matmul_tn: {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    Ok(Tensor::new(vec![m, n], matmul_tn_raw(a.data(), b.data(), k, m, n)).expect("shape"))
}

/// Affine map on the last axis: `x . w + b` with `w (in x out)`, `b [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(w, 2, "linear")?;
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    if x.cols() != fan_in || b.len() != fan_out {
        return Err(shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.rows();
    let mut out = matmul_raw(x.data(), w.data(), rows, fan_in, fan_out);
    for r in 0..rows {
        for (o, bv) in out[r * fan_out..(r + 1) * fan_out].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = fan_out;
    Tensor::new(shape, out)
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let dx = matmul_nt_raw(dy.data(), w.data(), rows, fan_out, fan_in);
    let dw = matmul_tn_raw(x.data(), dy.data(), rows, fan_in, fan_out);
    let mut db = vec![0.0; fan_out];
    for r in 0..rows {
        for (d, g) in db
            .iter_mut()
            .zip(&dy.data()[r * fan_out..(r + 1) * fan_out])
        {
            *d += g;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![fan_in, fan_out], dw).expect("shape"),
        Tensor::new(vec![fan_out], db).expect("shape"),
    )
}

fn concat_layout(a: &[usize], b: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if a.len() != b.len() || axis >= a.len() {
        return Err(shape(format!("concat: {a:?} and {b:?} on axis {axis}")));
    }
    for (d, (x, y)) in a.iter().zip(b).enumerate() {
        if d != axis && x != y {
            return Err(shape(format!(
                "concat: {a:?} and {b:?} differ off axis {axis}"
            )));
        }
    }
    let outer: usize = a[..axis].iter().product();
    let inner_a: usize = a[axis..].iter().product();
    let inner_b: usize = b[axis..].iter().product();
    Ok((outer, inner_a, inner_b))
}

/// Concatenation along `axis`.
pub fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, ia, ib) = concat_layout(a.shape(), b.shape(), axis)?;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * ia..(o + 1) * ia]);
        data.extend_from_slice(&b.data()[o * ib..(o + 1) * ib]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] += b.shape()[axis];
    Tensor::new(shape, data)
}

/// Splits `t` along `axis` after the first `first` entries; inverse of
/// [`concat`] and its backward.
pub fn split(t: &Tensor, axis: usize, first: usize) -> Result<(Tensor, Tensor)> {
    if axis >= t.rank() || first > t.shape()[axis] {
        return Err(shape(format!(
            "split: {:?} at {first} on axis {axis}",
            t.shape()
        )));
    }
    let mut sa = t.shape().to_vec();
    sa[axis] = first;
    let mut sb = t.shape().to_vec();
    sb[axis] -= first;
    let (outer, ia, ib) = concat_layout(&sa, &sb, axis)?;
    let mut da = Vec::with_capacity(outer * ia);
    let mut db = Vec::with_capacity(outer * ib);
    for o in 0..outer {
        let base = o * (ia + ib);
        da.extend_from_slice(&t.data()[base..base + ia]);
        db.extend_from_slice(&t.data()[base + ia..base + ia + ib]);
    }
    Ok((Tensor::new(sa, da)?, Tensor::new(sb, db)?))
}

/// Gradients of [`concat`].
pub fn concat_backward(dy: &Tensor, a_shape: &[usize], axis: usize) -> (Tensor, Tensor) {
    split(dy, axis, a_shape[axis]).expect("gradient matches forward output")
}

/// Swaps the first two axes; its own backward.
pub fn transpose_first_two(t: &Tensor) -> Result<Tensor> {
    if t.rank() < 2 {
        return Err(shape(format!("transpose_first_two: rank {} < 2", t.rank())));
    }
    let (d0, d1) = (t.shape()[0], t.shape()[1]);
    let inner: usize = t.shape()[2..].iter().product();
    let mut data = vec![0.0; t.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            let src = (i * d1 + j) * inner;
            let dst = (j * d0 + i) * inner;
            data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(0, 1);
    Tensor::new(shape, data)
}

/// `elu(x) + 1`: `x + 1` for positive inputs, `exp(x)` otherwise.
pub fn elu_plus_one(t: &Tensor) -> Tensor {
    t.map(|x| if x > 0.0 { x + 1.0 } else { x.exp() })
}

pub fn elu_plus_one_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { g * x.exp() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(t: &Tensor) -> Tensor {
    t.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let th = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

/// Saved state of a [`layer_norm`] forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes every row of the last axis to zero mean and unit variance,
/// then applies `gain` and `bias` (both `[D]`).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape(format!(
            "layer_norm: rows of {d}, gain {:?}, bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.rows();
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let nrow = normalized.row(r).to_vec();
        for (k, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nrow[k] * gain.data()[k] + bias.data()[k];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Gradients of [`layer_norm`]: `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = dy.cols();
    let rows = dy.rows();
    let mut dx = dy.clone();
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = dy.row(r);
        let xhat = cache.normalized.row(r);
        for k in 0..d {
            dgain[k] += g[k] * xhat[k];
            dbias[k] += g[k];
            dxhat[k] = g[k] * gain.data()[k];
        }
        let mean_g = dxhat.iter().sum::<f64>() / d as f64;
        let mean_gx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[k] - mean_g - xhat[k] * mean_gx);
        }
    }
    (
        dx,
        Tensor::new(vec![d], dgain).expect("shape"),
        Tensor::new(vec![d], dbias).expect("shape"),
    )
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Pairwise cosine similarity of the rows of `a (N x D)` and `b (M x D)`.
/// Norms are floored at [`COSINE_EPS`].
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank(a, 2, "cosine_rows")?;
    check_rank(b, 2, "cosine_rows")?;
    if a.cols() != b.cols() {
        return Err(shape(format!(
            "cosine_rows: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let na: Vec<f64> = row_norms(a)
        .into_iter()
        .map(|v| v.max(COSINE_EPS))
        .collect();
    let nb: Vec<f64> = row_norms(b)
        .into_iter()
        .map(|v| v.max(COSINE_EPS))
        .collect();
    let mut out = matmul_nt(a, b)?;
    let m = b.rows();
    for (i, &ni) in na.iter().enumerate() {
        for (j, &nj) in nb.iter().enumerate() {
            out.data_mut()[i * m + j] /= ni * nj;
        }
    }
    Ok(out)
}

/// Gradients of [`cosine_rows`]: `(da, db)`.
pub fn cosine_rows_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let raw_a = row_norms(a);
    let raw_b = row_norms(b);
    let na: Vec<f64> = raw_a.iter().map(|v| v.max(COSINE_EPS)).collect();
    let nb: Vec<f64> = raw_b.iter().map(|v| v.max(COSINE_EPS)).collect();
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let c = cosine_rows(a, b).expect("validated by forward");

    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let g = dy.data()[i * m + j];
            if g == 0.0 {
                continue;
            }
            let bj = b.row(j);
            let cij = c.data()[i * m + j];
            let inv = 1.0 / (na[i] * nb[j]);
            let ka = if raw_a[i] > COSINE_EPS {
                cij / (na[i] * na[i])
            } else {
                0.0
            };
            let kb = if raw_b[j] > COSINE_EPS {
                cij / (nb[j] * nb[j])
            } else {
                0.0
            };
            {
                let dai = da.row_mut(i);
                for k in 0..d {
                    dai[k] += g * (bj[k] * inv - ka * ai[k]);
                }
            }
            let dbj = db.row_mut(j);
            for k in 0..d {
                dbj[k] += g * (ai[k] * inv - kb * bj[k]);
            }
        }
    }
    (da, db)
}

/// Row-wise maximum of an `N x M` matrix, with the first argmax per row.
pub fn max_pool_rows(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_rank(t, 2, "max_pool_rows")?;
    if t.cols() == 0 {
        return Err(shape("max_pool_rows: no columns"));
    }
    let mut values = Vec::with_capacity(t.rows());
    let mut argmax = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let (j, v) =
            t.row(r)
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                });
        values.push(v);
        argmax.push(j);
    }
    Ok((Tensor::new(vec![t.rows()], values)?, argmax))
}

pub fn max_pool_rows_backward(argmax: &[usize], cols: usize, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(&[argmax.len(), cols]);
    for (r, &j) in argmax.iter().enumerate() {
        dx.data_mut()[r * cols + j] = dy.data()[r];
    }
    dx
}

/// Mean of the masked rows of `t (N x D)` as a `1 x D` tensor.
pub fn masked_mean_rows(t: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    check_rank(t, 2, "masked_mean_rows")?;
    if mask.len() != t.rows() {
        return Err(shape(format!(
            "masked_mean_rows: {} rows, mask of {}",
            t.rows(),
            mask.len()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let d = t.cols();
    let mut acc = vec![0.0; d];
    for r in mask.indices() {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Tensor::new(vec![1, d], acc)
}

pub fn masked_mean_rows_backward(mask: &BinaryMask, dy: &Tensor) -> Tensor {
    let d = dy.cols();
    let count = mask.count() as f64;
    let mut dx = Tensor::zeros(&[mask.len(), d]);
    for r in mask.indices() {
        for (o, g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
            *o = g / count;
        }
    }
    dx
}

/// Row-wise softmax of the last axis.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `logits (N x C)` against class indices. Returns
/// the loss and the softmax probabilities for the backward pass.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    check_rank(logits, 2, "cross_entropy")?;
    let (n, c) = (logits.rows(), logits.cols());
    if targets.len() != n || n == 0 {
        return Err(shape(format!(
            "cross_entropy: {n} rows, {} targets",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(invalid(format!(
            "cross_entropy: target {t} outside {c} classes"
        )));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((loss / n as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, targets: &[usize]) -> Tensor {
    let n = probs.rows() as f64;
    let mut d = probs.scale(1.0 / n);
    for (r, &t) in targets.iter().enumerate() {
        d.row_mut(r)[t] -= 1.0 / n;
    }
    d
}
