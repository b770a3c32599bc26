//! Forward kernels. Each function validates shapes and returns a fresh tensor;
//! recording for differentiation happens in [`crate::tape`].

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::invalid(
            op,
            format!("expected a 2-D tensor, got shape {:?}", t.shape()),
        )),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(TensorError::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Dot product with independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `[m, k] x [n, k]^T -> [m, n]`
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul_t", a)?;
    let (n, k2) = require_2d("matmul_t", b)?;
    if k != k2 {
        return Err(TensorError::shape("matmul_t", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    const BLOCK: usize = 16;
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(BLOCK) {
        let rows = i0..(i0 + BLOCK).min(m);
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            for i in rows.clone() {
                out[i * n + j] = dot(&ad[i * k..(i + 1) * k], brow);
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Adds `row` (length = last axis of `a`) to every row of `a`.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if row.len() != c {
        return Err(TensorError::shape("add_row", a.shape(), row.shape()));
    }
    let rd = row.data();
    let data = a
        .data()
        .chunks(c)
        .flat_map(|r| r.iter().zip(rd).map(|(x, y)| x + y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v + s)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

/// Concatenates along the last axis. All leading dimensions must agree.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(TensorError::invalid("concat", "no inputs"));
    };
    let lead = &first.shape()[..first.shape().len() - 1];
    for p in &parts[1..] {
        let pl = &p.shape()[..p.shape().len() - 1];
        if pl != lead {
            return Err(TensorError::shape("concat", first.shape(), p.shape()));
        }
    }
    let rows = first.rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row_slice(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

/// Mean over rows of a `[r, c]` matrix, giving `[1, c]`.
pub fn row_mean(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_2d("row_mean", a)?;
    let mut out = vec![0.0; c];
    for row in a.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / r as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![1, c], out))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = a.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(TensorError::Domain { op: "log", value: bad });
    }
    Ok(a.map(f64::ln))
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data().chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Log-softmax over the last axis.
pub fn log_softmax(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data().chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Gathers rows of a `[vocab, dim]` table, giving `[ids.len(), dim]`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = require_2d("embedding", table)?;
    if ids.is_empty() {
        return Err(TensorError::invalid("embedding", "no ids"));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: id,
                bound: v,
            });
        }
        data.extend_from_slice(table.row_slice(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], data))
}

/// Columns `start..start+len` of the last axis.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = a.cols();
    if len == 0 || start + len > c {
        return Err(TensorError::IndexOutOfRange {
            op: "slice",
            index: start + len,
            bound: c,
        });
    }
    let data = a
        .data()
        .chunks(c)
        .flat_map(|r| r[start..start + len].iter().copied())
        .collect();
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Repeats a `[r, c]` matrix `k` times vertically, giving `[k * r, c]`.
pub fn tile_rows(a: &Tensor, k: usize) -> Result<Tensor> {
    let (r, c) = require_2d("tile_rows", a)?;
    if k == 0 {
        return Err(TensorError::invalid("tile_rows", "repeat count must be positive"));
    }
    let mut data = Vec::with_capacity(k * a.len());
    for _ in 0..k {
        data.extend_from_slice(a.data());
    }
    Ok(Tensor::from_parts(vec![k * r, c], data))
}
