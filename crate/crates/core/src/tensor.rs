//! Dense f64 tensors with explicit per-operation forward and backward passes.
//!
//! There is no tape: each operation exposes a forward function and a matching
//! backward function, and model code composes them into a static graph per
//! step. Gradients for parameters accumulate into the tensor's own `grad`
//! buffer; the optimizer consumes it and the caller zeroes it.
//!
//! Every live tensor is charged to a thread-local element counter (see
//! [`alloc`]) so a training step's peak working set can be measured.

use crate::error::{CoreError, Result};
use rand_chacha::rand_core::RngCore;

/// Thread-local accounting of live and peak f64 elements held by tensors.
///
/// The counter is per-thread: benchmark trials run single-threaded and tests
/// running in parallel do not disturb each other. Peak is a running maximum;
/// it only moves down when [`reset_peak`] pins it back to the current live
/// count (between benchmark trials).
pub mod alloc {
    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<u64> = Cell::new(0);
        static PEAK: Cell<u64> = Cell::new(0);
    }

    pub(crate) fn charge(n: usize) {
        LIVE.with(|l| {
            let live = l.get() + n as u64;
            l.set(live);
            PEAK.with(|p| {
                if live > p.get() {
                    p.set(live);
                }
            });
        });
    }

    pub(crate) fn release(n: usize) {
        LIVE.with(|l| l.set(l.get().saturating_sub(n as u64)));
    }

    /// Currently live f64 elements on this thread.
    pub fn live_elems() -> u64 {
        LIVE.with(|l| l.get())
    }

    /// Peak live f64 elements on this thread since the last reset.
    pub fn peak_elems() -> u64 {
        PEAK.with(|p| p.get())
    }

    /// Pin the peak back to the current live count.
    pub fn reset_peak() {
        let live = live_elems();
        PEAK.with(|p| p.set(live));
    }
}

/// Dense numeric array with shape and an optional gradient buffer.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw row-major data. The element count must match
    /// the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        alloc::charge(data.len());
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        alloc::charge(numel);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        alloc::charge(numel);
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Gaussian init, Box–Muller over a seeded stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl RngCore) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            // u1 in (0, 1], u2 in [0, 1)
            let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let u1 = 1.0 - u1;
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * theta.cos());
            if data.len() < numel {
                data.push(std * r * theta.sin());
            }
        }
        alloc::charge(numel);
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Gradient buffer, allocated (and charged) on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            alloc::charge(self.data.len());
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    /// Add `delta` into the gradient buffer element-wise.
    pub fn accum_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Zero the gradient buffer, allocating it when absent so every
    /// trainable parameter carries one before the optimizer runs.
    pub fn zero_grad(&mut self) {
        match self.grad.as_deref_mut() {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => {
                self.grad_mut();
            }
        }
    }

    /// Drop the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        if let Some(g) = self.grad.take() {
            alloc::release(g.len());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        alloc::charge(self.data.len() + self.grad.as_ref().map_or(0, Vec::len));
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        alloc::release(self.data.len() + self.grad.as_ref().map_or(0, Vec::len));
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// C[m×n] = A[m×k] · B[k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(CoreError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(&[m, n]);
    {
        let cd = c.data_mut();
        for i in 0..m {
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let crow = &mut cd[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
    }
    Ok(c)
}

/// C[k×n] = Aᵀ[k×m] · B[m×n] for A[m×k]. Used by backward passes.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.rows() != b.rows() {
        return Err(CoreError::Dimension {
            op: "matmul_at",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(&[k, n]);
    {
        let cd = c.data_mut();
        for i in 0..m {
            let brow = &b.data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let crow = &mut cd[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
    }
    Ok(c)
}

/// C[m×n] = A[m×k] · Bᵀ[k×n] for B[n×k]. Used by backward passes.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.cols() {
        return Err(CoreError::Dimension {
            op: "matmul_bt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Tensor::zeros(&[m, n]);
    {
        let cd = c.data_mut();
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let crow = &mut cd[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                crow[j] = s;
            }
        }
    }
    Ok(c)
}

/// Gradients of `C = A·B` given `dC`: `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul_bt(grad_c, b)?;
    let db = matmul_at(a, grad_c)?;
    Ok((da, db))
}

/// y[U] = W[U×d] · x[d].
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.shape.len() != 2 || x.numel() != w.cols() {
        return Err(CoreError::Dimension {
            op: "matvec",
            lhs: w.shape.clone(),
            rhs: x.shape.clone(),
        });
    }
    let (u, d) = (w.rows(), w.cols());
    let mut y = Tensor::zeros(&[u]);
    for r in 0..u {
        let wrow = &w.data[r * d..(r + 1) * d];
        let mut s = 0.0;
        for i in 0..d {
            s += wrow[i] * x.data[i];
        }
        y.data[r] = s;
    }
    Ok(y)
}

/// Gradients of `y = W·x`: `dW[r,i] = dy[r]·x[i]`, `dx[i] = Σ_r dy[r]·W[r,i]`.
pub fn matvec_backward(w: &Tensor, x: &Tensor, grad_y: &[f64]) -> (Tensor, Tensor) {
    let (u, d) = (w.rows(), w.cols());
    let mut dw = Tensor::zeros(&[u, d]);
    let mut dx = Tensor::zeros(&[d]);
    for r in 0..u {
        let gy = grad_y[r];
        let wrow = &w.data[r * d..(r + 1) * d];
        let dwrow = &mut dw.data[r * d..(r + 1) * d];
        for i in 0..d {
            dwrow[i] = gy * x.data[i];
            dx.data[i] += gy * wrow[i];
        }
    }
    (dw, dx)
}

/// Element-wise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(CoreError::Dimension {
            op: "add",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = a.clone();
    for (o, x) in out.data.iter_mut().zip(&b.data) {
        *o += x;
    }
    Ok(out)
}

/// x[L×d] + bias[d] broadcast over rows. The only broadcasting in the crate.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || bias.numel() != x.cols() {
        return Err(CoreError::Dimension {
            op: "add_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let (l, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..l {
        let row = &mut out.data[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] += bias.data[j];
        }
    }
    Ok(out)
}

/// Column sums of a 2-D gradient: the bias gradient for [`add_bias`].
pub fn column_sums(x: &Tensor) -> Tensor {
    let (l, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[d]);
    for i in 0..l {
        let row = &x.data[i * d..(i + 1) * d];
        for j in 0..d {
            out.data[j] += row[j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction. 1-D input is treated as one row.
pub fn row_softmax(x: &Tensor) -> Tensor {
    let (rows, cols) = if x.shape.len() == 1 {
        (1, x.numel())
    } else {
        (x.rows(), x.cols())
    };
    let mut out = x.clone();
    for i in 0..rows {
        let row = &mut out.data[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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

/// Backward through row softmax: `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn row_softmax_backward(y: &Tensor, grad_y: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape, grad_y.shape);
    let (rows, cols) = if y.shape.len() == 1 {
        (1, y.numel())
    } else {
        (y.rows(), y.cols())
    };
    let mut dx = Tensor::zeros(&y.shape);
    for i in 0..rows {
        let yr = &y.data[i * cols..(i + 1) * cols];
        let gr = &grad_y.data[i * cols..(i + 1) * cols];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let dr = &mut dx.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Arithmetic mean over the first axis: [L×d] → [d].
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || x.rows() == 0 {
        return Err(CoreError::Empty("mean_pool over zero rows"));
    }
    let (l, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[d]);
    for i in 0..l {
        let row = &x.data[i * d..(i + 1) * d];
        for j in 0..d {
            out.data[j] += row[j];
        }
    }
    for v in out.data.iter_mut() {
        *v /= l as f64;
    }
    Ok(out)
}

/// Backward of [`mean_pool`]: each row receives `dpool / L`.
pub fn mean_pool_backward(l: usize, grad_pool: &[f64]) -> Tensor {
    let d = grad_pool.len();
    let mut dx = Tensor::zeros(&[l, d]);
    let inv = 1.0 / l as f64;
    for i in 0..l {
        let row = &mut dx.data[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = grad_pool[j] * inv;
        }
    }
    dx
}

/// Mean over rows where `keep[i]` is true. Errors when nothing is kept.
pub fn mean_pool_masked(x: &Tensor, keep: &[bool]) -> Result<Tensor> {
    debug_assert_eq!(keep.len(), x.rows());
    let count = keep.iter().filter(|k| **k).count();
    if count == 0 {
        return Err(CoreError::Empty("mean_pool_masked kept zero rows"));
    }
    let (l, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[d]);
    for i in 0..l {
        if !keep[i] {
            continue;
        }
        let row = &x.data[i * d..(i + 1) * d];
        for j in 0..d {
            out.data[j] += row[j];
        }
    }
    for v in out.data.iter_mut() {
        *v /= count as f64;
    }
    Ok(out)
}

/// Backward of [`mean_pool_masked`].
pub fn mean_pool_masked_backward(keep: &[bool], grad_pool: &[f64]) -> Tensor {
    let l = keep.len();
    let d = grad_pool.len();
    let count = keep.iter().filter(|k| **k).count().max(1);
    let inv = 1.0 / count as f64;
    let mut dx = Tensor::zeros(&[l, d]);
    for i in 0..l {
        if !keep[i] {
            continue;
        }
        let row = &mut dx.data[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = grad_pool[j] * inv;
        }
    }
    dx
}

/// Element-wise max over the first axis: [L×d] → [d], plus argmax rows
/// (ties go to the lowest row index).
pub fn max_pool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.shape.len() != 2 || x.rows() == 0 {
        return Err(CoreError::Empty("max_pool over zero rows"));
    }
    let (l, d) = (x.rows(), x.cols());
    let mut out = Tensor::from_vec(&[d], x.data[0..d].to_vec())?;
    let mut arg = vec![0usize; d];
    for i in 1..l {
        let row = &x.data[i * d..(i + 1) * d];
        for j in 0..d {
            if row[j] > out.data[j] {
                out.data[j] = row[j];
                arg[j] = i;
            }
        }
    }
    Ok((out, arg))
}

/// Backward of [`max_pool`]: gradient routes to the argmax rows.
pub fn max_pool_backward(l: usize, argmax: &[usize], grad_pool: &[f64]) -> Tensor {
    let d = grad_pool.len();
    let mut dx = Tensor::zeros(&[l, d]);
    for j in 0..d {
        dx.data[argmax[j] * d + j] = grad_pool[j];
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Saved intermediates for the layer-norm backward pass.
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Row-wise normalization to mean 0 / variance 1 (ε inside the square
/// root), then scale and shift: `y = gain ⊙ x̂ + bias`.
pub fn layer_norm_fwd(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let (l, d) = (x.rows(), x.cols());
    debug_assert_eq!(gain.numel(), d);
    debug_assert_eq!(bias.numel(), d);
    let mut out = Tensor::zeros(&[l, d]);
    let mut xhat = Tensor::zeros(&[l, d]);
    let mut inv_std = vec![0.0; l];
    for i in 0..l {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = istd;
        let xh = &mut xhat.data[i * d..(i + 1) * d];
        let or = &mut out.data[i * d..(i + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * istd;
            or[j] = gain.data[j] * xh[j] + bias.data[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Layer norm without keeping the cache.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    layer_norm_fwd(x, gain, bias).0
}

/// Exact backward through layer norm. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad_y: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (l, d) = (cache.xhat.rows(), cache.xhat.cols());
    let mut dx = Tensor::zeros(&[l, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    for i in 0..l {
        let xh = &cache.xhat.data[i * d..(i + 1) * d];
        let gy = &grad_y.data[i * d..(i + 1) * d];
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xh = 0.0;
        for j in 0..d {
            let dyg = gy[j] * gain.data[j];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xh[j];
            dgain.data[j] += gy[j] * xh[j];
            dbias.data[j] += gy[j];
        }
        let mean_dyg = sum_dyg / d as f64;
        let mean_dyg_xh = sum_dyg_xh / d as f64;
        let istd = cache.inv_std[i];
        let dr = &mut dx.data[i * d..(i + 1) * d];
        for j in 0..d {
            let dyg = gy[j] * gain.data[j];
            dr[j] = istd * (dyg - mean_dyg - xh[j] * mean_dyg_xh);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// ReLU and dropout
// ---------------------------------------------------------------------------

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Backward through ReLU given the pre-activation input.
pub fn relu_backward(pre: &Tensor, grad_y: &Tensor) -> Tensor {
    let mut dx = grad_y.clone();
    for (d, p) in dx.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Inverted dropout: keeps with probability `1-p` and rescales by
/// `1/(1-p)`. Returns the output and the scale mask used by backward.
pub fn dropout_fwd(x: &Tensor, p: f64, rng: &mut impl RngCore) -> (Tensor, Tensor) {
    debug_assert!((0.0..1.0).contains(&p));
    let mut mask = Tensor::zeros(&x.shape);
    let keep_scale = 1.0 / (1.0 - p);
    for m in mask.data.iter_mut() {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        *m = if u < p { 0.0 } else { keep_scale };
    }
    let mut out = x.clone();
    for (o, m) in out.data.iter_mut().zip(&mask.data) {
        *o *= m;
    }
    (out, mask)
}

pub fn dropout_backward(mask: &Tensor, grad_y: &Tensor) -> Tensor {
    let mut dx = grad_y.clone();
    for (d, m) in dx.data.iter_mut().zip(&mask.data) {
        *d *= m;
    }
    dx
}

// ---------------------------------------------------------------------------
// Cross entropy
// ---------------------------------------------------------------------------

const CE_CLAMP: f64 = 1e-12;

/// `−Σ target·ln(clamp(pred, 1e-12, 1))` over probability vectors.
///
/// 1-D inputs are a single sample; 2-D inputs are a batch and the result is
/// the mean over rows. Targets need not sum to one.
pub fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(CoreError::Dimension {
            op: "cross_entropy",
            lhs: pred.shape.clone(),
            rhs: target.shape.clone(),
        });
    }
    let (rows, cols) = if pred.shape.len() == 1 {
        (1, pred.numel())
    } else {
        (pred.rows(), pred.cols())
    };
    let mut total = 0.0;
    for i in 0..rows {
        let pr = &pred.data[i * cols..(i + 1) * cols];
        let tr = &target.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let p = pr[j].clamp(CE_CLAMP, 1.0);
            total -= tr[j] * p.ln();
        }
    }
    Ok(total / rows as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the predictions.
pub fn cross_entropy_backward(pred: &Tensor, target: &Tensor) -> Tensor {
    debug_assert_eq!(pred.shape, target.shape);
    let (rows, cols) = if pred.shape.len() == 1 {
        (1, pred.numel())
    } else {
        (pred.rows(), pred.cols())
    };
    let inv_rows = 1.0 / rows as f64;
    let mut dp = Tensor::zeros(&pred.shape);
    for i in 0..rows * cols {
        let p = pred.data[i];
        if p > CE_CLAMP {
            dp.data[i] = -target.data[i] / p.min(1.0) * inv_rows;
        }
    }
    dp
}

/// Concatenate two 1-D tensors.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape.len(), 1);
    debug_assert_eq!(b.shape.len(), 1);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(&[a.numel() + b.numel()], data).expect("concat shape")
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Per-parameter Adam buffers. `t` increments by exactly one per step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

/// Adam hyperparameters shared by every parameter of a model.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update. The parameter's gradient must be present
/// and is left untouched; the caller zeroes it.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState, hyper: AdamHyper) -> Result<()> {
    let n = param.numel();
    if state.m.len() != n || state.v.len() != n {
        return Err(CoreError::Dimension {
            op: "adam_step",
            lhs: param.shape.to_vec(),
            rhs: vec![state.m.len()],
        });
    }
    let grad = match param.grad.as_ref() {
        Some(g) => g.clone(),
        None => return Err(CoreError::MissingGrad("adam_step".into())),
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let data = param.data_mut();
    for i in 0..n {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Value and analytic input-gradients of a scalar function, as produced by a
/// composed forward+backward pass.
pub struct GradEval {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Compare analytic gradients against central finite differences
/// `(f(x+h) − f(x−h)) / 2h`, element by element over every input tensor.
/// Returns the maximum relative error, with the comparison damped by a small
/// absolute floor so near-zero gradients do not amplify round-off.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<GradEval>,
{
    let base = f(inputs)?;
    if !base.value.is_finite() {
        return Err(CoreError::NonFinite("grad_check objective".into()));
    }
    if base.grads.len() != inputs.len() {
        return Err(CoreError::Validation(format!(
            "grad_check: {} gradient buffers for {} inputs",
            base.grads.len(),
            inputs.len()
        )));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data[ei];
            work[ti].data[ei] = orig + h;
            let fp = f(&work)?.value;
            work[ti].data[ei] = orig - h;
            let fm = f(&work)?.value;
            work[ti].data[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(CoreError::NonFinite("grad_check perturbed objective".into()));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = base.grads[ti][ei];
            let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        // f = sum(A·B), checked w.r.t. both operands
        let f = |inputs: &[Tensor]| -> Result<GradEval> {
            let c = matmul(&inputs[0], &inputs[1])?;
            let value = c.data().iter().sum();
            let ones = Tensor::filled(c.shape(), 1.0);
            let (da, db) = matmul_backward(&inputs[0], &inputs[1], &ones)?;
            Ok(GradEval {
                value,
                grads: vec![da.data().to_vec(), db.data().to_vec()],
            })
        };
        let err = grad_check(f, &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_uniform_row() {
        let x = t2(1, 2, &[0.0, 0.0]);
        let y = row_softmax(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        for c in [-7.5, 0.0, 3.25, 41.0] {
            let x = t2(1, 2, &[c, c + 3.0_f64.ln()]);
            let y = row_softmax(&x);
            assert!((y.data()[0] - 0.25).abs() < 1e-12, "c={c}");
            assert!((y.data()[1] - 0.75).abs() < 1e-12, "c={c}");
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let x = t2(1, 2, &[1000.0, 0.0]);
        let y = row_softmax(&x);
        assert!(y.data()[0] > 1.0 - 1e-12);
        assert!(y.data()[1] < 1e-12);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one_many_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = {
                let mut t = Tensor::zeros(&[1, 6]);
                for v in t.data_mut() {
                    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                    *v = u * 100.0 - 50.0;
                }
                t
            };
            let y = row_softmax(&x);
            let sum: f64 = y.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
            assert!(y.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 5], 2.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let wd = w.data().to_vec();
        // f = Σ w ⊙ softmax(x), fixed random weights so the Jacobian is exercised
        let f = move |inputs: &[Tensor]| -> Result<GradEval> {
            let y = row_softmax(&inputs[0]);
            let value = y.data().iter().zip(&wd).map(|(a, b)| a * b).sum();
            let gy = Tensor::from_vec(y.shape(), wd.clone())?;
            let dx = row_softmax_backward(&y, &gy);
            Ok(GradEval {
                value,
                grads: vec![dx.data().to_vec()],
            })
        };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn mean_pool_single_row_is_identity() {
        let x = t2(1, 3, &[4.0, -1.0, 2.5]);
        let p = mean_pool(&x).unwrap();
        assert_eq!(p.data(), &[4.0, -1.0, 2.5]);
    }

    #[test]
    fn mean_pool_hand_case() {
        let x = t2(2, 2, &[1.0, 3.0, 3.0, 5.0]);
        let p = mean_pool(&x).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_pool_empty_errors() {
        let x = Tensor::zeros(&[0, 3]);
        assert!(mean_pool(&x).is_err());
    }

    #[test]
    fn mean_pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3], 1.0, &mut rng);
        let wd = w.data().to_vec();
        let f = move |inputs: &[Tensor]| -> Result<GradEval> {
            let p = mean_pool(&inputs[0])?;
            let value = p.data().iter().zip(&wd).map(|(a, b)| a * b).sum();
            let dx = mean_pool_backward(inputs[0].rows(), &wd);
            Ok(GradEval {
                value,
                grads: vec![dx.data().to_vec()],
            })
        };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t2(1, 4, &[3.0, 3.0, 3.0, 3.0]);
        let gain = Tensor::filled(&[4], 1.0);
        let bias = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gain, &bias);
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t2(1, 2, &[1.0, 3.0]);
        let gain = Tensor::filled(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &gain, &bias);
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let gain = Tensor::randn(&[6], 0.5, &mut rng);
        let bias = Tensor::randn(&[6], 0.5, &mut rng);
        let w = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let wd = w.data().to_vec();
        let f = move |inputs: &[Tensor]| -> Result<GradEval> {
            let (y, cache) = layer_norm_fwd(&inputs[0], &inputs[1], &inputs[2]);
            let value = y.data().iter().zip(&wd).map(|(a, b)| a * b).sum();
            let gy = Tensor::from_vec(y.shape(), wd.clone())?;
            let (dx, dgain, dbias) = layer_norm_backward(&cache, &inputs[1], &gy);
            Ok(GradEval {
                value,
                grads: vec![
                    dx.data().to_vec(),
                    dgain.data().to_vec(),
                    dbias.data().to_vec(),
                ],
            })
        };
        let err = grad_check(f, &[x, gain, bias], 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let p = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let t = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let ce = cross_entropy(&p, &t).unwrap();
        assert!(ce.abs() < 1e-12, "{ce}");
    }

    #[test]
    fn cross_entropy_inverse_e() {
        let e = std::f64::consts::E;
        let p = Tensor::from_vec(&[3], vec![1.0 / e, 0.5, 0.5]).unwrap();
        let t = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let ce = cross_entropy(&p, &t).unwrap();
        assert!((ce - 1.0).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn cross_entropy_smoothed_uniform() {
        // Smoothed target against a uniform prediction: every term is ln 3.
        let p = Tensor::from_vec(&[3], vec![1.0 / 3.0; 3]).unwrap();
        let t = Tensor::from_vec(&[3], vec![0.8, 0.2, 0.2]).unwrap();
        let ce = cross_entropy(&p, &t).unwrap();
        assert!((ce - 1.2 * 3.0_f64.ln()).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn cross_entropy_length_mismatch() {
        let p = Tensor::from_vec(&[3], vec![0.3, 0.3, 0.4]).unwrap();
        let t = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &t).is_err());
    }

    #[test]
    fn adam_first_step_has_sign_times_lr_magnitude() {
        let mut p = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        p.accum_grad(&[4.0]);
        let mut st = AdamState::new(1);
        adam_step(
            &mut p,
            &mut st,
            AdamHyper {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
        )
        .unwrap();
        assert!((p.data()[0] - (2.0 - 0.1)).abs() < 1e-6, "{}", p.data()[0]);
        assert_eq!(st.t, 1);
        // grads untouched
        assert_eq!(p.grad().unwrap(), &[4.0]);
    }

    #[test]
    fn adam_zero_gradient_leaves_param() {
        let mut p = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        p.grad_mut();
        let mut st = AdamState::new(2);
        adam_step(
            &mut p,
            &mut st,
            AdamHyper {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
        )
        .unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_two_steps_match_hand_unrolled_oracle() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.99, 1e-8);
        let g = 3.0;
        // hand unroll two steps at constant gradient
        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t));
            let vh = v / (1.0 - b1_pow(b2, t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        fn b1_pow(b: f64, t: i32) -> f64 {
            b.powi(t)
        }

        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(1);
        let hyper = AdamHyper {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for _ in 0..2 {
            p.zero_grad();
            p.accum_grad(&[g]);
            adam_step(&mut p, &mut st, hyper).unwrap();
        }
        assert!((p.data()[0] - theta).abs() < 1e-9);
    }

    #[test]
    fn adam_missing_grad_errors() {
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut st = AdamState::new(1);
        let err = adam_step(
            &mut p,
            &mut st,
            AdamHyper {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
        );
        assert!(matches!(err, Err(CoreError::MissingGrad(_))));
    }

    #[test]
    fn adam_is_deterministic() {
        let hyper = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        };
        let run = || {
            let mut p = Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap();
            let mut st = AdamState::new(3);
            for step in 0..5 {
                p.zero_grad();
                p.accum_grad(&[0.1 * step as f64, -0.2, 0.3]);
                adam_step(&mut p, &mut st, hyper).unwrap();
            }
            (p.data().to_vec(), st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn grad_check_sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let f = |inputs: &[Tensor]| -> Result<GradEval> {
            let value = inputs[0].data().iter().map(|v| v * v).sum();
            let grads = vec![inputs[0].data().iter().map(|v| 2.0 * v).collect()];
            Ok(GradEval { value, grads })
        };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_flags_broken_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let f = |inputs: &[Tensor]| -> Result<GradEval> {
            let value = inputs[0].data().iter().map(|v| v * v).sum();
            // deliberately wrong: 3x instead of 2x
            let grads = vec![inputs[0].data().iter().map(|v| 3.0 * v).collect()];
            Ok(GradEval { value, grads })
        };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert!(err > 1e-2, "rel err {err}");
    }

    #[test]
    fn max_pool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let (p, arg) = max_pool(&x).unwrap();
        for j in 0..4 {
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0;
            for i in 0..6 {
                let v = x.data()[i * 4 + j];
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            assert_eq!(p.data()[j], best);
            assert_eq!(arg[j], bi);
        }
    }

    #[test]
    fn alloc_counter_tracks_live_and_peak() {
        let base = alloc::live_elems();
        alloc::reset_peak();
        {
            let _a = Tensor::zeros(&[10, 10]);
            assert_eq!(alloc::live_elems(), base + 100);
            {
                let _b = Tensor::zeros(&[5]);
                assert_eq!(alloc::live_elems(), base + 105);
            }
            assert_eq!(alloc::live_elems(), base + 100);
            assert_eq!(alloc::peak_elems(), base + 105);
        }
        assert_eq!(alloc::live_elems(), base);
        // peak is a ratchet until reset
        assert_eq!(alloc::peak_elems(), base + 105);
        alloc::reset_peak();
        assert_eq!(alloc::peak_elems(), base);
    }

    #[test]
    fn alloc_counter_counts_grad_buffers() {
        let base = alloc::live_elems();
        let mut t = Tensor::zeros(&[4]);
        t.grad_mut();
        assert_eq!(alloc::live_elems(), base + 8);
        t.clear_grad();
        assert_eq!(alloc::live_elems(), base + 4);
        drop(t);
        assert_eq!(alloc::live_elems(), base);
    }
}
