//! Differentiable primitives. Each op validates shapes, computes the forward
//! value, and registers a backward closure that maps the output gradient to
//! per-parent contributions.

use super::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use std::cell::RefCell;

/// Train/eval switch for stochastic and statistics-dependent ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn require(cond: bool, op: &'static str, detail: impl Fn() -> String) -> Result<(), TensorError> {
    if cond {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, detail: detail() })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    require(a.shape() == b.shape(), op, || {
        format!("{:?} vs {:?}", a.shape(), b.shape())
    })
}

/// Dot product with eight independent accumulators; breaking the floating
/// point dependency chain lets the compiler keep several lanes in flight.
pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let full = a.len() / 8 * 8;
    for (ca, cb) in a[..full].chunks_exact(8).zip(b[..full].chunks_exact(8)) {
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in a[full..].iter().zip(&b[full..]) {
        sum += x * y;
    }
    sum
}

/// `y += s * x`, elementwise over equal-length slices.
pub(crate) fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Valid output range `[lo, hi)` for a kernel tap whose input index is
/// `out_index + shift`, clipped to input length `len`.
fn tap_range(shift: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, out_len as isize) as usize;
    (lo, hi)
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", &va, &vb)?;
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
        )?;
        let (na, nb) = (self.parent_needs(a), self.parent_needs(b));
        Ok(self.push(out, &[a, b], move |g| {
            vec![
                na.then(|| g.clone()),
                nb.then(|| g.clone()),
            ]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", &va, &vb)?;
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect(),
        )?;
        let (na, nb) = (self.parent_needs(a), self.parent_needs(b));
        Ok(self.push(out, &[a, b], move |g| {
            vec![
                na.then(|| g.clone()),
                nb.then(|| g.map(|v| -v)),
            ]
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", &va, &vb)?;
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
        )?;
        let (na, nb) = (self.parent_needs(a), self.parent_needs(b));
        Ok(self.push(out, &[a, b], move |g| {
            let da = na.then(|| {
                Tensor::from_vec(
                    vb.shape(),
                    g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect(),
                )
                .expect("shape verified")
            });
            let db = nb.then(|| {
                Tensor::from_vec(
                    va.shape(),
                    g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect(),
                )
                .expect("shape verified")
            });
            vec![da, db]
        }))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("div", &va, &vb)?;
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect(),
        )?;
        let (na, nb) = (self.parent_needs(a), self.parent_needs(b));
        Ok(self.push(out, &[a, b], move |g| {
            let da = na.then(|| {
                Tensor::from_vec(
                    vb.shape(),
                    g.data().iter().zip(vb.data()).map(|(g, y)| g / y).collect(),
                )
                .expect("shape verified")
            });
            let db = nb.then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                Tensor::from_vec(va.shape(), data).expect("shape verified")
            });
            vec![da, db]
        }))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = va.map(|v| c * v);
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| vec![na.then(|| g.map(|v| c * v))]))
    }

    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = Tensor::scalar(va.data().iter().sum());
        let shape = va.shape().to_vec();
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            vec![na.then(|| Tensor::filled(&shape, g.item()))]
        }))
    }

    pub fn mean(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        require(!va.is_empty(), "mean", || "empty tensor".into())?;
        let n = va.len() as f64;
        let out = Tensor::scalar(va.data().iter().sum::<f64>() / n);
        let shape = va.shape().to_vec();
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            vec![na.then(|| Tensor::filled(&shape, g.item() / n))]
        }))
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("dot", &va, &vb)?;
        let out = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        let (na, nb) = (self.parent_needs(a), self.parent_needs(b));
        Ok(self.push(out, &[a, b], move |g| {
            let s = g.item();
            vec![
                na.then(|| vb.map(|v| s * v)),
                nb.then(|| va.map(|v| s * v)),
            ]
        }))
    }

    /// Euclidean norm. The gradient at the origin is taken as zero.
    pub fn l2_norm(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let norm = va.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = Tensor::scalar(norm);
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                if norm == 0.0 {
                    Tensor::zeros(va.shape())
                } else {
                    let s = g.item() / norm;
                    va.map(|v| s * v)
                }
            });
            vec![da]
        }))
    }

    /// Elementwise natural logarithm; inputs must be positive.
    pub fn log(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = va.map(f64::ln);
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                Tensor::from_vec(
                    va.shape(),
                    g.data().iter().zip(va.data()).map(|(g, x)| g / x).collect(),
                )
                .expect("same shape")
            });
            vec![da]
        }))
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = va.map(f64::exp);
        let na = self.parent_needs(a);
        let saved = out.clone();
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                Tensor::from_vec(
                    saved.shape(),
                    g.data().iter().zip(saved.data()).map(|(g, y)| g * y).collect(),
                )
                .expect("same shape")
            });
            vec![da]
        }))
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = va.map(|v| v.max(0.0));
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                Tensor::from_vec(va.shape(), data).expect("same shape")
            });
            vec![da]
        }))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let out = va.map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let saved = out.clone();
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(saved.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                Tensor::from_vec(saved.shape(), data).expect("same shape")
            });
            vec![da]
        }))
    }

    /// Row-wise softmax of a 2-d tensor, max-shifted for stability. Rows sum
    /// to one exactly up to rounding.
    pub fn softmax_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        require(va.shape().len() == 2, "softmax_rows", || {
            format!("expected 2-d input, got {:?}", va.shape())
        })?;
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        require(cols > 0, "softmax_rows", || "zero columns".into())?;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &va.data()[r * cols..(r + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                data[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= denom;
            }
        }
        let out = Tensor::from_vec(va.shape(), data)?;
        let saved = out.clone();
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                let y = saved.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let inner: f64 = (0..cols).map(|c| g.data()[base + c] * y[base + c]).sum();
                    for c in 0..cols {
                        dx[base + c] = y[base + c] * (g.data()[base + c] - inner);
                    }
                }
                Tensor::from_vec(saved.shape(), dx).expect("same shape")
            });
            vec![da]
        }))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p), so the
    /// expectation matches the input. Eval mode is the identity (the input
    /// var is returned unchanged).
    pub fn dropout(
        &self,
        a: Var,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask_data: Vec<f64> = (0..va.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(va.shape(), mask_data)?;
        let out = Tensor::from_vec(
            va.shape(),
            va.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect(),
        )?;
        let na = self.parent_needs(a);
        Ok(self.push(out, &[a], move |g| {
            let da = na.then(|| {
                Tensor::from_vec(
                    mask.shape(),
                    g.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect(),
                )
                .expect("same shape")
            });
            vec![da]
        }))
    }

    /// Output length of a 1-d convolution over `len` input steps.
    pub fn conv1d_out_len(
        len: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        left_pad: usize,
    ) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        (len + left_pad).checked_sub(span).map(|r| r / stride + 1)
    }

    /// Causal 1-d convolution with bias. Input is `(B, C_in, L)`, weights
    /// `(C_out, C_in, K)`, bias `(C_out)`. Only left zero-padding is
    /// supported, so output step `t` never reads input steps beyond
    /// `t * stride`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
        left_pad: usize,
    ) -> Result<Var, TensorError> {
        if stride == 0 || dilation == 0 {
            return Err(TensorError::InvalidArgument(
                "conv1d stride and dilation must be positive".into(),
            ));
        }
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        require(vx.shape().len() == 3, "conv1d", || {
            format!("input must be (B, C, L), got {:?}", vx.shape())
        })?;
        require(vw.shape().len() == 3, "conv1d", || {
            format!("weights must be (C_out, C_in, K), got {:?}", vw.shape())
        })?;
        let (batch, c_in, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, wc_in, kernel) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
        require(wc_in == c_in, "conv1d", || {
            format!("input has {c_in} channels, weights expect {wc_in}")
        })?;
        require(vb.shape() == [c_out], "conv1d", || {
            format!("bias shape {:?} vs {c_out} output channels", vb.shape())
        })?;
        let out_len = Self::conv1d_out_len(len, kernel, stride, dilation, left_pad)
            .filter(|&l| l > 0)
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!(
                    "kernel {kernel} (dilation {dilation}) does not fit length {len} with pad {left_pad}"
                ),
            })?;

        let mut out = vec![0.0; batch * c_out * out_len];
        {
            let xd = vx.data();
            let wd = vw.data();
            let bd = vb.data();
            if stride == 1 {
                // Each kernel tap is a shifted slice add over the whole
                // output row, which vectorizes well.
                for bi in 0..batch {
                    for co in 0..c_out {
                        let out_row = &mut out[(bi * c_out + co) * out_len..][..out_len];
                        out_row.fill(bd[co]);
                        for ci in 0..c_in {
                            let x_row = &xd[(bi * c_in + ci) * len..][..len];
                            let w_row = &wd[(co * c_in + ci) * kernel..][..kernel];
                            for (kk, &wv) in w_row.iter().enumerate() {
                                let shift = (kk * dilation) as isize - left_pad as isize;
                                let (lo, hi) = tap_range(shift, len, out_len);
                                if lo < hi {
                                    let src = &x_row[(lo as isize + shift) as usize
                                        ..(hi as isize + shift) as usize];
                                    axpy(wv, src, &mut out_row[lo..hi]);
                                }
                            }
                        }
                    }
                }
            } else {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let out_base = (bi * c_out + co) * out_len;
                        for ot in 0..out_len {
                            let mut acc = bd[co];
                            let start = ot * stride;
                            for ci in 0..c_in {
                                let x_base = (bi * c_in + ci) * len;
                                let w_base = (co * c_in + ci) * kernel;
                                for kk in 0..kernel {
                                    let it = start + kk * dilation;
                                    if it >= left_pad {
                                        let it = it - left_pad;
                                        if it < len {
                                            acc += xd[x_base + it] * wd[w_base + kk];
                                        }
                                    }
                                }
                            }
                            out[out_base + ot] = acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[batch, c_out, out_len], out)?;
        let (nx, nw, nb) = (
            self.parent_needs(x),
            self.parent_needs(w),
            self.parent_needs(b),
        );
        Ok(self.push(out, &[x, w, b], move |g| {
            let gd = g.data();
            let xd = vx.data();
            let wd = vw.data();
            let mut dx = nx.then(|| vec![0.0; xd.len()]);
            let mut dw = nw.then(|| vec![0.0; wd.len()]);
            let mut db = nb.then(|| vec![0.0; c_out]);
            if stride == 1 {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let g_row = &gd[(bi * c_out + co) * out_len..][..out_len];
                        if let Some(db) = db.as_mut() {
                            db[co] += g_row.iter().sum::<f64>();
                        }
                        for ci in 0..c_in {
                            let x_base = (bi * c_in + ci) * len;
                            let w_base = (co * c_in + ci) * kernel;
                            for kk in 0..kernel {
                                let shift = (kk * dilation) as isize - left_pad as isize;
                                let (lo, hi) = tap_range(shift, len, out_len);
                                if lo >= hi {
                                    continue;
                                }
                                let ilo = (lo as isize + shift) as usize;
                                let ihi = (hi as isize + shift) as usize;
                                if let Some(dx) = dx.as_mut() {
                                    axpy(
                                        wd[w_base + kk],
                                        &g_row[lo..hi],
                                        &mut dx[x_base + ilo..x_base + ihi],
                                    );
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[w_base + kk] +=
                                        dot_slice(&g_row[lo..hi], &xd[x_base + ilo..x_base + ihi]);
                                }
                            }
                        }
                    }
                }
            } else {
                for bi in 0..batch {
                    for co in 0..c_out {
                        let out_base = (bi * c_out + co) * out_len;
                        for ot in 0..out_len {
                            let go = gd[out_base + ot];
                            if let Some(db) = db.as_mut() {
                                db[co] += go;
                            }
                            let start = ot * stride;
                            for ci in 0..c_in {
                                let x_base = (bi * c_in + ci) * len;
                                let w_base = (co * c_in + ci) * kernel;
                                for kk in 0..kernel {
                                    let it = start + kk * dilation;
                                    if it < left_pad {
                                        continue;
                                    }
                                    let it = it - left_pad;
                                    if it >= len {
                                        continue;
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        dx[x_base + it] += go * wd[w_base + kk];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[w_base + kk] += go * xd[x_base + it];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_vec(&[batch, c_in, len], d).expect("conv dx")),
                dw.map(|d| Tensor::from_vec(&[c_out, c_in, kernel], d).expect("conv dw")),
                db.map(|d| Tensor::from_vec(&[c_out], d).expect("conv db")),
            ]
        }))
    }

    pub fn maxpool1d_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
        len.checked_sub(kernel).map(|r| r / stride + 1)
    }

    /// Max pooling over the time axis of `(B, C, L)`. Ties route the
    /// gradient to the first maximal element.
    pub fn maxpool1d(&self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        if kernel == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument(
                "maxpool1d kernel and stride must be positive".into(),
            ));
        }
        let vx = self.value(x);
        require(vx.shape().len() == 3, "maxpool1d", || {
            format!("input must be (B, C, L), got {:?}", vx.shape())
        })?;
        let (batch, channels, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let out_len = Self::maxpool1d_out_len(len, kernel, stride)
            .filter(|&l| l > 0)
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "maxpool1d",
                detail: format!("window {kernel} does not fit length {len}"),
            })?;

        let xd = vx.data();
        let mut out = vec![0.0; batch * channels * out_len];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..batch * channels {
            let x_base = bc * len;
            let o_base = bc * out_len;
            for ot in 0..out_len {
                let start = ot * stride;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for kk in 0..kernel {
                    let v = xd[x_base + start + kk];
                    if v > best {
                        best = v;
                        best_i = start + kk;
                    }
                }
                out[o_base + ot] = best;
                argmax[o_base + ot] = best_i as u32;
            }
        }
        let out = Tensor::from_vec(&[batch, channels, out_len], out)?;
        let nx = self.parent_needs(x);
        let in_len = xd.len();
        Ok(self.push(out, &[x], move |g| {
            let dx = nx.then(|| {
                let mut dx = vec![0.0; in_len];
                for bc in 0..batch * channels {
                    let x_base = bc * len;
                    let o_base = bc * out_len;
                    for ot in 0..out_len {
                        dx[x_base + argmax[o_base + ot] as usize] += g.data()[o_base + ot];
                    }
                }
                Tensor::from_vec(&[batch, channels, len], dx).expect("pool dx")
            });
            vec![dx]
        }))
    }

    /// Affine map `y = x W^T + b` over a batch: `x` is `(B, In)`, `w` is
    /// `(Out, In)`, `b` is `(Out)`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        require(vx.shape().len() == 2, "linear", || {
            format!("input must be (B, In), got {:?}", vx.shape())
        })?;
        require(vw.shape().len() == 2, "linear", || {
            format!("weights must be (Out, In), got {:?}", vw.shape())
        })?;
        let (batch, in_f) = (vx.shape()[0], vx.shape()[1]);
        let (out_f, w_in) = (vw.shape()[0], vw.shape()[1]);
        require(w_in == in_f, "linear", || {
            format!("input features {in_f} vs weight features {w_in}")
        })?;
        require(vb.shape() == [out_f], "linear", || {
            format!("bias shape {:?} vs {out_f} outputs", vb.shape())
        })?;

        let xd = vx.data();
        let wd = vw.data();
        let bd = vb.data();
        let mut out = vec![0.0; batch * out_f];
        for bi in 0..batch {
            let x_row = &xd[bi * in_f..(bi + 1) * in_f];
            let o_base = bi * out_f;
            for o in 0..out_f {
                let w_row = &wd[o * in_f..(o + 1) * in_f];
                out[o_base + o] = dot_slice(x_row, w_row) + bd[o];
            }
        }
        let out = Tensor::from_vec(&[batch, out_f], out)?;
        let (nx, nw, nb) = (
            self.parent_needs(x),
            self.parent_needs(w),
            self.parent_needs(b),
        );
        Ok(self.push(out, &[x, w, b], move |g| {
            let gd = g.data();
            let xd = vx.data();
            let wd = vw.data();
            let dx = nx.then(|| {
                let mut dx = vec![0.0; batch * in_f];
                for bi in 0..batch {
                    let g_row = &gd[bi * out_f..(bi + 1) * out_f];
                    let dx_row = &mut dx[bi * in_f..(bi + 1) * in_f];
                    for o in 0..out_f {
                        let go = g_row[o];
                        if go == 0.0 {
                            continue;
                        }
                        let w_row = &wd[o * in_f..(o + 1) * in_f];
                        axpy(go, w_row, dx_row);
                    }
                }
                Tensor::from_vec(&[batch, in_f], dx).expect("linear dx")
            });
            let dw = nw.then(|| {
                let mut dw = vec![0.0; out_f * in_f];
                for bi in 0..batch {
                    let g_row = &gd[bi * out_f..(bi + 1) * out_f];
                    let x_row = &xd[bi * in_f..(bi + 1) * in_f];
                    for o in 0..out_f {
                        let go = g_row[o];
                        if go == 0.0 {
                            continue;
                        }
                        let dw_row = &mut dw[o * in_f..(o + 1) * in_f];
                        axpy(go, x_row, dw_row);
                    }
                }
                Tensor::from_vec(&[out_f, in_f], dw).expect("linear dw")
            });
            let db = nb.then(|| {
                let mut db = vec![0.0; out_f];
                for bi in 0..batch {
                    for o in 0..out_f {
                        db[o] += gd[bi * out_f + o];
                    }
                }
                Tensor::from_vec(&[out_f], db).expect("linear db")
            });
            vec![dx, dw, db]
        }))
    }

    /// Batch normalization over `(B, C)` or `(B, C, L)` input, per channel.
    ///
    /// Train mode normalizes with batch statistics (population variance) and
    /// folds them into the running buffers with the given momentum (the
    /// running variance uses the unbiased estimate). Eval mode normalizes
    /// with the running buffers and never mutates them.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &RefCell<Tensor>,
        running_var: &RefCell<Tensor>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let dims = vx.shape().len();
        require(dims == 2 || dims == 3, "batchnorm", || {
            format!("input must be (B, C) or (B, C, L), got {:?}", vx.shape())
        })?;
        let batch = vx.shape()[0];
        let channels = vx.shape()[1];
        let time = if dims == 3 { vx.shape()[2] } else { 1 };
        require(vg.shape() == [channels], "batchnorm", || {
            format!("gamma shape {:?} vs {channels} channels", vg.shape())
        })?;
        require(vb.shape() == [channels], "batchnorm", || {
            format!("beta shape {:?} vs {channels} channels", vb.shape())
        })?;
        require(batch * time > 0, "batchnorm", || "empty batch".into())?;
        {
            let rm = running_mean.borrow();
            let rv = running_var.borrow();
            require(rm.shape() == [channels] && rv.shape() == [channels], "batchnorm", || {
                format!(
                    "running stats shapes {:?}/{:?} vs {channels} channels",
                    rm.shape(),
                    rv.shape()
                )
            })?;
        }

        let n = (batch * time) as f64;
        let xd = vx.data();
        let idx = move |b: usize, c: usize, t: usize| (b * channels + c) * time + t;

        // Per-channel mean and variance used for normalization.
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for t in 0..time {
                            s += xd[idx(b, c, t)];
                        }
                    }
                    let m = s / n;
                    let mut v = 0.0;
                    for b in 0..batch {
                        for t in 0..time {
                            let d = xd[idx(b, c, t)] - m;
                            v += d * d;
                        }
                    }
                    mean[c] = m;
                    var[c] = v / n;
                }
                // Fold into running statistics.
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..channels {
                    let rm_d = rm.data_mut();
                    rm_d[c] = (1.0 - momentum) * rm_d[c] + momentum * mean[c];
                    let rv_d = rv.data_mut();
                    rv_d[c] = (1.0 - momentum) * rv_d[c] + momentum * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                running_mean.borrow().data().to_vec(),
                running_var.borrow().data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gamma_vals: Vec<f64> = vg.data().to_vec();
        let beta_vals: Vec<f64> = vb.data().to_vec();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                for t in 0..time {
                    let i = idx(b, c, t);
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gamma_vals[c] * h + beta_vals[c];
                }
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let xhat = Tensor::from_vec(vx.shape(), xhat)?;
        let (nx, ng, nb) = (
            self.parent_needs(x),
            self.parent_needs(gamma),
            self.parent_needs(beta),
        );
        let x_shape = vx.shape().to_vec();
        Ok(self.push(out, &[x, gamma, beta], move |g| {
            let gd_out = g.data();
            let hd = xhat.data();
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for b in 0..batch {
                for c in 0..channels {
                    for t in 0..time {
                        let i = idx(b, c, t);
                        dgamma[c] += gd_out[i] * hd[i];
                        dbeta[c] += gd_out[i];
                    }
                }
            }
            let dx = nx.then(|| {
                let mut dx = vec![0.0; hd.len()];
                match mode {
                    Mode::Train => {
                        for c in 0..channels {
                            let mean_g = dbeta[c] / n;
                            let mean_gh = dgamma[c] / n;
                            let scale = gamma_vals[c] * inv_std[c];
                            for b in 0..batch {
                                for t in 0..time {
                                    let i = idx(b, c, t);
                                    dx[i] = scale * (gd_out[i] - mean_g - hd[i] * mean_gh);
                                }
                            }
                        }
                    }
                    Mode::Eval => {
                        for c in 0..channels {
                            let scale = gamma_vals[c] * inv_std[c];
                            for b in 0..batch {
                                for t in 0..time {
                                    let i = idx(b, c, t);
                                    dx[i] = scale * gd_out[i];
                                }
                            }
                        }
                    }
                }
                Tensor::from_vec(&x_shape, dx).expect("bn dx")
            });
            vec![
                dx,
                ng.then(|| Tensor::from_vec(&[channels], dgamma).expect("bn dgamma")),
                nb.then(|| Tensor::from_vec(&[channels], dbeta).expect("bn dbeta")),
            ]
        }))
    }

    /// Mean over the time axis: `(B, C, L)` to `(B, C)`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        require(vx.shape().len() == 3, "global_avg_pool", || {
            format!("input must be (B, C, L), got {:?}", vx.shape())
        })?;
        let (batch, channels, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        require(len > 0, "global_avg_pool", || "empty time axis".into())?;
        let xd = vx.data();
        let mut out = vec![0.0; batch * channels];
        for bc in 0..batch * channels {
            out[bc] = xd[bc * len..(bc + 1) * len].iter().sum::<f64>() / len as f64;
        }
        let out = Tensor::from_vec(&[batch, channels], out)?;
        let nx = self.parent_needs(x);
        Ok(self.push(out, &[x], move |g| {
            let dx = nx.then(|| {
                let mut dx = vec![0.0; batch * channels * len];
                for bc in 0..batch * channels {
                    let gv = g.data()[bc] / len as f64;
                    for t in 0..len {
                        dx[bc * len + t] = gv;
                    }
                }
                Tensor::from_vec(&[batch, channels, len], dx).expect("gap dx")
            });
            vec![dx]
        }))
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let out = vx.reshaped(shape)?;
        let parent_shape = vx.shape().to_vec();
        let nx = self.parent_needs(x);
        Ok(self.push(out, &[x], move |g| {
            vec![nx.then(|| g.reshaped(&parent_shape).expect("reshape grad"))]
        }))
    }

    /// Collapses `(B, C, L)` to `(B, C*L)`.
    pub fn flatten(&self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        require(vx.shape().len() == 3, "flatten", || {
            format!("input must be (B, C, L), got {:?}", vx.shape())
        })?;
        let (batch, channels, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        self.reshape(x, &[batch, channels * len])
    }

    /// Concatenates 2-d tensors along the feature axis.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var, TensorError> {
        require(!xs.is_empty(), "concat_cols", || "no inputs".into())?;
        let values: Vec<Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let batch = values[0].shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            require(v.shape().len() == 2 && v.shape()[0] == batch, "concat_cols", || {
                format!("expected (B={batch}, *), got {:?}", v.shape())
            })?;
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; batch * total];
        for b in 0..batch {
            let mut offset = 0;
            for v in &values {
                let w = v.shape()[1];
                out[b * total + offset..b * total + offset + w]
                    .copy_from_slice(&v.data()[b * w..(b + 1) * w]);
                offset += w;
            }
        }
        let out = Tensor::from_vec(&[batch, total], out)?;
        let needs: Vec<bool> = xs.iter().map(|&v| self.parent_needs(v)).collect();
        Ok(self.push(out, xs, move |g| {
            let mut grads = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (w, need) in widths.iter().zip(&needs) {
                let grad = need.then(|| {
                    let mut d = vec![0.0; batch * w];
                    for b in 0..batch {
                        d[b * w..(b + 1) * w]
                            .copy_from_slice(&g.data()[b * total + offset..b * total + offset + w]);
                    }
                    Tensor::from_vec(&[batch, *w], d).expect("concat grad")
                });
                grads.push(grad);
                offset += w;
            }
            grads
        }))
    }

    /// Extracts row `r` of a 2-d tensor as a vector.
    pub fn select_row(&self, x: Var, r: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        require(vx.shape().len() == 2, "select_row", || {
            format!("input must be 2-d, got {:?}", vx.shape())
        })?;
        let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
        require(r < rows, "select_row", || format!("row {r} out of {rows}"))?;
        let out = Tensor::from_vec(&[cols], vx.data()[r * cols..(r + 1) * cols].to_vec())?;
        let nx = self.parent_needs(x);
        Ok(self.push(out, &[x], move |g| {
            let dx = nx.then(|| {
                let mut d = vec![0.0; rows * cols];
                d[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                Tensor::from_vec(&[rows, cols], d).expect("select_row grad")
            });
            vec![dx]
        }))
    }

    /// Extracts column `c` of a 2-d tensor as a vector over the batch.
    pub fn select_col(&self, x: Var, c: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        require(vx.shape().len() == 2, "select_col", || {
            format!("input must be 2-d, got {:?}", vx.shape())
        })?;
        let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
        require(c < cols, "select_col", || format!("column {c} out of {cols}"))?;
        let out = Tensor::from_vec(
            &[rows],
            (0..rows).map(|r| vx.data()[r * cols + c]).collect(),
        )?;
        let nx = self.parent_needs(x);
        Ok(self.push(out, &[x], move |g| {
            let dx = nx.then(|| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + c] = g.data()[r];
                }
                Tensor::from_vec(&[rows, cols], d).expect("select_col grad")
            });
            vec![dx]
        }))
    }

    /// Multiplies each channel of `(B, C, L)` by a per-sample, per-channel
    /// gate `(B, C)`.
    pub fn scale_channels(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (vx, vs) = (self.value(x), self.value(s));
        require(vx.shape().len() == 3, "scale_channels", || {
            format!("input must be (B, C, L), got {:?}", vx.shape())
        })?;
        let (batch, channels, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        require(vs.shape() == [batch, channels], "scale_channels", || {
            format!("gates {:?} vs (B={batch}, C={channels})", vs.shape())
        })?;
        let xd = vx.data();
        let sd = vs.data();
        let mut out = vec![0.0; xd.len()];
        for bc in 0..batch * channels {
            let gate = sd[bc];
            for t in 0..len {
                out[bc * len + t] = xd[bc * len + t] * gate;
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let (nx, ns) = (self.parent_needs(x), self.parent_needs(s));
        let x_shape = vx.shape().to_vec();
        Ok(self.push(out, &[x, s], move |g| {
            let gd = g.data();
            let dx = nx.then(|| {
                let mut d = vec![0.0; gd.len()];
                for bc in 0..batch * channels {
                    let gate = vs.data()[bc];
                    for t in 0..len {
                        d[bc * len + t] = gd[bc * len + t] * gate;
                    }
                }
                Tensor::from_vec(&x_shape, d).expect("scale_channels dx")
            });
            let ds = ns.then(|| {
                let mut d = vec![0.0; batch * channels];
                for bc in 0..batch * channels {
                    let mut acc = 0.0;
                    for t in 0..len {
                        acc += gd[bc * len + t] * vx.data()[bc * len + t];
                    }
                    d[bc] = acc;
                }
                Tensor::from_vec(&[batch, channels], d).expect("scale_channels ds")
            });
            vec![dx, ds]
        }))
    }

    /// Multiplies each row of `(B, F)` by a per-sample scalar `(B)`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (vx, vs) = (self.value(x), self.value(s));
        require(vx.shape().len() == 2, "scale_rows", || {
            format!("input must be (B, F), got {:?}", vx.shape())
        })?;
        let (batch, feats) = (vx.shape()[0], vx.shape()[1]);
        require(vs.shape() == [batch], "scale_rows", || {
            format!("scales {:?} vs batch {batch}", vs.shape())
        })?;
        let mut out = vec![0.0; batch * feats];
        for b in 0..batch {
            let sv = vs.data()[b];
            for f in 0..feats {
                out[b * feats + f] = vx.data()[b * feats + f] * sv;
            }
        }
        let out = Tensor::from_vec(&[batch, feats], out)?;
        let (nx, ns) = (self.parent_needs(x), self.parent_needs(s));
        Ok(self.push(out, &[x, s], move |g| {
            let gd = g.data();
            let dx = nx.then(|| {
                let mut d = vec![0.0; batch * feats];
                for b in 0..batch {
                    let sv = vs.data()[b];
                    for f in 0..feats {
                        d[b * feats + f] = gd[b * feats + f] * sv;
                    }
                }
                Tensor::from_vec(&[batch, feats], d).expect("scale_rows dx")
            });
            let ds = ns.then(|| {
                let mut d = vec![0.0; batch];
                for b in 0..batch {
                    let mut acc = 0.0;
                    for f in 0..feats {
                        acc += gd[b * feats + f] * vx.data()[b * feats + f];
                    }
                    d[b] = acc;
                }
                Tensor::from_vec(&[batch], d).expect("scale_rows ds")
            });
            vec![dx, ds]
        }))
    }
}
