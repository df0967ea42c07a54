//! Dense row-major `f64` tensors and the handful of kernels the engines need.
//!
//! Every reduction runs in a fixed order: a dot product accumulates its terms
//! left to right starting from `0.0`, and bias terms are added after the sum.
//! The batched kernels apply exactly the per-sample arithmetic to each row of a
//! leading batch dimension, so a batched result is bitwise equal to running the
//! single-sample op on every sample.

use std::fmt;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinite entries.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {i} is {}", data[i])));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from rows; all rows must share a length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    pub fn all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix_dims()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Rows of the leading (batch) dimension.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of values per batch row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let r = self.row_len();
        &self.data[b * r..(b + 1) * r]
    }

    /// Copies the selected batch rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let r = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    fn as_matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => shape_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

/// `W x` for `W: [m, n]`, `x: [n]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = w.as_matrix_dims()?;
    if x.shape() != [n] {
        return shape_err(format!("matvec: W is {m}x{n}, x has shape {:?}", x.shape()));
    }
    let out = (0..m).map(|i| dot(&w.data[i * n..(i + 1) * n], &x.data)).collect();
    Tensor::new(vec![m], out)
}

/// `Wᵀ u` for `W: [m, n]`, `u: [m]`, without forming the transpose.
pub fn matvec_adjoint(w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (m, n) = w.as_matrix_dims()?;
    if u.shape() != [m] {
        return shape_err(format!("matvec_adjoint: W is {m}x{n}, u has shape {:?}", u.shape()));
    }
    let mut out = vec![0.0; n];
    for i in 0..m {
        let ui = u.data[i];
        for (o, &wij) in out.iter_mut().zip(&w.data[i * n..(i + 1) * n]) {
            *o += ui * wij;
        }
    }
    Tensor::new(vec![n], out)
}

const BATCH_BLOCK: usize = 4;

/// Batched `x Wᵀ (+ b)`: for `x: [B, n]` and `W: [m, n]` returns `[B, m]`.
///
/// Each output entry is `dot(W[j], x[b])` accumulated in index order, then
/// plus the bias, matching [`matvec`] bit for bit.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (m, n) = w.as_matrix_dims()?;
    let batch = x.batch_size();
    if x.row_len() != n || x.shape.len() < 2 {
        return shape_err(format!("dense_forward: W is {m}x{n}, input has shape {:?}", x.shape));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return shape_err(format!("dense_forward: bias shape {:?}, expected [{m}]", b.shape));
        }
    }
    // Column-major copy of W so the inner loop runs over contiguous outputs.
    let wt = w.transpose()?;
    let mut out = vec![0.0; batch * m];
    for b0 in (0..batch).step_by(BATCH_BLOCK) {
        let b1 = (b0 + BATCH_BLOCK).min(batch);
        for k in 0..n {
            let wrow = &wt.data[k * m..(k + 1) * m];
            for b in b0..b1 {
                let xv = x.data[b * n + k];
                let orow = &mut out[b * m..(b + 1) * m];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += wv * xv;
                }
            }
        }
    }
    if let Some(bias) = bias {
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
    }
    Tensor::new(vec![batch, m], out)
}

/// Batched `u W`: for `u: [B, m]` and `W: [m, n]` returns `[B, n]`, the
/// per-sample [`matvec_adjoint`].
pub fn dense_adjoint(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, n) = w.as_matrix_dims()?;
    let batch = u.batch_size();
    if u.row_len() != m || u.shape.len() < 2 {
        return shape_err(format!("dense_adjoint: W is {m}x{n}, upstream has shape {:?}", u.shape));
    }
    let mut out = vec![0.0; batch * n];
    for b0 in (0..batch).step_by(BATCH_BLOCK) {
        let b1 = (b0 + BATCH_BLOCK).min(batch);
        for j in 0..m {
            let wrow = &w.data[j * n..(j + 1) * n];
            for b in b0..b1 {
                let uv = u.data[b * m + j];
                if uv == 0.0 {
                    continue;
                }
                let orow = &mut out[b * n..(b + 1) * n];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += uv * wv;
                }
            }
        }
    }
    Tensor::new(vec![batch, n], out)
}

/// `Σ_b d[b] ⊗ x[b]` reduced over the batch in sample order: `[m, n]`.
pub fn dense_outer_sum(d: &Tensor, x: &Tensor) -> Result<Tensor> {
    let batch = d.batch_size();
    if x.batch_size() != batch {
        return shape_err("dense_outer_sum: batch sizes differ");
    }
    let (m, n) = (d.row_len(), x.row_len());
    let mut out = vec![0.0; m * n];
    for b in 0..batch {
        let xrow = x.row(b);
        for (j, &dv) in d.row(b).iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += dv * xv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Column sums over the batch dimension (`[B, ...] -> [...]`), in sample order.
pub fn batch_sum(d: &Tensor) -> Tensor {
    let r = d.row_len();
    let mut out = vec![0.0; r];
    for b in 0..d.batch_size() {
        for (o, &v) in out.iter_mut().zip(d.row(b)) {
            *o += v;
        }
    }
    Tensor {
        shape: d.shape[1..].to_vec(),
        data: out,
    }
}

fn conv_dims(input: &[usize], kernels: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (input, kernels) {
        ([c, h, w], [co, ci, 3, 3]) if c == ci => Ok((*c, *h, *w, *co)),
        _ => shape_err(format!("conv2d: input {input:?} incompatible with kernels {kernels:?}")),
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1, for one sample:
/// `input: [C, H, W]`, `kernels: [C', C, 3, 3]`, `bias: [C']` -> `[C', H, W]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c, h, w, co) = conv_dims(input.shape(), kernels.shape())?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return shape_err(format!("conv2d: bias shape {:?}, expected [{co}]", b.shape()));
        }
    }
    let mut out = vec![0.0; co * h * w];
    conv2d_into(
        &input.data,
        &kernels.data,
        bias.map(|b| &b.data[..]),
        c,
        h,
        w,
        co,
        &mut out,
    );
    Tensor::new(vec![co, h, w], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_into(
    input: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    out: &mut [f64],
) {
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..c {
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x + kx;
                            if ix < 1 || ix > w {
                                continue;
                            }
                            acc += kernels[((o * c + i) * 3 + ky) * 3 + kx] * input[(i * h + iy - 1) * w + ix - 1];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b[o];
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
}

/// Adjoint of [`conv2d`] (without bias) with respect to its input:
/// `⟨conv2d(x, K), u⟩ = ⟨x, conv2d_adjoint_input(K, u)⟩`.
pub fn conv2d_adjoint_input(kernels: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (co, c) = match kernels.shape() {
        [co, c, 3, 3] => (*co, *c),
        s => return shape_err(format!("conv2d_adjoint_input: bad kernel shape {s:?}")),
    };
    let (h, w) = match upstream.shape() {
        [uc, h, w] if *uc == co => (*h, *w),
        s => {
            return shape_err(format!(
                "conv2d_adjoint_input: upstream {s:?} does not match {co} output channels"
            ))
        }
    };
    let mut out = vec![0.0; c * h * w];
    conv2d_adjoint_into(&kernels.data, &upstream.data, c, h, w, co, &mut out);
    Tensor::new(vec![c, h, w], out)
}

fn conv2d_adjoint_into(kernels: &[f64], upstream: &[f64], c: usize, h: usize, w: usize, co: usize, out: &mut [f64]) {
    for i in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for o in 0..co {
                    for ky in 0..3 {
                        // output row oy reads input row oy + ky - 1 == y
                        let oy = (y + 1).wrapping_sub(ky);
                        if oy >= h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ox = (x + 1).wrapping_sub(kx);
                            if ox >= w {
                                continue;
                            }
                            acc += kernels[((o * c + i) * 3 + ky) * 3 + kx] * upstream[(o * h + oy) * w + ox];
                        }
                    }
                }
                out[(i * h + y) * w + x] = acc;
            }
        }
    }
}

/// Batched [`conv2d`] over `[B, C, H, W]`.
pub fn conv2d_batch(input: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.shape().len() != 4 {
        return shape_err(format!("conv2d_batch: input shape {:?}", input.shape()));
    }
    let (c, h, w, co) = conv_dims(&input.shape()[1..], kernels.shape())?;
    let batch = input.batch_size();
    let mut out = vec![0.0; batch * co * h * w];
    for (b, orow) in out.chunks_mut(co * h * w).enumerate() {
        conv2d_into(
            input.row(b),
            &kernels.data,
            bias.map(|t| &t.data[..]),
            c,
            h,
            w,
            co,
            orow,
        );
    }
    Tensor::new(vec![batch, co, h, w], out)
}

/// Batched [`conv2d_adjoint_input`] over `[B, C', H, W]`.
pub fn conv2d_adjoint_batch(kernels: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (co, c) = match kernels.shape() {
        [co, c, 3, 3] => (*co, *c),
        s => return shape_err(format!("conv2d_adjoint_batch: bad kernel shape {s:?}")),
    };
    let (batch, h, w) = match upstream.shape() {
        [b, uc, h, w] if *uc == co => (*b, *h, *w),
        s => return shape_err(format!("conv2d_adjoint_batch: upstream shape {s:?}")),
    };
    let mut out = vec![0.0; batch * c * h * w];
    for (b, orow) in out.chunks_mut(c * h * w).enumerate() {
        conv2d_adjoint_into(&kernels.data, upstream.row(b), c, h, w, co, orow);
    }
    Tensor::new(vec![batch, c, h, w], out)
}

/// Kernel gradient of a batched conv: `Σ_b Σ_{y,x} d[b,o,y,x] · in[b,i,y+ky-1,x+kx-1]`.
pub fn conv2d_kernel_grad(d: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (batch, co, h, w) = match d.shape() {
        [b, co, h, w] => (*b, *co, *h, *w),
        s => return shape_err(format!("conv2d_kernel_grad: bad upstream shape {s:?}")),
    };
    let c = match input.shape() {
        [b, c, ih, iw] if *b == batch && *ih == h && *iw == w => *c,
        s => return shape_err(format!("conv2d_kernel_grad: bad input shape {s:?}")),
    };
    let mut out = vec![0.0; co * c * 9];
    for b in 0..batch {
        let drow = d.row(b);
        let irow = input.row(b);
        for o in 0..co {
            for i in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            for x in 0..w {
                                let ix = x + kx;
                                if ix < 1 || ix > w {
                                    continue;
                                }
                                acc += drow[(o * h + y) * w + x] * irow[(i * h + iy - 1) * w + ix - 1];
                            }
                        }
                        out[((o * c + i) * 3 + ky) * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, c, 3, 3], out)
}

/// Per-channel sums of `[B, C, H, W]` over batch and space.
pub fn channel_sum(d: &Tensor) -> Result<Tensor> {
    let (batch, c, hw) = match d.shape() {
        [b, c, h, w] => (*b, *c, h * w),
        s => return shape_err(format!("channel_sum: bad shape {s:?}")),
    };
    let mut out = vec![0.0; c];
    for b in 0..batch {
        let row = d.row(b);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += row[ch * hw..(ch + 1) * hw].iter().fold(0.0, |a, &v| a + v);
        }
    }
    Tensor::new(vec![c], out)
}

/// Winner positions of a 2x2/stride-2 max pool, one flat input index
/// (within a sample) per pooled output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMask {
    pub winners: Vec<u32>,
    pub batch: usize,
}

/// Batched 2x2 max pool on `[B, C, H, W]` (H, W even). Ties go to the lowest
/// flat index. Returns the pooled tensor and the winner mask.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolMask)> {
    let (batch, c, h, w) = match input.shape() {
        [b, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*b, *c, *h, *w),
        s => return shape_err(format!("maxpool2x2: input shape {s:?} needs even H, W")),
    };
    let (ph, pw) = (h / 2, w / 2);
    let per = c * ph * pw;
    let mut out = vec![0.0; batch * per];
    let mut winners = vec![0u32; batch * per];
    for b in 0..batch {
        let row = input.row(b);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if row[cand] > row[best] {
                            best = cand;
                        }
                    }
                    let o = b * per + (ch * ph + y) * pw + x;
                    out[o] = row[best];
                    winners[o] = best as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, c, ph, pw], out)?, PoolMask { winners, batch }))
}

/// Applies a recorded pooling mask: picks the winner entry of each window.
pub fn pool_select(input: &Tensor, mask: &PoolMask) -> Result<Tensor> {
    let (batch, c, h, w) = match input.shape() {
        [b, c, h, w] if *b == mask.batch => (*b, *c, *h, *w),
        s => return shape_err(format!("pool_select: input shape {s:?} does not match mask")),
    };
    let per = c * (h / 2) * (w / 2);
    let mut out = vec![0.0; batch * per];
    for b in 0..batch {
        let row = input.row(b);
        for i in 0..per {
            out[b * per + i] = row[mask.winners[b * per + i] as usize];
        }
    }
    Tensor::new(vec![batch, c, h / 2, w / 2], out)
}

/// Adjoint of [`pool_select`]: routes each pooled value back to its winner;
/// all other positions receive zero.
pub fn pool_scatter(upstream: &Tensor, mask: &PoolMask, input_shape: &[usize]) -> Result<Tensor> {
    let batch = upstream.batch_size();
    let per = upstream.row_len();
    let in_per: usize = input_shape.iter().product();
    if batch != mask.batch || mask.winners.len() != batch * per {
        return shape_err("pool_scatter: upstream does not match mask");
    }
    let mut out = vec![0.0; batch * in_per];
    for b in 0..batch {
        let urow = upstream.row(b);
        for (i, &u) in urow.iter().enumerate() {
            out[b * in_per + mask.winners[b * per + i] as usize] += u;
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    Tensor::new(shape, out)
}
