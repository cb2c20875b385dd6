//! Differentiable operations. Each op validates shapes, computes the
//! forward value, and records a backward closure that reads the output's
//! accumulated gradient and adds local gradients into its inputs.
//!
//! Backward closures capture value snapshots taken at forward time, so
//! in-place parameter updates between steps cannot corrupt a live tape.

use super::kernels::{mm, mm_abt, mm_atb};
use super::Tensor;
use crate::error::{Error, Result};

/// Attention visibility mask for row-wise softmax.
pub enum AttnMask {
    /// Query row `i` may see key column `j` iff `j <= i + key_offset`.
    Causal { key_offset: usize },
    /// Dense row-major visibility flags, `rows * cols` entries, true = visible.
    Dense { rows: usize, cols: usize, visible: Vec<bool> },
}

impl AttnMask {
    fn visible(&self, row: usize, col: usize) -> bool {
        match self {
            AttnMask::Causal { key_offset } => col <= row + key_offset,
            AttnMask::Dense { cols, visible, .. } => visible[row * cols + col],
        }
    }
}

/// Precomputed rotation angles for rotary position encoding, shared by all
/// heads (each head rotates its own `head_dim` slice with the same table).
pub struct RotaryTable {
    head_dim: usize,
    max_pos: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, max_pos: usize, base: f64) -> RotaryTable {
        assert!(head_dim % 2 == 0, "rotary needs an even head_dim");
        let half = head_dim / 2;
        let mut cos = vec![0.0; max_pos * half];
        let mut sin = vec![0.0; max_pos * half];
        for pos in 0..max_pos {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos[pos * half + i] = angle.cos();
                sin[pos * half + i] = angle.sin();
            }
        }
        RotaryTable {
            head_dim,
            max_pos,
            cos,
            sin,
        }
    }

    fn at(&self, pos: usize, pair: usize) -> (f64, f64) {
        assert!(
            pos < self.max_pos,
            "position {pos} beyond rotary table ({})",
            self.max_pos
        );
        let half = self.head_dim / 2;
        (self.cos[pos * half + pair], self.sin[pos * half + pair])
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Trailing-dimension broadcast: identical shapes, a single-element operand,
/// or the smaller shape equal to a trailing suffix of the larger. Returns
/// (output shape, lhs period, rhs period); operand element `i % period`
/// pairs with output element `i`.
fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if lhs == rhs {
        return Ok((lhs.to_vec(), ln.max(1), rn.max(1)));
    }
    if rn == 1 {
        return Ok((lhs.to_vec(), ln.max(1), 1));
    }
    if ln == 1 {
        return Ok((rhs.to_vec(), 1, rn.max(1)));
    }
    if lhs.len() > rhs.len() && lhs.ends_with(rhs) {
        return Ok((lhs.to_vec(), ln, rn));
    }
    if rhs.len() > lhs.len() && rhs.ends_with(lhs) {
        return Ok((rhs.to_vec(), ln, rn));
    }
    Err(shape_err(op, lhs, rhs))
}

/// Consume the output gradient of an op. Op outputs are never leaves, so
/// the buffer is taken; each sweep re-accumulates it from scratch.
fn grad_of(t: &Tensor) -> Option<Vec<f64>> {
    let mut inner = t.inner.borrow_mut();
    debug_assert!(!inner.is_leaf);
    inner.grad.take()
}

impl Tensor {
    fn binary_ew(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let (out_shape, lp, rp) = broadcast(op, &ls, &rs)?;
        let a = self.to_vec();
        let b = rhs.to_vec();
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        for (i, d) in data.iter_mut().enumerate() {
            *d = f(a[i % lp], b[i % rp]);
        }
        let out = Tensor::result_of(&[self, rhs], out_shape, data);
        if out.requires_grad() {
            let (lh, rh, oh) = (self.clone(), rhs.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gl = vec![0.0; lp];
                let mut gr = vec![0.0; rp];
                for (i, gi) in g.iter().enumerate() {
                    let (da, db) = df(a[i % lp], b[i % rp]);
                    gl[i % lp] += gi * da;
                    gr[i % rp] += gi * db;
                }
                if lh.requires_grad() {
                    lh.accum_grad(&gl);
                }
                if rh.requires_grad() {
                    rh.accum_grad(&gr);
                }
            });
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_ew(rhs, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_ew(rhs, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_ew(rhs, "mul", |a, b| a * b, |a, b| (b, a))
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let data = self.to_vec().iter().map(|v| mul * v + add).collect();
        let out = Tensor::result_of(&[self], self.shape(), data);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                xh.accum_grad(&g.iter().map(|v| v * mul).collect::<Vec<_>>());
            });
        }
        out
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .to_vec()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let out = Tensor::result_of(&[self], self.shape(), data.clone());
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&data)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                xh.accum_grad(&gx);
            });
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(shape_err("matmul", &ls, &rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.to_vec();
        let b = rhs.to_vec();
        let out = Tensor::result_of(&[self, rhs], vec![m, n], mm(&a, &b, m, k, n));
        if out.requires_grad() {
            let (lh, rh, oh) = (self.clone(), rhs.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                if lh.requires_grad() {
                    lh.accum_grad(&mm_abt(&g, &b, m, n, k));
                }
                if rh.requires_grad() {
                    rh.accum_grad(&mm_atb(&a, &g, m, k, n));
                }
            });
        }
        Ok(out)
    }

    /// `self * rhs^T` for 2-D operands sharing their last dimension.
    pub fn matmul_bt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[1] {
            return Err(shape_err("matmul_bt", &ls, &rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[0]);
        let a = self.to_vec();
        let b = rhs.to_vec();
        let out = Tensor::result_of(&[self, rhs], vec![m, n], mm_abt(&a, &b, m, k, n));
        if out.requires_grad() {
            let (lh, rh, oh) = (self.clone(), rhs.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                if lh.requires_grad() {
                    lh.accum_grad(&mm(&g, &b, m, n, k));
                }
                if rh.requires_grad() {
                    rh.accum_grad(&mm_atb(&g, &a, m, n, k));
                }
            });
        }
        Ok(out)
    }

    /// Row-wise softmax over the last dimension, numerically stabilized by
    /// row-max subtraction. Masked positions contribute exactly zero.
    pub fn softmax_rows(&self, mask: Option<&AttnMask>) -> Result<Tensor> {
        let shape = self.shape();
        let n = *shape.last().expect("softmax needs at least one dim");
        assert!(n >= 1, "softmax over an empty last dimension");
        let rows = self.numel() / n.max(1);
        let x = self.to_vec();
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            let mut visible = 0usize;
            let mut has_nan = false;
            for (j, v) in row.iter().enumerate() {
                if mask.map(|m| m.visible(r, j)).unwrap_or(true) {
                    visible += 1;
                    has_nan |= v.is_nan();
                    max = max.max(*v);
                }
            }
            if visible == 0 {
                return Err(Error::FullyMaskedRow { row: r });
            }
            // Non-finite scores are an upstream error state; emit NaN so the
            // caller's loss check can abort rather than masking the blowup.
            if has_nan {
                max = f64::NAN;
            }
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                if mask.map(|m| m.visible(r, j)).unwrap_or(true) {
                    let e = (v - max).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[r * n + j] /= sum;
            }
        }
        let out = Tensor::result_of(&[self], shape, data.clone());
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let y = &data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                xh.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    /// `x / sqrt(mean(x^2) + eps) * weight`, normalizing each slice along
    /// the last dimension.
    pub fn rms_norm(&self, weight: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().expect("rms_norm needs at least one dim");
        let ws = weight.shape();
        if ws != [d] {
            return Err(shape_err("rms_norm", &shape, &ws));
        }
        assert!(eps > 0.0, "rms_norm eps must be positive");
        let rows = self.numel() / d.max(1);
        let x = self.to_vec();
        let w = weight.to_vec();
        let mut inv = vec![0.0; rows];
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            inv[r] = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = row[j] * inv[r] * w[j];
            }
        }
        let out = Tensor::result_of(&[self, weight], shape, data);
        if out.requires_grad() {
            let (xh, wh, oh) = (self.clone(), weight.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                if xh.requires_grad() {
                    let mut gx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let xr = &x[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s: f64 = (0..d).map(|j| gr[j] * w[j] * xr[j]).sum();
                        let i = inv[r];
                        for j in 0..d {
                            gx[r * d + j] = i * (gr[j] * w[j] - xr[j] * i * i * s / d as f64);
                        }
                    }
                    xh.accum_grad(&gx);
                }
                if wh.requires_grad() {
                    let mut gw = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gw[j] += g[r * d + j] * x[r * d + j] * inv[r];
                        }
                    }
                    wh.accum_grad(&gw);
                }
            });
        }
        Ok(out)
    }

    /// Gather rows of an embedding table; row `i` of the result is
    /// `table[ids[i]]`. An empty id list yields a `0 x d` tensor.
    pub fn embed_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let ts = table.shape();
        assert_eq!(ts.len(), 2, "embedding table must be 2-D");
        let (vocab, d) = (ts[0], ts[1]);
        let tdata = table.to_vec();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&tdata[id * d..(id + 1) * d]);
        }
        let out = Tensor::result_of(&[table], vec![ids.len(), d], data);
        if out.requires_grad() {
            let (th, oh) = (table.clone(), out.clone());
            let ids = ids.to_vec();
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gt = vec![0.0; vocab * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
                th.accum_grad(&gt);
            });
        }
        Ok(out)
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(shape_err("concat_rows", &[rows, cols], &s));
            }
            rows += s[0];
            data.extend_from_slice(&p.to_vec());
        }
        let out = Tensor::result_of(parts, vec![rows, cols], data);
        if out.requires_grad() {
            let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
            let oh = out.clone();
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut off = 0;
                for (h, sz) in handles.iter().zip(&sizes) {
                    if h.requires_grad() {
                        h.accum_grad(&g[off..off + sz]);
                    }
                    off += sz;
                }
            });
        }
        Ok(out)
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", &[rows, widths[0]], &s));
            }
        }
        let total: usize = widths.iter().sum();
        let datas: Vec<Vec<f64>> = parts.iter().map(|p| p.to_vec()).collect();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pd, w) in datas.iter().zip(&widths) {
                data[r * total + off..r * total + off + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let out = Tensor::result_of(parts, vec![rows, total], data);
        if out.requires_grad() {
            let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let oh = out.clone();
            let widths = widths.clone();
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut off = 0;
                for (h, w) in handles.iter().zip(&widths) {
                    if h.requires_grad() {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        h.accum_grad(&gp);
                    }
                    off += w;
                }
            });
        }
        Ok(out)
    }

    /// Copy out columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (rows, cols) = (self.rows(), self.cols());
        assert!(start < end && end <= cols, "bad column slice {start}..{end}");
        let x = self.to_vec();
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&x[r * cols + start..r * cols + end]);
        }
        let out = Tensor::result_of(&[self], vec![rows, w], data);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                xh.accum_grad(&gx);
            });
        }
        out
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.to_vec().iter().sum();
        let n = self.numel();
        let out = Tensor::result_of(&[self], vec![1], vec![s]);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                xh.accum_grad(&vec![g[0]; n]);
            });
        }
        out
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean over the last dimension; `[r, d] -> [r]`, 1-D input -> `[1]`.
    pub fn mean_lastdim(&self) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("mean_lastdim needs at least one dim");
        let rows = self.numel() / d.max(1);
        let x = self.to_vec();
        let data: Vec<f64> = (0..rows)
            .map(|r| x[r * d..(r + 1) * d].iter().sum::<f64>() / d as f64)
            .collect();
        let out_shape = if shape.len() >= 2 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::result_of(&[self], out_shape, data);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let v = g[r] / d as f64;
                    gx[r * d..(r + 1) * d].iter_mut().for_each(|e| *e = v);
                }
                xh.accum_grad(&gx);
            });
        }
        out
    }

    /// Scale row `i` of a 2-D tensor by `s[i]`.
    pub fn row_scale(&self, s: &Tensor) -> Result<Tensor> {
        let (rows, cols) = (self.rows(), self.cols());
        if s.numel() != rows {
            return Err(shape_err("row_scale", &[rows, cols], &s.shape()));
        }
        let x = self.to_vec();
        let sv = s.to_vec();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] = x[r * cols + j] * sv[r];
            }
        }
        let out = Tensor::result_of(&[self, s], vec![rows, cols], data);
        if out.requires_grad() {
            let (xh, sh, oh) = (self.clone(), s.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                if xh.requires_grad() {
                    let gx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * sv[i / cols])
                        .collect();
                    xh.accum_grad(&gx);
                }
                if sh.requires_grad() {
                    let mut gs = vec![0.0; rows];
                    for r in 0..rows {
                        gs[r] = (0..cols).map(|j| g[r * cols + j] * x[r * cols + j]).sum();
                    }
                    sh.accum_grad(&gs);
                }
            });
        }
        Ok(out)
    }

    /// Rotate each head's coordinate pairs by position-dependent angles.
    /// Row `i` uses `positions[i]`; the rotation is orthogonal, so backward
    /// applies the inverse rotation to the gradient.
    pub fn apply_rotary(
        &self,
        table: &RotaryTable,
        positions: &[usize],
        n_heads: usize,
    ) -> Tensor {
        let (rows, d) = (self.rows(), self.cols());
        assert_eq!(rows, positions.len(), "one position per row");
        assert_eq!(d % n_heads, 0);
        let hd = d / n_heads;
        assert_eq!(hd, table.head_dim, "rotary table head_dim mismatch");
        let half = hd / 2;
        let x = self.to_vec();
        let mut data = x.clone();
        let mut angles = Vec::with_capacity(rows * half);
        for (r, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let (c, s) = table.at(pos, i);
                angles.push((c, s));
                for h in 0..n_heads {
                    let i0 = r * d + h * hd + 2 * i;
                    let (a, b) = (x[i0], x[i0 + 1]);
                    data[i0] = a * c - b * s;
                    data[i0 + 1] = a * s + b * c;
                }
            }
        }
        let out = Tensor::result_of(&[self], vec![rows, d], data);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = g.clone();
                for r in 0..rows {
                    for i in 0..half {
                        let (c, s) = angles[r * half + i];
                        for h in 0..n_heads {
                            let i0 = r * d + h * hd + 2 * i;
                            let (ga, gb) = (g[i0], g[i0 + 1]);
                            gx[i0] = ga * c + gb * s;
                            gx[i0 + 1] = -ga * s + gb * c;
                        }
                    }
                }
                xh.accum_grad(&gx);
            });
        }
        out
    }

    /// Mean cross-entropy of row-wise logits against integer targets;
    /// rows with `None` targets are ignored. Returns a detached zero when
    /// nothing is supervised.
    pub fn cross_entropy_rows(&self, targets: &[Option<usize>]) -> Result<Tensor> {
        let (rows, vocab) = (self.rows(), self.cols());
        assert_eq!(rows, targets.len(), "one target slot per row");
        let x = self.to_vec();
        let mut supervised: Vec<(usize, usize)> = Vec::new();
        for (r, t) in targets.iter().enumerate() {
            if let Some(id) = t {
                if *id >= vocab {
                    return Err(Error::TokenOutOfRange { id: *id, vocab });
                }
                supervised.push((r, *id));
            }
        }
        if supervised.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        let m = supervised.len() as f64;
        let mut loss = 0.0;
        let mut probs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(supervised.len());
        for &(r, t) in &supervised {
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut q: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= sum);
            loss += sum.ln() + max - row[t];
            probs.push((r, q));
        }
        let out = Tensor::result_of(&[self], vec![1], vec![loss / m]);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            let sup = supervised.clone();
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = vec![0.0; rows * vocab];
                for ((r, t), (_, q)) in sup.iter().zip(&probs) {
                    for j in 0..vocab {
                        let delta = if j == *t { 1.0 } else { 0.0 };
                        gx[r * vocab + j] = g[0] * (q[j] - delta) / m;
                    }
                }
                xh.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Mean over rows of KL(p || softmax(self)) where `p` holds reference
    /// probabilities. The reference side is treated as a constant: no
    /// gradient ever reaches it.
    pub fn kl_from_reference(&self, reference_probs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), reference_probs.shape());
        if ls != rs || ls.len() != 2 {
            return Err(shape_err("kl_from_reference", &ls, &rs));
        }
        let (rows, vocab) = (ls[0], ls[1]);
        let x = self.to_vec();
        let p = reference_probs.to_vec();
        let mut loss = 0.0;
        let mut probs = vec![0.0; rows * vocab];
        let mut pmass = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * vocab + j] = e;
                sum += e;
            }
            let lse = sum.ln() + max;
            for j in 0..vocab {
                probs[r * vocab + j] /= sum;
                let pj = p[r * vocab + j];
                pmass[r] += pj;
                if pj > 0.0 {
                    loss += pj * (pj.ln() - (row[j] - lse));
                }
            }
        }
        let out = Tensor::result_of(&[self], vec![1], vec![loss / rows as f64]);
        if out.requires_grad() {
            let (xh, oh) = (self.clone(), out.clone());
            out.record(move || {
                let Some(g) = grad_of(&oh) else { return };
                let mut gx = vec![0.0; rows * vocab];
                for r in 0..rows {
                    for j in 0..vocab {
                        let q = probs[r * vocab + j];
                        let pj = p[r * vocab + j];
                        gx[r * vocab + j] = g[0] * (q * pmass[r] - pj) / rows as f64;
                    }
                }
                xh.accum_grad(&gx);
            });
        }
        Ok(out)
    }

    /// Index of the largest value in row `i` of a 2-D tensor.
    pub fn argmax_row(&self, i: usize) -> usize {
        let cols = self.cols();
        let data = self.inner.borrow();
        let row = &data.data[i * cols..(i + 1) * cols];
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        best
    }
}
