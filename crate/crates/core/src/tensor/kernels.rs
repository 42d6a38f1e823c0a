//! Slice-level forward and backward kernels. Every reduction runs in a fixed
//! sequential order so results are bit-reproducible.

use super::{numel, Result, TensorError};

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape
/// `[k, n]`. `trans_a` means `a` is stored `[k, m]`; `trans_b` means `b` is
/// stored `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let acol = &a[p * m..(p + 1) * m];
                for (i, &av) in acol.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: f32 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    c[i * n + j] += dot;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut dot = 0.0;
                    for p in 0..k {
                        dot += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += dot;
                }
            }
        }
    }
}

/// Trailing-aligned broadcast of two shapes: dimensions are compared from the
/// right and must be equal or 1; missing leading dimensions count as 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_offset, in_offsets...)` for every element of `out_shape` in
/// row-major order.
fn for_each_broadcast(out_shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(usize, &[usize])) {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; strides.len()];
    for o in 0..total {
        f(o, &offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (off, s) in offs.iter_mut().zip(strides) {
                *off += s[ax];
            }
            if idx[ax] < out_shape[ax] {
                break;
            }
            for (off, s) in offs.iter_mut().zip(strides) {
                *off -= s[ax] * out_shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a_shape == out_shape {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![0.0; numel(out_shape)];
    for_each_broadcast(out_shape, &[&sa, &sb], |o, offs| {
        out[o] = f(a[offs[0]], b[offs[1]]);
    });
    out
}

/// Sums `grad` (laid out as `out_shape`) down to `in_shape`.
pub fn reduce_to_shape(grad: &[f32], out_shape: &[usize], in_shape: &[usize]) -> Vec<f32> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(in_shape)];
    if out.len() == 1 {
        out[0] = grad.iter().sum();
        return out;
    }
    let s = broadcast_strides(in_shape, out_shape);
    for_each_broadcast(out_shape, &[&s], |o, offs| {
        out[offs[0]] += grad[o];
    });
    out
}

/// Like [`broadcast_binary`] but also visits the input element offsets, used by
/// backward rules that need both operands.
pub fn broadcast_visit(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for_each_broadcast(out_shape, &[&sa, &sb], |o, offs| f(o, offs[0], offs[1]));
}

pub fn permuted_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(TensorError::invalid(
            "permute",
            format!("axes {axes:?} do not match rank {}", shape.len()),
        ));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(TensorError::invalid(
                "permute",
                format!("invalid axes {axes:?} for rank {}", shape.len()),
            ));
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

pub fn permute(data: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = contiguous_strides(shape);
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &[&strides], |o, offs| out[o] = data[offs[0]]);
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {kh} larger than padded input {span_h}x{span_w}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kernel: kh,
            stride,
            padding,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_hw(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(g: &ConvGeometry, x: &[f32], cols: &mut [f32]) {
    let k = g.kernel;
    let hw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.w_out + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                plane[iy as usize * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f32], dx: &mut [f32]) {
    let k = g.kernel;
    let hw = g.out_hw();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let in_len = g.c_in * g.h * g.w;
    let hw = g.out_hw();
    let out_len = g.c_out * hw;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * hw]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        let src: &[f32] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.c_out, g.patch_len(), hw, w, false, src, false, ob, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; each is computed only when requested.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let in_len = g.c_in * g.h * g.w;
    let hw = g.out_hw();
    let out_len = g.c_out * hw;
    let plen = g.patch_len();
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.c_out];
        for b in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let s = b * out_len + co * hw;
                *d += dy[s..s + hw].iter().sum::<f32>();
            }
        }
        db
    });
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { plen * hw }];
    let mut dcols = vec![0.0; if need_dx && !g.is_pointwise() { plen * hw } else { 0 }];
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let src: &[f32] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            gemm(g.c_out, hw, plen, dyb, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(plen, g.c_out, hw, w, true, dyb, false, dxb, true);
            } else {
                gemm(plen, g.c_out, hw, w, true, dyb, false, &mut dcols, false);
                col2im(g, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// 3x3 average pool, stride 1, padding 1; the divisor counts only cells
/// inside the input.
pub fn avg_pool3x3_forward(x: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut s = 0.0;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        s += src[yy * w + xi];
                    }
                }
                dst[y * w + xx] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            }
        }
    }
    out
}

pub fn avg_pool3x3_backward(dy: &[f32], planes: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0; dy.len()];
    for p in 0..planes {
        let src = &dy[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let g = src[y * w + xx] / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        dst[yy * w + xi] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Layout of a tensor reduced along one axis: `outer` independent slabs of
/// `len` steps spaced `inner` apart.
#[derive(Debug, Clone, Copy)]
pub struct AxisLayout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisLayout {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

pub fn softmax_forward(x: &[f32], l: AxisLayout) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for o in 0..l.outer {
        for i in 0..l.inner {
            let base = o * l.len * l.inner + i;
            let mut max = f32::NEG_INFINITY;
            for k in 0..l.len {
                max = max.max(x[base + k * l.inner]);
            }
            let mut sum = 0.0;
            for k in 0..l.len {
                let e = (x[base + k * l.inner] - max).exp();
                out[base + k * l.inner] = e;
                sum += e;
            }
            for k in 0..l.len {
                out[base + k * l.inner] /= sum;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f32], dy: &[f32], l: AxisLayout) -> Vec<f32> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..l.outer {
        for i in 0..l.inner {
            let base = o * l.len * l.inner + i;
            let mut dot = 0.0;
            for k in 0..l.len {
                let at = base + k * l.inner;
                dot += dy[at] * y[at];
            }
            for k in 0..l.len {
                let at = base + k * l.inner;
                dx[at] = y[at] * (dy[at] - dot);
            }
        }
    }
    dx
}

/// Normalization statistics over groups of `group_len` contiguous elements.
pub struct NormStats {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Zero-mean unit-variance normalization of each contiguous group (biased
/// variance). Used by layer norm (group = last dim) and group norm.
pub fn normalize_groups(x: &[f32], group_len: usize, eps: f32) -> NormStats {
    let groups = x.len() / group_len;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let s = &x[g * group_len..(g + 1) * group_len];
        let mean = s.iter().sum::<f32>() / group_len as f32;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / group_len as f32;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[g] = is;
        for (o, v) in xhat[g * group_len..(g + 1) * group_len].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    NormStats { xhat, inv_std }
}

/// Gradient through `xhat = (x - mean) * inv_std` given `dxhat`, per group.
pub fn normalize_groups_backward(
    xhat: &[f32],
    inv_std: &[f32],
    dxhat: &[f32],
    group_len: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0; xhat.len()];
    let m = group_len as f32;
    for (g, &is) in inv_std.iter().enumerate() {
        let r = g * group_len..(g + 1) * group_len;
        let (xh, dxh) = (&xhat[r.clone()], &dxhat[r.clone()]);
        let sum_d: f32 = dxh.iter().sum();
        let sum_dx: f32 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((o, &d), &h) in dx[r].iter_mut().zip(dxh).zip(xh) {
            *o = is / m * (m * d - sum_d - h * sum_dx);
        }
    }
    dx
}

/// Per-channel statistics for `[B, C, S]` data (S = spatial size, possibly 1).
pub fn channel_moments(x: &[f32], batch: usize, channels: usize, spatial: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (batch * spatial) as f32;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (c, mv) in mean.iter_mut().enumerate() {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += x[off..off + spatial].iter().sum::<f32>();
        }
        *mv = s / m;
    }
    for (c, vv) in var.iter_mut().enumerate() {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += x[off..off + spatial]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f32>();
        }
        *vv = s / m;
    }
    (mean, var)
}

pub const GELU_COEF: f32 = 0.044715;
const SQRT_2_OVER_PI: f32 = 0.797_884_6;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub fn hardswish(x: f32) -> f32 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn hardswish_grad(x: f32) -> f32 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}
