//! Forward and backward kernels on flat row-major buffers.
//!
//! Every backward kernel *accumulates* into its gradient buffers.

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const L2_EPS: f64 = 1e-12;

/// `c = op(a) · op(b) + beta · c` for row-major `m×k` / `k×n` operands.
///
/// `ta` means `a` is stored `k×m`; `tb` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the declared dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// convolution (stride 1, zero "same" padding)

fn im2col3(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                shift_copy(plane, row, h, w, ky as isize - 1, kx as isize - 1);
            }
        }
    }
}

fn col2im3(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                shift_add_back(row, plane, h, w, ky as isize - 1, kx as isize - 1, 1.0);
            }
        }
    }
}

/// `dst[y][x] = src[y+dy][x+dx]` with zeros outside.
fn shift_copy(src: &[f64], dst: &mut [f64], h: usize, w: usize, dy: isize, dx: isize) {
    for y in 0..h {
        let sy = y as isize + dy;
        let drow = &mut dst[y * w..(y + 1) * w];
        if sy < 0 || sy >= h as isize {
            drow.fill(0.0);
            continue;
        }
        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
        let (lo, hi) = valid_range(w, dx);
        drow[..lo].fill(0.0);
        drow[hi..].fill(0.0);
        for x in lo..hi {
            drow[x] = srow[(x as isize + dx) as usize];
        }
    }
}

/// `dst[y+dy][x+dx] += s * src[y][x]` for in-range targets (adjoint of a scaled shift).
fn shift_add_back(src: &[f64], dst: &mut [f64], h: usize, w: usize, dy: isize, dx: isize, s: f64) {
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let srow = &src[y * w..(y + 1) * w];
        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
        let (lo, hi) = valid_range(w, dx);
        for x in lo..hi {
            drow[(x as isize + dx) as usize] += s * srow[x];
        }
    }
}

/// Output columns `x` for which `x + dx` is inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub depthwise: bool,
}

pub(crate) fn conv2d_forward(d: ConvDims, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut y = vec![0.0; d.n * d.cout * hw];
    let mut col = if !d.depthwise && d.k == 3 { vec![0.0; d.cin * 9 * hw] } else { Vec::new() };
    for n in 0..d.n {
        let xs = &x[n * d.cin * hw..(n + 1) * d.cin * hw];
        let ys = &mut y[n * d.cout * hw..(n + 1) * d.cout * hw];
        if d.depthwise {
            for c in 0..d.cin {
                let plane = &xs[c * hw..(c + 1) * hw];
                let out = &mut ys[c * hw..(c + 1) * hw];
                let kern = &wt[c * 9..(c + 1) * 9];
                dw_plane_forward(plane, out, d.h, d.w, kern);
            }
        } else if d.k == 1 {
            gemm(d.cout, d.cin, hw, wt, false, xs, false, ys, 0.0);
        } else {
            im2col3(xs, d.cin, d.h, d.w, &mut col);
            gemm(d.cout, d.cin * 9, hw, wt, false, &col, false, ys, 0.0);
        }
        if let Some(b) = bias {
            for (c, bv) in b.iter().enumerate() {
                ys[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

fn dw_plane_forward(plane: &[f64], out: &mut [f64], h: usize, w: usize, kern: &[f64]) {
    for ky in 0..3 {
        let dy = ky as isize - 1;
        for kx in 0..3 {
            let dx = kx as isize - 1;
            let kv = kern[ky * 3 + kx];
            if kv == 0.0 {
                continue;
            }
            let (lo, hi) = valid_range(w, dx);
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                let orow = &mut out[y * w..(y + 1) * w];
                let shifted = &srow[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                for (o, s) in orow[lo..hi].iter_mut().zip(shifted) {
                    *o += kv * s;
                }
            }
        }
    }
}

/// Accumulates gradients for `x`, `w`, and `b` (each optional).
pub(crate) fn conv2d_backward(
    d: ConvDims,
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let mut col = if !d.depthwise && d.k == 3 { vec![0.0; d.cin * 9 * hw] } else { Vec::new() };
    for n in 0..d.n {
        let xs = &x[n * d.cin * hw..(n + 1) * d.cin * hw];
        let gys = &gy[n * d.cout * hw..(n + 1) * d.cout * hw];
        if let Some(gb) = gb.as_deref_mut() {
            for (c, b) in gb.iter_mut().enumerate() {
                *b += gys[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        if d.depthwise {
            for c in 0..d.cin {
                let plane = &xs[c * hw..(c + 1) * hw];
                let gplane = &gys[c * hw..(c + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                        if let Some(gw) = gw.as_deref_mut() {
                            let (lo, hi) = valid_range(d.w, dx);
                            let mut acc = 0.0;
                            for y in 0..d.h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= d.h as isize {
                                    continue;
                                }
                                let srow = &plane[sy as usize * d.w..(sy as usize + 1) * d.w];
                                let grow = &gplane[y * d.w..(y + 1) * d.w];
                                for x in lo..hi {
                                    acc += grow[x] * srow[(x as isize + dx) as usize];
                                }
                            }
                            gw[c * 9 + ky * 3 + kx] += acc;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let kv = wt[c * 9 + ky * 3 + kx];
                            let gxp = &mut gx[(n * d.cin + c) * hw..(n * d.cin + c + 1) * hw];
                            shift_add_back(gplane, gxp, d.h, d.w, dy, dx, kv);
                        }
                    }
                }
            }
        } else if d.k == 1 {
            if let Some(gw) = gw.as_deref_mut() {
                gemm(d.cout, hw, d.cin, gys, false, xs, true, gw, 1.0);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxs = &mut gx[n * d.cin * hw..(n + 1) * d.cin * hw];
                gemm(d.cin, d.cout, hw, wt, true, gys, false, gxs, 1.0);
            }
        } else {
            if let Some(gw) = gw.as_deref_mut() {
                im2col3(xs, d.cin, d.h, d.w, &mut col);
                gemm(d.cout, hw, d.cin * 9, gys, false, &col, true, gw, 1.0);
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(d.cin * 9, d.cout, hw, wt, true, gys, false, &mut col, 0.0);
                let gxs = &mut gx[n * d.cin * hw..(n + 1) * d.cin * hw];
                col2im3(&col, d.cin, d.h, d.w, gxs);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// layer norm over a middle axis: x viewed as [outer, c, inner]

pub(crate) fn layer_norm_forward(
    x: &[f64],
    outer: usize,
    c: usize,
    inner: usize,
    gain: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let mut mean = vec![0.0; inner];
    let mut var = vec![0.0; inner];
    for o in 0..outer {
        let base = o * c * inner;
        stats(&x[base..base + c * inner], c, inner, &mut mean, &mut var);
        for ci in 0..c {
            let off = base + ci * inner;
            for i in 0..inner {
                let rstd = 1.0 / (var[i] + LN_EPS).sqrt();
                y[off + i] = (x[off + i] - mean[i]) * rstd * gain[ci] + bias[ci];
            }
        }
    }
    y
}

fn stats(x: &[f64], c: usize, inner: usize, mean: &mut [f64], var: &mut [f64]) {
    mean.fill(0.0);
    var.fill(0.0);
    for ci in 0..c {
        for (m, v) in mean.iter_mut().zip(&x[ci * inner..(ci + 1) * inner]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    for ci in 0..c {
        for i in 0..inner {
            let d = x[ci * inner + i] - mean[i];
            var[i] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= c as f64);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    outer: usize,
    c: usize,
    inner: usize,
    gain: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut ggain: Option<&mut [f64]>,
    mut gbias: Option<&mut [f64]>,
) {
    let mut mean = vec![0.0; inner];
    let mut var = vec![0.0; inner];
    let mut sum_g = vec![0.0; inner];
    let mut sum_gx = vec![0.0; inner];
    for o in 0..outer {
        let base = o * c * inner;
        stats(&x[base..base + c * inner], c, inner, &mut mean, &mut var);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + LN_EPS).sqrt()).collect();
        sum_g.fill(0.0);
        sum_gx.fill(0.0);
        for ci in 0..c {
            let off = base + ci * inner;
            for i in 0..inner {
                let xhat = (x[off + i] - mean[i]) * rstd[i];
                let g = gy[off + i];
                if let Some(gg) = ggain.as_deref_mut() {
                    gg[ci] += g * xhat;
                }
                if let Some(gb) = gbias.as_deref_mut() {
                    gb[ci] += g;
                }
                let gs = g * gain[ci];
                sum_g[i] += gs;
                sum_gx[i] += gs * xhat;
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let cf = c as f64;
            for ci in 0..c {
                let off = base + ci * inner;
                for i in 0..inner {
                    let xhat = (x[off + i] - mean[i]) * rstd[i];
                    let gs = gy[off + i] * gain[ci];
                    gx[off + i] += rstd[i] * (gs - sum_g[i] / cf - xhat * sum_gx[i] / cf);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// softmax over the last axis with an optional per-group key mask

pub(crate) fn softmax_forward(x: &[f64], n: usize, mask: Option<(&[bool], usize)>) -> Vec<f64> {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let keep = mask.map(|(m, per)| &m[(r / per) * n..(r / per + 1) * n]);
        let xr = &x[r * n..(r + 1) * n];
        let yr = &mut y[r * n..(r + 1) * n];
        let allowed = |j: usize| keep.is_none_or(|k| k[j]);
        let mx = (0..n).filter(|&j| allowed(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for j in 0..n {
            if allowed(j) {
                yr[j] = (xr[j] - mx).exp();
                s += yr[j];
            }
        }
        yr.iter_mut().for_each(|v| *v /= s);
    }
    y
}

pub(crate) fn softmax_backward(y: &[f64], gy: &[f64], n: usize, gx: &mut [f64]) {
    for ((yr, gr), gxr) in y.chunks(n).zip(gy.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            gxr[j] += yr[j] * (gr[j] - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// permutation

pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return (out, out_shape);
    }
    let last = rank - 1;
    let (last_len, last_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = (0..last).map(|d| idx[d] * strides[d]).sum();
        for j in 0..last_len {
            out.push(x[base + j * last_stride]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// adaptive average pooling

pub(crate) fn pool_bins(size: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| {
            let lo = i * size / bins;
            let hi = ((i + 1) * size).div_ceil(bins);
            (lo, hi)
        })
        .collect()
}
