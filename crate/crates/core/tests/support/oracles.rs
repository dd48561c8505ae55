//! Scalar-loop reference implementations, written independently of the
//! tape kernels, for equivalence tests.

use textrestore::params::ParamStore;
use textrestore::ImageTensor;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data()
}

/// Layer norm of one vector (biased variance, eps inside the root).
pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    (0..v.len()).map(|i| (v[i] - mean) * r * gain[i] + bias[i]).collect()
}

/// `out = W v + b` for `W` stored `[out, in]`.
pub fn affine(w: &[f64], b: Option<&[f64]>, v: &[f64]) -> Vec<f64> {
    let cin = v.len();
    let cout = w.len() / cin;
    (0..cout)
        .map(|o| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                acc += w[o * cin + i] * v[i];
            }
            acc
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Concatenate attention feature fusion on `[n, c, h, w]` buffers.
#[allow(clippy::too_many_arguments)]
pub fn caff(store: &ParamStore, name: &str, x: &[f64], y: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let q = |s: &str| p(store, &format!("{name}.{s}"));
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        let at = |buf: &[f64], ch: usize, i: usize| buf[(b * c + ch) * hw + i];
        // global context from the pooled concatenation
        let mut pooled = vec![0.0; 2 * c];
        for ch in 0..2 * c {
            let mut s = 0.0;
            for i in 0..hw {
                s += if ch < c { at(x, ch, i) } else { at(y, ch - c, i) };
            }
            pooled[ch] = s / hw as f64;
        }
        let g1 = affine(q("global1.weight"), Some(q("global1.bias")), &pooled);
        let g1: Vec<f64> =
            layer_norm(&g1, q("global_norm1.weight"), q("global_norm1.bias")).into_iter().map(|v| v.max(0.0)).collect();
        let g2 = affine(q("global2.weight"), Some(q("global2.bias")), &g1);
        let glob = layer_norm(&g2, q("global_norm2.weight"), q("global_norm2.bias"));
        for i in 0..hw {
            let xy: Vec<f64> = (0..2 * c).map(|ch| if ch < c { at(x, ch, i) } else { at(y, ch - c, i) }).collect();
            let l1 = affine(q("local1.weight"), Some(q("local1.bias")), &xy);
            let l1: Vec<f64> = layer_norm(&l1, q("local_norm1.weight"), q("local_norm1.bias"))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let l2 = affine(q("local2.weight"), Some(q("local2.bias")), &l1);
            let loc = layer_norm(&l2, q("local_norm2.weight"), q("local_norm2.bias"));
            for ch in 0..c {
                let wgt = sigmoid(loc[ch] + glob[ch]);
                out[(b * c + ch) * hw + i] = at(x, ch, i) * wgt + (1.0 - wgt) * at(y, ch, i);
            }
        }
    }
    out
}

/// 3×3 depthwise convolution with zero padding on one plane.
fn depthwise3(plane: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = yy as isize + ky as isize - 1;
                    let sx = xx as isize + kx as isize - 1;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += k[ky * 3 + kx] * plane[sy as usize * w + sx as usize];
                    }
                }
            }
            out[yy * w + xx] = acc;
        }
    }
    out
}

/// Multi-Dconv head transposed attention on `[n, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn mdta(store: &ParamStore, name: &str, x: &[f64], n: usize, c: usize, h: usize, w: usize, heads: usize) -> Vec<f64> {
    let q = |s: &str| p(store, &format!("{name}.{s}"));
    let hw = h * w;
    let ch = c / heads;
    let (wqkv, wdw, temp, wout) = (q("qkv.weight"), q("qkv_dw.weight"), q("temperature"), q("out.weight"));
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        // pointwise then depthwise, per output channel
        let mut qkv = vec![vec![0.0; hw]; 3 * c];
        for o in 0..3 * c {
            let mut plane = vec![0.0; hw];
            for i in 0..hw {
                for ci in 0..c {
                    plane[i] += wqkv[o * c + ci] * x[(b * c + ci) * hw + i];
                }
            }
            qkv[o] = depthwise3(&plane, &wdw[o * 9..o * 9 + 9], h, w);
        }
        let normalize = |v: &[f64]| -> Vec<f64> {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|a| a / norm).collect()
        };
        let mut mixed = vec![vec![0.0; hw]; c];
        for head in 0..heads {
            let qs: Vec<Vec<f64>> = (0..ch).map(|i| normalize(&qkv[head * ch + i])).collect();
            let ks: Vec<Vec<f64>> = (0..ch).map(|i| normalize(&qkv[c + head * ch + i])).collect();
            for i in 0..ch {
                let scores: Vec<f64> =
                    (0..ch).map(|j| temp[head] * qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>()).collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..ch {
                    let v = &qkv[2 * c + head * ch + j];
                    for t in 0..hw {
                        mixed[head * ch + i][t] += e[j] / z * v[t];
                    }
                }
            }
        }
        for o in 0..c {
            for t in 0..hw {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += wout[o * c + ci] * mixed[ci][t];
                }
                out[(b * c + o) * hw + t] = acc;
            }
        }
    }
    out
}

/// Mean absolute error.
pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (x, y) = (a.data(), b.data());
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x[i] - y[i]) * (x[i] - y[i]);
    }
    -10.0 * (s / x.len() as f64).log10()
}

/// Direct 2-D windowed SSIM (11×11 Gaussian, σ = 1.5, valid region).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = g[i][j] / total;
                        let (u, v) = (a.get(c, y0 + i, x0 + j), b.get(c, y0 + i, x0 + j));
                        mx += k * u;
                        my += k * v;
                        sxx += k * u * u;
                        syy += k * v * v;
                        sxy += k * u * v;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}
