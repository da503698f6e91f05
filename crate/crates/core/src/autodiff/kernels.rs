//! Raw forward/backward loops on flat row-major buffers.
//!
//! Shapes are validated by the graph before these are called.

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y[t] = w · x[t] + b` for `x: rows × d_in`, `w: d_out × d_in`.
pub(crate) fn affine(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let mut y = Vec::with_capacity(rows * d_out);
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            y.push(dot(&w[o * d_in..(o + 1) * d_in], xt) + b[o]);
        }
    }
    y
}

pub(crate) struct AffineGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn affine_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    d_in: usize,
    w: &[f64],
    d_out: usize,
) -> AffineGrads {
    let mut dx = vec![0.0; rows * d_in];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    for t in 0..rows {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dy[t * d_out + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, &w[o * d_in..(o + 1) * d_in], dxt);
            axpy(g, xt, &mut dw[o * d_in..(o + 1) * d_in]);
        }
    }
    AffineGrads { dx, dw, db }
}

/// Reorders a `c_out × c_in × k` kernel into `k` contiguous `c_out × c_in` taps.
fn conv1d_taps(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut taps = vec![0.0; k * c_out * c_in];
    for o in 0..c_out {
        for i in 0..c_in {
            for j in 0..k {
                taps[(j * c_out + o) * c_in + i] = w[(o * c_in + i) * k + j];
            }
        }
    }
    taps
}

/// Valid output rows for tap offset `shift` over a length-`len` axis.
#[inline]
fn valid_range(len: usize, shift: isize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

/// Same-padded cross-correlation along time for `x: len × c_in`.
pub(crate) fn conv1d(
    x: &[f64],
    len: usize,
    c_in: usize,
    w: &[f64],
    b: &[f64],
    k: usize,
) -> Vec<f64> {
    let c_out = b.len();
    let pad = (k - 1) / 2;
    let taps = conv1d_taps(w, c_out, c_in, k);
    let mut y: Vec<f64> = (0..len).flat_map(|_| b.iter().copied()).collect();
    for j in 0..k {
        let shift = j as isize - pad as isize;
        let tap = &taps[j * c_out * c_in..(j + 1) * c_out * c_in];
        for t in valid_range(len, shift) {
            let src = (t as isize + shift) as usize;
            let xs = &x[src * c_in..(src + 1) * c_in];
            let yt = &mut y[t * c_out..(t + 1) * c_out];
            for (o, yo) in yt.iter_mut().enumerate() {
                *yo += dot(&tap[o * c_in..(o + 1) * c_in], xs);
            }
        }
    }
    y
}

pub(crate) fn conv1d_backward(
    dy: &[f64],
    x: &[f64],
    len: usize,
    c_in: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
) -> AffineGrads {
    let pad = (k - 1) / 2;
    let taps = conv1d_taps(w, c_out, c_in, k);
    let mut dx = vec![0.0; len * c_in];
    let mut dtaps = vec![0.0; k * c_out * c_in];
    let mut db = vec![0.0; c_out];
    for t in 0..len {
        for o in 0..c_out {
            db[o] += dy[t * c_out + o];
        }
    }
    for j in 0..k {
        let shift = j as isize - pad as isize;
        let tap = &taps[j * c_out * c_in..(j + 1) * c_out * c_in];
        let dtap = &mut dtaps[j * c_out * c_in..(j + 1) * c_out * c_in];
        for t in valid_range(len, shift) {
            let src = (t as isize + shift) as usize;
            let xs = &x[src * c_in..(src + 1) * c_in];
            for o in 0..c_out {
                let g = dy[t * c_out + o];
                if g == 0.0 {
                    continue;
                }
                axpy(g, &tap[o * c_in..(o + 1) * c_in], &mut dx[src * c_in..(src + 1) * c_in]);
                axpy(g, xs, &mut dtap[o * c_in..(o + 1) * c_in]);
            }
        }
    }
    let mut dw = vec![0.0; c_out * c_in * k];
    for o in 0..c_out {
        for i in 0..c_in {
            for j in 0..k {
                dw[(o * c_in + i) * k + j] = dtaps[(j * c_out + o) * c_in + i];
            }
        }
    }
    AffineGrads { dx, dw, db }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Same-padded 2D cross-correlation for `x: c_in × h × w`.
pub(crate) fn conv2d(x: &[f64], kernel: &[f64], b: &[f64], d: Conv2dDims) -> Vec<f64> {
    let Conv2dDims { c_in, c_out, h, w, k } = d;
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let yo = &mut y[o * plane..(o + 1) * plane];
        yo.fill(b[o]);
        for i in 0..c_in {
            let xi = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let a = kernel[((o * c_in + i) * k + ky) * k + kx];
                    if a == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let cols = valid_range(w, dx);
                    for r in valid_range(h, dy) {
                        let src = (r as isize + dy) as usize;
                        let s0 = (cols.start as isize + dx) as usize;
                        axpy(
                            a,
                            &xi[src * w + s0..src * w + s0 + cols.len()],
                            &mut yo[r * w + cols.start..r * w + cols.end],
                        );
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv2d_backward(
    dy: &[f64],
    x: &[f64],
    kernel: &[f64],
    d: Conv2dDims,
) -> AffineGrads {
    let Conv2dDims { c_in, c_out, h, w, k } = d;
    let plane = h * w;
    let pad = (k / 2) as isize;
    let mut dx_all = vec![0.0; c_in * plane];
    let mut dw = vec![0.0; kernel.len()];
    let mut db = vec![0.0; c_out];
    for o in 0..c_out {
        let go = &dy[o * plane..(o + 1) * plane];
        db[o] = go.iter().sum();
        for i in 0..c_in {
            let xi = &x[i * plane..(i + 1) * plane];
            let dxi = &mut dx_all[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let sy = ky as isize - pad;
                for kx in 0..k {
                    let widx = ((o * c_in + i) * k + ky) * k + kx;
                    let a = kernel[widx];
                    let sx = kx as isize - pad;
                    let cols = valid_range(w, sx);
                    let mut acc = 0.0;
                    for r in valid_range(h, sy) {
                        let src = (r as isize + sy) as usize;
                        let s0 = (cols.start as isize + sx) as usize;
                        let g = &go[r * w + cols.start..r * w + cols.end];
                        let src_row = src * w + s0..src * w + s0 + cols.len();
                        acc += dot(g, &xi[src_row.clone()]);
                        axpy(a, g, &mut dxi[src_row]);
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    AffineGrads {
        dx: dx_all,
        dw,
        db,
    }
}

/// Normalizes each row of `x: rows × d`; returns `(y, xhat, inv_std)`.
pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gain: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for (j, &v) in row.iter().enumerate() {
            let n = (v - mean) * is;
            xhat.push(n);
            y.push(gain[j] * n + beta[j]);
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
) -> AffineGrads {
    let d = gain.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dgain = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (r, &is) in inv_std.iter().enumerate() {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            let dxh = g[j] * gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = g[j] * gain[j];
            dx[r * d + j] = is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    AffineGrads {
        dx,
        dw: dgain,
        db: dbeta,
    }
}

pub(crate) fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = y.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v /= s;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward(dy: &[f64], y: &[f64], d: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(y.len());
    for (g, p) in dy.chunks_exact(d).zip(y.chunks_exact(d)) {
        let inner = dot(g, p);
        dx.extend(g.iter().zip(p).map(|(gi, pi)| pi * (gi - inner)));
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
