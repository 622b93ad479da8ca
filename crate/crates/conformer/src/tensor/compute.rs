//! Raw f64 kernels shared by the forward pass and the backward rules.

/// C = A[m,k] * B[k,n], row-major, ikj order so the inner loop streams rows.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// C = A[m,n] * B[k,n]^T -> [m,k]; rows of A dotted with rows of B.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// C = A[m,k]^T * B[m,n] -> [k,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let o_row = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

pub fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax along `axis` with max-subtraction; lanes are (outer, len, inner).
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for s in 0..len {
                max = max.max(x[base + s * inner]);
            }
            let mut sum = 0.0;
            for s in 0..len {
                let e = (x[base + s * inner] - max).exp();
                out[base + s * inner] = e;
                sum += e;
            }
            for s in 0..len {
                out[base + s * inner] /= sum;
            }
        }
    }
    out
}

/// dL/dx for softmax given output y and upstream g: x_i += y_i * (g_i - sum_j g_j y_j).
pub fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for s in 0..len {
                dot += g[base + s * inner] * y[base + s * inner];
            }
            for s in 0..len {
                let idx = base + s * inner;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Row-wise layer norm over the last dimension.
pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[r * c + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Gradients (dx, dgamma, dbeta) for layernorm.
pub fn layernorm_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    c: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let grow = &g[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            dgamma[j] += grow[j] * xhat;
            dbeta[j] += grow[j];
            let dxhat = grow[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..c {
            let xhat = (row[j] - mean) * inv;
            let dxhat = grow[j] * gamma[j];
            dx[r * c + j] =
                inv * (dxhat - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One sampled point of a RoI bin: clamped neighbor cells and blend fractions.
#[derive(Debug, Clone, Copy)]
pub struct BinSample {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// d(sample x)/d(box cx) etc.; zero when the effective size clamp is active.
    pub du_dcx: f64,
    pub du_dw: f64,
    pub dv_dcy: f64,
    pub dv_dh: f64,
}

/// Continuous sample geometry for all bins of a (cx, cy, w, h) box over an
/// hf x wf grid. One sample per bin center, edge-clamped; box sizes are
/// clamped to `min_size` so the mapping never degenerates.
pub fn roi_geometry(b: &[f64], hf: usize, wf: usize, bins: usize, min_size: f64) -> Vec<BinSample> {
    let (cx, cy) = (b[0], b[1]);
    let w = b[2].max(min_size);
    let h = b[3].max(min_size);
    let w_active = b[2] > min_size;
    let h_active = b[3] > min_size;
    let left = cx - 0.5 * w;
    let top = cy - 0.5 * h;
    let mut out = Vec::with_capacity(bins * bins);
    for by in 0..bins {
        for bx in 0..bins {
            let rx = (bx as f64 + 0.5) / bins as f64;
            let ry = (by as f64 + 0.5) / bins as f64;
            let u = (left + rx * w) * wf as f64 - 0.5;
            let v = (top + ry * h) * hf as f64 - 0.5;
            let uf = u.floor();
            let vf = v.floor();
            let fx = u - uf;
            let fy = v - vf;
            let clamp = |i: f64, hi: usize| -> usize {
                (i.max(0.0) as usize).min(hi - 1)
            };
            out.push(BinSample {
                x0: clamp(uf, wf),
                x1: clamp(uf + 1.0, wf),
                y0: clamp(vf, hf),
                y1: clamp(vf + 1.0, hf),
                fx,
                fy,
                du_dcx: wf as f64,
                du_dw: if w_active { (rx - 0.5) * wf as f64 } else { 0.0 },
                dv_dcy: hf as f64,
                dv_dh: if h_active { (ry - 0.5) * hf as f64 } else { 0.0 },
            });
        }
    }
    out
}

/// Forward RoI align: grid is [hf, wf, c] row-major, output [bins, bins, c].
pub fn roi_align(
    grid: &[f64],
    b: &[f64],
    hf: usize,
    wf: usize,
    c: usize,
    bins: usize,
    min_size: f64,
) -> Vec<f64> {
    let geom = roi_geometry(b, hf, wf, bins, min_size);
    let mut out = vec![0.0; bins * bins * c];
    for (bi, s) in geom.iter().enumerate() {
        let r00 = (s.y0 * wf + s.x0) * c;
        let r01 = (s.y0 * wf + s.x1) * c;
        let r10 = (s.y1 * wf + s.x0) * c;
        let r11 = (s.y1 * wf + s.x1) * c;
        let o = bi * c;
        for ch in 0..c {
            let top = (1.0 - s.fx) * grid[r00 + ch] + s.fx * grid[r01 + ch];
            let bot = (1.0 - s.fx) * grid[r10 + ch] + s.fx * grid[r11 + ch];
            out[o + ch] = (1.0 - s.fy) * top + s.fy * bot;
        }
    }
    out
}

/// Backward RoI align: returns (d_grid, d_box).
pub fn roi_align_backward(
    grid: &[f64],
    b: &[f64],
    g: &[f64],
    hf: usize,
    wf: usize,
    c: usize,
    bins: usize,
    min_size: f64,
) -> (Vec<f64>, Vec<f64>) {
    let geom = roi_geometry(b, hf, wf, bins, min_size);
    let mut dgrid = vec![0.0; grid.len()];
    let mut dbox = vec![0.0; 4];
    for (bi, s) in geom.iter().enumerate() {
        let r00 = (s.y0 * wf + s.x0) * c;
        let r01 = (s.y0 * wf + s.x1) * c;
        let r10 = (s.y1 * wf + s.x0) * c;
        let r11 = (s.y1 * wf + s.x1) * c;
        let o = bi * c;
        let mut dout_du = 0.0;
        let mut dout_dv = 0.0;
        for ch in 0..c {
            let gv = g[o + ch];
            dgrid[r00 + ch] += gv * (1.0 - s.fx) * (1.0 - s.fy);
            dgrid[r01 + ch] += gv * s.fx * (1.0 - s.fy);
            dgrid[r10 + ch] += gv * (1.0 - s.fx) * s.fy;
            dgrid[r11 + ch] += gv * s.fx * s.fy;
            let top = (1.0 - s.fx) * grid[r00 + ch] + s.fx * grid[r01 + ch];
            let bot = (1.0 - s.fx) * grid[r10 + ch] + s.fx * grid[r11 + ch];
            dout_du += gv
                * ((1.0 - s.fy) * (grid[r01 + ch] - grid[r00 + ch])
                    + s.fy * (grid[r11 + ch] - grid[r10 + ch]));
            dout_dv += gv * (bot - top);
        }
        dbox[0] += dout_du * s.du_dcx;
        dbox[1] += dout_dv * s.dv_dcy;
        dbox[2] += dout_du * s.du_dw;
        dbox[3] += dout_dv * s.dv_dh;
    }
    (dgrid, dbox)
}
