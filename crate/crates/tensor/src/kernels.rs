// Plain slice kernels shared by the graph forward and backward passes.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..n {
                max = max.max(x[idx(a)]);
            }
            let mut sum = 0.0;
            for a in 0..n {
                let e = (x[idx(a)] - max).exp();
                y[idx(a)] = e;
                sum += e;
            }
            for a in 0..n {
                y[idx(a)] /= sum;
            }
        }
    }
    y
}

pub fn softmax_axis_backward(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let dot: f64 = (0..n).map(|a| y[idx(a)] * dy[idx(a)]).sum();
            for a in 0..n {
                dx[idx(a)] = y[idx(a)] * (dy[idx(a)] - dot);
            }
        }
    }
    dx
}

pub fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns (output, normalized x̂, per-row 1/σ).
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, inv_std)
}

/// Gradient of layer norm w.r.t. its input.
pub fn layer_norm_backward_input(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    cols: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let n = cols as f64;
    for (r, &is) in inv_std.iter().enumerate() {
        let base = r * cols;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            let g = dy[base + c] * gamma[c];
            sum_g += g;
            sum_gx += g * xhat[base + c];
        }
        for c in 0..cols {
            let g = dy[base + c] * gamma[c];
            dx[base + c] = is * (g - sum_g / n - xhat[base + c] * sum_gx / n);
        }
    }
    dx
}

/// Multi-head scaled dot-product attention without projections.
///
/// `q` is `[sq×d]`, `k` and `v` are `[sk×d]`; each head uses a contiguous
/// block of `d / heads` columns and scores are scaled by `1/sqrt(d / heads)`.
/// Returns the output `[sq×d]` and the attention probabilities
/// `[heads×sq×sk]`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sq: usize,
    sk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * sq * sk];
    let mut out = vec![0.0; sq * d];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * sq * sk..(h + 1) * sq * sk];
        for i in 0..sq {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..sk {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                p[i * sk + j] = s * scale;
            }
        }
        softmax_rows_in_place(p, sk);
        for i in 0..sq {
            let o = &mut out[i * d + off..i * d + off + dh];
            for j in 0..sk {
                let w = p[i * sk + j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (oo, vv) in o.iter_mut().zip(vj) {
                    *oo += w * vv;
                }
            }
        }
    }
    (out, probs)
}

pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    sq: usize,
    sk: usize,
    d: usize,
    heads: usize,
) -> AttentionGrads {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dscore = vec![0.0; sq * sk];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * sq * sk..(h + 1) * sq * sk];
        for i in 0..sq {
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..sk {
                let vj = &v[j * d + off..j * d + off + dh];
                let mut dp = 0.0;
                for (a, b) in doi.iter().zip(vj) {
                    dp += a * b;
                }
                dscore[i * sk + j] = dp;
                dot += dp * p[i * sk + j];
                let w = p[i * sk + j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (g, a) in dvj.iter_mut().zip(doi) {
                    *g += w * a;
                }
            }
            for j in 0..sk {
                dscore[i * sk + j] = p[i * sk + j] * (dscore[i * sk + j] - dot) * scale;
            }
        }
        for i in 0..sq {
            for j in 0..sk {
                let s = dscore[i * sk + j];
                if s == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += s * k[j * d + off + c];
                    dk[j * d + off + c] += s * q[i * d + off + c];
                }
            }
        }
    }
    AttentionGrads { dq, dk, dv }
}
