//! Raw row-major loops shared by the forward and backward rules.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ext * inner + i;
            let mut max = f64::NEG_INFINITY;
            for e in 0..ext {
                max = max.max(x[base + e * inner]);
            }
            let mut sum = 0.0;
            for e in 0..ext {
                let v = (x[base + e * inner] - max).exp();
                y[base + e * inner] = v;
                sum += v;
            }
            for e in 0..ext {
                y[base + e * inner] /= sum;
            }
        }
    }
    y
}

/// Same-padded 1-D convolution over the time axis.
///
/// `x`: `[batch, time, c_in]`, `w`: `[kernel, c_in, c_out]`, `bias`: `[c_out]`.
pub(crate) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    dims: Conv1dDims,
) -> Vec<f64> {
    let Conv1dDims {
        batch,
        time,
        c_in,
        c_out,
        kernel,
    } = dims;
    let pad = kernel / 2;
    let mut out = vec![0.0; batch * time * c_out];
    for b in 0..batch {
        for t in 0..time {
            let out_row = &mut out[(b * time + t) * c_out..(b * time + t + 1) * c_out];
            out_row.copy_from_slice(bias);
            for k in 0..kernel {
                let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < time) else {
                    continue;
                };
                let x_row = &x[(b * time + src) * c_in..(b * time + src + 1) * c_in];
                let w_k = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
                for (c, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let w_row = &w_k[c * c_out..(c + 1) * c_out];
                    for (o, &wv) in out_row.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dDims {
    pub batch: usize,
    pub time: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// Accumulates input, kernel and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dims: Conv1dDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let Conv1dDims {
        batch,
        time,
        c_in,
        c_out,
        kernel,
    } = dims;
    let pad = kernel / 2;
    for b in 0..batch {
        for t in 0..time {
            let g_row = &g[(b * time + t) * c_out..(b * time + t + 1) * c_out];
            if let Some(db) = db.as_deref_mut() {
                for (d, &gv) in db.iter_mut().zip(g_row) {
                    *d += gv;
                }
            }
            for k in 0..kernel {
                let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < time) else {
                    continue;
                };
                let x_off = (b * time + src) * c_in;
                for c in 0..c_in {
                    let w_off = (k * c_in + c) * c_out;
                    if let Some(dx) = dx.as_deref_mut() {
                        let w_row = &w[w_off..w_off + c_out];
                        dx[x_off + c] += g_row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let xv = x[x_off + c];
                        for (d, &gv) in dw[w_off..w_off + c_out].iter_mut().zip(g_row) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
}
