//! Slice-level dense kernels. All accumulate into `out` (`out += ...`).

/// Rows × columns of the register tile in [`gemm_nn`].
const MR: usize = 4;
const NR: usize = 4;

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Every output element is accumulated as `((out + a₀b₀) + a₁b₁) + …` in
/// increasing `p`, whatever the tiling, so results do not depend on the
/// matrix shape (trailing zero rows of padding change nothing).
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (o, &bv) in row.iter_mut().zip(bp) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        gemm_edge(a, b, out, k, n, i0..i0 + MR, n_full..n);
    }
    gemm_edge(a, b, out, k, n, m_full..m, 0..n);
}

/// Untiled remainder of [`gemm_nn`], same accumulation order.
fn gemm_edge(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let orow = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *o += av * bv;
            }
        }
    }
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(a, &transposed(b, n, k), out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn(&transposed(a, m, k), b, out, k, m, n);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators; keeps the reduction order fixed for determinism
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Rotates consecutive coordinate pairs of every row.
///
/// `data` is `rows × cols`, split into heads of width `head_dim`; pair `k` of
/// every head in row `t` turns by `positions[t] * freqs[k] * sign`.
pub(crate) fn rotate_pairs(
    data: &mut [f64],
    cols: usize,
    head_dim: usize,
    positions: &[f64],
    freqs: &[f64],
    sign: f64,
) {
    let half = head_dim / 2;
    let mut cs = vec![(0.0, 0.0); half];
    for (t, &pos) in positions.iter().enumerate() {
        for (k, slot) in cs.iter_mut().enumerate() {
            let (s, c) = (pos * freqs[k]).sin_cos();
            *slot = (c, sign * s);
        }
        let row = &mut data[t * cols..(t + 1) * cols];
        for head in row.chunks_exact_mut(head_dim) {
            for (k, &(c, s)) in cs.iter().enumerate() {
                let x0 = head[2 * k];
                let x1 = head[2 * k + 1];
                head[2 * k] = x0 * c - x1 * s;
                head[2 * k + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
