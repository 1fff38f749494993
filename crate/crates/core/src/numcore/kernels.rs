//! Raw slice kernels. Shapes are validated by the callers in `tape`.

use super::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Full `MR×NR` tiles of `c` are accumulated in registers over the whole of
/// `k`; ragged edges fall back to a row-at-a-time loop.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (p, b_row) in b.chunks_exact(n).enumerate().take(k) {
                let bp: [T; NR] = std::array::from_fn(|j| b_row[j0 + j]);
                for (acc_r, row) in acc.iter_mut().zip(rows) {
                    let av = row[p];
                    for j in 0..NR {
                        acc_r[j] += av * bp[j];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let row = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (x, &v) in row.iter_mut().zip(acc_r) {
                    *x += v;
                }
            }
        }
        if n_full < n {
            edge(a, b, c, i0..i0 + MR, n_full..n, k, n);
        }
    }
    edge(a, b, c, m_full..m, 0..n, k, n);
}

fn edge<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n + cols.start..p * n + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, `c: k×n`, as a sum of row outer products.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, `c: m×k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, c, m, n, k);
}

pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let lse = logsumexp(row);
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

/// The `tanh(√(2/π)·(x + 0.044715·x³))` term shared by value and derivative.
pub fn gelu_tanh<T: Scalar>(x: T) -> T {
    (T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x)).tanh()
}

pub fn gelu_from_tanh<T: Scalar>(x: T, th: T) -> T {
    T::lit(0.5) * x * (T::one() + th)
}

pub fn gelu_grad_from_tanh<T: Scalar>(x: T, th: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / cols;
    let n = T::lit(cols as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gain[j] + bias[j]);
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cols: usize,
    gain: &[T],
    cache: &LayerNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    for (r, (dy_row, xh_row)) in dy
        .chunks_exact(cols)
        .zip(cache.xhat.chunks_exact(cols))
        .enumerate()
    {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..cols {
            let d = dy_row[j] * gain[j];
            sum_d += d;
            sum_dx += d * xh_row[j];
            dgain[j] += dy_row[j] * xh_row[j];
            dbias[j] += dy_row[j];
        }
        let rs = cache.rstd[r];
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let d = dy_row[j] * gain[j];
            dx_row[j] = rs / n * (n * d - sum_d - xh_row[j] * sum_dx);
        }
    }
    (dx, dgain, dbias)
}

/// Columns `off..off + d` of a row-major `rows×width` matrix, packed.
fn head_slice<T: Scalar>(x: &[T], rows: usize, width: usize, off: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + off..r * width + off + d]);
    }
    out
}

fn add_head_slice<T: Scalar>(dst: &mut [T], src: &[T], rows: usize, width: usize, off: usize, d: usize) {
    for r in 0..rows {
        for (x, &y) in dst[r * width + off..r * width + off + d].iter_mut().zip(&src[r * d..(r + 1) * d]) {
            *x += y;
        }
    }
}

/// Multi-head scaled dot-product attention without masking.
///
/// `q: tq×h`, `k, v: tk×h`; returns the `tq×h` output and the
/// per-head attention weights laid out as `heads×tq×tk`.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    tq: usize,
    tk: usize,
    width: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let d = width / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); tq * width];
    let mut probs = vec![T::zero(); heads * tq * tk];
    for h in 0..heads {
        let off = h * d;
        let qh = head_slice(q, tq, width, off, d);
        let kt = transpose(&head_slice(k, tk, width, off, d), tk, d);
        let vh = head_slice(v, tk, width, off, d);
        let ph = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        matmul_acc(&qh, &kt, ph, tq, d, tk);
        for row in ph.chunks_exact_mut(tk) {
            for p in row.iter_mut() {
                *p *= scale;
            }
            softmax_in_place(row);
        }
        let oh = matmul(ph, &vh, tq, tk, d);
        add_head_slice(&mut out, &oh, tq, width, off, d);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for [`attention`].
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    tq: usize,
    tk: usize,
    width: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = width / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    for h in 0..heads {
        let off = h * d;
        let ph = &probs[h * tq * tk..(h + 1) * tq * tk];
        let doh = head_slice(dout, tq, width, off, d);
        let qh = head_slice(q, tq, width, off, d);
        let kh = head_slice(k, tk, width, off, d);
        let vh = head_slice(v, tk, width, off, d);

        let mut dvh = vec![T::zero(); tk * d];
        matmul_tn_acc(ph, &doh, &mut dvh, tq, tk, d);
        add_head_slice(&mut dv, &dvh, tk, width, off, d);

        let mut ds = vec![T::zero(); tq * tk];
        matmul_nt_acc(&doh, &vh, &mut ds, tq, d, tk);
        for (ds_row, p_row) in ds.chunks_exact_mut(tk).zip(ph.chunks_exact(tk)) {
            let dot: T = ds_row.iter().zip(p_row).map(|(&g, &p)| g * p).sum();
            for (g, &p) in ds_row.iter_mut().zip(p_row) {
                *g = p * (*g - dot) * scale;
            }
        }
        let dqh = matmul(&ds, &kh, tq, tk, d);
        add_head_slice(&mut dq, &dqh, tq, width, off, d);
        let mut dkh = vec![T::zero(); tk * d];
        matmul_tn_acc(&ds, &qh, &mut dkh, tq, tk, d);
        add_head_slice(&mut dk, &dkh, tk, width, off, d);
    }
    (dq, dk, dv)
}
