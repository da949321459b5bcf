//! Dense kernels. Activations and gradients are f64, weights are stored f32.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

pub(crate) const LN_EPS: f64 = 1e-5;

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

fn padded(n: usize) -> usize {
    n.div_ceil(TILE_C) * TILE_C
}

/// `c = init + a·b` with `a: m×k`, `b: k×n` and `n` a multiple of [`TILE_C`].
///
/// Every output is a sequential sum over the inner index starting from
/// `init`, so a row's result never depends on the other rows.
fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, init: &[f64]) -> Vec<f64> {
    debug_assert_eq!(n % TILE_C, 0);
    let mut c = vec![0.0; m * n];
    let mut r0 = 0;
    while r0 + TILE_R <= m {
        tile::<TILE_R>(a, r0, k, b, n, init, &mut c);
        r0 += TILE_R;
    }
    while r0 < m {
        tile::<1>(a, r0, k, b, n, init, &mut c);
        r0 += 1;
    }
    c
}

#[inline(always)]
fn tile<const R: usize>(a: &[f64], r0: usize, k: usize, b: &[f64], n: usize, init: &[f64], c: &mut [f64]) {
    let rows: [&[f64]; R] = std::array::from_fn(|r| &a[(r0 + r) * k..(r0 + r + 1) * k]);
    for j0 in (0..n).step_by(TILE_C) {
        let mut acc = [[0.0f64; TILE_C]; R];
        for row in acc.iter_mut() {
            row.copy_from_slice(&init[j0..j0 + TILE_C]);
        }
        for kk in 0..k {
            let bk: &[f64; TILE_C] = b[kk * n + j0..kk * n + j0 + TILE_C].try_into().expect("tile width");
            for r in 0..R {
                let av = rows[r][kk];
                for cc in 0..TILE_C {
                    acc[r][cc] += av * bk[cc];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[(r0 + r) * n + j0..(r0 + r) * n + j0 + TILE_C].copy_from_slice(row);
        }
    }
}

/// `w: din×dout` as f64 with columns padded to a tile multiple.
fn widen_padded(w: &[f32], din: usize, dout: usize) -> Vec<f64> {
    let np = padded(dout);
    let mut out = vec![0.0; din * np];
    for k in 0..din {
        for j in 0..dout {
            out[k * np + j] = w[k * dout + j] as f64;
        }
    }
    out
}

/// `y = x·W + b` with `x: rows×din`, `W: din×dout` (row-major).
pub(crate) fn linear_forward(x: &[f64], rows: usize, din: usize, w: &[f32], b: &[f32], dout: usize) -> Vec<f64> {
    linear_forward_rows(x, rows, din, w, b, dout, None)
}

/// [`linear_forward`] restricted to rows flagged in `active`; other rows stay zero.
pub(crate) fn linear_forward_rows(
    x: &[f64],
    rows: usize,
    din: usize,
    w: &[f32],
    b: &[f32],
    dout: usize,
    active: Option<&[bool]>,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(w.len(), din * dout);
    let np = padded(dout);
    let wp = widen_padded(w, din, dout);
    let mut init = vec![0.0; np];
    for (i, v) in b.iter().enumerate() {
        init[i] = *v as f64;
    }
    let picked: Vec<usize> = (0..rows).filter(|&r| active.is_none_or(|a| a[r])).collect();
    let mut y = vec![0.0f64; rows * dout];
    if picked.is_empty() {
        return y;
    }
    let gathered;
    let xa = if picked.len() == rows {
        x
    } else {
        gathered = picked.iter().flat_map(|&r| &x[r * din..(r + 1) * din]).copied().collect::<Vec<f64>>();
        &gathered
    };
    let c = gemm(xa, picked.len(), din, &wp, np, &init);
    for (i, &r) in picked.iter().enumerate() {
        y[r * dout..(r + 1) * dout].copy_from_slice(&c[i * np..i * np + dout]);
    }
    y
}

/// Accumulates parameter gradients and (optionally) input gradients of a linear layer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    w: &[f32],
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let picked: Vec<usize> = (0..rows)
        .filter(|&r| dy[r * dout..(r + 1) * dout].iter().any(|&g| g != 0.0))
        .collect();
    let m = picked.len();
    if m == 0 {
        return;
    }
    for &r in &picked {
        for (dbj, g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *dbj += g;
        }
    }

    // dW = xᵀ·dy over the rows that carry gradient.
    let np = padded(dout);
    let mut xt = vec![0.0; din * m];
    let mut dyp = vec![0.0; m * np];
    for (i, &r) in picked.iter().enumerate() {
        for k in 0..din {
            xt[k * m + i] = x[r * din + k];
        }
        dyp[i * np..i * np + dout].copy_from_slice(&dy[r * dout..(r + 1) * dout]);
    }
    let zeros = vec![0.0; np.max(padded(din))];
    let g = gemm(&xt, din, m, &dyp, np, &zeros[..np]);
    for k in 0..din {
        for (d, v) in dw[k * dout..(k + 1) * dout].iter_mut().zip(&g[k * np..k * np + dout]) {
            *d += v;
        }
    }

    // dx = dy·Wᵀ.
    if let Some(dx) = dx {
        let kp = padded(din);
        let mut wt = vec![0.0; dout * kp];
        for k in 0..din {
            for j in 0..dout {
                wt[j * kp + k] = w[k * dout + j] as f64;
            }
        }
        let dya: Vec<f64> = picked.iter().flat_map(|&r| &dy[r * dout..(r + 1) * dout]).copied().collect();
        let g = gemm(&dya, m, dout, &wt, kp, &zeros[..kp]);
        for (i, &r) in picked.iter().enumerate() {
            for (d, v) in dx[r * din..(r + 1) * din].iter_mut().zip(&g[i * kp..i * kp + din]) {
                *d += v;
            }
        }
    }
}

/// Cached statistics of a layer-norm application.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &[f64], rows: usize, d: usize, gain: &[f32], bias: &[f32]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] as f64 + bias[j] as f64;
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    rows: usize,
    d: usize,
    gain: &[f32],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&g| g == 0.0) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j] as f64;
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
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

/// Row-wise log-softmax.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = vec![1000.0, 999.0, -5.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_forward_small() {
        let x = [1.0, 2.0];
        let w = [1.0f32, 0.0, 0.5, 1.0, -1.0, 2.0];
        let b = [0.0f32, 1.0, 0.0];
        assert_eq!(linear_forward(&x, 1, 2, &w, &b, 3), vec![3.0, -1.0, 4.5]);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }
}
