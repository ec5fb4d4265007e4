//! Pure array kernels used by the tape for forward and backward passes.
//!
//! Everything here works on flat row-major slices; shape checks live at the
//! recording site in [`crate::tape`]. Backward kernels accumulate (`+=`)
//! into their output so gradient contributions from several consumers add
//! up in recording order.

use crate::scalar::Scalar;

/// c[m×n] += a[m×k] · b[k×n]
pub fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Why a softmax row could not be normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowIssue {
    /// Every entry is the −∞ masking sentinel.
    AllMasked(usize),
    /// A NaN or +∞ entry: numeric explosion, not masking.
    NonFinite(usize),
}

fn row_max<S: Scalar>(xr: &[S]) -> std::result::Result<S, bool> {
    let mut max = S::neg_infinity();
    let mut saw_nan = false;
    for &v in xr {
        if v.is_nan() {
            saw_nan = true;
        }
        if v > max {
            max = v;
        }
    }
    if saw_nan || max == S::infinity() {
        Err(true)
    } else if max == S::neg_infinity() {
        Err(false)
    } else {
        Ok(max)
    }
}

/// Row-wise softmax with max-subtraction. `-inf` entries map to exactly 0.
pub fn softmax_rows<S: Scalar>(x: &[S], y: &mut [S], rows: usize, cols: usize) -> Option<RowIssue> {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &mut y[r * cols..(r + 1) * cols];
        let max = match row_max(xr) {
            Ok(m) => m,
            Err(true) => return Some(RowIssue::NonFinite(r)),
            Err(false) => return Some(RowIssue::AllMasked(r)),
        };
        let mut sum = S::zero();
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            // exp(-inf - max) is exactly 0
            let e = (xv - max).exp();
            *yv = e;
            sum += e;
        }
        for yv in yr.iter_mut() {
            *yv = *yv / sum;
        }
    }
    None
}

/// dx += y ⊙ (dy − Σ_j dy_j·y_j) per row, where y = softmax(x).
pub fn softmax_rows_bwd<S: Scalar>(y: &[S], dy: &[S], dx: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut dot = S::zero();
        for (&yv, &dv) in yr.iter().zip(dyr) {
            dot += yv * dv;
        }
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for ((dxv, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dxv += yv * (dv - dot);
        }
    }
}

/// Row-wise log-softmax; same masking contract as [`softmax_rows`].
pub fn log_softmax_rows<S: Scalar>(
    x: &[S],
    y: &mut [S],
    rows: usize,
    cols: usize,
) -> Option<RowIssue> {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &mut y[r * cols..(r + 1) * cols];
        let max = match row_max(xr) {
            Ok(m) => m,
            Err(true) => return Some(RowIssue::NonFinite(r)),
            Err(false) => return Some(RowIssue::AllMasked(r)),
        };
        let mut sum = S::zero();
        for &xv in xr.iter() {
            sum += (xv - max).exp();
        }
        let lse = max + sum.ln();
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = xv - lse;
        }
    }
    None
}

/// dx += dy − softmax(x) · Σ_j dy_j per row, with softmax(x) = exp(y).
pub fn log_softmax_rows_bwd<S: Scalar>(y: &[S], dy: &[S], dx: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut sum = S::zero();
        for &dv in dyr.iter() {
            sum += dv;
        }
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for ((dxv, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *dxv += dv - yv.exp() * sum;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean / unit variance followed by the
/// elementwise affine `gain ⊙ x̂ + bias`. Saves `x̂` and the inverse
/// standard deviation for backward.
pub fn layer_norm<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    y: &mut [S],
    xhat: &mut [S],
    inv_std: &mut [S],
    rows: usize,
    cols: usize,
) {
    let eps = S::from_f64c(LAYER_NORM_EPS);
    let nc = S::from_f64c(cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut mean = S::zero();
        for &v in xr.iter() {
            mean += v;
        }
        mean = mean / nc;
        let mut var = S::zero();
        for &v in xr.iter() {
            let d = v - mean;
            var += d * d;
        }
        var = var / nc;
        let inv = (var + eps).sqrt().recip();
        inv_std[r] = inv;
        let xh = &mut xhat[r * cols..(r + 1) * cols];
        let yr = &mut y[r * cols..(r + 1) * cols];
        for (((xhv, yv), &xv), (&g, &b)) in
            xh.iter_mut().zip(yr.iter_mut()).zip(xr).zip(gain.iter().zip(bias))
        {
            let h = (xv - mean) * inv;
            *xhv = h;
            *yv = g * h + b;
        }
    }
}

pub fn layer_norm_bwd<S: Scalar>(
    xhat: &[S],
    inv_std: &[S],
    gain: &[S],
    dy: &[S],
    dx: &mut [S],
    dgain: &mut [S],
    dbias: &mut [S],
    rows: usize,
    cols: usize,
) {
    let nc = S::from_f64c(cols as f64);
    for r in 0..rows {
        let xh = &xhat[r * cols..(r + 1) * cols];
        let dyr = &dy[r * cols..(r + 1) * cols];
        // dxhat = dy ⊙ gain; dx = inv_std (dxhat − mean(dxhat) − x̂·mean(dxhat ⊙ x̂))
        let mut mean_dxh = S::zero();
        let mut mean_dxh_xh = S::zero();
        for ((&dv, &g), &h) in dyr.iter().zip(gain).zip(xh) {
            let dxh = dv * g;
            mean_dxh += dxh;
            mean_dxh_xh += dxh * h;
        }
        mean_dxh = mean_dxh / nc;
        mean_dxh_xh = mean_dxh_xh / nc;
        let inv = inv_std[r];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for (j, (dxv, &h)) in dxr.iter_mut().zip(xh).enumerate() {
            let dxh = dyr[j] * gain[j];
            *dxv += inv * (dxh - mean_dxh - h * mean_dxh_xh);
            dgain[j] += dyr[j] * h;
            dbias[j] += dyr[j];
        }
    }
}

/// Dilated same-length 1-D cross-correlation.
/// x: [t×c_in], kernel: [w×c_in×c_out] (w odd), y: [t×c_out].
pub fn conv1d<S: Scalar>(
    x: &[S],
    kernel: &[S],
    y: &mut [S],
    t: usize,
    c_in: usize,
    c_out: usize,
    w: usize,
    dilation: usize,
) {
    let half = (w / 2) as isize;
    let dil = dilation as isize;
    for ti in 0..t as isize {
        let yrow = &mut y[ti as usize * c_out..(ti as usize + 1) * c_out];
        for j in 0..w as isize {
            let src = ti + (j - half) * dil;
            if src < 0 || src >= t as isize {
                continue; // zero padding
            }
            let xrow = &x[src as usize * c_in..(src as usize + 1) * c_in];
            let ktap = &kernel[j as usize * c_in * c_out..(j as usize + 1) * c_in * c_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == S::zero() {
                    continue;
                }
                let krow = &ktap[ci * c_out..(ci + 1) * c_out];
                for (yv, &kv) in yrow.iter_mut().zip(krow) {
                    *yv += xv * kv;
                }
            }
        }
    }
}

pub fn conv1d_bwd<S: Scalar>(
    x: &[S],
    kernel: &[S],
    dy: &[S],
    dx: &mut [S],
    dk: &mut [S],
    t: usize,
    c_in: usize,
    c_out: usize,
    w: usize,
    dilation: usize,
) {
    let half = (w / 2) as isize;
    let dil = dilation as isize;
    for ti in 0..t as isize {
        let dyrow = &dy[ti as usize * c_out..(ti as usize + 1) * c_out];
        for j in 0..w as isize {
            let src = ti + (j - half) * dil;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xrow = &x[src as usize * c_in..(src as usize + 1) * c_in];
            let dxrow = &mut dx[src as usize * c_in..(src as usize + 1) * c_in];
            let koff = j as usize * c_in * c_out;
            for ci in 0..c_in {
                let krow = &kernel[koff + ci * c_out..koff + (ci + 1) * c_out];
                let dkrow = &mut dk[koff + ci * c_out..koff + (ci + 1) * c_out];
                let xv = xrow[ci];
                let mut acc = S::zero();
                for ((&dv, &kv), dkv) in dyrow.iter().zip(krow).zip(dkrow.iter_mut()) {
                    acc += dv * kv;
                    *dkv += xv * dv;
                }
                dxrow[ci] += acc;
            }
        }
    }
}

pub const STATS_POOL_EPS: f64 = 1e-5;

/// Statistics pooling: concat of per-column mean and standard deviation
/// over time. x: [t×c] → y: [1×2c].
pub fn stats_pool<S: Scalar>(x: &[S], y: &mut [S], t: usize, c: usize) {
    let nt = S::from_f64c(t as f64);
    let eps = S::from_f64c(STATS_POOL_EPS);
    for j in 0..c {
        let mut mean = S::zero();
        for ti in 0..t {
            mean += x[ti * c + j];
        }
        mean = mean / nt;
        let mut var = S::zero();
        for ti in 0..t {
            let d = x[ti * c + j] - mean;
            var += d * d;
        }
        var = var / nt;
        y[j] = mean;
        y[c + j] = (var + eps).sqrt();
    }
}

pub fn stats_pool_bwd<S: Scalar>(x: &[S], y: &[S], dy: &[S], dx: &mut [S], t: usize, c: usize) {
    let nt = S::from_f64c(t as f64);
    for j in 0..c {
        let mean = y[j];
        let std = y[c + j];
        let dmean = dy[j] / nt;
        let dstd = dy[c + j] / (nt * std);
        for ti in 0..t {
            dx[ti * c + j] += dmean + (x[ti * c + j] - mean) * dstd;
        }
    }
}
