//! Value-level kernels behind the tape primitives.
//!
//! All buffers are row-major. Callers resolve shapes; kernels only trust the
//! extents they are handed. Loops are written as slice zips over the fastest
//! axis so the compiler can vectorize them.

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// x: [lead, m, k] times w: [k, n] (w shared across lead) into out: [lead, m, n].
/// Rows accumulate in f64 and round once on write; long k-chains would
/// otherwise drift a few ulps per term.
pub(crate) fn matmul(lead: usize, m: usize, k: usize, n: usize, x: &[f32], w: &[f32], out: &mut [f32]) {
    let mut row = vec![0.0f64; n];
    for b in 0..lead {
        let xb = &x[b * m * k..][..m * k];
        let ob = &mut out[b * m * n..][..m * n];
        for i in 0..m {
            row.fill(0.0);
            let xrow = &xb[i * k..][..k];
            for (l, &a) in xrow.iter().enumerate() {
                let a = a as f64;
                let wrow = &w[l * n..][..n];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += a * wv as f64;
                }
            }
            for (dst, &v) in ob[i * n..][..n].iter_mut().zip(&row) {
                *dst = v as f32;
            }
        }
    }
}

/// x: [lead, m, k] times y: [lead, k, n] into out: [lead, m, n]. Same f64
/// row accumulation as `matmul`.
pub(crate) fn batmatmul(lead: usize, m: usize, k: usize, n: usize, x: &[f32], y: &[f32], out: &mut [f32]) {
    let mut row = vec![0.0f64; n];
    for b in 0..lead {
        let xb = &x[b * m * k..][..m * k];
        let yb = &y[b * k * n..][..k * n];
        let ob = &mut out[b * m * n..][..m * n];
        for i in 0..m {
            row.fill(0.0);
            let xrow = &xb[i * k..][..k];
            for (l, &a) in xrow.iter().enumerate() {
                let a = a as f64;
                let yrow = &yb[l * n..][..n];
                for (o, &yv) in row.iter_mut().zip(yrow) {
                    *o += a * yv as f64;
                }
            }
            for (dst, &v) in ob[i * n..][..n].iter_mut().zip(&row) {
                *dst = v as f32;
            }
        }
    }
}

/// [lead, r, c] -> [lead, c, r].
pub(crate) fn transpose_last2(lead: usize, r: usize, c: usize, x: &[f32], out: &mut [f32]) {
    for b in 0..lead {
        let xb = &x[b * r * c..][..r * c];
        let ob = &mut out[b * r * c..][..r * c];
        for i in 0..r {
            for j in 0..c {
                ob[j * r + i] = xb[i * c + j];
            }
        }
    }
}

/// Output axis d reads input axis perm[d].
pub(crate) fn permute(in_shape: &[usize], perm: &[usize], x: &[f32], out: &mut [f32]) {
    let ndim = in_shape.len();
    let in_strides = contiguous_strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= src_stride[d] * out_shape[d];
        }
    }
}

/// Sum over the axes flagged in `summed`, keeping them as size 1. Sums
/// accumulate in f64 and round once on the final write.
pub(crate) fn sum_axes(shape: &[usize], summed: &[bool], x: &[f32], out: &mut [f32]) {
    let ndim = shape.len();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &s)| if summed[d] { 1 } else { s })
        .collect();
    let full = contiguous_strides(&out_shape);
    let eff: Vec<usize> = (0..ndim).map(|d| if summed[d] { 0 } else { full[d] }).collect();
    let mut acc = vec![0.0f64; out.len()];
    let mut idx = vec![0usize; ndim];
    let mut off = 0usize;
    for &v in x.iter() {
        acc[off] += v as f64;
        for d in (0..ndim).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            off -= eff[d] * shape[d];
        }
    }
    for (o, &v) in out.iter_mut().zip(&acc) {
        *o = v as f32;
    }
}

/// Expand size-1 axes of `in_shape` up to `out_shape`.
pub(crate) fn broadcast_axes(in_shape: &[usize], out_shape: &[usize], x: &[f32], out: &mut [f32]) {
    let ndim = in_shape.len();
    let in_strides = contiguous_strides(in_shape);
    let eff: Vec<usize> = (0..ndim)
        .map(|d| if in_shape[d] == 1 && out_shape[d] != 1 { 0 } else { in_strides[d] })
        .collect();
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= eff[d] * out_shape[d];
        }
    }
}

/// Concatenate parts along `axis`. Each part is [outer, len_i, inner].
pub(crate) fn concat_axis(outer: usize, inner: usize, lens: &[usize], parts: &[&[f32]], out: &mut [f32]) {
    let total: usize = lens.iter().sum();
    for o in 0..outer {
        let mut dst = o * total * inner;
        for (part, &len) in parts.iter().zip(lens) {
            let chunk = len * inner;
            out[dst..dst + chunk].copy_from_slice(&part[o * chunk..][..chunk]);
            dst += chunk;
        }
    }
}

/// Take [outer, start..start+len, inner] out of [outer, axis_len, inner].
pub(crate) fn slice_axis(
    outer: usize,
    inner: usize,
    axis_len: usize,
    start: usize,
    len: usize,
    x: &[f32],
    out: &mut [f32],
) {
    let chunk = len * inner;
    for o in 0..outer {
        let src = o * axis_len * inner + start * inner;
        out[o * chunk..][..chunk].copy_from_slice(&x[src..src + chunk]);
    }
}

pub(crate) fn gather_rows(row: usize, indices: &[usize], x: &[f32], out: &mut [f32]) {
    for (r, &i) in indices.iter().enumerate() {
        out[r * row..][..row].copy_from_slice(&x[i * row..][..row]);
    }
}

/// Adjoint of `gather_rows`: accumulate rows of x into `out` (zeroed) at `indices`.
pub(crate) fn scatter_rows_add(row: usize, indices: &[usize], x: &[f32], out: &mut [f32]) {
    for (r, &i) in indices.iter().enumerate() {
        let dst = &mut out[i * row..][..row];
        for (d, &v) in dst.iter_mut().zip(&x[r * row..][..row]) {
            *d += v;
        }
    }
}

/// Number of patches a series of length n yields with patch length l, stride s.
/// The tail is covered by replicating the final value.
pub(crate) fn patch_count(n: usize, l: usize, s: usize) -> usize {
    (n - l) / s + 2
}

/// [b, n] -> [b, p, l]; patch p covers padded indices [p*s, p*s + l), where the
/// padding replicates the last observed value.
pub(crate) fn patchify(b: usize, n: usize, l: usize, s: usize, x: &[f32], out: &mut [f32]) {
    let pc = patch_count(n, l, s);
    for bi in 0..b {
        let xb = &x[bi * n..][..n];
        let ob = &mut out[bi * pc * l..][..pc * l];
        for p in 0..pc {
            for o in 0..l {
                ob[p * l + o] = xb[(p * s + o).min(n - 1)];
            }
        }
    }
}

/// Adjoint of `patchify`: [b, p, l] -> [b, n], accumulating where patches overlap
/// or were clamped. `out` zeroed.
pub(crate) fn patch_scatter(b: usize, n: usize, l: usize, s: usize, x: &[f32], out: &mut [f32]) {
    let pc = patch_count(n, l, s);
    for bi in 0..b {
        let xb = &x[bi * pc * l..][..pc * l];
        let ob = &mut out[bi * n..][..n];
        for p in 0..pc {
            for o in 0..l {
                ob[(p * s + o).min(n - 1)] += xb[p * l + o];
            }
        }
    }
}

/// Centered moving average along one axis with replicate padding at both ends.
/// Output length equals input length for any odd kernel.
pub(crate) fn avg_pool_axis(outer: usize, len: usize, inner: usize, kernel: usize, x: &[f32], out: &mut [f32]) {
    let half = (kernel / 2) as isize;
    let k = kernel as f64;
    let last = len as isize - 1;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for t in 0..len as isize {
                let first = x[base + (t - half).clamp(0, last) as usize * inner];
                let mut acc = 0.0f64;
                let mut constant = true;
                for d in -half..=half {
                    let tt = (t + d).clamp(0, last) as usize;
                    let v = x[base + tt * inner];
                    constant &= v.to_bits() == first.to_bits();
                    acc += v as f64;
                }
                // A window of identical values averages to that value with
                // no rounding; summation then division would drift by ulps.
                out[base + t as usize * inner] = if constant { first } else { (acc / k) as f32 };
            }
        }
    }
}

/// Adjoint of `avg_pool_axis`. `out` zeroed.
pub(crate) fn avg_pool_axis_adjoint(
    outer: usize,
    len: usize,
    inner: usize,
    kernel: usize,
    g: &[f32],
    out: &mut [f32],
) {
    let half = (kernel / 2) as isize;
    let k = kernel as f32;
    let last = len as isize - 1;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for t in 0..len as isize {
                let gv = g[base + t as usize * inner] / k;
                for d in -half..=half {
                    let tt = (t + d).clamp(0, last) as usize;
                    out[base + tt * inner] += gv;
                }
            }
        }
    }
}

/// Length-preserving centered moving average of a plain slice.
pub fn avg_pool_1d(series: &[f32], kernel: usize) -> Vec<f32> {
    assert!(kernel % 2 == 1, "avg_pool_1d kernel must be odd, got {kernel}");
    assert!(!series.is_empty(), "avg_pool_1d on empty series");
    let mut out = vec![0.0; series.len()];
    avg_pool_axis(1, series.len(), 1, kernel, series, &mut out);
    out
}
