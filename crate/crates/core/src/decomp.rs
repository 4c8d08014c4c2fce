//! Trend/seasonal decomposition of patch features and the frequency-side
//! matching loss between a real and a synthetic batch.
//!
//! Decomposition is a centered moving average along the patch axis with
//! replicated edges; the seasonal part is the input minus the trend. Two
//! forms are exposed. `series_decompose` builds the differentiable tape
//! subgraph the matching loss trains through; its parts add back to the
//! input exactly in real arithmetic, which in f32 means to within one
//! rounding. `decompose_lossless` splits a stored tensor so the two parts
//! reconstitute the original bitwise and can replace it in storage: where a
//! float pair around the window mean cannot carry an element (the residual's
//! ulp exceeds the element's scale, a cancellation-heavy minority of
//! elements), the trend yields toward the element by the smallest halving
//! that restores losslessness.
//!
//! The matching loss aggregates each feature map over its batch axis,
//! decomposes both sides, and pays the negated cosine similarity of the
//! trend parts and of the seasonal parts, averaged over operator layers.
//! Perfectly matched features score -2, opposed ones +2.

use crate::numerics::kernels;
use crate::numerics::ops::cosine_flat;
use crate::numerics::{Tape, Tensor, Var};

/// Default moving-average width for a feature map with `patches` rows: 25,
/// clamped to the largest odd window not exceeding 2*patches - 1 so the
/// kernel never degenerates into an edge-dominated blur.
pub fn default_trend_kernel(patches: usize) -> usize {
    assert!(patches > 0, "feature map needs at least one patch");
    let cap = 2 * patches - 1;
    25usize.min(cap)
}

/// Split `h` [.., patches, features] into (trend, seasonal) along the patch
/// axis. `kernel` must be odd. trend + seasonal == h in real arithmetic;
/// a constant input has an exactly zero seasonal part.
pub fn series_decompose(tape: &mut Tape, h: Var, kernel: usize) -> (Var, Var) {
    let ndim = tape.shape(h).len();
    assert!(ndim >= 2, "decomposition expects [.., patches, features]");
    assert!(kernel % 2 == 1, "trend kernel must be odd, got {kernel}");
    let trend = tape.avg_pool_axis(h, ndim - 2, kernel);
    let seasonal = tape.sub(h, trend);
    (trend, seasonal)
}

/// Trend value for element `x` of a window with mean `mean`, adjusted so
/// that `trend + (x - trend)` returns `x` bitwise. Candidates walk from the
/// mean halfway toward `x` until the residual becomes representable next to
/// x's exponent; each is also re-centered by one rounding before moving on.
/// The walk never leaves the segment between the mean and `x`. (-0.0 is the
/// one value no float pair can reconstitute; it falls through to `x`.)
fn lossless_trend(x: f32, mean: f32) -> f32 {
    let xb = x.to_bits();
    let mut t = mean;
    for _ in 0..512 {
        let s = x - t;
        if (t + s).to_bits() == xb {
            return t;
        }
        let re = x - s;
        let sre = x - re;
        if (re + sre).to_bits() == xb {
            return re;
        }
        t = 0.5 * (t + x);
    }
    x
}

/// Bitwise-lossless split of `h` [.., patches, features]: the returned
/// (trend, seasonal) satisfy trend[i] + seasonal[i] == h[i] exactly at the
/// bit level for every element, so storing the parts loses nothing. The
/// trend is the replicate-padded window mean wherever that mean admits a
/// lossless complement, and the nearest halving toward the element
/// elsewhere.
pub fn decompose_lossless(h: &Tensor, kernel: usize) -> (Tensor, Tensor) {
    let ndim = h.shape.len();
    assert!(ndim >= 2, "decomposition expects [.., patches, features]");
    assert!(kernel % 2 == 1, "trend kernel must be odd, got {kernel}");
    let axis = ndim - 2;
    let outer: usize = h.shape[..axis].iter().product();
    let len = h.shape[axis];
    let inner: usize = h.shape[axis + 1..].iter().product();
    let mut pooled = vec![0.0f32; h.data.len()];
    kernels::avg_pool_axis(outer, len, inner, kernel, &h.data, &mut pooled);
    let mut trend = Vec::with_capacity(h.data.len());
    let mut seasonal = Vec::with_capacity(h.data.len());
    for (&x, &m) in h.data.iter().zip(&pooled) {
        let t = lossless_trend(x, m);
        trend.push(t);
        seasonal.push(x - t);
    }
    (
        Tensor::new(h.shape.clone(), trend),
        Tensor::new(h.shape.clone(), seasonal),
    )
}

/// Mean over the batch axis of a [batch, channels, patches, features] map,
/// keeping a leading size-1 axis.
fn batch_mean(tape: &mut Tape, h: Var) -> Var {
    let b = tape.shape(h)[0];
    let summed = tape.sum_axes(h, &[0]);
    tape.scale(summed, 1.0 / b as f32)
}

/// Frequency-side matching loss between per-operator feature maps of a real
/// batch and a synthetic batch, each [batch, channels, patches, features]
/// (batch sizes may differ). Returns a scalar in [-2, 2].
pub fn frequency_matching_loss(
    tape: &mut Tape,
    real_features: &[Var],
    syn_features: &[Var],
    kernel: usize,
) -> Var {
    assert_eq!(
        real_features.len(),
        syn_features.len(),
        "feature lists must pair up per operator layer"
    );
    assert!(!real_features.is_empty(), "no feature maps to match");
    let mut acc: Option<Var> = None;
    for (&hr, &hs) in real_features.iter().zip(syn_features) {
        assert_eq!(
            tape.shape(hr)[1..],
            tape.shape(hs)[1..],
            "real and synthetic features must agree beyond the batch axis"
        );
        let mr = batch_mean(tape, hr);
        let ms = batch_mean(tape, hs);
        let (tr, sr) = series_decompose(tape, mr, kernel);
        let (ts, ss) = series_decompose(tape, ms, kernel);
        let ct = cosine_flat(tape, tr, ts);
        let cs = cosine_flat(tape, sr, ss);
        let pair = tape.add(ct, cs);
        acc = Some(match acc {
            Some(a) => tape.add(a, pair),
            None => pair,
        });
    }
    let total = acc.expect("at least one layer");
    tape.scale(total, -1.0 / real_features.len() as f32)
}
