//! Composite operations assembled from tape primitives.
//!
//! Keeping these as compositions (rather than dedicated ops with hand-written
//! backward rules) means their gradients are built from primitive adjoints
//! and stay differentiable to any order for free.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

const NORM_EPS: f32 = 1e-5;

pub fn mean_all(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).numel() as f32;
    let s = tape.sum_all(x);
    tape.scale(s, 1.0 / n)
}

/// Row maxima along the last axis, inserted as a detached constant [.., 1].
fn detached_max_last(tape: &mut Tape, x: Var) -> Var {
    let t = tape.value(x);
    let k = *t.shape.last().expect("max over scalar");
    let rows = t.numel() / k;
    let mut maxes = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &t.data[r * k..][..k];
        maxes.push(row.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    }
    let mut shape = t.shape.clone();
    *shape.last_mut().unwrap() = 1;
    tape.constant(Tensor::new(shape, maxes))
}

/// Softmax along the last axis. The row max is subtracted before
/// exponentiating; as a constant shift it leaves both value and gradient
/// untouched while keeping exp in range.
pub fn softmax_last(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let m = detached_max_last(tape, x);
    let mb = tape.broadcast(m, &shape);
    let centered = tape.sub(x, mb);
    let e = tape.exp(centered);
    let last = shape.len() - 1;
    let s = tape.sum_axes(e, &[last]);
    let inv = tape.pow_scalar(s, -1.0);
    let invb = tape.broadcast(inv, &shape);
    tape.mul(e, invb)
}

/// Log-softmax along the last axis, same max-subtraction scheme.
pub fn log_softmax_last(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let m = detached_max_last(tape, x);
    let mb = tape.broadcast(m, &shape);
    let centered = tape.sub(x, mb);
    let e = tape.exp(centered);
    let last = shape.len() - 1;
    let s = tape.sum_axes(e, &[last]);
    let lse = tape.log(s);
    let lseb = tape.broadcast(lse, &shape);
    tape.sub(centered, lseb)
}

/// Mean squared error over all elements.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let d = tape.sub(pred, target);
    let sq = tape.mul(d, d);
    mean_all(tape, sq)
}

/// Softmax cross-entropy from logits [rows, classes] against integer labels,
/// averaged over rows.
pub fn cross_entropy_logits(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "cross entropy expects [rows, classes], got {shape:?}");
    let (rows, classes) = (shape[0], shape[1]);
    assert_eq!(labels.len(), rows, "one label per row");
    let mut onehot = vec![0.0f32; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of {classes} classes");
        onehot[r * classes + l] = 1.0;
    }
    let oh = tape.constant(Tensor::new(vec![rows, classes], onehot));
    let lsm = log_softmax_last(tape, logits);
    let picked = tape.mul(lsm, oh);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / rows as f32)
}

/// Cosine similarity of two same-shaped tensors viewed as flat vectors.
/// A zero-norm side short-circuits to a constant 0, so the gradient through
/// it is zero rather than NaN.
pub fn cosine_flat(tape: &mut Tape, a: Var, b: Var) -> Var {
    assert_eq!(tape.shape(a), tape.shape(b), "cosine operands must match");
    let na: f64 = tape.value(a).data.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let nb: f64 = tape.value(b).data.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if na < 1e-30 || nb < 1e-30 {
        return tape.constant_scalar(0.0);
    }
    let ab = tape.mul(a, b);
    let dot = tape.sum_all(ab);
    let aa = tape.mul(a, a);
    let saa = tape.sum_all(aa);
    let bb = tape.mul(b, b);
    let sbb = tape.sum_all(bb);
    let prod = tape.mul(saa, sbb);
    let inv = tape.pow_scalar(prod, -0.5);
    tape.mul(dot, inv)
}

/// Statistics axes for feature normalization over [batch, patches, features].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxes {
    /// Mean/var over (batch, patches) per feature: batch statistics.
    Batch,
    /// Mean/var over patches per (sample, feature): batch-independent, the
    /// batch-size-1 limit of the above.
    PerSample,
}

/// Affine feature normalization of x [batch, patches, features] with learned
/// gain and bias [features].
pub fn normalize(tape: &mut Tape, x: Var, gain: Var, bias: Var, axes: NormAxes) -> Var {
    let shape = tape.shape(x).to_vec();
    assert_eq!(shape.len(), 3, "normalize expects [batch, patches, features], got {shape:?}");
    let feat = shape[2];
    assert_eq!(tape.shape(gain), &[feat], "gain must be [features]");
    assert_eq!(tape.shape(bias), &[feat], "bias must be [features]");
    let stat_axes: &[usize] = match axes {
        NormAxes::Batch => &[0, 1],
        NormAxes::PerSample => &[1],
    };
    let cnt: usize = stat_axes.iter().map(|&d| shape[d]).product();
    let inv_cnt = 1.0 / cnt as f32;

    let sum = tape.sum_axes(x, stat_axes);
    let mu = tape.scale(sum, inv_cnt);
    let mub = tape.broadcast(mu, &shape);
    let centered = tape.sub(x, mub);
    let sq = tape.mul(centered, centered);
    let var_sum = tape.sum_axes(sq, stat_axes);
    let var = tape.scale(var_sum, inv_cnt);
    let shifted = tape.add_scalar(var, NORM_EPS);
    let inv_std = tape.pow_scalar(shifted, -0.5);
    let inv_std_b = tape.broadcast(inv_std, &shape);
    let normed = tape.mul(centered, inv_std_b);

    let gain3 = tape.reshape(gain, &[1, 1, feat]);
    let gain_b = tape.broadcast(gain3, &shape);
    let bias3 = tape.reshape(bias, &[1, 1, feat]);
    let bias_b = tape.broadcast(bias3, &shape);
    let scaled = tape.mul(normed, gain_b);
    tape.add(scaled, bias_b)
}

/// Add a bias vector [features] to x [.., features].
pub fn add_bias(tape: &mut Tape, x: Var, bias: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let feat = *shape.last().expect("add_bias on scalar");
    assert_eq!(tape.shape(bias), &[feat], "bias must match last axis");
    let mut ones = vec![1usize; shape.len()];
    *ones.last_mut().unwrap() = feat;
    let b = tape.reshape(bias, &ones);
    let bb = tape.broadcast(b, &shape);
    tape.add(x, bb)
}

/// Flatten each part to 1-D and concatenate, in order.
pub fn flatten_concat(tape: &mut Tape, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "flatten_concat of nothing");
    let flat: Vec<Var> = parts
        .iter()
        .map(|&p| {
            let n = tape.value(p).numel();
            tape.reshape(p, &[n])
        })
        .collect();
    if flat.len() == 1 {
        flat[0]
    } else {
        tape.concat(&flat, 0)
    }
}
