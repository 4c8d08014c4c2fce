//! Finite-difference oracles for gradient verification.
//!
//! The function under test runs in f32 like everything else; f64 appears only
//! in the difference quotient, where subtracting two nearly equal losses in
//! f32 would throw away most of the signal.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

fn eval_scalar<F>(f: &F, point: &Tensor) -> f32
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let v = tape.param(point.clone());
    let loss = f(&mut tape, v);
    tape.scalar_value(loss)
}

/// Central-difference gradient of a deterministic scalar function at `point`.
/// The step actually taken is re-measured per coordinate, since adding
/// `epsilon` in f32 rarely moves the coordinate by exactly `epsilon`.
pub fn fd_gradient<F>(f: &F, point: &Tensor, epsilon: f32) -> Vec<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut grads = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data[i] += epsilon;
        let mut minus = point.clone();
        minus.data[i] -= epsilon;
        let step = plus.data[i] as f64 - minus.data[i] as f64;
        let lp = eval_scalar(f, &plus) as f64;
        let lm = eval_scalar(f, &minus) as f64;
        grads.push((lp - lm) / step);
    }
    grads
}

/// Central-difference partial of an arbitrary flat-vector function in one
/// coordinate. Used where the evaluation is a whole pipeline rather than a
/// single tape expression.
pub fn fd_partial<F>(f: &F, x: &[f32], coord: usize, epsilon: f32) -> f64
where
    F: Fn(&[f32]) -> f32,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut plus = x.to_vec();
    plus[coord] += epsilon;
    let mut minus = x.to_vec();
    minus[coord] -= epsilon;
    let step = plus[coord] as f64 - minus[coord] as f64;
    (f(&plus) as f64 - f(&minus) as f64) / step
}

/// Max over coordinates of |analytic - central| / (|central| + 1e-8).
pub fn finite_difference_check<F>(f: &F, point: &Tensor, epsilon: f32) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let v = tape.param(point.clone());
    let loss = f(&mut tape, v);
    let analytic = tape.differentiate(loss, &[v]).remove(0);
    let fd = fd_gradient(f, point, epsilon);
    analytic
        .data
        .iter()
        .zip(&fd)
        .map(|(&a, &c)| ((a as f64 - c).abs()) / (c.abs() + 1e-8))
        .fold(0.0, f64::max)
}
