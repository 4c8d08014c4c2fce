//! Property checks for the differentiation tape: randomly composed op
//! chains must agree with finite differences, and the structural invariants
//! of the kernels must hold across fuzzed shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsdc_core::numerics::check::{fd_gradient, finite_difference_check};
use tsdc_core::numerics::ops::{cosine_flat, softmax_last};
use tsdc_core::numerics::{Tape, Tensor, Var};

#[test]
fn random_op_chains_match_finite_differences() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(2..5usize);
        let cols = rng.gen_range(2..5usize);
        let point = Tensor::randn(vec![rows, cols], 0.5, &mut rng);
        let ops: Vec<u8> = (0..rng.gen_range(3..7usize)).map(|_| rng.gen_range(0..8u8)).collect();
        let consts: Vec<Tensor> = ops
            .iter()
            .map(|_| Tensor::randn(vec![rows, cols], 0.5, &mut rng))
            .collect();

        let f = |tape: &mut Tape, x: Var| {
            let mut y = x;
            for (op, c) in ops.iter().zip(&consts) {
                y = match op {
                    0 => {
                        let cv = tape.constant(c.clone());
                        tape.add(y, cv)
                    }
                    1 => {
                        let cv = tape.constant(c.clone());
                        tape.mul(y, cv)
                    }
                    2 => tape.scale(y, 0.8),
                    3 => tape.add_scalar(y, 0.25),
                    4 => {
                        // Damped exponent keeps repeated applications bounded.
                        let s = tape.scale(y, 0.2);
                        tape.exp(s)
                    }
                    5 => softmax_last(tape, y),
                    6 => tape.avg_pool_axis(y, 1, 3),
                    _ => tape.mul(y, y),
                };
            }
            let sq = tape.mul(y, y);
            tape.sum_all(sq)
        };

        // Mixed tolerance with a per-coordinate step-size sweep. Saturating
        // chains (stacked softmax) leave some true partials near zero, so
        // each quotient carries f32 loss-evaluation noise of about
        // loss * 2^-24 / (2 * eps); deviations below that floor certify
        // nothing either way and are accepted on absolute grounds. A wrong
        // gradient misses by orders of magnitude more than either bound.
        let mut tape = Tape::new();
        let v = tape.param(point.clone());
        let loss = f(&mut tape, v);
        let loss_scale = (tape.scalar_value(loss).abs() as f64).max(1.0);
        let analytic = tape.differentiate(loss, &[v]).remove(0);
        let sweeps: Vec<Vec<f64>> = [3e-4f32, 1e-3, 3e-3, 1e-2]
            .iter()
            .map(|&eps| fd_gradient(&f, &point, eps))
            .collect();
        let gmax = sweeps
            .iter()
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        for (i, &a) in analytic.data.iter().enumerate() {
            let pass = sweeps.iter().any(|fd| {
                let d = (a as f64 - fd[i]).abs();
                d < 5e-3 * (fd[i].abs() + 1e-2 * gmax) || d < 1e-4 * loss_scale
            });
            assert!(pass, "seed {seed} ops {ops:?} coord {i}: analytic {a} vs fd sweeps");
        }
    }
}

#[test]
fn gradients_flow_through_emitted_adjoints() {
    // Backward emits adjoints as nodes, so a loss built from a gradient can
    // itself be differentiated. One unrolled descent step on sum(x^2) lands
    // at (1 - 2a) x, so sum after two nested gradients has a closed form.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let point = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        let a = 0.1f32;
        let f = |tape: &mut Tape, x: Var| {
            let sq = tape.mul(x, x);
            let inner = tape.sum_all(sq);
            let g = tape.grad_vars(inner, &[x])[0];
            let step = tape.scale(g, a);
            let moved = tape.sub(x, step);
            let mv = tape.mul(moved, moved);
            tape.sum_all(mv)
        };
        // loss = (1-2a)^2 sum(x^2), so d/dx = 2 (1-2a)^2 x.
        let mut tape = Tape::new();
        let v = tape.param(point.clone());
        let loss = f(&mut tape, v);
        let grad = tape.differentiate(loss, &[v]).remove(0);
        let k = 2.0 * (1.0 - 2.0 * a) * (1.0 - 2.0 * a);
        for (g, x) in grad.data.iter().zip(&point.data) {
            assert!((g - k * x).abs() < 1e-5, "emitted-adjoint gradient {g} vs {}", k * x);
        }
        assert!(finite_difference_check(&f, &point, 1e-3) < 1e-3);
    }
}

#[test]
fn avg_pool_keeps_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let rows = rng.gen_range(1..4usize);
        let len = rng.gen_range(1..20usize);
        let kernel = 2 * rng.gen_range(0..6usize) + 1;
        let x = Tensor::randn(vec![rows, len], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let pooled = tape.avg_pool_axis(v, 1, kernel);
        assert_eq!(tape.shape(pooled), &[rows, len]);
        let out = tape.value(pooled);
        for r in 0..rows {
            let row = &x.data[r * len..][..len];
            let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &p in &out.data[r * len..][..len] {
                assert!(p >= lo - 1e-6 && p <= hi + 1e-6, "average {p} outside [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn avg_pool_of_constant_input_is_bitwise_identity() {
    let mut tape = Tape::new();
    let x = Tensor::full(vec![2, 9], 0.1f32);
    let v = tape.constant(x.clone());
    let pooled = tape.avg_pool_axis(v, 1, 5);
    for (a, b) in tape.value(pooled).data.iter().zip(&x.data) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let rows = rng.gen_range(1..5usize);
        let cols = rng.gen_range(1..7usize);
        let x = Tensor::randn(vec![rows, cols], 3.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = softmax_last(&mut tape, v);
        let out = tape.value(y);
        for r in 0..rows {
            let row = &out.data[r * cols..][..cols];
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "row sums to {sum}");
            assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn cosine_similarity_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let n = rng.gen_range(1..20usize);
        let a = Tensor::randn(vec![n], 2.0, &mut rng);
        let b = Tensor::randn(vec![n], 2.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b));
        let cab = cosine_flat(&mut tape, va, vb);
        assert!(tape.scalar_value(cab).abs() <= 1.0 + 1e-6);
        let vc = tape.constant(a.clone());
        let neg = tape.scale(vc, -1.0);
        let caa = cosine_flat(&mut tape, vc, vc);
        let can = cosine_flat(&mut tape, vc, neg);
        assert!((tape.scalar_value(caa) - 1.0).abs() < 1e-5);
        assert!((tape.scalar_value(can) + 1.0).abs() < 1e-5);
    }
}
