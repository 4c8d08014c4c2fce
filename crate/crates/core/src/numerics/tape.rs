//! Reverse-mode tape over dense f32 tensors.
//!
//! Nodes evaluate eagerly as they are appended, so composite ops can inspect
//! intermediate values (softmax reads the row max it subtracts, cosine guards
//! zero norms). The backward pass in [`Tape::grad_vars`] walks a snapshot of
//! the node list and appends each adjoint as an ordinary node built from the
//! same primitives. Gradients are therefore differentiable themselves, which
//! is what allows a training loop unrolled on one tape, parameter updates
//! included, to be differentiated end to end with respect to its data.
//!
//! Contract violations (shape mismatches, foreign vars, non-scalar losses)
//! panic. Anything data-dependent is reported by the callers that own the
//! data.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels as k;
use super::tensor::{numel_of, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node. Only valid on the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    PowScalar(usize, f32),
    Exp(usize),
    Log(usize),
    /// x: [lead.., m, k] times a shared 2-D weight [k, n].
    MatMul(usize, usize),
    /// x: [lead.., m, k] times y: [lead.., k, n].
    BatMatMul(usize, usize),
    TransposeLast2(usize),
    Permute(usize, Rc<Vec<usize>>),
    Reshape(usize),
    /// Keeps summed axes as size 1.
    SumAxes(usize),
    Broadcast(usize),
    SumAll(usize),
    FillScalar(usize),
    Concat(Rc<Vec<usize>>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    Patchify {
        x: usize,
        stride: usize,
    },
    PatchScatter {
        x: usize,
        stride: usize,
    },
    AvgPool {
        x: usize,
        axis: usize,
        kernel: usize,
    },
    AvgPoolAdj {
        x: usize,
        axis: usize,
        kernel: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs: bool,
}

/// Append-only arena of eagerly evaluated nodes.
pub struct Tape {
    nodes: Vec<Node>,
    id: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node at or past `mark`. Handles taken before the mark stay
    /// valid; using a dropped handle is a contract violation.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    fn at(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "var belongs to a different tape");
        assert!(v.idx < self.nodes.len(), "var outlived a tape truncation");
        v.idx
    }

    fn var(&self, idx: usize) -> Var {
        Var { idx, tape: self.id }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.at(v);
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let i = self.at(v);
        self.nodes[i].needs
    }

    fn push(&mut self, op: Op, value: Tensor, needs: bool) -> Var {
        self.nodes.push(Node { op, value, needs });
        self.var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Insert a value the backward pass treats as constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn constant_scalar(&mut self, v: f32) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Insert a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn zip2(&self, a: Var, b: Var, name: &str) -> (usize, usize) {
        let (ia, ib) = (self.at(a), self.at(b));
        assert_eq!(
            self.nodes[ia].value.shape, self.nodes[ib].value.shape,
            "{name}: operand shapes differ"
        );
        (ia, ib)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = self.zip2(a, b, "add");
        let mut out = self.nodes[ia].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[ib].value.data) {
            *o += v;
        }
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::Add(ia, ib), out, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = self.zip2(a, b, "sub");
        let mut out = self.nodes[ia].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[ib].value.data) {
            *o -= v;
        }
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::Sub(ia, ib), out, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = self.zip2(a, b, "mul");
        let mut out = self.nodes[ia].value.clone();
        for (o, &v) in out.data.iter_mut().zip(&self.nodes[ib].value.data) {
            *o *= v;
        }
        let needs = self.needs(ia) || self.needs(ib);
        self.push(Op::Mul(ia, ib), out, needs)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ia = self.at(a);
        let mut out = self.nodes[ia].value.clone();
        for o in out.data.iter_mut() {
            *o *= c;
        }
        let needs = self.needs(ia);
        self.push(Op::Scale(ia, c), out, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let ia = self.at(a);
        let mut out = self.nodes[ia].value.clone();
        for o in out.data.iter_mut() {
            *o += c;
        }
        let needs = self.needs(ia);
        self.push(Op::AddScalar(ia), out, needs)
    }

    /// Elementwise x^p. For fractional p the inputs must be positive; the
    /// callers in this crate only raise variances and norms, which are.
    pub fn pow_scalar(&mut self, a: Var, p: f32) -> Var {
        let ia = self.at(a);
        let mut out = self.nodes[ia].value.clone();
        for o in out.data.iter_mut() {
            *o = o.powf(p);
        }
        let needs = self.needs(ia);
        self.push(Op::PowScalar(ia, p), out, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let mut out = self.nodes[ia].value.clone();
        for o in out.data.iter_mut() {
            *o = o.exp();
        }
        let needs = self.needs(ia);
        self.push(Op::Exp(ia), out, needs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let ia = self.at(a);
        let mut out = self.nodes[ia].value.clone();
        for o in out.data.iter_mut() {
            *o = o.ln();
        }
        let needs = self.needs(ia);
        self.push(Op::Log(ia), out, needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// x: [lead.., m, k] times a 2-D weight [k, n] shared over the lead axes.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (ix, iw) = (self.at(x), self.at(w));
        let xs = &self.nodes[ix].value.shape;
        let ws = &self.nodes[iw].value.shape;
        assert!(xs.len() >= 2, "matmul lhs must have >= 2 axes, got {xs:?}");
        assert_eq!(ws.len(), 2, "matmul rhs must be 2-D, got {ws:?}");
        let (m, kk) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        assert_eq!(kk, ws[0], "matmul inner dims: {xs:?} x {ws:?}");
        let n = ws[1];
        let lead: usize = xs[..xs.len() - 2].iter().product();
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; lead * m * n];
        k::matmul(
            lead,
            m,
            kk,
            n,
            &self.nodes[ix].value.data,
            &self.nodes[iw].value.data,
            &mut out,
        );
        let needs = self.needs(ix) || self.needs(iw);
        self.push(Op::MatMul(ix, iw), Tensor::new(shape, out), needs)
    }

    /// x: [lead.., m, k] times y: [lead.., k, n] with equal lead axes.
    pub fn bmm(&mut self, x: Var, y: Var) -> Var {
        let (ix, iy) = (self.at(x), self.at(y));
        let xs = &self.nodes[ix].value.shape;
        let ys = &self.nodes[iy].value.shape;
        assert!(xs.len() >= 2 && xs.len() == ys.len(), "bmm ranks: {xs:?} x {ys:?}");
        assert_eq!(xs[..xs.len() - 2], ys[..ys.len() - 2], "bmm lead axes: {xs:?} x {ys:?}");
        let (m, kk) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        assert_eq!(kk, ys[ys.len() - 2], "bmm inner dims: {xs:?} x {ys:?}");
        let n = ys[ys.len() - 1];
        let lead: usize = xs[..xs.len() - 2].iter().product();
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; lead * m * n];
        k::batmatmul(
            lead,
            m,
            kk,
            n,
            &self.nodes[ix].value.data,
            &self.nodes[iy].value.data,
            &mut out,
        );
        let needs = self.needs(ix) || self.needs(iy);
        self.push(Op::BatMatMul(ix, iy), Tensor::new(shape, out), needs)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(xs.len() >= 2, "transpose_last2 needs >= 2 axes, got {xs:?}");
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let lead: usize = xs[..xs.len() - 2].iter().product();
        let mut shape = xs.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let mut out = vec![0.0; lead * r * c];
        k::transpose_last2(lead, r, c, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::TransposeLast2(ix), Tensor::new(shape, out), needs)
    }

    /// Output axis d reads input axis perm[d].
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        let mut seen = vec![false; xs.len()];
        assert_eq!(perm.len(), xs.len(), "permute rank mismatch");
        for &p in perm {
            assert!(p < xs.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let mut out = vec![0.0; numel_of(&shape)];
        k::permute(xs, perm, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::Permute(ix, Rc::new(perm.to_vec())), Tensor::new(shape, out), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let ix = self.at(x);
        assert_eq!(
            numel_of(shape),
            self.nodes[ix].value.numel(),
            "reshape changes element count: {:?} -> {:?}",
            self.nodes[ix].value.shape,
            shape
        );
        let out = Tensor::new(shape.to_vec(), self.nodes[ix].value.data.clone());
        let needs = self.needs(ix);
        self.push(Op::Reshape(ix), out, needs)
    }

    // ── reductions and broadcasts ───────────────────────────────────────

    /// Sum over `axes`, keeping them as size 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        let mut mask = vec![false; xs.len()];
        for &a in axes {
            assert!(a < xs.len(), "sum axis {a} out of range for {xs:?}");
            mask[a] = true;
        }
        let shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .map(|(d, &s)| if mask[d] { 1 } else { s })
            .collect();
        let mut out = vec![0.0; numel_of(&shape)];
        k::sum_axes(xs, &mask, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::SumAxes(ix), Tensor::new(shape, out), needs)
    }

    /// Expand size-1 axes of x to `target`.
    pub fn broadcast(&mut self, x: Var, target: &[usize]) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert_eq!(xs.len(), target.len(), "broadcast rank mismatch: {xs:?} -> {target:?}");
        for (d, (&i, &o)) in xs.iter().zip(target).enumerate() {
            assert!(i == o || i == 1, "broadcast axis {d}: {xs:?} -> {target:?}");
        }
        let mut out = vec![0.0; numel_of(target)];
        k::broadcast_axes(xs, target, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::Broadcast(ix), Tensor::new(target.to_vec(), out), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let ix = self.at(x);
        // f64 accumulation: full reductions see the longest chains on the
        // tape and set the loss scale everything else is compared against.
        let s: f64 = self.nodes[ix].value.data.iter().map(|&v| v as f64).sum();
        let needs = self.needs(ix);
        self.push(Op::SumAll(ix), Tensor::scalar(s as f32), needs)
    }

    /// Fill `shape` with a scalar's value.
    pub fn fill_from_scalar(&mut self, x: Var, shape: &[usize]) -> Var {
        let ix = self.at(x);
        assert!(self.nodes[ix].value.is_scalar(), "fill_from_scalar needs a scalar");
        let out = Tensor::full(shape.to_vec(), self.nodes[ix].value.item());
        let needs = self.needs(ix);
        self.push(Op::FillScalar(ix), out, needs)
    }

    // ── structure ───────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let ids: Vec<usize> = parts.iter().map(|&p| self.at(p)).collect();
        let first = &self.nodes[ids[0]].value.shape;
        assert!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        for &i in &ids[1..] {
            let s = &self.nodes[i].value.shape;
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat non-axis dims differ: {s:?} vs {first:?}");
            }
        }
        let lens: Vec<usize> = ids.iter().map(|&i| self.nodes[i].value.shape[axis]).collect();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = lens.iter().sum();
        let mut out = vec![0.0; numel_of(&shape)];
        {
            let slices: Vec<&[f32]> = ids.iter().map(|&i| self.nodes[i].value.data.as_slice()).collect();
            k::concat_axis(outer, inner, &lens, &slices, &mut out);
        }
        let needs = ids.iter().any(|&i| self.needs(i));
        self.push(Op::Concat(Rc::new(ids), axis), Tensor::new(shape, out), needs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(axis < xs.len(), "slice axis {axis} out of range for {xs:?}");
        assert!(len >= 1 && start + len <= xs[axis], "slice [{start}, {start}+{len}) exceeds axis {axis} of {xs:?}");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut shape = xs.clone();
        shape[axis] = len;
        let mut out = vec![0.0; numel_of(&shape)];
        k::slice_axis(outer, inner, xs[axis], start, len, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::Slice { x: ix, axis, start, len }, Tensor::new(shape, out), needs)
    }

    /// Select rows (axis 0), repeats allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(!xs.is_empty(), "gather_rows needs at least 1 axis");
        let rows = xs[0];
        for &i in indices {
            assert!(i < rows, "gather index {i} out of {rows} rows");
        }
        let row: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = indices.len();
        let mut out = vec![0.0; indices.len() * row];
        k::gather_rows(row, indices, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::GatherRows(ix, Rc::new(indices.to_vec())), Tensor::new(shape, out), needs)
    }

    /// Adjoint of `gather_rows`: accumulate x's rows into `rows` output rows.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(!xs.is_empty() && xs[0] == indices.len(), "scatter_rows index count mismatch");
        for &i in indices {
            assert!(i < rows, "scatter index {i} out of {rows} rows");
        }
        let row: usize = xs[1..].iter().product();
        let mut shape = xs.clone();
        shape[0] = rows;
        let mut out = vec![0.0; rows * row];
        k::scatter_rows_add(row, indices, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(Op::ScatterRows(ix, Rc::new(indices.to_vec())), Tensor::new(shape, out), needs)
    }

    /// [b, n] -> [b, p, patch_len] with replicate padding past the series end.
    pub fn patchify(&mut self, x: Var, patch_len: usize, stride: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert_eq!(xs.len(), 2, "patchify input must be [batch, len], got {xs:?}");
        let (b, n) = (xs[0], xs[1]);
        assert!(
            1 <= stride && stride <= patch_len && patch_len <= n,
            "patchify needs 1 <= stride <= patch_len <= len, got stride {stride}, patch_len {patch_len}, len {n}"
        );
        let pc = k::patch_count(n, patch_len, stride);
        let mut out = vec![0.0; b * pc * patch_len];
        k::patchify(b, n, patch_len, stride, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(
            Op::Patchify { x: ix, stride },
            Tensor::new(vec![b, pc, patch_len], out),
            needs,
        )
    }

    /// Adjoint of `patchify`: [b, p, l] -> [b, series_len].
    pub fn patch_scatter(&mut self, x: Var, series_len: usize, stride: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert_eq!(xs.len(), 3, "patch_scatter input must be [batch, patches, len], got {xs:?}");
        let (b, pc, l) = (xs[0], xs[1], xs[2]);
        assert_eq!(pc, k::patch_count(series_len, l, stride), "patch_scatter patch count mismatch");
        let mut out = vec![0.0; b * series_len];
        k::patch_scatter(b, series_len, l, stride, &self.nodes[ix].value.data, &mut out);
        let needs = self.needs(ix);
        self.push(
            Op::PatchScatter { x: ix, stride },
            Tensor::new(vec![b, series_len], out),
            needs,
        )
    }

    /// Centered moving average along `axis` with replicate padding.
    pub fn avg_pool_axis(&mut self, x: Var, axis: usize, kernel: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(axis < xs.len(), "avg_pool axis {axis} out of range for {xs:?}");
        assert!(kernel % 2 == 1, "avg_pool kernel must be odd, got {kernel}");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![0.0; self.nodes[ix].value.numel()];
        k::avg_pool_axis(outer, xs[axis], inner, kernel, &self.nodes[ix].value.data, &mut out);
        let shape = xs.clone();
        let needs = self.needs(ix);
        self.push(Op::AvgPool { x: ix, axis, kernel }, Tensor::new(shape, out), needs)
    }

    pub fn avg_pool_adjoint(&mut self, x: Var, axis: usize, kernel: usize) -> Var {
        let ix = self.at(x);
        let xs = &self.nodes[ix].value.shape;
        assert!(axis < xs.len(), "avg_pool_adjoint axis {axis} out of range for {xs:?}");
        assert!(kernel % 2 == 1, "avg_pool_adjoint kernel must be odd, got {kernel}");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out = vec![0.0; self.nodes[ix].value.numel()];
        k::avg_pool_axis_adjoint(outer, xs[axis], inner, kernel, &self.nodes[ix].value.data, &mut out);
        let shape = xs.clone();
        let needs = self.needs(ix);
        self.push(Op::AvgPoolAdj { x: ix, axis, kernel }, Tensor::new(shape, out), needs)
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Reverse accumulation from a scalar `loss` to each var in `wrt`.
    ///
    /// Adjoints are appended as nodes, so the returned vars can take part in
    /// further computation (and further differentiation). Vars in `wrt` must
    /// require grad; off-path vars get a zero adjoint.
    pub fn grad_vars(&mut self, loss: Var, wrt: &[Var]) -> Vec<Var> {
        let il = self.at(loss);
        assert!(
            self.nodes[il].value.is_scalar(),
            "loss must be scalar, got shape {:?}",
            self.nodes[il].value.shape
        );
        for w in wrt {
            let iw = self.at(*w);
            assert!(self.nodes[iw].needs, "wrt var does not require grad");
        }

        let snapshot = il + 1;
        let mut adj: Vec<Option<Var>> = vec![None; snapshot];
        adj[il] = Some(self.constant_scalar(1.0));

        for id in (0..snapshot).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.nodes[id].needs {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let out_var = self.var(id);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if self.needs(b) {
                        let ng = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let bv = self.var(b);
                        let da = self.mul(g, bv);
                        self.accumulate(&mut adj, a, da);
                    }
                    if self.needs(b) {
                        let av = self.var(a);
                        let db = self.mul(g, av);
                        self.accumulate(&mut adj, b, db);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(a) {
                        let da = self.scale(g, c);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::AddScalar(a) => self.accumulate(&mut adj, a, g),
                Op::PowScalar(a, p) => {
                    if self.needs(a) {
                        let av = self.var(a);
                        let xp = self.pow_scalar(av, p - 1.0);
                        let gx = self.mul(g, xp);
                        let da = self.scale(gx, p);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Exp(a) => {
                    if self.needs(a) {
                        let da = self.mul(g, out_var);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Log(a) => {
                    if self.needs(a) {
                        let av = self.var(a);
                        let inv = self.pow_scalar(av, -1.0);
                        let da = self.mul(g, inv);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::MatMul(x, w) => {
                    if self.needs(x) {
                        let wv = self.var(w);
                        let wt = self.transpose_last2(wv);
                        let dx = self.matmul(g, wt);
                        self.accumulate(&mut adj, x, dx);
                    }
                    if self.needs(w) {
                        let xv = self.var(x);
                        let xt = self.transpose_last2(xv);
                        let full = self.bmm(xt, g);
                        let fs = self.shape(full).to_vec();
                        let dw = if fs.len() > 2 {
                            let lead_axes: Vec<usize> = (0..fs.len() - 2).collect();
                            let summed = self.sum_axes(full, &lead_axes);
                            let tail = [fs[fs.len() - 2], fs[fs.len() - 1]];
                            self.reshape(summed, &tail)
                        } else {
                            full
                        };
                        self.accumulate(&mut adj, w, dw);
                    }
                }
                Op::BatMatMul(x, y) => {
                    if self.needs(x) {
                        let yv = self.var(y);
                        let yt = self.transpose_last2(yv);
                        let dx = self.bmm(g, yt);
                        self.accumulate(&mut adj, x, dx);
                    }
                    if self.needs(y) {
                        let xv = self.var(x);
                        let xt = self.transpose_last2(xv);
                        let dy = self.bmm(xt, g);
                        self.accumulate(&mut adj, y, dy);
                    }
                }
                Op::TransposeLast2(a) => {
                    if self.needs(a) {
                        let da = self.transpose_last2(g);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Permute(a, perm) => {
                    if self.needs(a) {
                        let mut inv = vec![0usize; perm.len()];
                        for (d, &p) in perm.iter().enumerate() {
                            inv[p] = d;
                        }
                        let da = self.permute(g, &inv);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        let target = self.nodes[a].value.shape.clone();
                        let da = self.reshape(g, &target);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::SumAxes(a) => {
                    if self.needs(a) {
                        let target = self.nodes[a].value.shape.clone();
                        let da = self.broadcast(g, &target);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Broadcast(a) => {
                    if self.needs(a) {
                        let in_shape = self.nodes[a].value.shape.clone();
                        let out_shape = self.nodes[id].value.shape.clone();
                        let axes: Vec<usize> = (0..in_shape.len())
                            .filter(|&d| in_shape[d] == 1 && out_shape[d] != 1)
                            .collect();
                        let da = self.sum_axes(g, &axes);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs(a) {
                        let target = self.nodes[a].value.shape.clone();
                        let da = self.fill_from_scalar(g, &target);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::FillScalar(a) => {
                    if self.needs(a) {
                        let da = self.sum_all(g);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0usize;
                    for &p in parts.iter() {
                        let len = self.nodes[p].value.shape[axis];
                        if self.needs(p) {
                            let dp = self.slice(g, axis, start, len);
                            self.accumulate(&mut adj, p, dp);
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    if self.needs(x) {
                        let xshape = self.nodes[x].value.shape.clone();
                        let total = xshape[axis];
                        let mut parts: Vec<Var> = Vec::with_capacity(3);
                        if start > 0 {
                            let mut s = xshape.clone();
                            s[axis] = start;
                            parts.push(self.constant(Tensor::zeros(s)));
                        }
                        parts.push(g);
                        if start + len < total {
                            let mut s = xshape.clone();
                            s[axis] = total - start - len;
                            parts.push(self.constant(Tensor::zeros(s)));
                        }
                        let dx = if parts.len() == 1 { g } else { self.concat(&parts, axis) };
                        self.accumulate(&mut adj, x, dx);
                    }
                }
                Op::GatherRows(a, indices) => {
                    if self.needs(a) {
                        let rows = self.nodes[a].value.shape[0];
                        let da = self.scatter_rows(g, &indices, rows);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::ScatterRows(a, indices) => {
                    if self.needs(a) {
                        let da = self.gather_rows(g, &indices);
                        self.accumulate(&mut adj, a, da);
                    }
                }
                Op::Patchify { x, stride } => {
                    if self.needs(x) {
                        let n = self.nodes[x].value.shape[1];
                        let dx = self.patch_scatter(g, n, stride);
                        self.accumulate(&mut adj, x, dx);
                    }
                }
                Op::PatchScatter { x, stride, .. } => {
                    if self.needs(x) {
                        let l = self.nodes[x].value.shape[2];
                        let dx = self.patchify(g, l, stride);
                        self.accumulate(&mut adj, x, dx);
                    }
                }
                Op::AvgPool { x, axis, kernel } => {
                    if self.needs(x) {
                        let dx = self.avg_pool_adjoint(g, axis, kernel);
                        self.accumulate(&mut adj, x, dx);
                    }
                }
                Op::AvgPoolAdj { x, axis, kernel } => {
                    if self.needs(x) {
                        let dx = self.avg_pool_axis(g, axis, kernel);
                        self.accumulate(&mut adj, x, dx);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| {
                let iw = self.at(*w);
                adj[iw].unwrap_or_else(|| {
                    let shape = self.nodes[iw].value.shape.clone();
                    self.constant(Tensor::zeros(shape))
                })
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: usize, g: Var) {
        if !self.needs(target) {
            return;
        }
        adj[target] = Some(match adj[target] {
            None => g,
            Some(e) => self.add(e, g),
        });
    }

    /// Gradient of a scalar loss for each param, as plain tensors. Scratch
    /// nodes emitted by the walk are dropped before returning.
    pub fn differentiate(&mut self, loss: Var, params: &[Var]) -> Vec<Tensor> {
        let mark = self.nodes.len();
        let gs = self.grad_vars(loss, params);
        let out: Vec<Tensor> = gs
            .iter()
            .zip(params)
            .map(|(g, p)| {
                let mut t = self.value(*g).clone();
                t.requires_grad = false;
                t.grad = None;
                debug_assert_eq!(t.shape, self.value(*p).shape);
                t
            })
            .collect();
        self.truncate(mark.min(self.nodes.len()));
        // `mark` can exceed len only if loss.idx < mark nodes were dropped by
        // an earlier truncate; grad_vars would have panicked first.
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with_param(data: Vec<f32>) -> (Tape, Var) {
        let mut tape = Tape::new();
        let n = data.len();
        let v = tape.param(Tensor::new(vec![n], data));
        (tape, v)
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let (mut tape, x) = tape_with_param(vec![1.0, -2.0, 3.0]);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let g = tape.differentiate(loss, &[x]);
        assert_eq!(g[0].data, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn off_path_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let unused = tape.param(Tensor::new(vec![3], vec![0.0; 3]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let g = tape.differentiate(loss, &[x, unused]);
        assert_eq!(g[1].shape, vec![3]);
        assert!(g[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_is_rejected() {
        let (mut tape, x) = tape_with_param(vec![1.0, 2.0]);
        let y = tape.mul(x, x);
        tape.differentiate(y, &[x]);
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn foreign_var_is_rejected() {
        let (mut a, _) = tape_with_param(vec![1.0]);
        let (_b, xb) = tape_with_param(vec![1.0]);
        a.sum_all(xb);
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // loss = sum(x W), dloss/dx = row sums of W^T, dloss/dW = column sums of x.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.param(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(x, w);
        let loss = tape.sum_all(y);
        let g = tape.differentiate(loss, &[x, w]);
        assert_eq!(g[0].data, vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g[1].data, vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unrolled_descent_matches_closed_form() {
        // Two inner steps on f(x) = sum(x^2): x_b = (1 - 2a)^b x_0, so
        // d sum(x_b^2) / d x_0 = 2 (1 - 2a)^(2b) x_0.
        let alpha = 0.1f32;
        let steps = 2;
        let x0 = vec![0.5f32, -1.5, 2.0];
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], x0.clone()));
        let mut cur = p;
        for _ in 0..steps {
            let sq = tape.mul(cur, cur);
            let inner = tape.sum_all(sq);
            let g = tape.grad_vars(inner, &[cur])[0];
            let step = tape.scale(g, alpha);
            cur = tape.sub(cur, step);
        }
        let sq = tape.mul(cur, cur);
        let outer = tape.sum_all(sq);
        let g = tape.differentiate(outer, &[p]);
        let factor = 2.0 * (1.0 - 2.0 * alpha).powi(2 * steps as i32);
        for (got, x) in g[0].data.iter().zip(&x0) {
            let want = factor * x;
            assert!((got - want).abs() < 1e-5, "got {got}, want {want}");
        }
    }

    #[test]
    fn second_order_matches_hand_derivative() {
        // f(x) = sum((x - a * d/dx sum(x^4))^2) = sum((x - 4a x^3)^2) has
        // derivative 2 (x - 4a x^3)(1 - 12a x^2) coordinatewise.
        let alpha = 0.05f32;
        let xs = vec![0.8f32, -0.3, 1.1];
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(vec![3], xs.clone()));
        let x4 = tape.pow_scalar(p, 4.0);
        let inner = tape.sum_all(x4);
        let gi = tape.grad_vars(inner, &[p])[0];
        let step = tape.scale(gi, alpha);
        let moved = tape.sub(p, step);
        let sq = tape.mul(moved, moved);
        let loss = tape.sum_all(sq);
        let g = tape.differentiate(loss, &[p]);
        for (got, &x) in g[0].data.iter().zip(&xs) {
            let want = 2.0 * (x - 4.0 * alpha * x.powi(3)) * (1.0 - 12.0 * alpha * x * x);
            assert!(
                (got - want).abs() < 1e-4 * want.abs().max(1.0),
                "got {got}, want {want}"
            );
        }
    }

    #[test]
    fn truncate_drops_scratch_nodes() {
        let (mut tape, x) = tape_with_param(vec![1.0, 2.0]);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let before = tape.len();
        let _ = tape.differentiate(loss, &[x]);
        assert_eq!(tape.len(), before);
    }
}
