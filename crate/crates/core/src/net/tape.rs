//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every node on the [`Tape`] holds a dense 2-D value. Operations append a
//! node recording their inputs; [`Tape::backward`] walks the nodes in
//! reverse and accumulates vector-Jacobian products.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`.
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    /// Column-wise concatenation.
    Concat(Vec<Var>),
    /// `out[r] = a[idx[r]]`.
    Gather(Var, Rc<[usize]>),
    /// `out[idx[r]] += a[r]`, `rows` output rows.
    ScatterSum(Var, Rc<[usize]>),
    /// Mean of the rows sharing a segment id.
    SegmentMean(Var, Rc<[usize]>, Rc<[f64]>),
    /// Row-wise projection `v - ⟨v, x⟩ x` onto the tangent space at `x`.
    Project(Var, Rc<Tensor>),
    /// `Σ w ⊙ (a - t)²` as a 1x1 tensor.
    SqError(Var, Rc<Tensor>, Rc<Tensor>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::ScatterSum(..) => "scatter_sum",
            Op::SegmentMean(..) => "segment_mean",
            Op::Project(..) => "project",
            Op::SqError(..) => "sq_error",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_bad: Option<usize>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Concat(parts) => parts.iter().any(|p| self.requires_grad(*p)),
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Gather(a, _)
            | Op::ScatterSum(a, _)
            | Op::SegmentMean(a, ..)
            | Op::Project(a, _)
            | Op::SqError(a, ..) => self.requires_grad(*a),
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_bad.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.first_bad = Some(idx);
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(idx)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Fails with the first node that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_bad {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("tape node {i} ({})", self.nodes[i].op.name()))),
        }
    }

    /// Differentiable input, typically a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + &self.value(bias).row(0);
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    /// `x σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        self.push(value, Op::Gather(a, idx))
    }

    pub fn scatter_sum(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros((rows, src.ncols()));
        for (r, &target) in idx.iter().enumerate() {
            let mut row = value.row_mut(target);
            row += &src.row(r);
        }
        self.push(value, Op::ScatterSum(a, idx))
    }

    pub fn segment_mean(&mut self, a: Var, segment: Rc<[usize]>, segments: usize) -> Var {
        let mut counts = vec![0.0; segments];
        for &s in segment.iter() {
            counts[s] += 1.0;
        }
        let inv: Rc<[f64]> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
        let src = self.value(a);
        let mut value = Tensor::zeros((segments, src.ncols()));
        for (r, &s) in segment.iter().enumerate() {
            let mut row = value.row_mut(s);
            row.scaled_add(inv[s], &src.row(r));
        }
        self.push(value, Op::SegmentMean(a, segment, inv))
    }

    pub fn project(&mut self, v: Var, base: Rc<Tensor>) -> Var {
        let value = project_rows(self.value(v), &base);
        self.push(value, Op::Project(v, base))
    }

    /// Weighted squared error against a constant target. Entries with zero
    /// weight are skipped entirely.
    pub fn sq_error(&mut self, a: Var, target: Rc<Tensor>, weights: Rc<Tensor>) -> Var {
        let pred = self.value(a);
        let mut total = 0.0;
        ndarray::Zip::from(pred).and(&*target).and(&*weights).for_each(|p, t, w| {
            if *w != 0.0 {
                total += w * (p - t) * (p - t);
            }
        });
        self.push(Tensor::from_elem((1, 1), total), Op::SqError(a, target, weights))
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient at tape node {i} ({})",
                    self.nodes[i].op.name()
                )));
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Silu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gi, &x| {
                        let s = sigmoid(x);
                        *gi *= s * (1.0 + x * (1.0 - s));
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.requires_grad(*p) {
                            accumulate(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Gather(a, idx) => {
                    let mut ga = Tensor::zeros(self.value(*a).raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterSum(a, idx) => {
                    accumulate(&mut grads, *a, g.select(Axis(0), idx));
                }
                Op::SegmentMean(a, segment, inv) => {
                    let mut ga = Tensor::zeros(self.value(*a).raw_dim());
                    for (r, &s) in segment.iter().enumerate() {
                        let mut row = ga.row_mut(r);
                        row.scaled_add(inv[s], &g.row(s));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Project(v, base) => {
                    // The projector is symmetric.
                    accumulate(&mut grads, *v, project_rows(&g, base));
                }
                Op::SqError(a, target, weights) => {
                    let upstream = g[[0, 0]];
                    let mut ga = self.value(*a) - &**target;
                    ga.zip_mut_with(&**weights, |d, w| {
                        *d = if *w == 0.0 { 0.0 } else { 2.0 * w * upstream * *d };
                    });
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn project_rows(v: &Tensor, base: &Tensor) -> Tensor {
    let mut out = v.clone();
    for (mut row, x) in out.rows_mut().into_iter().zip(base.rows()) {
        let d = row.dot(&x);
        row.scaled_add(-d, &x);
    }
    out
}

/// Result of [`Tape::backward`]. Only leaves keep their gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the root does not depend on it.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn linear_head_quadratic_loss_closed_form() {
        // L = ‖x W + b - y‖², dL/dW = 2 xᵀ (xW + b - y), dL/db = 2 Σ_rows (xW + b - y).
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let w = array![[0.5], [-0.25]];
        let b = array![[0.1]];
        let y = array![[1.0], [0.0]];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let out = tape.matmul(xv, wv);
        let out = tape.add_bias(out, bv);
        let loss = tape.sq_error(out, Rc::new(y.clone()), Rc::new(Tensor::ones((2, 1))));
        let mut g = tape.backward(loss).unwrap();
        let resid = x.dot(&w) + &b.row(0) - &y;
        let expect_w = x.t().dot(&resid) * 2.0;
        let expect_b = resid.sum() * 2.0;
        assert_eq!(g.take(wv).unwrap(), expect_w);
        assert_eq!(g.take(bv).unwrap()[[0, 0]], expect_b);
        assert_eq!(tape.scalar(loss), resid.iter().map(|r| r * r).sum::<f64>());
    }

    #[test]
    fn composite_matches_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.2, 0.5, -0.4], [1.5, -0.2, 0.1]];
        let w = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.7]];
        let base = Rc::new(array![[0.6, 0.8], [1.0, 0.0]]);
        let target = Rc::new(array![[0.1, 0.2], [0.3, -0.4]]);
        let idx: Rc<[usize]> = Rc::from(vec![0, 2, 1, 0]);
        let seg: Rc<[usize]> = Rc::from(vec![0, 1, 1, 0]);

        let run = |x: &Tensor, tape: &mut Tape| -> (Var, Var) {
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let g = tape.gather(xv, idx.clone());
            let h = tape.matmul(g, wv);
            let h = tape.silu(h);
            let c = tape.concat(&[h, g]);
            let c = tape.scale(c, 0.5);
            let summed = tape.scatter_sum(c, seg.clone(), 2);
            let mean = tape.segment_mean(c, seg.clone(), 2);
            let both = tape.add(summed, mean);
            let w2 = tape.leaf(Tensor::from_shape_fn((5, 2), |(i, j)| 0.1 * (i as f64) - 0.2 * j as f64));
            let p = tape.matmul(both, w2);
            let p = tape.project(p, base.clone());
            let loss = tape.sq_error(p, target.clone(), Rc::new(array![[0.5, 0.5], [2.0, 0.0]]));
            (xv, loss)
        };

        let mut tape = Tape::new();
        let (xv, loss) = run(&x0, &mut tape);
        let analytic = tape.backward(loss).unwrap().take(xv).unwrap();
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let (_, l) = run(x, &mut t);
            t.scalar(l)
        };
        let numeric = numeric_grad(&f, &x0);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[2.0, 1.0]]);
        let x = tape.leaf(array![[1.0], [3.0]]);
        let y = tape.matmul(x, w);
        let target = Rc::new(tape.value(y).clone());
        let loss = tape.sq_error(y, target, Rc::new(Tensor::ones((2, 2))));
        let g = tape.backward(loss).unwrap().take(w).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0]]);
        let b = tape.scale(a, f64::INFINITY);
        let _ = tape.scale(b, 0.0);
        let err = tape.backward(b).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }
}
