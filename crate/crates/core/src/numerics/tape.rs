//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and parent
//! references. Node ids are assigned in creation order, so parents always
//! precede children and a single reverse sweep over ids is a valid
//! topological traversal. The tape is meant to be rebuilt per evaluation:
//! control flow that depends on forward values (for example which variations
//! end up in a consensus set) simply produces a differently shaped tape.

use super::tensor::{axis_extents, log_softmax_slice};
use super::{NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatVec(Var, Var),
    Log(Var),
    LogFloor(Var, f64),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    LogSoftmax(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf; it is differentiable iff the tensor requires gradients.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_values(), requires_grad, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_values(), false, Op::Leaf)
    }

    /// Constant 1-D leaf from raw values.
    pub fn constant_vec(&mut self, values: Vec<f64>) -> Result<Var, NumericsError> {
        Ok(self.constant(Tensor::vector(values)?))
    }

    /// Copies the current value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var, NumericsError> {
        let node = self.node(v)?;
        let (shape, values) = (node.shape.clone(), node.values.clone());
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> Result<f64, NumericsError> {
        let node = self.node(v)?;
        if node.values.len() != 1 {
            return Err(NumericsError::NonScalar {
                shape: node.shape.clone(),
            });
        }
        Ok(node.values[0])
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::from_parts(node.shape.clone(), node.values.clone(), node.requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let node = self.node(a)?;
        let values = node.values.iter().map(|v| v * factor).collect();
        let shape = node.shape.clone();
        self.push_checked("scale", shape, values, &[a], Op::Scale(a, factor))
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var, NumericsError> {
        let (&first, rest) = items.split_first().ok_or(NumericsError::EmptyInput { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Arithmetic mean of a non-empty list of same-shaped nodes.
    pub fn average(&mut self, items: &[Var]) -> Result<Var, NumericsError> {
        let total = self.add_all(items)?;
        self.scale(total, 1.0 / items.len() as f64)
    }

    /// Matrix `[rows, cols]` times vector `[cols]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var, NumericsError> {
        let (mn, xn) = (self.node(m)?, self.node(x)?);
        if mn.shape.len() != 2 || xn.shape.len() != 1 || mn.shape[1] != xn.shape[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                left: mn.shape.clone(),
                right: xn.shape.clone(),
            });
        }
        let (rows, cols) = (mn.shape[0], mn.shape[1]);
        let values = (0..rows)
            .map(|r| {
                mn.values[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&xn.values)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.push_checked("matvec", vec![rows], values, &[m, x], Op::MatVec(m, x))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `ln(max(a, floor))`; the gradient is zero wherever the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var, NumericsError> {
        self.unary("log_floor", a, |v| v.max(floor).ln(), Op::LogFloor(a, floor))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.node(a)?.values.iter().sum();
        self.push_checked("sum", Vec::new(), vec![total], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let node = self.node(a)?;
        if node.values.is_empty() {
            return Err(NumericsError::EmptyInput { op: "mean" });
        }
        let mean = node.values.iter().sum::<f64>() / node.values.len() as f64;
        self.push_checked("mean", Vec::new(), vec![mean], &[a], Op::Mean(a))
    }

    /// Flat-index gather; output shape is `[indices.len()]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let node = self.node(a)?;
        let len = node.values.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(NumericsError::IndexOutOfBounds { index, len });
        }
        let values = indices.iter().map(|&i| node.values[i]).collect();
        self.push_checked(
            "gather",
            vec![indices.len()],
            values,
            &[a],
            Op::Gather(a, indices.to_vec()),
        )
    }

    /// Sum of the elementwise product of two same-shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let node = self.node(a)?;
        if axis >= node.shape.len() {
            return Err(NumericsError::InvalidAxis {
                axis,
                shape: node.shape.clone(),
            });
        }
        if node.shape[axis] == 0 {
            return Err(NumericsError::EmptyInput { op: "log_softmax" });
        }
        let (outer, n, inner) = axis_extents(&node.shape, axis);
        let mut values = vec![0.0; node.values.len()];
        let mut slice = vec![0.0; n];
        let mut out = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, s) in slice.iter_mut().enumerate() {
                    *s = node.values[(o * n + k) * inner + i];
                }
                log_softmax_slice(&slice, &mut out);
                for (k, v) in out.iter().enumerate() {
                    values[(o * n + k) * inner + i] = *v;
                }
            }
        }
        let shape = node.shape.clone();
        self.push_checked("log_softmax", shape, values, &[a], Op::LogSoftmax(a, axis))
    }

    /// Reverse sweep from a single-element `root`.
    ///
    /// Gradients are accumulated in decreasing node-id order, so two sweeps
    /// over the same tape are bit-identical.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let root_node = self.node(root)?;
        if root_node.values.len() != 1 {
            return Err(NumericsError::NonScalar {
                shape: root_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root_node.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |acc| axpy(acc, 1.0, &g));
                    self.accumulate(&mut grads, *b, |acc| axpy(acc, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |acc| axpy(acc, 1.0, &g));
                    self.accumulate(&mut grads, *b, |acc| axpy(acc, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                    self.accumulate(&mut grads, *a, |acc| {
                        for ((o, gi), bi) in acc.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    });
                    self.accumulate(&mut grads, *b, |acc| {
                        for ((o, gi), ai) in acc.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(a, factor) => {
                    self.accumulate(&mut grads, *a, |acc| axpy(acc, *factor, &g));
                }
                Op::MatVec(m, x) => {
                    let (mn, xn) = (&self.nodes[m.0], &self.nodes[x.0]);
                    let cols = mn.shape[1];
                    self.accumulate(&mut grads, *m, |acc| {
                        for (r, gr) in g.iter().enumerate() {
                            for (o, xj) in acc[r * cols..(r + 1) * cols].iter_mut().zip(&xn.values) {
                                *o += gr * xj;
                            }
                        }
                    });
                    self.accumulate(&mut grads, *x, |acc| {
                        for (r, gr) in g.iter().enumerate() {
                            for (o, mrj) in acc.iter_mut().zip(&mn.values[r * cols..(r + 1) * cols]) {
                                *o += gr * mrj;
                            }
                        }
                    });
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].values;
                    self.accumulate(&mut grads, *a, |acc| {
                        for ((o, gi), ai) in acc.iter_mut().zip(&g).zip(av) {
                            *o += gi / ai;
                        }
                    });
                }
                Op::LogFloor(a, floor) => {
                    let av = &self.nodes[a.0].values;
                    self.accumulate(&mut grads, *a, |acc| {
                        for ((o, gi), ai) in acc.iter_mut().zip(&g).zip(av) {
                            if *ai > *floor {
                                *o += gi / ai;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    self.accumulate(&mut grads, *a, |acc| {
                        for ((o, gi), yi) in acc.iter_mut().zip(&g).zip(&node.values) {
                            *o += gi * yi;
                        }
                    });
                }
                Op::Sum(a) => {
                    self.accumulate(&mut grads, *a, |acc| {
                        for o in acc.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].values.len() as f64;
                    self.accumulate(&mut grads, *a, |acc| {
                        for o in acc.iter_mut() {
                            *o += g[0] / n;
                        }
                    });
                }
                Op::Gather(a, indices) => {
                    self.accumulate(&mut grads, *a, |acc| {
                        for (gi, &idx) in g.iter().zip(indices) {
                            acc[idx] += gi;
                        }
                    });
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, n, inner) = axis_extents(&node.shape, *axis);
                    let y = &node.values;
                    self.accumulate(&mut grads, *a, |acc| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * n + k) * inner + i;
                                let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                                for k in 0..n {
                                    acc[at(k)] += g[at(k)] - y[at(k)].exp() * gsum;
                                }
                            }
                        }
                    });
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        // Leaves that were never reached still get an explicit zero gradient.
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, None) => Some(vec![0.0; node.values.len()]),
                (Op::Leaf, true, g) => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node(&self, v: Var) -> Result<&Node, NumericsError> {
        self.nodes.get(v.0).ok_or(NumericsError::UnknownVar { id: v.0 })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let acc = grads[target.0].get_or_insert_with(|| vec![0.0; node.values.len()]);
        f(acc);
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: &[Var],
        op: Op,
    ) -> Result<Var, NumericsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(shape, values, requires_grad, op))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let node = self.node(a)?;
        let values = node.values.iter().map(|&v| f(v)).collect();
        let shape = node.shape.clone();
        self.push_checked(name, shape, values, &[a], op)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.shape != bn.shape {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                left: an.shape.clone(),
                right: bn.shape.clone(),
            });
        }
        let values = an.values.iter().zip(&bn.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = an.shape.clone();
        self.push_checked(name, shape, values, &[a, b], op)
    }
}

fn axpy(acc: &mut [f64], alpha: f64, g: &[f64]) {
    for (o, gi) in acc.iter_mut().zip(g) {
        *o += alpha * gi;
    }
}

/// Gradients of a backward sweep, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a differentiable leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, values: &[f64]) -> Var {
        tape.leaf(Tensor::vector(values.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn primitive_values() {
        let mut tape = Tape::new();
        let a = tape.constant_vec(vec![1.0, 2.0]).unwrap();
        let b = tape.constant_vec(vec![3.0, 4.0]).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);

        let c = tape.constant_vec(vec![2.0, 4.0, 6.0]).unwrap();
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.scalar(m).unwrap(), 4.0);

        let d = tape.constant_vec(vec![0.1, 0.2, 0.3]).unwrap();
        let g = tape.gather(d, &[2]).unwrap();
        assert_eq!(tape.value(g), &[0.3]);
    }

    #[test]
    fn shape_mismatch_names_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant_vec(vec![1.0, 2.0]).unwrap();
        let b = tape.constant_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "add",
                left: vec![2],
                right: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));

        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(tape.matvec(m, b).is_err());
    }

    #[test]
    fn gather_out_of_bounds() {
        let mut tape = Tape::new();
        let a = tape.constant_vec(vec![1.0]).unwrap();
        assert_eq!(
            tape.gather(a, &[1]).unwrap_err(),
            NumericsError::IndexOutOfBounds { index: 1, len: 1 }
        );
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap().with_grad());
        let y = tape.leaf(Tensor::scalar(3.0).unwrap().with_grad());
        let z = tape.mul(x, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert_eq!(grads.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn mean_is_linear() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[5.0, -1.0]);
        let m = tape.mean(x).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let unused = vec_leaf(&mut tape, &[7.0, 7.0, 7.0]);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
        let c = tape.constant_vec(vec![1.0]).unwrap();
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalar { .. })
        ));
    }

    #[test]
    fn log_softmax_axis_checks() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0]).unwrap());
        assert!(matches!(
            tape.log_softmax(x, 2),
            Err(NumericsError::InvalidAxis { .. })
        ));
        let empty = tape.constant(Tensor::new(vec![2, 0], vec![]).unwrap());
        assert!(matches!(
            tape.log_softmax(empty, 1),
            Err(NumericsError::EmptyInput { .. })
        ));
        for axis in 0..2 {
            let y = tape.log_softmax(x, axis).unwrap();
            let v = tape.value(y).to_vec();
            if axis == 1 {
                for r in 0..2 {
                    let s: f64 = v[r * 3..r * 3 + 3].iter().map(|e| e.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..3 {
                    let s = v[c].exp() + v[3 + c].exp();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant_vec(vec![0.0]).unwrap();
        assert_eq!(tape.log(x).unwrap_err(), NumericsError::NonFinite { op: "log" });
        let y = tape.log_floor(x, 1e-12).unwrap();
        assert!((tape.value(y)[0] - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.5]);
        let d = tape.detach(x).unwrap();
        let p = tape.mul(x, d).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(grads.get(x).unwrap(), &[1.5]);
    }

    mod properties {
        use super::super::*;
        use crate::numerics::check_gradients_multi;
        use proptest::prelude::*;

        type Build = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

        /// Weighted sum so every output coordinate reaches the root with its own factor.
        fn weighted(tape: &mut Tape, out: Var) -> Result<Var, NumericsError> {
            let n = tape.value(out).len();
            let w = tape.constant_vec((0..n).map(|i| 0.3 + 0.7 * i as f64).collect())?;
            tape.dot(w, out)
        }

        const UNARY: &[(&str, Build)] = &[
            ("exp", |t, v| {
                let y = t.exp(v[0])?;
                weighted(t, y)
            }),
            ("log", |t, v| {
                let e = t.exp(v[0])?;
                let y = t.log(e)?;
                weighted(t, y)
            }),
            ("log_floor", |t, v| {
                let e = t.exp(v[0])?;
                let y = t.log_floor(e, 1e-12)?;
                weighted(t, y)
            }),
            ("scale", |t, v| {
                let y = t.scale(v[0], -1.7)?;
                weighted(t, y)
            }),
            ("sum", |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            }),
            ("mean", |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            }),
            ("gather", |t, v| {
                let y = t.gather(v[0], &[2, 0, 2, 1])?;
                weighted(t, y)
            }),
            ("log_softmax", |t, v| {
                let y = t.log_softmax(v[0], 0)?;
                weighted(t, y)
            }),
        ];

        const BINARY: &[(&str, Build)] = &[
            ("add", |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            }),
            ("sub", |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.mul(y, y)?;
                weighted(t, y)
            }),
            ("mul", |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted(t, y)
            }),
            ("dot", |t, v| t.dot(v[0], v[1])),
            ("add_all", |t, v| {
                let y = t.add_all(&[v[0], v[1], v[0]])?;
                let y = t.mul(y, v[1])?;
                weighted(t, y)
            }),
            ("average", |t, v| {
                let y = t.average(&[v[0], v[1]])?;
                let y = t.mul(y, v[0])?;
                weighted(t, y)
            }),
        ];

        fn vector() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-2.0f64..2.0, 4)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn primitive_gradients_match_differences(a in vector(), b in vector()) {
                let ta = Tensor::vector(a).unwrap();
                let tb = Tensor::vector(b).unwrap();
                for (name, build) in UNARY {
                    let r = check_gradients_multi(build, std::slice::from_ref(&ta), 1e-5, 1e-5).unwrap();
                    prop_assert!(r.passed(), "{name}: {:?}", r.worst());
                }
                for (name, build) in BINARY {
                    let r = check_gradients_multi(build, &[ta.clone(), tb.clone()], 1e-5, 1e-5).unwrap();
                    prop_assert!(r.passed(), "{name}: {:?}", r.worst());
                }
            }

            #[test]
            fn matvec_gradients_match_differences(m in proptest::collection::vec(-2.0f64..2.0, 12), x in proptest::collection::vec(-2.0f64..2.0, 4)) {
                let inputs = [Tensor::matrix(3, 4, m).unwrap(), Tensor::vector(x).unwrap()];
                let r = check_gradients_multi(|t, v| {
                    let y = t.matvec(v[0], v[1])?;
                    weighted(t, y)
                }, &inputs, 1e-5, 1e-5).unwrap();
                prop_assert!(r.passed(), "{:?}", r.worst());
            }

            #[test]
            fn log_softmax_rows_normalize(values in proptest::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::matrix(3, 4, values).unwrap());
                let y = tape.log_softmax(x, axis).unwrap();
                let out = tape.value(y);
                let (rows, cols) = (3, 4);
                if axis == 1 {
                    for r in 0..rows {
                        let s: f64 = (0..cols).map(|c| out[r * cols + c].exp()).sum();
                        prop_assert!((s - 1.0).abs() <= 1e-12, "row {r}: {s}");
                    }
                } else {
                    for c in 0..cols {
                        let s: f64 = (0..rows).map(|r| out[r * cols + c].exp()).sum();
                        prop_assert!((s - 1.0).abs() <= 1e-12, "column {c}: {s}");
                    }
                }
            }

            #[test]
            fn backward_is_bit_identical(a in vector(), b in vector()) {
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::vector(a).unwrap().with_grad());
                let y = tape.leaf(Tensor::vector(b).unwrap().with_grad());
                let p = tape.mul(x, y).unwrap();
                let l = tape.log_softmax(p, 0).unwrap();
                let e = tape.exp(x).unwrap();
                let root = tape.dot(l, e).unwrap();
                let first = tape.backward(root).unwrap();
                let second = tape.backward(root).unwrap();
                for v in [x, y] {
                    let a: Vec<u64> = first.get(v).unwrap().iter().map(|g| g.to_bits()).collect();
                    let b: Vec<u64> = second.get(v).unwrap().iter().map(|g| g.to_bits()).collect();
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
