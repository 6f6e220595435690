//! The Wengert tape: append-only op recording plus one backward sweep.

use super::tensor::{matvec_data, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`]. Ids are tape-scoped; using an id from a
/// different tape is a logic error and panics on out-of-range access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    MatVec(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
        len: usize,
    },
    MeanSq(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Built fresh for every training step and
/// consumed by a single [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Tensor>>,
}

/// Broadcast-aware element read: scalars repeat, everything else indexes.
fn pick(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Accumulates `vals` into `dst`, summing when `dst` is a broadcast scalar.
fn scatter(dst: &mut Tensor, vals: impl Iterator<Item = f64>) {
    if dst.numel() == 1 {
        dst.data_mut()[0] += vals.sum::<f64>();
    } else {
        for (d, v) in dst.data_mut().iter_mut().zip(vals) {
            *d += v;
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf; gradients stop here.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Convenience for a rank-1 constant; screens non-finite entries.
    pub fn constant_vector(&mut self, data: &[f64]) -> Result<NodeId, AutodiffError> {
        Ok(self.constant(Tensor::vector(data)?))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the backward root with respect to this node. Zero for
    /// nodes the root does not depend on (constants included).
    pub fn grad(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        match &self.grads {
            Some(grads) => Ok(&grads[id.0]),
            None => Err(AutodiffError::BackwardNotRun),
        }
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    fn binary_shape(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Vec<usize>, AutodiffError> {
        if a.shape() == b.shape() {
            Ok(a.shape().to_vec())
        } else if a.numel() == 1 {
            Ok(b.shape().to_vec())
        } else if b.numel() == 1 {
            Ok(a.shape().to_vec())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let shape = Self::binary_shape(name, self.value(a), self.value(b))?;
        let n: usize = shape.iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..n).map(|i| f(pick(av, i), pick(bv, i))).collect();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::from_op(shape, data), op, rg))
    }

    /// Elementwise sum; either side may be a broadcast scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference; either side may be a broadcast scalar.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product; either side may be a broadcast scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, AutodiffError> {
        if !k.is_finite() {
            return Err(AutodiffError::NonFiniteScale(k));
        }
        let v = self.value(a);
        let data = v.data().iter().map(|x| k * x).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs_grad(a);
        Ok(self.push(Tensor::from_op(shape, data), Op::Scale(a, k), rg))
    }

    // ── elementwise unary ops ───────────────────────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let rg = self.needs_grad(a);
        self.push(Tensor::from_op(shape, data), op, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Matrix-vector product: `[m, n] × [n] → [m]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        let wv = self.value(w);
        let xv = self.value(x);
        if wv.shape().len() != 2 {
            return Err(AutodiffError::RankMismatch {
                op: "matvec",
                expected: "a rank-2 matrix",
                actual: wv.shape().to_vec(),
            });
        }
        if xv.shape().len() != 1 {
            return Err(AutodiffError::RankMismatch {
                op: "matvec",
                expected: "a rank-1 vector",
                actual: xv.shape().to_vec(),
            });
        }
        if wv.shape()[1] != xv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: wv.shape().to_vec(),
                rhs: xv.shape().to_vec(),
            });
        }
        let rows = wv.shape()[0];
        let data = matvec_data(wv, xv.data());
        let rg = self.needs_grad(w) || self.needs_grad(x);
        Ok(self.push(Tensor::from_op(vec![rows], data), Op::MatVec(w, x), rg))
    }

    /// Concatenates rank-1 tensors in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyConcat);
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(AutodiffError::RankMismatch {
                    op: "concat",
                    expected: "rank-1 vectors",
                    actual: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
            rg |= self.needs_grad(p);
        }
        let n = data.len();
        Ok(self.push(
            Tensor::from_op(vec![n], data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Contiguous sub-vector `[start, start + len)` of a rank-1 tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(AutodiffError::RankMismatch {
                op: "slice",
                expected: "a rank-1 vector",
                actual: v.shape().to_vec(),
            });
        }
        let size = v.numel();
        if start + len > size {
            return Err(AutodiffError::SliceBounds { start, len, size });
        }
        let data = v.data()[start..start + len].to_vec();
        let rg = self.needs_grad(a);
        Ok(self.push(
            Tensor::from_op(vec![len], data),
            Op::Slice { src: a, start, len },
            rg,
        ))
    }

    /// Mean of squared entries, reduced to a `[1]` scalar.
    pub fn mean_sq(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a);
        let n = v.numel();
        if n == 0 {
            return Err(AutodiffError::EmptyReduce);
        }
        let mut acc = 0.0;
        for &x in v.data() {
            acc += x * x;
        }
        let rg = self.needs_grad(a);
        Ok(self.push(
            Tensor::from_op(vec![1], vec![acc / n as f64]),
            Op::MeanSq(a),
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. The tape is append-only and ids
    /// point backward, so one pass in descending id order visits every
    /// node after all of its consumers. A second call is rejected; build
    /// a fresh tape instead.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.grads.is_some() {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(root).numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(
                self.value(root).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros_like(&n.value))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].clone();
            // Gradients stop at non-differentiable leaves: inputs with
            // requires_grad == false keep their zero slot.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        scatter(&mut grads[a.0], g.data().iter().copied());
                    }
                    if self.needs_grad(b) {
                        scatter(&mut grads[b.0], g.data().iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        scatter(&mut grads[a.0], g.data().iter().copied());
                    }
                    if self.needs_grad(b) {
                        scatter(&mut grads[b.0], g.data().iter().map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let bv = self.nodes[b.0].value.clone();
                        scatter(
                            &mut grads[a.0],
                            g.data().iter().enumerate().map(|(i, &gi)| gi * pick(&bv, i)),
                        );
                    }
                    if self.needs_grad(b) {
                        let av = self.nodes[a.0].value.clone();
                        scatter(
                            &mut grads[b.0],
                            g.data().iter().enumerate().map(|(i, &gi)| gi * pick(&av, i)),
                        );
                    }
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    if self.needs_grad(a) {
                        scatter(&mut grads[a.0], g.data().iter().map(|v| k * v));
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    if self.needs_grad(a) {
                        let y = self.nodes[i].value.clone();
                        scatter(
                            &mut grads[a.0],
                            g.data()
                                .iter()
                                .zip(y.data())
                                .map(|(&gi, &yi)| gi * (1.0 - yi * yi)),
                        );
                    }
                }
                Op::Square(a) => {
                    let a = *a;
                    if self.needs_grad(a) {
                        let av = self.nodes[a.0].value.clone();
                        scatter(
                            &mut grads[a.0],
                            g.data()
                                .iter()
                                .zip(av.data())
                                .map(|(&gi, &xi)| gi * 2.0 * xi),
                        );
                    }
                }
                Op::Sin(a) => {
                    let a = *a;
                    if self.needs_grad(a) {
                        let av = self.nodes[a.0].value.clone();
                        scatter(
                            &mut grads[a.0],
                            g.data()
                                .iter()
                                .zip(av.data())
                                .map(|(&gi, &xi)| gi * xi.cos()),
                        );
                    }
                }
                Op::Cos(a) => {
                    let a = *a;
                    if self.needs_grad(a) {
                        let av = self.nodes[a.0].value.clone();
                        scatter(
                            &mut grads[a.0],
                            g.data()
                                .iter()
                                .zip(av.data())
                                .map(|(&gi, &xi)| -gi * xi.sin()),
                        );
                    }
                }
                Op::MatVec(w, x) => {
                    let (w, x) = (*w, *x);
                    if self.needs_grad(w) {
                        let xv = self.nodes[x.0].value.clone();
                        let cols = xv.numel();
                        let gw = grads[w.0].data_mut();
                        for (r, &gr) in g.data().iter().enumerate() {
                            for c in 0..cols {
                                gw[r * cols + c] += gr * xv.data()[c];
                            }
                        }
                    }
                    if self.needs_grad(x) {
                        let wv = self.nodes[w.0].value.clone();
                        let rows = wv.shape()[0];
                        let cols = wv.shape()[1];
                        let gx = grads[x.0].data_mut();
                        for c in 0..cols {
                            let mut acc = 0.0;
                            for r in 0..rows {
                                acc += g.data()[r] * wv.data()[r * cols + c];
                            }
                            gx[c] += acc;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.numel();
                        if self.needs_grad(p) {
                            let gp = grads[p.0].data_mut();
                            for j in 0..len {
                                gp[j] += g.data()[offset + j];
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, start, len } => {
                    let (src, start, len) = (*src, *start, *len);
                    if self.needs_grad(src) {
                        let gs = grads[src.0].data_mut();
                        for j in 0..len {
                            gs[start + j] += g.data()[j];
                        }
                    }
                }
                Op::MeanSq(a) => {
                    let a = *a;
                    if self.needs_grad(a) {
                        let av = self.nodes[a.0].value.clone();
                        let n = av.numel() as f64;
                        let g0 = g.data()[0];
                        scatter(
                            &mut grads[a.0],
                            av.data().iter().map(|&xi| g0 * 2.0 * xi / n),
                        );
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vec_node(tape: &mut Tape, data: &[f64]) -> NodeId {
        tape.var(Tensor::vector(data).unwrap())
    }

    #[test]
    fn add_and_mul_values() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0]);
        let b = vec_node(&mut tape, &[3.0, 5.0]);
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 7.0]);
        assert_eq!(tape.value(p).data(), &[3.0, 10.0]);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut tape = Tape::new();
        let v = vec_node(&mut tape, &[1.0, 2.0, 3.0]);
        let k = tape.var(Tensor::scalar(10.0).unwrap());
        let left = tape.mul(k, v).unwrap();
        let right = tape.mul(v, k).unwrap();
        assert_eq!(tape.value(left).data(), &[10.0, 20.0, 30.0]);
        assert_eq!(tape.value(right).data(), &[10.0, 20.0, 30.0]);
        let diff = tape.sub(k, v).unwrap();
        assert_eq!(tape.value(diff).data(), &[9.0, 8.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0]);
        let b = vec_node(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            tape.add(a, b),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn matvec_value_and_shape_checks() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = vec_node(&mut tape, &[5.0, 6.0]);
        let y = tape.matvec(w, x).unwrap();
        assert_eq!(tape.value(y).data(), &[17.0, 39.0]);

        let bad = vec_node(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            tape.matvec(w, bad),
            Err(AutodiffError::ShapeMismatch { op: "matvec", .. })
        ));
        assert!(matches!(
            tape.matvec(x, x),
            Err(AutodiffError::RankMismatch { op: "matvec", .. })
        ));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0, 3.0]);
        let b = vec_node(&mut tape, &[4.0]);
        let joined = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(joined).data(), &[1.0, 2.0, 3.0, 4.0]);
        let mid = tape.slice(joined, 1, 2).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.0, 3.0]);
        assert!(matches!(
            tape.slice(joined, 3, 2),
            Err(AutodiffError::SliceBounds { .. })
        ));
        assert!(matches!(tape.concat(&[]), Err(AutodiffError::EmptyConcat)));
    }

    #[test]
    fn mean_sq_value() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0, 3.0]);
        let m = tape.mean_sq(a).unwrap();
        assert_relative_eq!(tape.value(m).data()[0], 14.0 / 3.0, max_relative = 1e-15);
        let empty = vec_node(&mut tape, &[]);
        assert!(matches!(
            tape.mean_sq(empty),
            Err(AutodiffError::EmptyReduce)
        ));
    }

    /// d/dx of sum(W x) is the column sums of W. The sum is expressed inside
    /// the op set as a ones-row matvec.
    #[test]
    fn matvec_backward_hand_value() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = vec_node(&mut tape, &[5.0, 6.0]);
        let y = tape.matvec(w, x).unwrap();
        let ones = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let total = tape.matvec(ones, y).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 6.0]);
        // W is a constant; its gradient slot stays zero.
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_runs_once_and_only_after_request() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0]);
        let m = tape.mean_sq(a).unwrap();
        assert!(matches!(tape.grad(a), Err(AutodiffError::BackwardNotRun)));
        tape.backward(m).unwrap();
        assert!(matches!(
            tape.backward(m),
            Err(AutodiffError::BackwardTwice)
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(a),
            Err(AutodiffError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = mean_sq(a + a) = 4 mean_sq(a); dy/da = 8a/n.
        let mut tape = Tape::new();
        let a = vec_node(&mut tape, &[1.5, -2.0]);
        let s = tape.add(a, a).unwrap();
        let y = tape.mean_sq(s).unwrap();
        tape.backward(y).unwrap();
        assert_relative_eq!(tape.grad(a).unwrap().data()[0], 8.0 * 1.5 / 2.0);
        assert_relative_eq!(tape.grad(a).unwrap().data()[1], 8.0 * -2.0 / 2.0);
    }

    #[test]
    fn identical_builds_give_bitwise_identical_gradients() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.var(Tensor::vector(&[0.3, -1.2, 2.7]).unwrap());
            let w = tape.var(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.1, 0.0, -0.2]).unwrap());
            let h = tape.matvec(w, a).unwrap();
            let t = tape.tanh(h);
            let y = tape.mean_sq(t).unwrap();
            tape.backward(y).unwrap();
            (
                tape.grad(a).unwrap().data().to_vec(),
                tape.grad(w).unwrap().data().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }
}
