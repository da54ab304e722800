//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Each recorded operation
//! computes its value eagerly; [`Tape::backward`] then sweeps the tape in
//! reverse, applying each op's adjoint rule and summing contributions when a
//! node feeds several consumers. Nodes created with [`Tape::constant`] (inputs
//! such as feature maps) do not receive gradients, and neither does anything
//! computed purely from constants.
//!
//! ```
//! use attnpool::autograd::Tape;
//! use attnpool::tensor::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Matrix::row_vector(&[1.0, 2.0, 3.0]).unwrap());
//! let loss = tape.sum(w).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::sketch::circular_convolve;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node, carrying any non-differentiable operands.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable input.
    Leaf,
    /// Fixed input; never receives a gradient.
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Scale(f64),
    /// Elementwise product of two same-shape matrices.
    Mul,
    Relu,
    /// Full reduction to a `1×1` value.
    Sum,
    /// `Σ_rows logsumexp(z_r) − z_r[label_r]` over a `m×K` logit matrix.
    SoftmaxCrossEntropy(Vec<usize>),
    /// `Σ max(z,0) − z·t + log1p(exp(−|z|))` with targets `t` of the logits' shape.
    SigmoidCrossEntropy(Matrix),
    /// `Σ x²`.
    SumSquares,
    /// Row-wise circular convolution of two `n×d` matrices.
    CircularConv,
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Scale(_) => "scale",
            Op::Mul => "elementwise_mul",
            Op::Relu => "relu",
            Op::Sum => "sum",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::SigmoidCrossEntropy(_) => "sigmoid_cross_entropy",
            Op::SumSquares => "sum_squares",
            Op::CircularConv => "circular_conv",
        }
    }

    /// Parses the tag of an operand-free op.
    pub fn from_tag(tag: &str) -> Result<Op> {
        Ok(match tag {
            "matmul" => Op::MatMul,
            "transpose" => Op::Transpose,
            "add" => Op::Add,
            "subtract" => Op::Sub,
            "elementwise_mul" => Op::Mul,
            "relu" => Op::Relu,
            "sum" => Op::Sum,
            "sum_squares" => Op::SumSquares,
            "circular_conv" => Op::CircularConv,
            other => return Err(Error::Invalid(format!("unknown op tag `{other}`"))),
        })
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf | Op::Constant => 0,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::CircularConv => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    value: Matrix,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
    grad: Option<Matrix>,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }
    pub fn value(&self) -> &Matrix {
        &self.value
    }
    pub fn op(&self) -> &Op {
        &self.op
    }
    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }
    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last [`backward`](Tape::backward) loss w.r.t. `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant, Vec::new(), false)
    }

    fn push(&mut self, value: Matrix, op: Op, parents: Vec<NodeId>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            value,
            op,
            parents,
            requires_grad,
            grad: None,
        });
        id
    }

    /// Records `op` applied to `inputs`, computing its value.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op.arity() == 0 {
            return Err(Error::Invalid(format!(
                "`{}` nodes are created with leaf()/constant(), not record()",
                op.tag()
            )));
        }
        if inputs.len() != op.arity() {
            return Err(Error::Invalid(format!(
                "`{}` takes {} inputs, got {}",
                op.tag(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Invalid(format!(
                "input node {} is not on the tape (len {})",
                bad.0,
                self.nodes.len()
            )));
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad))
    }

    fn forward(&self, op: &Op, inputs: &[NodeId]) -> Result<Matrix> {
        let a = self.value(inputs[0]);
        let b = inputs.get(1).map(|&id| self.value(id));
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("checked by record"),
            Op::MatMul => a.matmul(b.unwrap())?,
            Op::Transpose => a.transpose(),
            Op::Add => a.add(b.unwrap())?,
            Op::Sub => a.sub(b.unwrap())?,
            Op::Scale(alpha) => a.scale(*alpha),
            Op::Mul => a.hadamard(b.unwrap())?,
            Op::Relu => a.map(|v| v.max(0.0)),
            Op::Sum => Matrix::filled(1, 1, a.sum()),
            Op::SumSquares => Matrix::filled(1, 1, a.data().iter().map(|v| v * v).sum()),
            Op::SoftmaxCrossEntropy(labels) => {
                check_labels(a, labels)?;
                let mut total = 0.0;
                for (r, &y) in labels.iter().enumerate() {
                    let z = a.row(r);
                    total += log_sum_exp(z) - z[y];
                }
                Matrix::filled(1, 1, total)
            }
            Op::SigmoidCrossEntropy(targets) => {
                if targets.dims() != a.dims() {
                    return Err(Error::shape("sigmoid_cross_entropy", &a.dims(), &targets.dims()));
                }
                let total = a
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                    .sum();
                Matrix::filled(1, 1, total)
            }
            Op::CircularConv => {
                let b = b.unwrap();
                if a.dims() != b.dims() {
                    return Err(Error::shape("circular_conv", &a.dims(), &b.dims()));
                }
                let d = a.cols();
                let mut out = Vec::with_capacity(a.len());
                for r in 0..a.rows() {
                    out.extend(circular_convolve(a.row(r), b.row(r)));
                }
                Matrix::from_raw(a.rows(), d, out)
            }
        })
    }

    /// Back-propagates from the scalar `loss`, populating the gradient of
    /// every node that depends on a leaf. Leaves the loss does not depend on
    /// get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let dims = self.value(loss).dims();
        if dims != [1, 1] {
            return Err(Error::Invalid(format!(
                "backward needs a scalar (1\u{d7}1) loss, got {}\u{d7}{}",
                dims[0], dims[1]
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                let contributions = self.adjoint(node, &g)?;
                for (parent, contrib) in node.parents.iter().zip(contributions) {
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&contrib)?,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())))
            } else {
                None
            };
        }
        Ok(())
    }

    fn adjoint(&self, node: &Node, g: &Matrix) -> Result<Vec<Matrix>> {
        let p = &node.parents;
        let val = |i: usize| self.value(p[i]);
        Ok(match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul => vec![g.matmul(&val(1).transpose())?, val(0).transpose().matmul(g)?],
            Op::Transpose => vec![g.transpose()],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.scale(-1.0)],
            Op::Scale(alpha) => vec![g.scale(*alpha)],
            Op::Mul => vec![g.hadamard(val(1))?, g.hadamard(val(0))?],
            Op::Relu => {
                let x = val(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Matrix::from_raw(x.rows(), x.cols(), data)]
            }
            Op::Sum => {
                let x = val(0);
                vec![Matrix::filled(x.rows(), x.cols(), g.data()[0])]
            }
            Op::SumSquares => vec![val(0).scale(2.0 * g.data()[0])],
            Op::SoftmaxCrossEntropy(labels) => {
                let z = val(0);
                let scale = g.data()[0];
                let mut out = Vec::with_capacity(z.len());
                for (r, &y) in labels.iter().enumerate() {
                    let row = z.row(r);
                    let lse = log_sum_exp(row);
                    for (c, &v) in row.iter().enumerate() {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        out.push(scale * ((v - lse).exp() - onehot));
                    }
                }
                vec![Matrix::from_raw(z.rows(), z.cols(), out)]
            }
            Op::SigmoidCrossEntropy(targets) => {
                let z = val(0);
                let scale = g.data()[0];
                let data = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&zv, &t)| scale * (sigmoid(zv) - t))
                    .collect();
                vec![Matrix::from_raw(z.rows(), z.cols(), data)]
            }
            Op::CircularConv => {
                let (u, v) = (val(0), val(1));
                let (n, d) = (u.rows(), u.cols());
                let mut du = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                for r in 0..n {
                    let (ur, vr, gr) = (u.row(r), v.row(r), g.row(r));
                    for j in 0..d {
                        let mut acc_u = 0.0;
                        let mut acc_v = 0.0;
                        for k in 0..d {
                            acc_u += gr[k] * vr[(k + d - j) % d];
                            acc_v += ur[k] * gr[(k + j) % d];
                        }
                        du[r * d + j] = acc_u;
                        dv[r * d + j] = acc_v;
                    }
                }
                vec![Matrix::from_raw(n, d, du), Matrix::from_raw(n, d, dv)]
            }
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose, &[a])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.record(Op::Scale(alpha), &[a])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum, &[a])
    }
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SumSquares, &[a])
    }
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(Op::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, targets: &Matrix) -> Result<NodeId> {
        self.record(Op::SigmoidCrossEntropy(targets.clone()), &[logits])
    }
    pub fn circular_conv(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::CircularConv, &[a, b])
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("softmax_cross_entropy", &logits.dims(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one row of logits.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` records a scalar loss on a fresh tape given one leaf per entry of
/// `params`. Returns `max |analytic − numeric| / (1 + |numeric|)` over every
/// parameter coordinate.
pub fn finite_diff_check<F>(build: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id).expect("leaf gradient").clone();
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            probe[pi].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / (1.0 + numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn s(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn record_examples() {
        let mut t = Tape::new();
        let x = t.leaf(s(1.0));
        let y = t.leaf(s(2.0));
        let z = t.record(Op::Add, &[x, y]).unwrap();
        assert_eq!(t.scalar(z), 3.0);

        let i = t.constant(Matrix::identity(3));
        let v = t.leaf(Matrix::column(&[1.0, -2.0, 5.0]).unwrap());
        let iv = t.record(Op::MatMul, &[i, v]).unwrap();
        assert_eq!(t.value(iv), t.value(v));

        let neg = t.leaf(s(-1.0));
        let r = t.record(Op::Relu, &[neg]).unwrap();
        assert_eq!(t.scalar(r), 0.0);
    }

    #[test]
    fn record_rejects_bad_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(s(1.0));
        assert!(t.record(Op::Add, &[x]).is_err());
        assert!(t.record(Op::Relu, &[NodeId(7)]).is_err());
        assert!(t.record(Op::Leaf, &[]).is_err());
        assert!(Op::from_tag("conv3d").is_err());
        assert_eq!(Op::from_tag("relu").unwrap(), Op::Relu);
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let a = t.leaf(s(1.0));
        let b = t.relu(a).unwrap();
        let c = t.mul(a, b).unwrap();
        for node in t.nodes() {
            for p in node.parents() {
                assert!(p.index() < node.id().index());
            }
        }
        assert_eq!(c.index(), 2);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::column(&[0.5, -1.0, 2.0]).unwrap());
        let l = t.sum(w).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn bilinear_gradient() {
        let mut rng = SplitMix64::new(11);
        let x = random(6, 4, &mut rng);
        let a = random(4, 1, &mut rng);
        let b = random(4, 1, &mut rng);
        let mut t = Tape::new();
        let xn = t.constant(x.clone());
        let an = t.leaf(a.clone());
        let bn = t.leaf(b.clone());
        let xa = t.matmul(xn, an).unwrap();
        let xb = t.matmul(xn, bn).unwrap();
        let xat = t.transpose(xa).unwrap();
        let loss = t.matmul(xat, xb).unwrap();
        t.backward(loss).unwrap();
        let expect_a = x.tmatvec(&x.matvec(b.data()).unwrap()).unwrap();
        let expect_b = x.tmatvec(&x.matvec(a.data()).unwrap()).unwrap();
        for (g, e) in t.grad(an).unwrap().data().iter().zip(&expect_a) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in t.grad(bn).unwrap().data().iter().zip(&expect_b) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(t.grad(xn).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(s(3.0));
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(s(3.0));
        let unused = t.leaf(Matrix::zeros(2, 2));
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &Matrix::zeros(2, 2));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::column(&[0.0, 1.0, -1.0]).unwrap());
        let r = t.relu(x).unwrap();
        let l = t.sum(r).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn scaled_loss_scales_gradient() {
        let mut rng = SplitMix64::new(12);
        let x = random(5, 3, &mut rng);
        let w = random(3, 4, &mut rng);
        let alpha = 0.37;
        let grad = |scale: Option<f64>| {
            let mut t = Tape::new();
            let xn = t.constant(x.clone());
            let wn = t.leaf(w.clone());
            let z = t.matmul(xn, wn).unwrap();
            let mut l = t.sum_squares(z).unwrap();
            if let Some(a) = scale {
                l = t.scale(l, a).unwrap();
            }
            t.backward(l).unwrap();
            t.grad(wn).unwrap().clone()
        };
        let g1 = grad(None);
        let ga = grad(Some(alpha));
        for (a, b) in g1.data().iter().zip(ga.data()) {
            assert!((alpha * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn finite_diff_examples() {
        let sq = finite_diff_check(|t, p| t.mul(p[0], p[0]), &[s(3.0)], 1e-5).unwrap();
        assert!(sq <= 1e-9, "{sq}");
        let constant = finite_diff_check(|t, _| Ok(t.constant(s(4.0))), &[s(1.0)], 1e-5);
        // The loss does not depend on the leaf: analytic grad 0, numeric 0.
        assert_eq!(constant.unwrap_or(0.0), 0.0);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = SplitMix64::new(13);
        for _ in 0..5 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let c = random(3, 2, &mut rng);
            let targets = Matrix::from_fn(3, 2, |_, _| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 });
            let labels = vec![rng.below(2), rng.below(2), rng.below(2)];
            let err = finite_diff_check(
                |t, p| {
                    let ab = t.matmul(p[0], p[1])?;
                    let r = t.relu(ab)?;
                    let m = t.mul(r, p[2])?;
                    let d = t.sub(m, p[2])?;
                    let e = t.add(d, ab)?;
                    let sc = t.scale(e, 0.5)?;
                    let ce = t.softmax_cross_entropy(sc, &labels)?;
                    let bce = t.sigmoid_cross_entropy(e, &targets)?;
                    let sq = t.sum_squares(p[2])?;
                    let tr = t.transpose(p[2])?;
                    let trs = t.sum(tr)?;
                    let l1 = t.add(ce, bce)?;
                    let l2 = t.add(sq, trs)?;
                    t.add(l1, l2)
                },
                &[a, b, c],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "max rel err {err}");
        }
    }

    #[test]
    fn circular_conv_gradient() {
        let mut rng = SplitMix64::new(14);
        let u = random(2, 5, &mut rng);
        let v = random(2, 5, &mut rng);
        let w = random(5, 1, &mut rng);
        let err = finite_diff_check(
            |t, p| {
                let c = t.circular_conv(p[0], p[1])?;
                let z = t.matmul(c, p[2])?;
                t.sum_squares(z)
            },
            &[u, v, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::row_vector(&[1000.0, -1000.0]).unwrap());
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        let b = t
            .sigmoid_cross_entropy(z, &Matrix::row_vector(&[1.0, 0.0]).unwrap())
            .unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
        assert!(t.scalar(b).abs() < 1e-12);
        t.backward(l).unwrap();
        assert!(t.grad(z).unwrap().is_finite());
    }
}
