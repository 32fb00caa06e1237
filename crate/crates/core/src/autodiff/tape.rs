//! Dynamic reverse-mode differentiation tape.
//!
//! A `Tape` records operations eagerly as a Wengert list: every call computes
//! the forward value immediately and appends a node whose parents are earlier
//! node ids, so the graph is acyclic by construction. `backward` replays the
//! list in reverse, accumulating vector-Jacobian products.
//!
//! The tape is rebuilt per forward pass and owned by a single evaluation; it
//! never outlives a batch step. All arithmetic is f64.

use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};

/// Arguments of natural log are clamped at this floor to keep the tape finite.
pub const LN_CLAMP: f64 = 1e-12;

/// Identifier of a node on the tape. Ids increase from inputs to outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sigmoid(NodeId),
    Elu(NodeId),
    Pow(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Trace(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    RepeatRows(NodeId, usize),
    TileRows(NodeId, usize),
    Reshape(NodeId),
    /// Definite integral from 0 to `x` per row, with the fundamental-theorem
    /// shortcut for the upper-limit derivative: parents are the upper limits
    /// `x` (vector), the integrand values at the scaled quadrature nodes
    /// (matrix, one row per integral) and the integrand at the upper limit
    /// (vector). d(out)/dx = fx exactly; gradients w.r.t. the node values flow
    /// through the weighted sum; fx receives no gradient from this op.
    QuadratureFtc {
        x: NodeId,
        fvals: NodeId,
        fx: NodeId,
        weights: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar root with respect to tape nodes.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at `id`, or `None` if the node is not on a path to the root.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

/// The Wengert list. Single-owner during a forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaves: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Register a differentiable input (parameter or data) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.leaves.push(id);
        id
    }

    /// Register a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Forward value at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    // --- elementwise binary ---

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.require_same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.require_same_shape(vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.require_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if va.shape().len() != 2 || vr.shape().len() != 1 || va.cols() != vr.shape()[0] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = va.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vr.data()[j];
            }
        }
        Ok(self.push(Op::AddRow(a, row), Tensor::matrix(r, c, data)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    // --- elementwise unary ---

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    /// Natural log with the argument clamped at `LN_CLAMP`.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(LN_CLAMP).ln());
        self.push(Op::Ln(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(elu);
        self.push(Op::Elu(a), value)
    }

    /// Elementwise power with constant exponent. Integer exponents use exact
    /// integer powers so negative bases are handled.
    pub fn pow(&mut self, a: NodeId, p: f64) -> NodeId {
        let value = self.value(a).map(|v| powc(v, p));
        self.push(Op::Pow(a, p), value)
    }

    // --- reductions ---

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let n = v.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 || v.rows() != v.cols() {
            return Err(Error::Shape { op: "trace", lhs: v.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        let t = super::tensor::trace(v);
        Ok(self.push(Op::Trace(a), Tensor::scalar(t)))
    }

    /// (I + alpha*A)^p by repeated multiplication, trace, minus the dimension.
    pub fn acyclicity(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 || v.rows() != v.cols() {
            return Err(Error::Shape { op: "acyclicity", lhs: v.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        let d = v.rows();
        let eye = self.constant(Tensor::identity(d));
        let scaled = self.scale(a, alpha);
        let m = self.add(eye, scaled)?;
        let mut acc = m;
        for _ in 1..d {
            acc = self.matmul(acc, m)?;
        }
        let tr = self.trace(acc)?;
        let dim = self.constant_scalar(d as f64);
        self.sub(tr, dim)
    }

    // --- structural ---

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        Ok(self.push(Op::ConcatCols(a, b), Tensor::matrix(r, ca + cb, data)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (ra, rb, c) = (va.rows(), vb.rows(), va.cols());
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        Ok(self.push(Op::ConcatRows(a, b), Tensor::matrix(ra + rb, c, data)))
    }

    /// Repeat each row `k` times, keeping copies of a row adjacent:
    /// output row `r*k + j` equals input row `r`.
    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::Shape { op: "repeat_rows", lhs: va.shape().to_vec(), rhs: vec![] });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                data.extend_from_slice(va.row(i));
            }
        }
        Ok(self.push(Op::RepeatRows(a, k), Tensor::matrix(r * k, c, data)))
    }

    /// Stack `k` copies of the whole matrix: output row `j*R + r` equals
    /// input row `r`.
    pub fn tile_rows(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::Shape { op: "tile_rows", lhs: va.shape().to_vec(), rhs: vec![] });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(r * k * c);
        for _ in 0..k {
            data.extend_from_slice(va.data());
        }
        Ok(self.push(Op::TileRows(a, k), Tensor::matrix(r * k, c, data)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.numel() {
            return Err(Error::Shape { op: "reshape", lhs: va.shape().to_vec(), rhs: shape });
        }
        let value = va.reshaped(shape);
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Row-wise quadrature of an integrand from 0 to `x`, with the
    /// upper-limit derivative supplied by `fx` (fundamental theorem of
    /// calculus) instead of differentiating node positions.
    ///
    /// `x`: [r] upper limits; `fvals`: [r, n] integrand at the scaled nodes;
    /// `fx`: [r] integrand at the upper limits; `weights`: quadrature weights
    /// on [-1, 1]. Values are `z_r = x_r/2 * sum_k w_k fvals[r,k]`.
    pub fn quadrature_ftc(
        &mut self,
        x: NodeId,
        fvals: NodeId,
        fx: NodeId,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        let (vx, vf, vfx) = (self.value(x), self.value(fvals), self.value(fx));
        if vx.shape().len() != 1
            || vf.shape().len() != 2
            || vf.rows() != vx.shape()[0]
            || vf.cols() != weights.len()
            || vfx.shape() != vx.shape()
        {
            return Err(Error::Shape {
                op: "quadrature_ftc",
                lhs: vx.shape().to_vec(),
                rhs: vf.shape().to_vec(),
            });
        }
        let r = vx.shape()[0];
        let n = weights.len();
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &vf.data()[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(&weights).map(|(f, w)| f * w).sum();
            out[i] = vx.data()[i] * 0.5 * s;
        }
        Ok(self.push(Op::QuadratureFtc { x, fvals, fx, weights }, Tensor::vector(out)))
    }

    // --- backward ---

    /// Gradients of the scalar `root` with respect to every node. Leaves not
    /// on a path to the root receive zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Unreached leaves get explicit zeros.
        for &leaf in &self.leaves {
            if grads[leaf.0].is_none() {
                grads[leaf.0] = Some(Tensor::zeros(self.value(leaf).shape()));
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                );
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Scale(a, c) => add_to(grads, *a, g.map(|v| v * c)),
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let (r, c) = (g.rows(), g.cols());
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        acc[j] += g.data()[i * c + j];
                    }
                }
                add_to(grads, *row, Tensor::vector(acc));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match (va.shape().len(), vb.shape().len()) {
                    (2, 2) => {
                        let da = matmul(g, &vb.transposed()).expect("backward matmul");
                        let db = matmul(&va.transposed(), g).expect("backward matmul");
                        add_to(grads, *a, da);
                        add_to(grads, *b, db);
                    }
                    (2, 1) => {
                        // a: [m,k], b: [k], g: [m]
                        let (m, k) = (va.rows(), va.cols());
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let gi = g.data()[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                da[i * k + j] = gi * vb.data()[j];
                            }
                        }
                        let mut db = vec![0.0; k];
                        for i in 0..m {
                            let gi = g.data()[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                db[j] += va.data()[i * k + j] * gi;
                            }
                        }
                        add_to(grads, *a, Tensor::matrix(m, k, da));
                        add_to(grads, *b, Tensor::vector(db));
                    }
                    (1, 2) => {
                        // a: [k], b: [k,n], g: [n]
                        let (k, n) = (vb.rows(), vb.cols());
                        let mut da = vec![0.0; k];
                        for i in 0..k {
                            da[i] = vb.row(i).iter().zip(g.data()).map(|(x, y)| x * y).sum();
                        }
                        let mut db = vec![0.0; k * n];
                        for i in 0..k {
                            let ai = va.data()[i];
                            if ai == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[i * n + j] = ai * g.data()[j];
                            }
                        }
                        add_to(grads, *a, Tensor::vector(da));
                        add_to(grads, *b, Tensor::matrix(k, n, db));
                    }
                    _ => unreachable!("matmul shapes validated at record time"),
                }
            }
            Op::Exp(a) => {
                let v = &self.nodes[idx].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(v.data()).map(|(x, y)| x * y).collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(x, y)| if *y > LN_CLAMP { x / y } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let v = &self.nodes[idx].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(v.data())
                        .map(|(x, s)| x * s * (1.0 - s))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Elu(a) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(x, y)| if *y > 0.0 { *x } else { x * y.exp() })
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Pow(a, p) => {
                let va = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(x, y)| x * p * powc(*y, p - 1.0))
                        .collect(),
                );
                add_to(grads, *a, da);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                add_to(grads, *a, Tensor::filled(va.shape(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let n = va.numel() as f64;
                add_to(grads, *a, Tensor::filled(va.shape(), g.item() / n));
            }
            Op::Trace(a) => {
                let d = self.value(*a).rows();
                let mut da = Tensor::zeros(&[d, d]);
                let gi = g.item();
                for i in 0..d {
                    da.set(i, i, gi);
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let r = g.rows();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                add_to(grads, *a, Tensor::matrix(r, ca, da));
                add_to(grads, *b, Tensor::matrix(r, cb, db));
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let c = g.cols();
                let da = Tensor::matrix(ra, c, g.data()[..ra * c].to_vec());
                let rb = g.rows() - ra;
                let db = Tensor::matrix(rb, c, g.data()[ra * c..].to_vec());
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::RepeatRows(a, k) => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for rep in 0..*k {
                        let grow = g.row(i * k + rep);
                        for j in 0..c {
                            da[i * c + j] += grow[j];
                        }
                    }
                }
                add_to(grads, *a, Tensor::matrix(r, c, da));
            }
            Op::TileRows(a, k) => {
                let va = self.value(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for rep in 0..*k {
                    for i in 0..r {
                        let grow = g.row(rep * r + i);
                        for j in 0..c {
                            da[i * c + j] += grow[j];
                        }
                    }
                }
                add_to(grads, *a, Tensor::matrix(r, c, da));
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                add_to(grads, *a, g.reshaped(va.shape().to_vec()));
            }
            Op::QuadratureFtc { x, fvals, fx, weights } => {
                let vx = self.value(*x);
                let vfx = self.value(*fx);
                let r = vx.shape()[0];
                let n = weights.len();
                let dx = Tensor::vector(
                    g.data().iter().zip(vfx.data()).map(|(gi, f)| gi * f).collect(),
                );
                let mut df = vec![0.0; r * n];
                for i in 0..r {
                    let gi = g.data()[i];
                    let xi = vx.data()[i];
                    for (j, w) in weights.iter().enumerate() {
                        df[i * n + j] = gi * xi * 0.5 * w;
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *fvals, Tensor::matrix(r, n, df));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn powc(base: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        base.powi(p as i32)
    } else {
        base.powf(p)
    }
}
