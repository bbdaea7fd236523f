//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each intermediate tensor of a forward computation as a
//! node tagged with the operation that produced it. [`Tape::backward`] walks
//! the nodes in reverse, applying each op's vector-Jacobian product, and
//! returns the gradients for every trainable leaf. Nodes can only reference
//! earlier nodes, so the recording order is already a topological order.
//!
//! The op set is deliberately small: dense matmul, elementwise arithmetic,
//! gathers (which cover im2col convolution, nearest-neighbor upsampling, and
//! padding), the few nonlinearities the networks use, and the reductions the
//! losses need. Gradients are exact; a finite-difference oracle in the test
//! suite cross-checks every network and loss built on top.
//!
//! Gradient flow is controlled at the leaves: a leaf inserted with
//! `trainable = false` participates in the forward value but never receives a
//! gradient, which is how the training phases freeze the networks they are
//! not updating.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Smallest probability passed to the logarithm in loss paths; keeps
/// `ln` finite when a softmax underflows.
pub const LN_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    /// `out[r][c] = m[r][c] + v[c]` — bias addition over rows.
    AddRowBroadcast(NodeId, NodeId),
    Reshape(NodeId),
    /// `out.row[k] = in.row[rows[k]]` on rank-2 tensors.
    RowGather(NodeId, Arc<Vec<usize>>),
    /// Flat-index gather with zero padding: `out[k] = in[idx[k]]`, `idx[k] < 0`
    /// meaning a literal zero. Covers im2col patch extraction.
    GatherPad { src: NodeId, idx: Arc<Vec<i64>> },
    Tanh(NodeId),
    /// Clamp into [0, 1]; gradient passes where the input lies in [0, 1].
    Clamp01(NodeId),
    /// `x^p` elementwise. Recorded only with inputs strictly positive when
    /// `p < 1` (enforced at record time).
    PowConst(NodeId, f64),
    /// `max(x, c)` elementwise; gradient passes where `x > c`.
    MaxConst(NodeId, f64),
    /// `min(x, c)` elementwise; gradient passes where `x < c`.
    MinConst(NodeId, f64),
    /// Tensor times a rank-0 node.
    MulScalar(NodeId, NodeId),
    /// Stable softmax over a rank-1 tensor.
    Softmax(NodeId),
    Sum(NodeId),
    /// Inner product of two rank-1 tensors.
    Dot(NodeId, NodeId),
    /// Single element of a rank-1 tensor as a rank-0 node.
    Index(NodeId, usize),
    /// `ln(max(x, LN_FLOOR))` elementwise.
    LnClamped(NodeId),
    /// Stable log-sum-exp of a rank-1 tensor.
    LogSumExp(NodeId),
    /// Rank-1 tensor assembled from rank-0 nodes.
    Stack(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
    /// True if this node is a trainable leaf or depends on one.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to the given node, if it was tracked.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Move the gradient out, leaving `None` behind.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Insert a leaf holding `value`. Gradients are computed for a leaf only
    /// when `trainable` is true.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(Op::Leaf, value, trainable)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn check(&self, id: NodeId, ctx: &str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Shape(format!("{ctx}: node id {id} not on tape")));
        }
        Ok(())
    }

    // ---- recorded operations -------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "sub")?;
        self.check(b, "sub")?;
        let v = self.nodes[a].value.sub(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let v = self.nodes[a].value.mul(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "scale")?;
        let v = self.nodes[a].value.scale(c)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Scale(a, c), v, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), v, ng))
    }

    /// Add a rank-1 bias `v` to every row of a rank-2 tensor `m`.
    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(m, "add_row_broadcast")?;
        self.check(v, "add_row_broadcast")?;
        let mv = &self.nodes[m].value;
        let vv = &self.nodes[v].value;
        if mv.rank() != 2 || vv.rank() != 1 || mv.shape()[1] != vv.shape()[0] {
            return Err(Error::Shape(format!(
                "add_row_broadcast: {:?} + {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let cols = vv.shape()[0];
        let mut data = Vec::with_capacity(mv.len());
        for row in mv.data().chunks_exact(cols) {
            for (a, b) in row.iter().zip(vv.data()) {
                data.push(a + b);
            }
        }
        let out = Tensor::from_vec(mv.shape(), data)?;
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(Op::AddRowBroadcast(m, v), out, ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a, "reshape")?;
        let v = self.nodes[a].value.reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    /// Reorder/duplicate rows of a rank-2 tensor.
    pub fn row_gather(&mut self, a: NodeId, rows: Arc<Vec<usize>>) -> Result<NodeId> {
        self.check(a, "row_gather")?;
        let av = &self.nodes[a].value;
        if av.rank() != 2 {
            return Err(Error::Shape(format!("row_gather: rank-2 input required, got {:?}", av.shape())));
        }
        let (n, c) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            if r >= n {
                return Err(Error::Shape(format!("row_gather: row {r} out of {n}")));
            }
            data.extend_from_slice(&av.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::from_vec(&[rows.len(), c], data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::RowGather(a, rows), out, ng))
    }

    /// Gather by flat element index into an output of the given shape;
    /// negative indices produce zeros (used for conv padding).
    pub fn gather_pad(&mut self, src: NodeId, idx: Arc<Vec<i64>>, shape: &[usize]) -> Result<NodeId> {
        self.check(src, "gather_pad")?;
        let sv = &self.nodes[src].value;
        let want: usize = shape.iter().product();
        if idx.len() != want {
            return Err(Error::Shape(format!(
                "gather_pad: index list has {} entries for shape {shape:?}",
                idx.len()
            )));
        }
        let n = sv.len() as i64;
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::Shape(format!("gather_pad: index {i} out of {n}")));
            }
            data.push(if i < 0 { 0.0 } else { sv.data()[i as usize] });
        }
        let out = Tensor::from_vec(shape, data)?;
        let ng = self.needs(src);
        Ok(self.push(Op::GatherPad { src, idx }, out, ng))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "tanh")?;
        let v = self.map_values(a, |x| x.tanh());
        let ng = self.needs(a);
        Ok(self.push(Op::Tanh(a), v, ng))
    }

    pub fn clamp01(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "clamp01")?;
        let v = self.map_values(a, |x| x.clamp(0.0, 1.0));
        let ng = self.needs(a);
        Ok(self.push(Op::Clamp01(a), v, ng))
    }

    /// Elementwise power with a constant exponent. For `p < 1` every input
    /// entry must be strictly positive (the derivative would blow up at 0).
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.check(a, "pow_const")?;
        if p < 1.0 && self.nodes[a].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(format!(
                "pow_const: exponent {p} requires strictly positive inputs"
            )));
        }
        let v = self.map_values(a, |x| x.powf(p));
        v.assert_finite("pow_const")?;
        let ng = self.needs(a);
        Ok(self.push(Op::PowConst(a, p), v, ng))
    }

    pub fn max_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "max_const")?;
        let v = self.map_values(a, |x| x.max(c));
        let ng = self.needs(a);
        Ok(self.push(Op::MaxConst(a, c), v, ng))
    }

    pub fn min_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a, "min_const")?;
        let v = self.map_values(a, |x| x.min(c));
        let ng = self.needs(a);
        Ok(self.push(Op::MinConst(a, c), v, ng))
    }

    /// Multiply a tensor by a rank-0 node.
    pub fn mul_scalar(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(t, "mul_scalar")?;
        self.check(s, "mul_scalar")?;
        let sv = self.nodes[s].value.scalar_value()?;
        let v = self.nodes[t].value.scale(sv)?;
        let ng = self.needs(t) || self.needs(s);
        Ok(self.push(Op::MulScalar(t, s), v, ng))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "softmax")?;
        let av = &self.nodes[a].value;
        if av.rank() != 1 || av.is_empty() {
            return Err(Error::Shape(format!("softmax: non-empty rank-1 input required, got {:?}", av.shape())));
        }
        let m = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.data().iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let v = Tensor::from_vec(av.shape(), exps.iter().map(|e| e / z).collect())?;
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a), v, ng))
    }

    /// Sum of all entries as a rank-0 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "sum")?;
        let v = Tensor::scalar(self.nodes[a].value.sum());
        v.assert_finite("sum")?;
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a), v, ng))
    }

    /// Inner product of two rank-1 tensors as a rank-0 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "dot")?;
        self.check(b, "dot")?;
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        if av.rank() != 1 || bv.rank() != 1 || av.len() != bv.len() {
            return Err(Error::Shape(format!("dot: {:?} . {:?}", av.shape(), bv.shape())));
        }
        let v = Tensor::scalar(av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum());
        v.assert_finite("dot")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot(a, b), v, ng))
    }

    /// Single element of a rank-1 tensor as a rank-0 node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.check(a, "index")?;
        let av = &self.nodes[a].value;
        if av.rank() != 1 || i >= av.len() {
            return Err(Error::Shape(format!("index: position {i} in {:?}", av.shape())));
        }
        let v = Tensor::scalar(av.data()[i]);
        let ng = self.needs(a);
        Ok(self.push(Op::Index(a, i), v, ng))
    }

    /// Elementwise `ln(max(x, LN_FLOOR))` — the logarithm used in loss paths.
    pub fn ln_clamped(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "ln_clamped")?;
        let v = self.map_values(a, |x| x.max(LN_FLOOR).ln());
        v.assert_finite("ln_clamped")?;
        let ng = self.needs(a);
        Ok(self.push(Op::LnClamped(a), v, ng))
    }

    /// Stable log-sum-exp of a rank-1 tensor as a rank-0 node.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "logsumexp")?;
        let av = &self.nodes[a].value;
        if av.rank() != 1 || av.is_empty() {
            return Err(Error::Shape(format!("logsumexp: non-empty rank-1 input required, got {:?}", av.shape())));
        }
        let m = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.data().iter().map(|x| (x - m).exp()).sum();
        let v = Tensor::scalar(m + s.ln());
        v.assert_finite("logsumexp")?;
        let ng = self.needs(a);
        Ok(self.push(Op::LogSumExp(a), v, ng))
    }

    /// Rank-1 tensor assembled from rank-0 nodes.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            self.check(p, "stack")?;
            data.push(self.nodes[p].value.scalar_value()?);
            ng = ng || self.needs(p);
        }
        let v = Tensor::from_vec(&[parts.len()], data)?;
        Ok(self.push(Op::Stack(parts.to_vec()), v, ng))
    }

    fn map_values(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let av = &self.nodes[a].value;
        Tensor::from_vec(av.shape(), av.data().iter().map(|x| f(*x)).collect())
            .expect("map over finite tensor")
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from `out`, seeded with cotangent `seed` (use a
    /// rank-0 `1.0` for a plain scalar loss). Returns gradients for every
    /// trainable leaf reachable from `out`; gradients are exact.
    pub fn backward(&self, out: NodeId, seed: Tensor) -> Result<Gradients> {
        self.check(out, "backward")?;
        if seed.shape() != self.nodes[out].value.shape() {
            return Err(Error::Shape(format!(
                "backward: seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[out].value.shape()
            )));
        }
        seed.assert_finite("backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[out].needs_grad {
            grads[out] = Some(seed);
        }
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep: this is a requested gradient
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone())?;
                    self.acc(&mut grads, *b, g.scale(-1.0)?)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[*b].value)?;
                    let gb = g.mul(&self.nodes[*a].value)?;
                    self.acc(&mut grads, *a, ga)?;
                    self.acc(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => {
                    self.acc(&mut grads, *a, g.scale(*c)?)?;
                }
                Op::Matmul(a, b) => {
                    // d/dA (A B) = G B^T,   d/dB (A B) = A^T G
                    if self.needs(*a) {
                        let bt = transpose(&self.nodes[*b].value);
                        self.acc(&mut grads, *a, g.matmul(&bt)?)?;
                    }
                    if self.needs(*b) {
                        let at = transpose(&self.nodes[*a].value);
                        self.acc(&mut grads, *b, at.matmul(&g)?)?;
                    }
                }
                Op::AddRowBroadcast(m, v) => {
                    if self.needs(*v) {
                        let cols = self.nodes[*v].value.len();
                        let mut col_sum = vec![0.0; cols];
                        for row in g.data().chunks_exact(cols) {
                            for (s, x) in col_sum.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                        self.acc(&mut grads, *v, Tensor::from_vec(&[cols], col_sum)?)?;
                    }
                    self.acc(&mut grads, *m, g)?;
                }
                Op::Reshape(a) => {
                    let back = g.reshaped(self.nodes[*a].value.shape())?;
                    self.acc(&mut grads, *a, back)?;
                }
                Op::RowGather(a, rows) => {
                    if self.needs(*a) {
                        let src = &self.nodes[*a].value;
                        let c = src.shape()[1];
                        let mut acc = Tensor::zeros(src.shape());
                        for (k, &r) in rows.iter().enumerate() {
                            let grow = &g.data()[k * c..(k + 1) * c];
                            let arow = &mut acc.data_mut()[r * c..(r + 1) * c];
                            for (s, x) in arow.iter_mut().zip(grow) {
                                *s += x;
                            }
                        }
                        self.acc(&mut grads, *a, acc)?;
                    }
                }
                Op::GatherPad { src, idx } => {
                    if self.needs(*src) {
                        let mut acc = Tensor::zeros(self.nodes[*src].value.shape());
                        let ad = acc.data_mut();
                        for (k, &i) in idx.iter().enumerate() {
                            if i >= 0 {
                                ad[i as usize] += g.data()[k];
                            }
                        }
                        self.acc(&mut grads, *src, acc)?;
                    }
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - tanh^2, using the stored output value
                    let y = &self.nodes[id].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(y.shape(), data)?)?;
                }
                Op::Clamp01(a) => {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if (0.0..=1.0).contains(xi) { *gi } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::PowConst(a, p) => {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| gi * p * xi.powf(p - 1.0))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::MaxConst(a, c) => {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if xi > c { *gi } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::MinConst(a, c) => {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if xi < c { *gi } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::MulScalar(t, s) => {
                    if self.needs(*t) {
                        let sv = self.nodes[*s].value.scalar_value()?;
                        self.acc(&mut grads, *t, g.scale(sv)?)?;
                    }
                    if self.needs(*s) {
                        let tv = &self.nodes[*t].value;
                        let ds: f64 = g.data().iter().zip(tv.data()).map(|(x, y)| x * y).sum();
                        self.acc(&mut grads, *s, Tensor::scalar(ds))?;
                    }
                }
                Op::Softmax(a) => {
                    // dx = y * (g - <g, y>)
                    let y = &self.nodes[id].value;
                    let inner: f64 = g.data().iter().zip(y.data()).map(|(x, w)| x * w).sum();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| yi * (gi - inner))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(y.shape(), data)?)?;
                }
                Op::Sum(a) => {
                    let gv = g.scalar_value()?;
                    let shape = self.nodes[*a].value.shape().to_vec();
                    self.acc(&mut grads, *a, Tensor::filled(&shape, gv))?;
                }
                Op::Dot(a, b) => {
                    let gv = g.scalar_value()?;
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, self.nodes[*b].value.scale(gv)?)?;
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, self.nodes[*a].value.scale(gv)?)?;
                    }
                }
                Op::Index(a, i) => {
                    if self.needs(*a) {
                        let mut acc = Tensor::zeros(self.nodes[*a].value.shape());
                        acc.data_mut()[*i] = g.scalar_value()?;
                        self.acc(&mut grads, *a, acc)?;
                    }
                }
                Op::LnClamped(a) => {
                    let x = &self.nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if *xi > LN_FLOOR { gi / xi } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::LogSumExp(a) => {
                    // d logsumexp = softmax(x)
                    let x = &self.nodes[*a].value;
                    let gv = g.scalar_value()?;
                    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let data = exps.iter().map(|e| gv * e / z).collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(x.shape(), data)?)?;
                }
                Op::Stack(parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        self.acc(&mut grads, p, Tensor::scalar(g.data()[k]))?;
                    }
                }
            }
        }
        // Drop gradients for non-trainable leaves that may have accumulated.
        for (id, slot) in grads.iter_mut().enumerate() {
            if slot.is_some() && !matches!(self.nodes[id].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.nodes[id].needs_grad {
            return Ok(());
        }
        delta.assert_finite("backward")?;
        match &mut grads[id] {
            Some(t) => t.add_scaled(&delta, 1.0)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (n, m) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..m {
            od[j * n + i] = t.data()[i * m + j];
        }
    }
    out
}

/// Plain gradient-descent update: `p -= lr * g` for each parameter/gradient
/// pair. Gradients must be finite and shape-aligned with the parameters.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        g.assert_finite("sgd_step gradient")?;
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}
