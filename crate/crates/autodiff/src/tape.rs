//! Tape-based reverse-mode automatic differentiation over [`DenseArray`]s.
//!
//! Every operation on a recording [`Tape`] appends a node holding its
//! inputs and output. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it. Gradient accumulation therefore happens
//! in a fixed order and repeated runs are bitwise identical.
//!
//! A tape built with [`Tape::no_grad`] records nothing; values are dropped as
//! soon as the last [`Var`] referencing them goes away.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::kernels::{self, BroadcastMap};

/// A value produced on a [`Tape`].
///
/// Untracked vars (constants, or anything built on a no-grad tape) carry no
/// node id and never receive gradients.
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    value: Arc<DenseArray>,
}

impl Var {
    pub fn value(&self) -> &DenseArray {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<DenseArray> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Reshape,
    Permute(Vec<usize>),
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    GatherRows(Arc<Vec<usize>>),
    SumAll,
    MeanAxis(usize),
    MaxLast(Vec<usize>),
    Softmax(usize),
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu,
    Sigmoid,
    Bce { targets: Arc<DenseArray>, weights: Vec<f64> },
    Elementwise(Box<dyn Fn(f64) -> f64>),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::GatherRows(_) => "gather_rows",
            Op::SumAll => "sum",
            Op::MeanAxis(_) => "mean_axis",
            Op::MaxLast(_) => "max_last",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Bce { .. } => "bce_with_logits",
            Op::Elementwise(_) => "elementwise",
        }
    }
}

struct Input {
    id: Option<usize>,
    value: Arc<DenseArray>,
}

/// One recorded operation: its backward rule, inputs and output value.
struct Node {
    op: Op,
    inputs: Vec<Input>,
    output: Arc<DenseArray>,
}

/// Records operations for a single forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&DenseArray> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<DenseArray> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing, for inference and finite differences.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tag of the backward rule recorded for `var`, if it is tracked.
    pub fn op_tag(&self, var: &Var) -> Option<&'static str> {
        var.id.map(|id| self.nodes.borrow()[id].op.tag())
    }

    /// Node ids of the inputs recorded for `var`.
    pub fn parents(&self, var: &Var) -> Vec<Option<usize>> {
        var.id
            .map(|id| self.nodes.borrow()[id].inputs.iter().map(|i| i.id).collect())
            .unwrap_or_default()
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Arc<DenseArray>) -> Var {
        if !self.recording {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            output: Arc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn var(&self, value: DenseArray) -> Var {
        self.leaf(Arc::new(value))
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: DenseArray) -> Var {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    /// A shared value that never receives gradients.
    pub fn constant_shared(&self, value: Arc<DenseArray>) -> Var {
        Var { id: None, value }
    }

    fn record(&self, op: Op, inputs: &[&Var], output: DenseArray) -> Var {
        let output = Arc::new(output);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var {
                id: None,
                value: output,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs
                .iter()
                .map(|v| Input {
                    id: v.id,
                    value: Arc::clone(&v.value),
                })
                .collect(),
            output: Arc::clone(&output),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: output,
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes of `a` and `b` must be equal, or `b` may be a plain
    /// matrix shared across every batch entry of `a`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand's last two axes.
    pub fn matmul_t(&self, a: &Var, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let geo = MatmulGeometry::new(a.shape(), b.shape(), ta, tb)?;
        let (ad, bd) = (a.value.data(), b.value.data());
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        let (sa, sb, sc) = (geo.m * geo.k, geo.k * geo.n, geo.m * geo.n);
        for i in 0..geo.batch {
            let boff = if geo.shared_b { 0 } else { i * sb };
            kernels::gemm(
                geo.m,
                geo.k,
                geo.n,
                &ad[i * sa..(i + 1) * sa],
                ta,
                &bd[boff..boff + sb],
                tb,
                0.0,
                &mut out[i * sc..(i + 1) * sc],
            );
        }
        let value = DenseArray::from_parts(geo.out_shape, out);
        Ok(self.record(Op::MatMul { ta, tb }, &[a, b], value))
    }

    fn binary(
        &self,
        op: Op,
        a: &Var,
        b: &Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = kernels::broadcast_shape(op.tag(), a.shape(), b.shape())?;
        let ma = kernels::broadcast_map(&shape, a.shape());
        let mb = kernels::broadcast_map(&shape, b.shape());
        let (ad, bd) = (a.value.data(), b.value.data());
        let n: usize = shape.iter().product();
        let data = match (&ma, &mb) {
            (BroadcastMap::Same, BroadcastMap::Same) => {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..n).map(|i| f(ad[ma.offset(i)], bd[mb.offset(i)])).collect(),
        };
        Ok(self.record(op, &[a, b], DenseArray::from_parts(shape, data)))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&self, a: &Var, factor: f64) -> Var {
        let value = a.value.map(|v| v * factor);
        self.record(Op::Scale(factor), &[a], value)
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = a.value.reshape(shape)?;
        Ok(self.record(Op::Reshape, &[a], value))
    }

    pub fn permute(&self, a: &Var, perm: &[usize]) -> Result<Var> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let (shape, data) = kernels::permute(a.value.data(), a.shape(), perm);
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::Permute(perm.to_vec()), &[a], value))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", axis, a.shape().len())?;
        if len == 0 || start + len > a.shape()[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "narrow: range {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                a.shape()[axis]
            )));
        }
        let (outer, extent, inner) = kernels::axis_split(a.shape(), axis);
        let src = a.value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::Narrow { axis, start }, &[a], value))
    }

    pub fn concat(&self, parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        check_axis("concat", axis, first.shape().len())?;
        for p in parts {
            let same_rank = p.shape().len() == first.shape().len();
            if !same_rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = kernels::axis_split(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.value.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::Concat { axis }, parts, value))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, a: &Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let rows = *a
            .shape()
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("gather_rows on a scalar".into()))?;
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let width = a.value.numel() / rows;
        let src = a.value.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices.iter() {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = indices.len();
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::GatherRows(indices), &[a], value))
    }

    /// Sum of all elements as a rank-0 array.
    pub fn sum(&self, a: &Var) -> Var {
        let value = DenseArray::scalar(a.value.sum());
        self.record(Op::SumAll, &[a], value)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, a: &Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", axis, a.shape().len())?;
        let (outer, len, inner) = kernels::axis_split(a.shape(), axis);
        let src = a.value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::MeanAxis(axis), &[a], value))
    }

    /// Maximum along the last axis, removing it. Ties go to the first index.
    pub fn max_last(&self, a: &Var) -> Result<Var> {
        let rank = a.shape().len();
        if rank == 0 {
            return Err(TensorError::InvalidAxis {
                op: "max_last",
                axis: 0,
                rank,
            });
        }
        let len = a.shape()[rank - 1];
        let src = a.value.data();
        let mut data = Vec::with_capacity(src.len() / len);
        let mut argmax = Vec::with_capacity(src.len() / len);
        for (r, row) in src.chunks(len).enumerate() {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmax.push(r * len + best);
        }
        let mut shape = a.shape().to_vec();
        shape.pop();
        let value = DenseArray::from_parts(shape, data);
        Ok(self.record(Op::MaxLast(argmax), &[a], value))
    }

    /// Softmax along `axis` with max subtraction.
    ///
    /// `-inf` entries are allowed (they become exact zeros) as long as every
    /// row keeps at least one finite entry; NaN and `+inf` are rejected.
    pub fn softmax(&self, a: &Var, axis: usize) -> Result<Var> {
        check_axis("softmax", axis, a.shape().len())?;
        if a.value.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let data = kernels::softmax(a.value.data(), a.shape(), axis);
        if data.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let value = DenseArray::from_parts(a.shape().to_vec(), data);
        Ok(self.record(Op::Softmax(axis), &[a], value))
    }

    /// Layer normalization over the last axis followed by `gain · x̂ + bias`.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::InvalidArgument("layer_norm on a scalar".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err("layer_norm", x.shape(), gain.shape()));
        }
        let src = x.value.data();
        let (g, b) = (gain.value.data(), bias.value.data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = DenseArray::from_parts(x.shape().to_vec(), out);
        Ok(self.record(Op::LayerNorm { xhat, inv_std }, &[x, gain, bias], value))
    }

    /// Gaussian error linear unit, exact `0.5·x·(1 + erf(x/√2))` form.
    pub fn gelu(&self, a: &Var) -> Var {
        let value = a.value.map(kernels::gelu);
        self.record(Op::Gelu, &[a], value)
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let value = a.value.map(kernels::sigmoid);
        self.record(Op::Sigmoid, &[a], value)
    }

    /// Applies `f` elementwise with user-supplied derivative `df`.
    pub fn elementwise(
        &self,
        a: &Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let value = a.value.map(f);
        self.record(Op::Elementwise(Box::new(df)), &[a], value)
    }

    /// Class-weighted binary cross-entropy on logits, reduced to a scalar.
    ///
    /// The last axis indexes classes. The result is
    /// `Σ_{n,c} w_c·bce(n,c) / (rows · Σ_c w_c)`, i.e. a per-row weighted mean
    /// averaged over rows.
    pub fn bce_with_logits(&self, logits: &Var, targets: &DenseArray, weights: &[f64]) -> Result<Var> {
        if logits.shape() != targets.shape() {
            return Err(shape_err("bce_with_logits", logits.shape(), targets.shape()));
        }
        let classes = *logits.shape().last().unwrap_or(&1);
        if weights.len() != classes {
            return Err(shape_err("bce_with_logits", logits.shape(), &[weights.len()]));
        }
        if let Some(&bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::NonBinaryTarget { value: bad });
        }
        if !logits.value.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_with_logits" });
        }
        let wsum: f64 = weights.iter().sum();
        let rows = targets.numel() / classes;
        let mut total = 0.0;
        for (i, (&l, &t)) in logits.value.data().iter().zip(targets.data()).enumerate() {
            total += weights[i % classes] * kernels::bce_logit(l, t);
        }
        let value = DenseArray::scalar(total / (rows as f64 * wsum));
        Ok(self.record(
            Op::Bce {
                targets: Arc::new(targets.clone()),
                weights: weights.to_vec(),
            },
            &[logits],
            value,
        ))
    }

    /// Propagates gradients from a one-element `root` to every tracked node.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<DenseArray>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Ok(Gradients { grads });
        };
        grads[root_id] = Some(DenseArray::full(root.shape(), 1.0));
        for id in (0..=root_id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let input_grads = node_backward(node, g);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(pid), Some(ig)) = (input.id, ig) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

struct MatmulGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatmulGeometry {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let err = || shape_err("matmul", a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k) = if ta { (a[ra - 1], a[ra - 2]) } else { (a[ra - 2], a[ra - 1]) };
        let (kb, n) = if tb { (b[rb - 1], b[rb - 2]) } else { (b[rb - 2], b[rb - 1]) };
        if k != kb {
            return Err(err());
        }
        let shared_b = rb == 2;
        if !shared_b && a[..ra - 2] != b[..rb - 2] {
            return Err(err());
        }
        let batch: usize = a[..ra - 2].iter().product();
        let mut out_shape = a[..ra - 2].to_vec();
        out_shape.extend([m, n]);
        // A shared matrix against untransposed rows is one tall product.
        let (batch, m) = if shared_b && !ta { (1, batch * m) } else { (batch, m) };
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_b,
            out_shape,
        })
    }
}

fn node_backward(node: &Node, g: &DenseArray) -> Vec<Option<DenseArray>> {
    let inputs = &node.inputs;
    let x = &inputs[0].value;
    let wants = |i: usize| inputs[i].id.is_some();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul { ta, tb } => {
            let (a, b) = (&inputs[0].value, &inputs[1].value);
            let geo = MatmulGeometry::new(a.shape(), b.shape(), *ta, *tb)
                .expect("shapes validated in forward");
            let (m, k, n) = (geo.m, geo.k, geo.n);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            let gd = g.data();
            let grad_a = wants(0).then(|| {
                let mut da = vec![0.0; a.numel()];
                for i in 0..geo.batch {
                    let boff = if geo.shared_b { 0 } else { i * sb };
                    let bs = &b.data()[boff..boff + sb];
                    let gs = &gd[i * sc..(i + 1) * sc];
                    let out = &mut da[i * sa..(i + 1) * sa];
                    if *ta {
                        // dA (k×m) = op(B) · Gᵀ
                        kernels::gemm(k, n, m, bs, *tb, gs, true, 0.0, out);
                    } else {
                        // dA (m×k) = G · op(B)ᵀ
                        kernels::gemm(m, n, k, gs, false, bs, !*tb, 0.0, out);
                    }
                }
                DenseArray::from_parts(a.shape().to_vec(), da)
            });
            let grad_b = wants(1).then(|| {
                let mut db = vec![0.0; b.numel()];
                for i in 0..geo.batch {
                    let as_ = &a.data()[i * sa..(i + 1) * sa];
                    let gs = &gd[i * sc..(i + 1) * sc];
                    let (boff, beta) = if geo.shared_b {
                        (0, if i == 0 { 0.0 } else { 1.0 })
                    } else {
                        (i * sb, 0.0)
                    };
                    let out = &mut db[boff..boff + sb];
                    if *tb {
                        // dB (n×k) = Gᵀ · op(A)
                        kernels::gemm(n, m, k, gs, true, as_, *ta, beta, out);
                    } else {
                        // dB (k×n) = op(A)ᵀ · G
                        kernels::gemm(k, m, n, as_, !*ta, gs, false, beta, out);
                    }
                }
                DenseArray::from_parts(b.shape().to_vec(), db)
            });
            vec![grad_a, grad_b]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let out_shape = g.shape();
            (0..2)
                .map(|i| {
                    if !wants(i) {
                        return None;
                    }
                    let target = &inputs[i].value;
                    let map = kernels::broadcast_map(out_shape, target.shape());
                    let local: Vec<f64> = match &node.op {
                        Op::Add => g.data().to_vec(),
                        Op::Sub if i == 0 => g.data().to_vec(),
                        Op::Sub => g.data().iter().map(|v| -v).collect(),
                        _ => {
                            let other = &inputs[1 - i].value;
                            let om = kernels::broadcast_map(out_shape, other.shape());
                            g.data()
                                .iter()
                                .enumerate()
                                .map(|(j, gv)| gv * other.data()[om.offset(j)])
                                .collect()
                        }
                    };
                    let data = kernels::reduce_broadcast(&local, &map, target.numel());
                    Some(DenseArray::from_parts(target.shape().to_vec(), data))
                })
                .collect()
        }
        Op::Scale(f) => vec![Some(g.map(|v| v * f))],
        Op::Reshape => vec![Some(DenseArray::from_parts(
            x.shape().to_vec(),
            g.data().to_vec(),
        ))],
        Op::Permute(perm) => {
            let inv = kernels::inverse_permutation(perm);
            let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
            vec![Some(DenseArray::from_parts(shape, data))]
        }
        Op::Narrow { axis, start } => {
            let (outer, extent, inner) = kernels::axis_split(x.shape(), *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
        Op::Concat { axis } => {
            let (outer, total, inner) = kernels::axis_split(g.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|inp| {
                    let len = inp.value.shape()[*axis];
                    let start = offset;
                    offset += len;
                    inp.id?;
                    let mut data = Vec::with_capacity(inp.value.numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    Some(DenseArray::from_parts(inp.value.shape().to_vec(), data))
                })
                .collect()
        }
        Op::GatherRows(indices) => {
            let width = x.numel() / x.shape()[0];
            let mut data = vec![0.0; x.numel()];
            for (r, &i) in indices.iter().enumerate() {
                let src = &g.data()[r * width..(r + 1) * width];
                for (d, s) in data[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
        Op::SumAll => vec![Some(DenseArray::full(x.shape(), g.data()[0]))],
        Op::MeanAxis(axis) => {
            let (outer, len, inner) = kernels::axis_split(x.shape(), *axis);
            let inv = 1.0 / len as f64;
            let mut data = Vec::with_capacity(x.numel());
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    data.extend(row.iter().map(|v| v * inv));
                }
            }
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
        Op::MaxLast(argmax) => {
            let mut data = vec![0.0; x.numel()];
            for (gv, &i) in g.data().iter().zip(argmax) {
                data[i] += gv;
            }
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
        Op::Softmax(axis) => {
            let y = node.output.data();
            let (outer, len, inner) = kernels::axis_split(x.shape(), *axis);
            let mut data = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len)
                        .map(|j| g.data()[base + j * inner] * y[base + j * inner])
                        .sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        data[p] = y[p] * (g.data()[p] - dot);
                    }
                }
            }
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
        Op::LayerNorm { xhat, inv_std } => {
            let gain = inputs[1].value.data();
            let d = gain.len();
            let rows = x.numel() / d;
            let gd = g.data();
            let mut dx = vec![0.0; x.numel()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut mean_gy = 0.0;
                let mut mean_gyh = 0.0;
                for j in 0..d {
                    let gy = gr[j] * gain[j];
                    mean_gy += gy;
                    mean_gyh += gy * hr[j];
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                }
                mean_gy /= d as f64;
                mean_gyh /= d as f64;
                for j in 0..d {
                    dx[r * d + j] = inv_std[r] * (gr[j] * gain[j] - mean_gy - hr[j] * mean_gyh);
                }
            }
            vec![
                Some(DenseArray::from_parts(x.shape().to_vec(), dx)),
                wants(1).then(|| DenseArray::from_parts(vec![d], dgain)),
                wants(2).then(|| DenseArray::from_parts(vec![d], dbias)),
            ]
        }
        Op::Gelu => vec![Some(zip_map(g, x, |gv, xv| gv * kernels::gelu_grad(xv)))],
        Op::Sigmoid => vec![Some(zip_map(g, &node.output, |gv, y| gv * y * (1.0 - y)))],
        Op::Elementwise(df) => vec![Some(zip_map(g, x, |gv, xv| gv * df(xv)))],
        Op::Bce { targets, weights } => {
            let classes = weights.len();
            let rows = targets.numel() / classes;
            let scale = g.data()[0] / (rows as f64 * weights.iter().sum::<f64>());
            let data = x
                .data()
                .iter()
                .zip(targets.data())
                .enumerate()
                .map(|(i, (&l, &t))| scale * weights[i % classes] * (kernels::sigmoid(l) - t))
                .collect();
            vec![Some(DenseArray::from_parts(x.shape().to_vec(), data))]
        }
    }
}

fn zip_map(g: &DenseArray, x: &DenseArray, f: impl Fn(f64, f64) -> f64) -> DenseArray {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    DenseArray::from_parts(x.shape().to_vec(), data)
}
