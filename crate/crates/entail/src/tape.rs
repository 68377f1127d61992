//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A `Tape` records every operation of one forward pass as an append-only
//! list of nodes in topological order (inputs always precede their
//! consumers), then replays the list in reverse to accumulate gradients.
//! Trainable tensors live outside the tape in a [`ParamSet`]; a tape
//! borrows the set immutably for its whole lifetime, so parameters cannot
//! move while any forward or backward pass can still read them. Multiple
//! tapes over the same `ParamSet` may run on different threads; parameter
//! updates happen between passes, once every tape is dropped.

use std::collections::HashMap;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Index of a value node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named registry of trainable tensors.
///
/// Registration order is the canonical order everywhere: optimizer state,
/// gradient vectors and checkpoints all index parameters by it.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    value: Tensor,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-batch gradient container, index-aligned with a `ParamSet`.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub grads: Vec<Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            grads: params
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &GradSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId },
    VecMat { x: NodeId, w: NodeId },
    Dot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { a: NodeId, grad_factor: f64 },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    SoftmaxVec { a: NodeId },
    SoftmaxRows { a: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { a: NodeId, start: usize },
    StackRows { rows: Vec<NodeId> },
    Row { a: NodeId, index: usize },
    AddRowBroadcast { m: NodeId, v: NodeId },
    Sum { a: NodeId },
    LogClamped { a: NodeId, floor: f64 },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Forward value. Empty for `Op::Param` nodes, whose data lives in the
    /// `ParamSet`.
    data: Vec<f64>,
    op: Op,
}

/// Statistics a train-mode batch-norm node computed from its batch, exposed
/// so the training loop can fold them into running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: usize,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn param_set(&self) -> &ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.params.get(pid).data(),
            _ => &node.data,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("tape node carries a consistent shape")
    }

    /// Gradient accumulated for a node by the last `backward` call.
    /// `None` when the node was not reached from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a registered parameter; zeros when unreachable.
    pub fn param_grad(&self, id: ParamId) -> Tensor {
        match self.param_nodes.get(&id).and_then(|nid| self.grad(*nid)) {
            Some(g) => Tensor::new(self.params.get(id).shape().to_vec(), g.to_vec()).unwrap(),
            None => Tensor::zeros(self.params.get(id).shape()),
        }
    }

    /// Dense gradients for every parameter in the set (zeros where the
    /// parameter is unreachable from the loss).
    pub fn collect_param_grads(&self) -> GradSet {
        let mut gs = GradSet::zeros_like(self.params);
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = self.grad(nid) {
                gs.grads[pid.0].data_mut().copy_from_slice(g);
            }
        }
        gs
    }

    /// Batch statistics recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<BatchStats> {
        match &self.nodes[id.0].op {
            Op::BatchNormTrain { mean, var, .. } => Some(BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                batch: self.nodes[id.0].shape[0],
            }),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            match op {
                Op::Param(pid) => self.params.get(pid).numel(),
                _ => data.len(),
            }
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, data, op });
        id
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push(shape, data, Op::Constant)
    }

    pub fn constant_slice(&mut self, shape: &[usize], data: &[f64]) -> NodeId {
        self.push(shape.to_vec(), data.to_vec(), Op::Constant)
    }

    /// Leaf node for a registered parameter; one node per parameter per tape.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&nid) = self.param_nodes.get(&id) {
            return nid;
        }
        let shape = self.params.get(id).shape().to_vec();
        let nid = self.push(shape, Vec::new(), Op::Param(id));
        self.param_nodes.insert(id, nid);
        nid
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `a[m,k] · b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = ArrayView2::from_shape((m, k), self.value(a)).unwrap();
        let bv = ArrayView2::from_shape((k, n), self.value(b)).unwrap();
        let data = array_to_vec(av.dot(&bv));
        Ok(self.push(vec![m, n], data, Op::MatMul { a, b }))
    }

    /// Row vector times matrix: `x[k] · w[k,n] -> [n]` (i.e. wᵀx).
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 1 || sw.len() != 2 || sx[0] != sw[0] {
            return Err(Error::Dimension { op: "vecmat", lhs: sx, rhs: sw });
        }
        let (k, n) = (sw[0], sw[1]);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n];
        for i in 0..k {
            let xi = xv[i];
            let row = &wv[i * n..(i + 1) * n];
            for (o, wj) in out.iter_mut().zip(row) {
                *o += xi * wj;
            }
        }
        Ok(self.push(vec![n], out, Op::VecMat { x, w }))
    }

    /// Inner product of two equal-length vectors -> scalar `[1]`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(Error::Dimension { op: "dot", lhs: sa, rhs: sb });
        }
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![1], vec![s], Op::Dot { a, b }))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        // Identical shapes, or scalar-with-tensor; nothing else broadcasts.
        let (out_shape, data) = if sa == sb {
            let data: Vec<f64> = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa, data)
        } else if nb == 1 {
            let y = self.value(b)[0];
            (sa, self.value(a).iter().map(|&x| f(x, y)).collect())
        } else if na == 1 {
            let x = self.value(a)[0];
            (sb, self.value(b).iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::Dimension { op: name, lhs: sa, rhs: sb });
        };
        Ok(self.push(out_shape, data, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    /// `factor * a`. Backward multiplies by the same factor.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.scale_with_grad_factor(a, factor, factor)
    }

    /// Linear map whose backward coefficient is decoupled from the forward
    /// one. With `grad_factor != factor` the recorded derivative is wrong on
    /// purpose; the gradient checker's negative-control tests rely on this.
    pub fn scale_with_grad_factor(&mut self, a: NodeId, factor: f64, grad_factor: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| factor * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Scale { a, grad_factor })
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Tanh { a })
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 {
            return Err(Error::Dimension { op: "softmax", lhs: sa, rhs: vec![] });
        }
        let data = softmax_slice(self.value(a));
        Ok(self.push(sa, data, Op::SoftmaxVec { a }))
    }

    /// Row-wise softmax over a `[B,F]` matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension { op: "softmax_rows", lhs: sa, rhs: vec![] });
        }
        let (b, f) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut data = vec![0.0; b * f];
        for r in 0..b {
            data[r * f..(r + 1) * f].copy_from_slice(&softmax_slice(&av[r * f..(r + 1) * f]));
        }
        Ok(self.push(sa, data, Op::SoftmaxRows { a }))
    }

    // ── Shape manipulation ──────────────────────────────────────────

    /// Concatenate vectors in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of an empty part list".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(self.value(p));
        }
        let len = data.len();
        Ok(self.push(vec![len], data, Op::Concat { parts: parts.to_vec() }))
    }

    /// Contiguous sub-vector `a[start .. start+len]`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 || start + len > sa[0] || len == 0 {
            return Err(Error::Argument(format!(
                "slice [{start}, {}) out of bounds for vector of length {}",
                start + len,
                sa.first().copied().unwrap_or(0)
            )));
        }
        let data = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], data, Op::Slice { a, start }))
    }

    /// Stack equal-length vectors into a `[B,F]` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Argument("stack_rows of an empty row list".into()));
        }
        let f = self.shape(rows[0]).to_vec();
        if f.len() != 1 {
            return Err(Error::Dimension { op: "stack_rows", lhs: f, rhs: vec![] });
        }
        let width = f[0];
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.shape(r) != [width] {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(self.value(r));
        }
        Ok(self.push(vec![rows.len(), width], data, Op::StackRows { rows: rows.to_vec() }))
    }

    /// Extract row `index` of a `[B,F]` matrix as a vector.
    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || index >= sa[0] {
            return Err(Error::Argument(format!(
                "row {index} out of bounds for shape {sa:?}"
            )));
        }
        let f = sa[1];
        let data = self.value(a)[index * f..(index + 1) * f].to_vec();
        Ok(self.push(vec![f], data, Op::Row { a, index }))
    }

    /// `m[B,F] + v[F]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::Dimension { op: "add_row_broadcast", lhs: sm, rhs: sv });
        }
        let (b, f) = (sm[0], sm[1]);
        let mv = self.value(m);
        let vv = self.value(v);
        let mut data = vec![0.0; b * f];
        for r in 0..b {
            for c in 0..f {
                data[r * f + c] = mv[r * f + c] + vv[c];
            }
        }
        Ok(self.push(sm, data, Op::AddRowBroadcast { m, v }))
    }

    // ── Reductions & scalar ─────────────────────────────────────────

    /// Sum of all elements -> scalar `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    /// Elementwise `ln(max(x, floor))`; the clamp keeps the loss finite on
    /// vanishing probabilities.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.max(floor).ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::LogClamped { a, floor })
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Train-mode batch norm over `x[B,F]` with per-feature batch
    /// statistics (biased variance). Requires `B >= 2`.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Dimension { op: "batchnorm", lhs: sx, rhs: vec![] });
        }
        let (b, f) = (sx[0], sx[1]);
        if b < 2 {
            return Err(Error::Argument(
                "batchnorm in train mode requires a batch of at least 2".into(),
            ));
        }
        self.check_bn_params(f, gamma, beta)?;
        let xv = self.value(x);
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for r in 0..b {
            for c in 0..f {
                mean[c] += xv[r * f + c];
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        for r in 0..b {
            for c in 0..f {
                let d = xv[r * f + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let data = bn_forward(xv, b, f, &mean, &var, self.value(gamma), self.value(beta), eps);
        Ok(self.push(sx, data, Op::BatchNormTrain { x, gamma, beta, eps, mean, var }))
    }

    /// Eval-mode batch norm: normalizes with the supplied running
    /// statistics (captured as constants).
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::Dimension { op: "batchnorm", lhs: sx, rhs: vec![] });
        }
        let (b, f) = (sx[0], sx[1]);
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::Dimension {
                op: "batchnorm running stats",
                lhs: vec![running_mean.len()],
                rhs: vec![f],
            });
        }
        self.check_bn_params(f, gamma, beta)?;
        let data = bn_forward(
            self.value(x),
            b,
            f,
            running_mean,
            running_var,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        Ok(self.push(
            sx,
            data,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        ))
    }

    fn check_bn_params(&self, f: usize, gamma: NodeId, beta: NodeId) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::Dimension {
                    op: "batchnorm scale/shift",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![f],
                });
            }
        }
        Ok(())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss node.
    /// Afterwards every node reachable from the loss carries a gradient of
    /// its own shape; unreachable parameters read back as zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Argument("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            // A node's gradient is final once we reach it (all consumers
            // have larger indices). Leaves keep theirs for the caller;
            // interior nodes give theirs up to save memory.
            let is_leaf = matches!(self.nodes[i].op, Op::Constant | Op::Param(_));
            let g = if is_leaf {
                continue;
            } else {
                match self.grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_node(NodeId(i), &g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, contrib: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += *b;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn backward_node(&mut self, id: NodeId, g: &[f64]) {
        let op = self.nodes[id.0].op.clone();
        match op {
            Op::Constant | Op::Param(_) => {}

            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = ArrayView2::from_shape((m, k), self.value(a)).unwrap();
                let bv = ArrayView2::from_shape((k, n), self.value(b)).unwrap();
                let gv = ArrayView2::from_shape((m, n), g).unwrap();
                let ga = array_to_vec(gv.dot(&bv.t()));
                let gb = array_to_vec(av.t().dot(&gv));
                self.acc(a, &ga);
                self.acc(b, &gb);
            }

            Op::VecMat { x, w } => {
                let (k, n) = (self.shape(w)[0], self.shape(w)[1]);
                let xv = self.value(x).to_vec();
                let wv = self.value(w);
                // grad_x[i] = dot(W[i,:], g); grad_w[i,j] = x[i]*g[j]
                let mut gx = vec![0.0; k];
                for i in 0..k {
                    let row = &wv[i * n..(i + 1) * n];
                    gx[i] = row.iter().zip(g).map(|(w, gg)| w * gg).sum();
                }
                let mut gw = vec![0.0; k * n];
                for i in 0..k {
                    let xi = xv[i];
                    let dst = &mut gw[i * n..(i + 1) * n];
                    for (d, gg) in dst.iter_mut().zip(g) {
                        *d = xi * gg;
                    }
                }
                self.acc(x, &gx);
                self.acc(w, &gw);
            }

            Op::Dot { a, b } => {
                let g0 = g[0];
                let ga: Vec<f64> = self.value(b).iter().map(|y| g0 * y).collect();
                let gb: Vec<f64> = self.value(a).iter().map(|x| g0 * x).collect();
                self.acc(a, &ga);
                self.acc(b, &gb);
            }

            Op::Add { a, b } => {
                self.acc_binary(a, g, |_, _, gg| gg, b);
                self.acc_binary(b, g, |_, _, gg| gg, a);
            }
            Op::Sub { a, b } => {
                self.acc_binary(a, g, |_, _, gg| gg, b);
                self.acc_binary(b, g, |_, _, gg| -gg, a);
            }
            Op::Mul { a, b } => {
                self.acc_binary(a, g, |_t, other, gg| gg * other, b);
                self.acc_binary(b, g, |_t, other, gg| gg * other, a);
            }
            Op::Div { a, b } => {
                // y = a / b: dy/da = 1/b, dy/db = -a/b^2
                self.acc_binary(a, g, |_a, bv, gg| gg / bv, b);
                self.acc_binary(b, g, |bv, av, gg| -gg * av / (bv * bv), a);
            }

            Op::Scale { a, grad_factor, .. } => {
                let ga: Vec<f64> = g.iter().map(|x| grad_factor * x).collect();
                self.acc(a, &ga);
            }

            Op::Sigmoid { a } => {
                let out = &self.nodes[id.0].data;
                let ga: Vec<f64> = g.iter().zip(out).map(|(gg, &s)| gg * s * (1.0 - s)).collect();
                self.acc(a, &ga);
            }
            Op::Tanh { a } => {
                let out = &self.nodes[id.0].data;
                let ga: Vec<f64> = g.iter().zip(out).map(|(gg, &t)| gg * (1.0 - t * t)).collect();
                self.acc(a, &ga);
            }

            Op::SoftmaxVec { a } => {
                let ga = softmax_backward(&self.nodes[id.0].data, g);
                self.acc(a, &ga);
            }
            Op::SoftmaxRows { a } => {
                let (b, f) = (self.shape(id)[0], self.shape(id)[1]);
                let out = &self.nodes[id.0].data;
                let mut ga = vec![0.0; b * f];
                for r in 0..b {
                    let row = softmax_backward(&out[r * f..(r + 1) * f], &g[r * f..(r + 1) * f]);
                    ga[r * f..(r + 1) * f].copy_from_slice(&row);
                }
                self.acc(a, &ga);
            }

            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(p)[0];
                    let gp = g[offset..offset + len].to_vec();
                    self.acc(p, &gp);
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                let mut ga = vec![0.0; self.shape(a)[0]];
                ga[start..start + g.len()].copy_from_slice(g);
                self.acc(a, &ga);
            }
            Op::StackRows { rows } => {
                let f = self.shape(id)[1];
                for (r, node) in rows.into_iter().enumerate() {
                    self.acc(node, &g[r * f..(r + 1) * f].to_vec());
                }
            }
            Op::Row { a, index } => {
                let (b, f) = (self.shape(a)[0], self.shape(a)[1]);
                let mut ga = vec![0.0; b * f];
                ga[index * f..(index + 1) * f].copy_from_slice(g);
                self.acc(a, &ga);
            }
            Op::AddRowBroadcast { m, v } => {
                let f = self.shape(v)[0];
                self.acc(m, g);
                let mut gv = vec![0.0; f];
                for chunk in g.chunks_exact(f) {
                    for (d, gg) in gv.iter_mut().zip(chunk) {
                        *d += *gg;
                    }
                }
                self.acc(v, &gv);
            }

            Op::Sum { a } => {
                let ga = vec![g[0]; self.value(a).len()];
                self.acc(a, &ga);
            }
            Op::LogClamped { a, floor } => {
                let av = self.value(a);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(gg, &x)| if x > floor { gg / x } else { 0.0 })
                    .collect();
                self.acc(a, &ga);
            }

            Op::BatchNormTrain { x, gamma, beta, eps, mean, var } => {
                let (b, f) = (self.shape(id)[0], self.shape(id)[1]);
                let xv = self.value(x).to_vec();
                let gammav = self.value(gamma).to_vec();
                let bf = b as f64;

                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut sum_g = vec![0.0; f];
                let mut sum_g_xhat = vec![0.0; f];
                let mut xhat = vec![0.0; b * f];
                for c in 0..f {
                    let inv = 1.0 / (var[c] + eps).sqrt();
                    for r in 0..b {
                        let h = (xv[r * f + c] - mean[c]) * inv;
                        xhat[r * f + c] = h;
                        let gg = g[r * f + c];
                        dbeta[c] += gg;
                        dgamma[c] += gg * h;
                        sum_g[c] += gg;
                        sum_g_xhat[c] += gg * h;
                    }
                }
                let mut dx = vec![0.0; b * f];
                for c in 0..f {
                    let inv = 1.0 / (var[c] + eps).sqrt();
                    let coef = gammav[c] * inv / bf;
                    for r in 0..b {
                        dx[r * f + c] = coef
                            * (bf * g[r * f + c] - sum_g[c] - xhat[r * f + c] * sum_g_xhat[c]);
                    }
                }
                self.acc(x, &dx);
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }

            Op::BatchNormEval { x, gamma, beta, eps, mean, var } => {
                let (b, f) = (self.shape(id)[0], self.shape(id)[1]);
                let xv = self.value(x).to_vec();
                let gammav = self.value(gamma).to_vec();
                let mut dx = vec![0.0; b * f];
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for c in 0..f {
                    let inv = 1.0 / (var[c] + eps).sqrt();
                    for r in 0..b {
                        let gg = g[r * f + c];
                        dx[r * f + c] = gg * gammav[c] * inv;
                        dgamma[c] += gg * (xv[r * f + c] - mean[c]) * inv;
                        dbeta[c] += gg;
                    }
                }
                self.acc(x, &dx);
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }
        }
    }

    /// Gradient contribution for one side of a binary elementwise op,
    /// handling the scalar-with-tensor broadcast cases.
    fn acc_binary(
        &mut self,
        target: NodeId,
        g: &[f64],
        df: impl Fn(f64, f64, f64) -> f64,
        other: NodeId,
    ) {
        // df(target_value, other_value, upstream) -> contribution
        let tn = self.value(target).len();
        let on = self.value(other).len();
        let contrib: Vec<f64> = if tn == g.len() && on == g.len() {
            let tv = self.value(target);
            let ov = self.value(other);
            g.iter()
                .zip(tv.iter().zip(ov))
                .map(|(&gg, (&t, &o))| df(t, o, gg))
                .collect()
        } else if tn == 1 {
            // target broadcast over the other operand: reduce.
            let t = self.value(target)[0];
            let ov = self.value(other);
            let s: f64 = g.iter().zip(ov).map(|(&gg, &o)| df(t, o, gg)).sum();
            vec![s]
        } else {
            // other side is scalar.
            let o = self.value(other)[0];
            let tv = self.value(target);
            g.iter()
                .zip(tv)
                .map(|(&gg, &t)| df(t, o, gg))
                .collect()
        };
        self.acc(target, &contrib);
    }
}

/// Row-major buffer of a 2-D array regardless of its memory layout
/// (`dot` may hand back an F-order result for degenerate shapes).
fn array_to_vec(a: ndarray::Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a slice.
pub(crate) fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// dL/dx for y = softmax(x): y ∘ (g − <g, y>).
fn softmax_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect()
}

#[allow(clippy::too_many_arguments)]
fn bn_forward(
    xv: &[f64],
    b: usize,
    f: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut data = vec![0.0; b * f];
    for c in 0..f {
        let inv = 1.0 / (var[c] + eps).sqrt();
        for r in 0..b {
            data[r * f + c] = gamma[c] * (xv[r * f + c] - mean[c]) * inv + beta[c];
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn matmul_identity() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_row_times_column() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unhelpful error: {msg}");
    }

    #[test]
    fn elementwise_basics() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let m = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(m), &[0.0, 0.0]);
        let d = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(d), &[0.0, 0.0]);
        let c = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let shaped = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(c, shaped).is_err());
    }

    #[test]
    fn sub_of_self_has_zero_gradient() {
        let mut params = ParamSet::new();
        let x = params.register("x", Tensor::vector(vec![1.5, -2.0, 3.0]));
        let mut tape = Tape::new(&params);
        let xn = tape.param(x);
        let d = tape.sub(xn, xn).unwrap();
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_and_tanh_values() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let s = tape.sigmoid(x);
        assert!(close(tape.value(s)[0], 0.5, 1e-12));
        assert!(close(tape.value(s)[1], 0.731_058_578_630_004_9, 1e-12));
        let t = tape.tanh(x);
        assert!(close(tape.value(t)[0], 0.0, 1e-12));
    }

    #[test]
    fn softmax_contract() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }

        let y = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let sy = tape.softmax(y).unwrap();
        assert!(close(tape.value(sy)[0], 0.731_058_578_630_004_9, 1e-9));
        assert!(close(tape.value(sy)[1], 0.268_941_421_369_995_1, 1e-9));

        // Stability: no overflow on huge logits.
        let z = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let sz = tape.softmax(z).unwrap();
        assert!(tape.value(sz).iter().all(|v| v.is_finite()));
        assert!(close(tape.value(sz)[0], 1.0, 1e-9));
        assert!(close(tape.value(sz)[1], 0.0, 1e-9));
    }

    #[test]
    fn concat_and_slice() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let single = tape.concat(&[b]).unwrap();
        assert_eq!(tape.value(single), tape.value(b));
        assert!(tape.concat(&[]).is_err());
        let back = tape.slice(c, 1, 2).unwrap();
        assert_eq!(tape.value(back), &[2.0, 3.0]);
    }

    #[test]
    fn concat_gradient_slices_back() {
        let mut params = ParamSet::new();
        let a = params.register("a", Tensor::vector(vec![1.0, 2.0]));
        let b = params.register("b", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new(&params);
        let an = tape.param(a);
        let bn = tape.param(b);
        let c = tape.concat(&[an, bn]).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad(a).data(), &[1.0, 1.0]);
        assert_eq!(tape.param_grad(b).data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut params = ParamSet::new();
        let w = params.register("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&params);
        let wn = tape.param(w);
        assert!(tape.backward(wn).is_err());
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut params = ParamSet::new();
        let w = params.register("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        {
            let mut tape = Tape::new(&params);
            let wn = tape.param(w);
            let loss = tape.sum(wn);
            tape.backward(loss).unwrap();
            assert_eq!(tape.param_grad(w).data(), &[1.0, 1.0, 1.0]);
        }
        {
            // loss = sum(w∘w)/2  =>  grad = w
            let mut tape = Tape::new(&params);
            let wn = tape.param(w);
            let sq = tape.mul(wn, wn).unwrap();
            let s = tape.sum(sq);
            let loss = tape.scale(s, 0.5);
            tape.backward(loss).unwrap();
            assert_eq!(tape.param_grad(w).data(), params.get(w).data());
        }
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut params = ParamSet::new();
        let used = params.register("used", Tensor::vector(vec![2.0]));
        let unused = params.register("unused", Tensor::vector(vec![5.0, 5.0]));
        let mut tape = Tape::new(&params);
        let u = tape.param(used);
        let _orphan = tape.param(unused);
        let loss = tape.sum(u);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad(unused).data(), &[0.0, 0.0]);
        let gs = tape.collect_param_grads();
        assert_eq!(gs.get(unused).data(), &[0.0, 0.0]);
        assert_eq!(gs.get(used).data(), &[1.0]);
    }

    #[test]
    fn scalar_broadcast_mul_and_div() {
        let mut params = ParamSet::new();
        let v = params.register("v", Tensor::vector(vec![2.0, 4.0]));
        let s = params.register("s", Tensor::scalar(2.0));
        let mut tape = Tape::new(&params);
        let vn = tape.param(v);
        let sn = tape.param(s);
        let scaled = tape.mul(vn, sn).unwrap();
        assert_eq!(tape.value(scaled), &[4.0, 8.0]);
        let halved = tape.div(vn, sn).unwrap();
        assert_eq!(tape.value(halved), &[1.0, 2.0]);
        let total = tape.add(scaled, halved).unwrap();
        let loss = tape.sum(total);
        tape.backward(loss).unwrap();
        // d/ds sum(v*s + v/s) = sum(v) - sum(v)/s^2 = 6 - 6/4
        assert!(close(tape.param_grad(s).data()[0], 6.0 - 6.0 / 4.0, 1e-12));
        // d/dv = s + 1/s = 2.5 per element
        assert_eq!(tape.param_grad(v).data(), &[2.5, 2.5]);
    }

    #[test]
    fn replay_is_deterministic() {
        let mut params = ParamSet::new();
        let w = params.register("w", Tensor::vector(vec![0.3, -0.7, 1.1]));
        let run = |params: &ParamSet| {
            let mut tape = Tape::new(params);
            let wn = tape.param(w);
            let s = tape.sigmoid(wn);
            let t = tape.tanh(s);
            let sm = tape.softmax(t).unwrap();
            let loss = tape.sum(sm);
            tape.value(loss)[0].to_bits()
        };
        assert_eq!(run(&params), run(&params));
    }

    #[test]
    fn batchnorm_two_point_batch() {
        let mut params = ParamSet::new();
        let gamma = params.register("gamma", Tensor::vector(vec![1.0]));
        let beta = params.register("beta", Tensor::vector(vec![0.0]));
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let gn = tape.param(gamma);
        let bn = tape.param(beta);
        let y = tape.batchnorm_train(x, gn, bn, 1e-5).unwrap();
        let out = tape.value(y);
        assert!(close(out[0], -1.0, 1e-4), "got {out:?}");
        assert!(close(out[1], 1.0, 1e-4));
        let stats = tape.batch_stats(y).unwrap();
        assert!(close(stats.mean[0], 2.0, 1e-12));
        assert!(close(stats.var[0], 1.0, 1e-12));
    }

    #[test]
    fn batchnorm_constant_batch_is_zero_before_shift() {
        let mut params = ParamSet::new();
        let gamma = params.register("gamma", Tensor::vector(vec![1.0, 1.0]));
        let beta = params.register("beta", Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::new(vec![3, 2], vec![7.0; 6]).unwrap());
        let gn = tape.param(gamma);
        let bn = tape.param(beta);
        let y = tape.batchnorm_train(x, gn, bn, 1e-5).unwrap();
        for &v in tape.value(y) {
            assert!(close(v, 0.0, 1e-9));
        }
    }

    #[test]
    fn batchnorm_rejects_singleton_batch_in_train_mode() {
        let mut params = ParamSet::new();
        let gamma = params.register("gamma", Tensor::vector(vec![1.0]));
        let beta = params.register("beta", Tensor::vector(vec![0.0]));
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let gn = tape.param(gamma);
        let bn = tape.param(beta);
        assert!(tape.batchnorm_train(x, gn, bn, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_eval_ignores_batch_composition() {
        let mut params = ParamSet::new();
        let gamma = params.register("gamma", Tensor::vector(vec![2.0]));
        let beta = params.register("beta", Tensor::vector(vec![0.5]));
        let mean = vec![1.0];
        let var = vec![4.0];
        let row_out = |others: &[f64], params: &ParamSet| {
            let mut tape = Tape::new(params);
            let mut data = vec![3.0];
            data.extend_from_slice(others);
            let x = tape.constant(Tensor::new(vec![data.len(), 1], data).unwrap());
            let gn = tape.param(gamma);
            let bn = tape.param(beta);
            let y = tape.batchnorm_eval(x, gn, bn, 1e-5, &mean, &var).unwrap();
            tape.value(y)[0]
        };
        let a = row_out(&[100.0, -3.0], &params);
        let b = row_out(&[0.0], &params);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
