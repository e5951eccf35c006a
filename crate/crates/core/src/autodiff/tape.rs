//! Reverse-mode tape: each builder method records one node, forward values
//! are computed eagerly, and `backward` walks the nodes in reverse insertion
//! order (which is already a topological order).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use super::array::{matmul_2d, matmul_a_bt, matmul_at_b, Array};
use super::AutodiffError;

/// Handle to a node on one specific tape. Ids from different tapes must not
/// be mixed; they are plain indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Arguments a pow node needs at backward time.
const POW_BASE_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Pow(NodeId, NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Lgamma(NodeId),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    CausalConv1d {
        input: NodeId,
        weight: NodeId,
        dilation: usize,
    },
    /// `mask` holds the realized per-element factor (0 or 1/(1-rate));
    /// `None` means the op ran in inference mode and is the identity.
    Dropout {
        input: NodeId,
        mask: Option<Vec<f64>>,
    },
}

struct Node {
    op: Op,
    value: Array,
}

/// Records a forward computation and differentiates it once.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    grads: Vec<Option<Array>>,
    /// First non-finite forward value observed, as "op name: offending value"
    /// (debug builds only; release builds never scan).
    nonfinite: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            grads: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if the
    /// node participated in that computation.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// In debug builds, the first non-finite value produced by a forward op,
    /// if any. Training reads this to detect divergence without aborting.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    fn push(&mut self, op: Op, value: Array, name: &'static str) -> NodeId {
        #[cfg(debug_assertions)]
        {
            if self.nonfinite.is_none() {
                if let Some(bad) = value.data().iter().find(|v| !v.is_finite()) {
                    self.nonfinite = Some(format!("{name}: {bad}"));
                }
            }
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input. Leaves are the only nodes without parents; whether a
    /// leaf is trainable is the caller's bookkeeping (see `ParameterStore`).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, value, "leaf")
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array::with_shape_unchecked(va.shape().to_vec(), data);
        Ok(self.push(op, value, name))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = matmul_2d(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(Op::Matmul(a, b), value, "matmul"))
    }

    /// Elementwise a^b computed as exp(b·ln(max(a, 1e-12))); both operands
    /// carry gradients. Entries at or below the floor get zero base-gradient.
    pub fn pow(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "pow",
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (y * x.max(POW_BASE_FLOOR).ln()).exp())
            .collect();
        let value = Array::with_shape_unchecked(va.shape().to_vec(), data);
        Ok(self.push(Op::Pow(a, b), value, "pow"))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let value = Array::with_shape_unchecked(va.shape().to_vec(), data);
        self.push(op(a), value, name)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    /// Elementwise ln Γ; gradient is the digamma function.
    pub fn lgamma(&mut self, a: NodeId) -> NodeId {
        self.unary("lgamma", a, ln_gamma, Op::Lgamma)
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::ReduceSum(a), Array::scalar(s), "reduce_sum")
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::ReduceMean(a), Array::scalar(s), "reduce_mean")
    }

    /// Expand `a` to `target` shape. Axes are right-aligned; every source
    /// axis must equal the target axis or be 1. The backward pass sums over
    /// the expanded axes, so broadcasting stays explicit on the tape instead
    /// of being folded into the arithmetic ops.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let src = va.shape();
        if src.len() > target.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                details: format!("{src:?} -> {target:?}"),
            });
        }
        let pad = target.len() - src.len();
        for (i, &t) in target.iter().enumerate() {
            let s = if i < pad { 1 } else { src[i - pad] };
            if s != t && s != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast",
                    details: format!("{src:?} -> {target:?}"),
                });
            }
        }
        let data = broadcast_forward(va, target);
        let value = Array::with_shape_unchecked(target.to_vec(), data);
        Ok(self.push(Op::Broadcast(a), value, "broadcast"))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let value = Array::with_shape_unchecked(shape.to_vec(), va.data().to_vec());
        Ok(self.push(Op::Reshape(a), value, "reshape"))
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                details: format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            });
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(out_shape.iter().product());
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let value = Array::with_shape_unchecked(out_shape, data);
        Ok(self.push(Op::Slice { input: a, axis, start, len }, value, "slice"))
    }

    /// Concatenate along one axis; all other axes must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                details: "no inputs".into(),
            });
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                details: format!("axis {axis} of {first:?}"),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (&a, &b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    details: format!("{s:?} vs {first:?} on axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let v = &self.nodes[id.0].value;
                let a_len = v.shape()[axis];
                let base = o * a_len * inner;
                data.extend_from_slice(&v.data()[base..base + a_len * inner]);
            }
        }
        let value = Array::with_shape_unchecked(out_shape, data);
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value, "concat"))
    }

    /// Causal 1-D convolution over the time axis of a (V, T, C_in) input with
    /// a (C_out, C_in, K) kernel and the given dilation. Output (V, T, C_out);
    /// position t sees inputs at t, t-d, ..., t-(K-1)d with zeros to the left
    /// of the series, so no output depends on a later time step.
    pub fn causal_conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        dilation: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (vi, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
        let ok = vi.shape().len() == 3
            && vw.shape().len() == 3
            && vi.shape()[2] == vw.shape()[1]
            && dilation >= 1;
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_conv1d",
                details: format!(
                    "input {:?}, weight {:?}, dilation {dilation}",
                    vi.shape(),
                    vw.shape()
                ),
            });
        }
        let (v, t) = (vi.shape()[0], vi.shape()[1]);
        let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
        let cols = im2col(vi, dilation, k);
        let w2 = conv_weight_as_matrix(vw);
        let out2 = matmul_2d(&cols, &w2)?;
        let value = Array::with_shape_unchecked(vec![v, t, c_out], out2.data().to_vec());
        Ok(self.push(
            Op::CausalConv1d { input, weight, dilation },
            value,
            "causal_conv1d",
        ))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); outside
    /// training the op is the identity. The mask is drawn from a dedicated
    /// ChaCha8 stream so the same seed always drops the same elements.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        seed: u64,
        training: bool,
    ) -> Result<NodeId, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::ShapeMismatch {
                op: "dropout",
                details: format!("rate {rate} outside [0, 1)"),
            });
        }
        let va = &self.nodes[a.0].value;
        if !training || rate == 0.0 {
            let value = va.clone();
            return Ok(self.push(Op::Dropout { input: a, mask: None }, value, "dropout"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Array::with_shape_unchecked(va.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { input: a, mask: Some(mask) }, value, "dropout"))
    }

    /// Accumulate d(loss)/d(node) for every node that feeds `loss`, which
    /// must be scalar. A tape differentiates once; a second call without a
    /// fresh forward pass returns `StaleTape`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                details: format!("loss must be scalar, got {:?}", loss_value.shape()),
            });
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Array) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &Array) -> Result<(), AutodiffError> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                let neg = map1(g, |x| -x);
                self.accumulate(b, neg);
            }
            &Op::Mul(a, b) => {
                let ga = zip2(g, &self.nodes[b.0].value, |gi, y| gi * y);
                let gb = zip2(g, &self.nodes[a.0].value, |gi, x| gi * x);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Div(a, b) => {
                let vb = &self.nodes[b.0].value;
                let ga = zip2(g, vb, |gi, y| gi / y);
                let va = &self.nodes[a.0].value;
                let gb = Array::with_shape_unchecked(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                        .collect(),
                );
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Matmul(a, b) => {
                let ga = matmul_a_bt(g, &self.nodes[b.0].value)?;
                let gb = matmul_at_b(&self.nodes[a.0].value, g)?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Pow(a, b) => {
                let out = &self.nodes[i].value;
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (j, (&gi, &o)) in g.data().iter().zip(out.data()).enumerate() {
                    let x = va.data()[j];
                    let y = vb.data()[j];
                    let xf = x.max(POW_BASE_FLOOR);
                    if x > POW_BASE_FLOOR {
                        ga[j] = gi * o * y / xf;
                    }
                    gb[j] = gi * o * xf.ln();
                }
                self.accumulate(a, Array::with_shape_unchecked(g.shape().to_vec(), ga));
                self.accumulate(b, Array::with_shape_unchecked(g.shape().to_vec(), gb));
            }
            &Op::Log(a) => {
                let ga = zip2(g, &self.nodes[a.0].value, |gi, x| gi / x);
                self.accumulate(a, ga);
            }
            &Op::Exp(a) => {
                let ga = zip2(g, &self.nodes[i].value, |gi, o| gi * o);
                self.accumulate(a, ga);
            }
            &Op::Relu(a) => {
                let ga = zip2(g, &self.nodes[a.0].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = zip2(g, &self.nodes[i].value, |gi, s| gi * s * (1.0 - s));
                self.accumulate(a, ga);
            }
            &Op::Lgamma(a) => {
                let ga = zip2(g, &self.nodes[a.0].value, |gi, x| gi * digamma(x));
                self.accumulate(a, ga);
            }
            &Op::ReduceSum(a) => {
                let gi = g.item();
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(a, Array::full(&shape, gi));
            }
            &Op::ReduceMean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gi = g.item() / n;
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(a, Array::full(&shape, gi));
            }
            &Op::Broadcast(a) => {
                let ga = broadcast_backward(g, self.nodes[a.0].value.shape());
                self.accumulate(a, ga);
            }
            &Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = Array::with_shape_unchecked(shape, g.data().to_vec());
                self.accumulate(a, ga);
            }
            &Op::Slice { input, axis, start, len } => {
                let src_shape = self.nodes[input.0].value.shape().to_vec();
                let mut ga = Array::zeros(&src_shape);
                let outer: usize = src_shape[..axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                for o in 0..outer {
                    let dst = (o * src_shape[axis] + start) * inner;
                    let src = o * len * inner;
                    ga.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(input, ga);
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let first = self.nodes[inputs[0].0].value.shape().to_vec();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total_axis: usize = inputs
                    .iter()
                    .map(|id| self.nodes[id.0].value.shape()[axis])
                    .sum();
                let mut offset = 0;
                for &id in &inputs {
                    let shape = self.nodes[id.0].value.shape().to_vec();
                    let a_len = shape[axis];
                    let mut ga = Array::zeros(&shape);
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * a_len * inner;
                        ga.data_mut()[dst..dst + a_len * inner]
                            .copy_from_slice(&g.data()[src..src + a_len * inner]);
                    }
                    self.accumulate(id, ga);
                    offset += a_len;
                }
            }
            &Op::CausalConv1d { input, weight, dilation } => {
                let vi = &self.nodes[input.0].value;
                let vw = &self.nodes[weight.0].value;
                let (v, t, c_in) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
                let g2 = Array::with_shape_unchecked(vec![v * t, c_out], g.data().to_vec());
                let cols = im2col(vi, dilation, k);
                // d/dW: colsᵀ · g2, then permute back to (C_out, C_in, K).
                let gw2 = matmul_at_b(&cols, &g2)?;
                let mut gw = vec![0.0; c_out * c_in * k];
                for c in 0..c_in {
                    for ki in 0..k {
                        for o in 0..c_out {
                            gw[(o * c_in + c) * k + ki] = gw2.data()[(c * k + ki) * c_out + o];
                        }
                    }
                }
                // d/dX: g2 · W2ᵀ scattered through the same index map.
                let w2 = conv_weight_as_matrix(vw);
                let gcols = matmul_a_bt(&g2, &w2)?;
                let mut gx = vec![0.0; v * t * c_in];
                for vi_idx in 0..v {
                    for tau in 0..t {
                        let row = vi_idx * t + tau;
                        for c in 0..c_in {
                            for ki in 0..k {
                                let shift = dilation * (k - 1 - ki);
                                if tau >= shift {
                                    gx[(vi_idx * t + tau - shift) * c_in + c] +=
                                        gcols.data()[row * c_in * k + c * k + ki];
                                }
                            }
                        }
                    }
                }
                self.accumulate(weight, Array::with_shape_unchecked(vec![c_out, c_in, k], gw));
                self.accumulate(input, Array::with_shape_unchecked(vec![v, t, c_in], gx));
            }
            Op::Dropout { input, mask } => {
                let input = *input;
                let ga = match mask {
                    None => g.clone(),
                    Some(mask) => Array::with_shape_unchecked(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(&gi, &m)| gi * m).collect(),
                    ),
                };
                self.accumulate(input, ga);
            }
        }
        Ok(())
    }
}

fn map1(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::with_shape_unchecked(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip2(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::with_shape_unchecked(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

/// Expand right-aligned broadcastable `src` into `target` shape.
fn broadcast_forward(src: &Array, target: &[usize]) -> Vec<f64> {
    let n: usize = target.iter().product();
    let pad = target.len() - src.shape().len();
    // Stride of each target axis within the source buffer (0 if broadcast).
    let mut strides = vec![0isize; target.len()];
    let mut acc = 1isize;
    for i in (0..target.len()).rev() {
        let s_dim = if i < pad { 1 } else { src.shape()[i - pad] };
        strides[i] = if s_dim == 1 { 0 } else { acc };
        if i >= pad {
            acc *= src.shape()[i - pad] as isize;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..n {
        let off: isize = idx
            .iter()
            .zip(&strides)
            .map(|(&i, &s)| i as isize * s)
            .sum();
        out.push(src.data()[off as usize]);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Sum `g` over the axes that were expanded to reach `g.shape()` from `src_shape`.
fn broadcast_backward(g: &Array, src_shape: &[usize]) -> Array {
    let target = g.shape();
    let pad = target.len() - src_shape.len();
    let mut out = Array::zeros(src_shape);
    let src_n = out.len();
    // Walk the expanded buffer once, folding each element into its source slot.
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1usize;
    for i in (0..target.len()).rev() {
        let s_dim = if i < pad { 1 } else { src_shape[i - pad] };
        strides[i] = if s_dim == 1 { 0 } else { acc };
        if i >= pad {
            acc *= src_shape[i - pad];
        }
    }
    let mut idx = vec![0usize; target.len()];
    for &gv in g.data() {
        let off: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        debug_assert!(off < src_n);
        out.data_mut()[off] += gv;
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Gather the dilated causal windows of a (V, T, C) input into a
/// (V·T) x (C·K) matrix; positions before the series start read as zero.
fn im2col(input: &Array, dilation: usize, k: usize) -> Array {
    let (v, t, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let mut cols = vec![0.0; v * t * c_in * k];
    for vi in 0..v {
        for tau in 0..t {
            let row = (vi * t + tau) * c_in * k;
            for ki in 0..k {
                let shift = dilation * (k - 1 - ki);
                if tau < shift {
                    continue;
                }
                let src = (vi * t + tau - shift) * c_in;
                for c in 0..c_in {
                    cols[row + c * k + ki] = input.data()[src + c];
                }
            }
        }
    }
    Array::with_shape_unchecked(vec![v * t, c_in * k], cols)
}

/// Rearrange a (C_out, C_in, K) kernel into the (C_in·K) x C_out matrix that
/// pairs with `im2col` output.
fn conv_weight_as_matrix(w: &Array) -> Array {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut w2 = vec![0.0; c_in * k * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for ki in 0..k {
                w2[(c * k + ki) * c_out + o] = w.data()[(o * c_in + c) * k + ki];
            }
        }
    }
    Array::with_shape_unchecked(vec![c_in * k, c_out], w2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_stale() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(AutodiffError::StaleTape));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1 = 7 at x=3.
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 3]));
        let b = tape.leaf(Array::zeros(&[3, 3]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn broadcast_row_and_backward_sum() {
        let mut tape = Tape::new();
        let row = tape.leaf(Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let big = tape.broadcast(row, &[4, 3]).unwrap();
        assert_eq!(tape.value(big).at2(2, 1), 2.0);
        let s = tape.reduce_sum(big);
        tape.backward(s).unwrap();
        // Each source element feeds 4 rows.
        assert_eq!(tape.grad(row).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn dropout_inference_is_identity_and_training_masks() {
        let input = Array::new(vec![1, 64], (0..64).map(|i| i as f64 + 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = tape.dropout(x, 0.5, 11, false).unwrap();
        assert_eq!(tape.value(y), &input);

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = tape.dropout(x, 0.5, 11, true).unwrap();
        let kept: Vec<bool> = tape.value(y).data().iter().map(|&v| v != 0.0).collect();
        assert!(kept.iter().any(|&k| k) && kept.iter().any(|&k| !k));
        for (i, &k) in kept.iter().enumerate() {
            if k {
                let scaled = tape.value(y).data()[i];
                assert!((scaled - input.data()[i] * 2.0).abs() < 1e-12);
            }
        }
        // Same seed, same mask.
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(input);
        let y2 = tape2.dropout(x2, 0.5, 11, true).unwrap();
        assert_eq!(tape.value(y), tape2.value(y2));
    }
}
