//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a static computation description with a closed primitive
//! set (add, mul, matmul, 2-D convolution, 2x2 max-pool, ReLU, softmax, log,
//! sum, mean, reshape). Leaves are rebindable input/parameter slots plus
//! baked-in constants; anything richer (cross-entropy, synchronization loss,
//! value clamps) is composed from these primitives by the callers.
//!
//! Nodes are created in topological order by construction: an operation can
//! only reference ids that already exist. `forward` caches every activation,
//! `backward` walks the node list once in reverse, so each node is visited
//! exactly once per pass.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Param(usize),
    Const,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        same_pad: bool,
    },
    MaxPool2(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    constant: Option<Tensor>,
}

/// How the right operand of an elementwise op broadcasts against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a single element applied everywhere.
    Scalar,
    /// rhs `[c]` against lhs `[m, c]` rows.
    Row,
    /// rhs `[c]` against lhs `[n, c, h, w]` channels.
    Channel,
}

fn add_broadcast(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        return Some(Broadcast::Same);
    }
    if rhs == [1] {
        return Some(Broadcast::Scalar);
    }
    if rhs.len() == 1 && lhs.len() == 2 && lhs[1] == rhs[0] {
        return Some(Broadcast::Row);
    }
    if rhs.len() == 1 && lhs.len() == 4 && lhs[1] == rhs[0] {
        return Some(Broadcast::Channel);
    }
    None
}

fn mul_broadcast(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if rhs == [1] {
        Some(Broadcast::Scalar)
    } else {
        None
    }
}

/// Gradients with respect to every leaf slot; slots never touched by the
/// backward sweep come back as zeros of the declared shape.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub inputs: Vec<Tensor>,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_slots: Vec<(String, Vec<usize>)>,
    param_slots: Vec<(String, Vec<usize>)>,
    input_nodes: Vec<NodeId>,
    param_nodes: Vec<NodeId>,
    output: Option<NodeId>,
    values: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, constant: Option<Tensor>) -> NodeId {
        self.values = None; // cached activations no longer match the structure
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            constant,
        });
        id
    }

    fn node_err(&self, id: usize, op: &str, msg: String) -> Error {
        Error::Shape(format!("node {id} ({op}): {msg}"))
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Declare a rebindable input leaf (e.g. an image batch).
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let slot = self.input_slots.len();
        self.input_slots.push((name.to_string(), shape.clone()));
        let id = self.push(Op::Input(slot), shape, None);
        self.input_nodes.push(id);
        id
    }

    /// Declare a rebindable parameter leaf (bound from `ModelParams` order).
    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let slot = self.param_slots.len();
        self.param_slots.push((name.to_string(), shape.clone()));
        let id = self.push(Op::Param(slot), shape, None);
        self.param_nodes.push(id);
        id
    }

    /// Bake a constant tensor into the graph. Constants receive no gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const, shape, Some(value))
    }

    pub fn scalar_const(&mut self, v: Real) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ls, rs) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if add_broadcast(&ls, &rs).is_none() {
            return Err(self.node_err(
                self.nodes.len(),
                "add",
                format!("cannot broadcast {rs:?} onto {ls:?}"),
            ));
        }
        Ok(self.push(Op::Add(a, b), ls, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ls, rs) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if mul_broadcast(&ls, &rs).is_none() {
            return Err(self.node_err(
                self.nodes.len(),
                "mul",
                format!("cannot broadcast {rs:?} onto {ls:?}"),
            ));
        }
        Ok(self.push(Op::Mul(a, b), ls, None))
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.node_err(
                self.nodes.len(),
                "matmul",
                format!("operands must be rank-2, got {sa:?} x {sb:?}"),
            ));
        }
        let (m, ka) = if trans_a {
            (sa[1], sa[0])
        } else {
            (sa[0], sa[1])
        };
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if ka != kb {
            return Err(self.node_err(
                self.nodes.len(),
                "matmul",
                format!("inner dimensions {ka} vs {kb} (shapes {sa:?} x {sb:?})"),
            ));
        }
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            vec![m, n],
            None,
        ))
    }

    /// Stride-1 2-D convolution; `same_pad` zero-pads to keep the spatial size.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, same_pad: bool) -> Result<NodeId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(self.node_err(
                self.nodes.len(),
                "conv2d",
                format!("need x [n,ci,h,w] and w [co,ci,kh,kw], got {sx:?} and {sw:?}"),
            ));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, ciw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != ciw {
            return Err(self.node_err(
                self.nodes.len(),
                "conv2d",
                format!("input channels {ci} vs kernel channels {ciw}"),
            ));
        }
        let (oh, ow) = if same_pad {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(self.node_err(
                    self.nodes.len(),
                    "conv2d",
                    format!("same padding needs odd kernel, got {kh}x{kw}"),
                ));
            }
            (h, wd)
        } else {
            if h < kh || wd < kw {
                return Err(self.node_err(
                    self.nodes.len(),
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{wd}"),
                ));
            }
            (h - kh + 1, wd - kw + 1)
        };
        Ok(self.push(Op::Conv2d { x, w, same_pad }, vec![n, co, oh, ow], None))
    }

    /// 2x2 max-pool with stride 2; spatial dimensions must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || !sx[2].is_multiple_of(2) || !sx[3].is_multiple_of(2) {
            return Err(self.node_err(
                self.nodes.len(),
                "maxpool2",
                format!("need [n,c,even,even], got {sx:?}"),
            ));
        }
        let shape = vec![sx[0], sx[1], sx[2] / 2, sx[3] / 2];
        Ok(self.push(Op::MaxPool2(x), shape, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu(x), shape, None)
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(self.node_err(
                self.nodes.len(),
                "softmax",
                format!("need rank-2 logits, got {sx:?}"),
            ));
        }
        let shape = sx.clone();
        Ok(self.push(Op::Softmax(x), shape, None))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Log(x), shape, None)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![1], None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let have: usize = self.nodes[x.0].shape.iter().product();
        let want: usize = shape.iter().product();
        if have != want {
            return Err(self.node_err(
                self.nodes.len(),
                "reshape",
                format!(
                    "cannot reshape {:?} ({have} elems) to {shape:?} ({want} elems)",
                    self.nodes[x.0].shape
                ),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape, None))
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Evaluate the graph under the given leaf bindings, caching every
    /// intermediate activation for a subsequent backward pass.
    pub fn forward(&mut self, inputs: &[Tensor], params: &[Tensor]) -> Result<Tensor> {
        if inputs.len() != self.input_slots.len() {
            return Err(Error::Contract(format!(
                "graph declares {} input slots, got {} bindings",
                self.input_slots.len(),
                inputs.len()
            )));
        }
        if params.len() != self.param_slots.len() {
            return Err(Error::Contract(format!(
                "graph declares {} param slots, got {} bindings",
                self.param_slots.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in self.input_slots.iter().enumerate() {
            if inputs[i].shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "input '{name}': declared {shape:?}, bound {:?}",
                    inputs[i].shape()
                )));
            }
        }
        for (i, (name, shape)) in self.param_slots.iter().enumerate() {
            if params[i].shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "param '{name}': declared {shape:?}, bound {:?}",
                    params[i].shape()
                )));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = self.eval_node(idx, node, &values, inputs, params)?;
            values.push(v);
        }
        let out_id = self
            .output
            .ok_or_else(|| Error::State("graph has no output node".into()))?;
        let out = values[out_id.0].clone();
        self.values = Some(values);
        Ok(out)
    }

    /// Cached activation of a node from the most recent forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values
            .as_ref()
            .map(|v| &v[id.0])
            .ok_or_else(|| Error::State("value() before forward".into()))
    }

    /// Reverse sweep seeded at the output node.
    pub fn backward(&mut self, seed: &Tensor) -> Result<GradientSet> {
        let out = self
            .output
            .ok_or_else(|| Error::State("graph has no output node".into()))?;
        let (set, _) = self.backward_from(out, seed, &[])?;
        Ok(set)
    }

    /// Reverse sweep seeded at an arbitrary node, additionally reporting the
    /// gradients that arrive at `taps` (used e.g. for Grad-CAM feature maps).
    pub fn backward_from(
        &mut self,
        from: NodeId,
        seed: &Tensor,
        taps: &[NodeId],
    ) -> Result<(GradientSet, Vec<Tensor>)> {
        let values = self
            .values
            .as_ref()
            .ok_or_else(|| Error::State("backward before forward".into()))?;
        if seed.shape() != self.nodes[from.0].shape.as_slice() {
            return Err(Error::Shape(format!(
                "seed gradient shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.nodes[from.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[from.0] = Some(seed.data().to_vec());
        let mut tap_grads: Vec<Option<Tensor>> = vec![None; taps.len()];

        for idx in (0..=from.0).rev() {
            // A node's gradient is complete once every consumer (all at larger
            // indices) has been processed.
            if let Some(pos) = taps.iter().position(|t| t.0 == idx) {
                if let Some(g) = &grads[idx] {
                    tap_grads[pos] =
                        Some(Tensor::from_parts(self.nodes[idx].shape.clone(), g.clone()));
                }
            }
            // Leaves keep their accumulated gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Input(_) | Op::Param(_) | Op::Const) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, values, &mut grads);
        }

        let inputs = self
            .input_nodes
            .iter()
            .enumerate()
            .map(|(slot, id)| match grads[id.0].take() {
                Some(g) => Tensor::from_parts(self.input_slots[slot].1.clone(), g),
                None => Tensor::zeros(&self.input_slots[slot].1),
            })
            .collect();
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .map(|(slot, id)| match grads[id.0].take() {
                Some(g) => Tensor::from_parts(self.param_slots[slot].1.clone(), g),
                None => Tensor::zeros(&self.param_slots[slot].1),
            })
            .collect();
        let taps_out = taps
            .iter()
            .zip(tap_grads)
            .map(|(t, g)| g.unwrap_or_else(|| Tensor::zeros(&self.nodes[t.0].shape)))
            .collect();
        Ok((GradientSet { inputs, params }, taps_out))
    }

    fn eval_node(
        &self,
        idx: usize,
        node: &Node,
        values: &[Tensor],
        inputs: &[Tensor],
        params: &[Tensor],
    ) -> Result<Tensor> {
        let v = |id: NodeId| &values[id.0];
        Ok(match &node.op {
            Op::Input(slot) => inputs[*slot].clone(),
            Op::Param(slot) => params[*slot].clone(),
            Op::Const => node.constant.clone().expect("const node holds a value"),
            Op::Add(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                match add_broadcast(ta.shape(), tb.shape()).expect("checked at build") {
                    Broadcast::Same => {
                        let mut out = ta.data().to_vec();
                        for (o, &x) in out.iter_mut().zip(tb.data()) {
                            *o += x;
                        }
                        Tensor::from_parts(node.shape.clone(), out)
                    }
                    Broadcast::Scalar => {
                        let s = tb.data()[0];
                        ta.map(|x| x + s)
                    }
                    Broadcast::Row => {
                        let c = tb.len();
                        let mut out = ta.data().to_vec();
                        for row in out.chunks_exact_mut(c) {
                            for (o, &x) in row.iter_mut().zip(tb.data()) {
                                *o += x;
                            }
                        }
                        Tensor::from_parts(node.shape.clone(), out)
                    }
                    Broadcast::Channel => {
                        let (ch, plane) = (node.shape[1], node.shape[2] * node.shape[3]);
                        let mut out = ta.data().to_vec();
                        for img in out.chunks_exact_mut(ch * plane) {
                            for (cidx, chunk) in img.chunks_exact_mut(plane).enumerate() {
                                let b = tb.data()[cidx];
                                for o in chunk {
                                    *o += b;
                                }
                            }
                        }
                        Tensor::from_parts(node.shape.clone(), out)
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                match mul_broadcast(ta.shape(), tb.shape()).expect("checked at build") {
                    Broadcast::Scalar => {
                        let s = tb.data()[0];
                        ta.map(|x| x * s)
                    }
                    _ => ta.zip_map(tb, |x, y| x * y)?,
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (v(*a), v(*b));
                gemm(ta, *trans_a, tb, *trans_b)
            }
            Op::Conv2d { x, w, same_pad } => conv2d_forward(v(*x), v(*w), *same_pad),
            Op::MaxPool2(x) => max_pool2_forward(v(*x)),
            Op::Relu(x) => v(*x).map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::Softmax(x) => softmax_forward(v(*x)),
            Op::Log(x) => {
                let t = v(*x);
                if let Some(bad) = t.data().iter().position(|&a| a <= 0.0) {
                    return Err(Error::Contract(format!(
                        "node {idx} (log): nonpositive input {} at flat index {bad}",
                        t.data()[bad]
                    )));
                }
                t.map(|a| a.ln())
            }
            Op::Sum(x) => Tensor::scalar(v(*x).data().iter().sum()),
            Op::Mean(x) => {
                let t = v(*x);
                Tensor::scalar(t.data().iter().sum::<Real>() / t.len() as Real)
            }
            Op::Reshape(x) => Tensor::from_parts(node.shape.clone(), v(*x).data().to_vec()),
        })
    }

    fn propagate(
        &self,
        idx: usize,
        gout: &[Real],
        values: &[Tensor],
        grads: &mut [Option<Vec<Real>>],
    ) {
        let acc = |grads: &mut [Option<Vec<Real>>], id: NodeId, contrib: Vec<Real>| match &mut grads
            [id.0]
        {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        };
        let v = |id: NodeId| &values[id.0];
        match &self.nodes[idx].op {
            Op::Input(_) | Op::Param(_) | Op::Const => {}
            Op::Add(a, b) => {
                let (sa, sb) = (v(*a).shape(), v(*b).shape());
                acc(grads, *a, gout.to_vec());
                match add_broadcast(sa, sb).expect("checked at build") {
                    Broadcast::Same => acc(grads, *b, gout.to_vec()),
                    Broadcast::Scalar => acc(grads, *b, vec![gout.iter().sum()]),
                    Broadcast::Row => {
                        let c = sb[0];
                        let mut gb = vec![0.0; c];
                        for row in gout.chunks_exact(c) {
                            for (g, &x) in gb.iter_mut().zip(row) {
                                *g += x;
                            }
                        }
                        acc(grads, *b, gb);
                    }
                    Broadcast::Channel => {
                        let (ch, plane) = (sa[1], sa[2] * sa[3]);
                        let mut gb = vec![0.0; ch];
                        for img in gout.chunks_exact(ch * plane) {
                            for (cidx, chunk) in img.chunks_exact(plane).enumerate() {
                                gb[cidx] += chunk.iter().sum::<Real>();
                            }
                        }
                        acc(grads, *b, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                match mul_broadcast(ta.shape(), tb.shape()).expect("checked at build") {
                    Broadcast::Scalar => {
                        let s = tb.data()[0];
                        acc(grads, *a, gout.iter().map(|&g| g * s).collect());
                        let gb = gout
                            .iter()
                            .zip(ta.data())
                            .map(|(&g, &x)| g * x)
                            .sum::<Real>();
                        acc(grads, *b, vec![gb]);
                    }
                    _ => {
                        acc(
                            grads,
                            *a,
                            gout.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect(),
                        );
                        acc(
                            grads,
                            *b,
                            gout.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect(),
                        );
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (v(*a), v(*b));
                let gshape = &self.nodes[idx].shape;
                let gt = Tensor::from_parts(gshape.clone(), gout.to_vec());
                // d(op(A) . op(B)) expressed again as gemms on the raw operands.
                let (ga, gb) = match (trans_a, trans_b) {
                    (false, false) => (gemm(&gt, false, tb, true), gemm(ta, true, &gt, false)),
                    (false, true) => (gemm(&gt, false, tb, false), gemm(&gt, true, ta, false)),
                    (true, false) => (gemm(tb, false, &gt, true), gemm(ta, false, &gt, false)),
                    (true, true) => (gemm(tb, true, &gt, true), gemm(&gt, true, ta, true)),
                };
                acc(grads, *a, ga.into_data());
                acc(grads, *b, gb.into_data());
            }
            Op::Conv2d { x, w, same_pad } => {
                let (gx, gw) = conv2d_backward(v(*x), v(*w), gout, *same_pad);
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
            Op::MaxPool2(x) => {
                acc(grads, *x, max_pool2_backward(v(*x), gout));
            }
            Op::Relu(x) => {
                let gx = v(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                    .collect();
                acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let s = &values[idx]; // softmax output
                let cols = s.shape()[1];
                let mut gx = vec![0.0; s.len()];
                for (r, (srow, grow)) in s
                    .data()
                    .chunks_exact(cols)
                    .zip(gout.chunks_exact(cols))
                    .enumerate()
                {
                    let dot: Real = srow.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..cols {
                        gx[r * cols + j] = srow[j] * (grow[j] - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = v(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&a, &g)| g / a)
                    .collect();
                acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let g = gout[0];
                acc(grads, *x, vec![g; v(*x).len()]);
            }
            Op::Mean(x) => {
                let n = v(*x).len();
                let g = gout[0] / n as Real;
                acc(grads, *x, vec![g; n]);
            }
            Op::Reshape(x) => {
                acc(grads, *x, gout.to_vec());
            }
        }
    }
}

/// Rank-2 matrix product with optional operand transposition.
fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let n = if trans_b { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aik) in arow.iter().enumerate() {
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bpj) in orow.iter_mut().zip(brow) {
                        *o += aik * bpj;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &ad[p * m..(p + 1) * m];
                let brow = &bd[p * n..(p + 1) * n];
                for (i, &api) in arow.iter().enumerate() {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bpj) in orow.iter_mut().zip(brow) {
                        *o += api * bpj;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[p * m + i] * bd[j * k + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, same_pad: bool) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ph, pw) = if same_pad {
        ((kh - 1) / 2, (kw - 1) / 2)
    } else {
        (0, 0)
    };
    let (oh, ow) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * co * oh * ow];
    for img in 0..n {
        for oc in 0..co {
            let oplane = &mut out[(img * co + oc) * oh * ow..(img * co + oc + 1) * oh * ow];
            for icn in 0..ci {
                let xplane = &xd[(img * ci + icn) * h * wd..(img * ci + icn + 1) * h * wd];
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let wv = wdat[((oc * ci + icn) * kh + dkh) * kw + dkw];
                        let hshift = dkh as isize - ph as isize;
                        let wshift = dkw as isize - pw as isize;
                        for orow in 0..oh {
                            let irow = orow as isize + hshift;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[irow as usize * wd..(irow as usize + 1) * wd];
                            let lo = (-wshift).max(0) as usize;
                            let hi = ((wd as isize - wshift).min(ow as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let xlo = (lo as isize + wshift) as usize;
                            let span = hi - lo;
                            let orow_s = &mut oplane[orow * ow + lo..orow * ow + hi];
                            let xrow_s = &xrow[xlo..xlo + span];
                            for (o, &xv) in orow_s.iter_mut().zip(xrow_s) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, co, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[Real],
    same_pad: bool,
) -> (Vec<Real>, Vec<Real>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ph, pw) = if same_pad {
        ((kh - 1) / 2, (kw - 1) / 2)
    } else {
        (0, 0)
    };
    let (oh, ow) = (h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1);
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wdat.len()];
    for img in 0..n {
        for oc in 0..co {
            let gplane = &gout[(img * co + oc) * oh * ow..(img * co + oc + 1) * oh * ow];
            for icn in 0..ci {
                let xplane = &xd[(img * ci + icn) * h * wd..(img * ci + icn + 1) * h * wd];
                let gxplane_base = (img * ci + icn) * h * wd;
                for dkh in 0..kh {
                    for dkw in 0..kw {
                        let widx = ((oc * ci + icn) * kh + dkh) * kw + dkw;
                        let wv = wdat[widx];
                        let hshift = dkh as isize - ph as isize;
                        let wshift = dkw as isize - pw as isize;
                        let mut wacc = 0.0;
                        for orow in 0..oh {
                            let irow = orow as isize + hshift;
                            if irow < 0 || irow >= h as isize {
                                continue;
                            }
                            let xrow_base = irow as usize * wd;
                            let grow = &gplane[orow * ow..(orow + 1) * ow];
                            let lo = (-wshift).max(0) as usize;
                            let hi = ((wd as isize - wshift).min(ow as isize)).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let xlo = (lo as isize + wshift) as usize;
                            let span = hi - lo;
                            let grow_s = &grow[lo..hi];
                            let xrow_s = &xplane[xrow_base + xlo..xrow_base + xlo + span];
                            let gx_s = &mut gx[gxplane_base + xrow_base + xlo
                                ..gxplane_base + xrow_base + xlo + span];
                            for ((gxv, &g), &xv) in gx_s.iter_mut().zip(grow_s).zip(xrow_s) {
                                wacc += g * xv;
                                *gxv += g * wv;
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn max_pool2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for r in 0..oh {
            for cidx in 0..ow {
                let base = 2 * r * w + 2 * cidx;
                let m = xp[base]
                    .max(xp[base + 1])
                    .max(xp[base + w])
                    .max(xp[base + w + 1]);
                op[r * ow + cidx] = m;
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

fn max_pool2_backward(x: &Tensor, gout: &[Real]) -> Vec<Real> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut gx = vec![0.0; xd.len()];
    for plane in 0..n * c {
        let xp = &xd[plane * h * w..(plane + 1) * h * w];
        let gp = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        let gxp = &mut gx[plane * h * w..(plane + 1) * h * w];
        for r in 0..oh {
            for cidx in 0..ow {
                let base = 2 * r * w + 2 * cidx;
                // First maximum in scan order wins; deterministic on ties.
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &k in &cand[1..] {
                    if xp[k] > xp[best] {
                        best = k;
                    }
                }
                gxp[best] += gp[r * ow + cidx];
            }
        }
    }
    gx
}

fn softmax_forward(x: &Tensor) -> Tensor {
    let cols = x.shape()[1];
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        // Max-subtraction keeps exp() from overflowing on large logits.
        let mx = row.iter().fold(Real::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Compare analytic gradients with central finite differences over every
/// input and parameter coordinate of a scalar-valued graph. Returns the
/// maximum relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check(
    graph: &mut Graph,
    inputs: &[Tensor],
    params: &[Tensor],
    step: Real,
) -> Result<Real> {
    let out = graph.forward(inputs, params)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    let analytic = graph.backward(&Tensor::scalar(1.0))?;

    // Work on mutable copies of the bindings, restoring each coordinate
    // after its probe.
    let mut work_inputs = inputs.to_vec();
    let mut work_params = params.to_vec();
    let mut max_rel: Real = 0.0;

    for which_input in [true, false] {
        let grads = if which_input {
            &analytic.inputs
        } else {
            &analytic.params
        };
        for (slot, g) in grads.iter().enumerate() {
            for coord in 0..g.len() {
                let a = g.data()[coord];
                let bound = if which_input {
                    &mut work_inputs
                } else {
                    &mut work_params
                };
                let orig = bound[slot].data()[coord];
                let eval_at = |graph: &mut Graph,
                               work_inputs: &mut [Tensor],
                               work_params: &mut [Tensor],
                               v: Real|
                 -> Result<Real> {
                    if which_input {
                        work_inputs[slot].data_mut()[coord] = v;
                    } else {
                        work_params[slot].data_mut()[coord] = v;
                    }
                    graph.forward(work_inputs, work_params)?.item()
                };
                let fp = eval_at(graph, &mut work_inputs, &mut work_params, orig + step)?;
                let fm = eval_at(graph, &mut work_inputs, &mut work_params, orig - step)?;
                if which_input {
                    work_inputs[slot].data_mut()[coord] = orig;
                } else {
                    work_params[slot].data_mut()[coord] = orig;
                }
                let numeric = (fp - fm) / (2.0 * step);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    // Leave the cache consistent with the unperturbed bindings.
    graph.forward(inputs, params)?;
    Ok(max_rel)
}
