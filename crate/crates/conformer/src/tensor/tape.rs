//! Wengert tape: operations recorded during the forward pass are replayed in
//! reverse to accumulate gradients. One tape per training step, single thread.

use std::sync::Arc;

use super::compute;

pub(crate) type NodeId = usize;

pub(crate) struct Node {
    pub data: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// True when this node is a requires_grad leaf or depends on one.
    pub needs_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub(crate) struct Step {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Matmul,
    Transpose2,
    Reshape,
    ConcatRows { row_bytes: Vec<usize> },
    SliceRows { start_elem: usize },
    GatherRows { indices: Arc<Vec<usize>>, row: usize },
    Add,
    Sub,
    Mul,
    Div,
    Scale { factor: f64 },
    AddScalar,
    Relu,
    Abs,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Gelu,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    SumAll,
    RoiAlign { hf: usize, wf: usize, channels: usize, bins: usize, min_size: f64 },
}

/// Every op kind the tape can record; the gradient verification suite must
/// cover each of these names.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose2",
    "reshape",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "relu",
    "abs",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "sum_all",
    "roi_align",
];

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Transpose2 => "transpose2",
            Op::Reshape => "reshape",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Gelu => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::SumAll => "sum_all",
            Op::RoiAlign { .. } => "roi_align",
        }
    }
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub steps: Vec<Step>,
    /// When set, input gradients produced by the named op are multiplied by
    /// the factor during backward. Exists so the gradient-check harness can
    /// prove it detects a broken backward rule.
    pub sabotage: Option<(String, f64)>,
}

impl TapeInner {
    pub fn push_node(
        &mut self,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node { data, shape, requires_grad, needs_grad, grad: None });
        self.nodes.len() - 1
    }

    /// Reverse sweep from `root` (a scalar node), accumulating into the
    /// persistent grad buffers of requires_grad leaves.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[root].shape
        );
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[root] = Some(vec![1.0]);

        for si in (0..self.steps.len()).rev() {
            let (op, inputs, output) = {
                let s = &self.steps[si];
                (s.op.clone(), s.inputs.clone(), s.output)
            };
            let Some(gout) = scratch[output].take() else { continue };
            let grads = self.input_grads(&op, &inputs, output, &gout);
            let factor = match &self.sabotage {
                Some((name, f)) if name == op.name() => *f,
                _ => 1.0,
            };
            for (idx, grad) in inputs.iter().zip(grads) {
                if let Some(mut grad) = grad {
                    if !self.nodes[*idx].needs_grad {
                        continue;
                    }
                    if factor != 1.0 {
                        for v in grad.iter_mut() {
                            *v *= factor;
                        }
                    }
                    match &mut scratch[*idx] {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += g;
                            }
                        }
                        slot => *slot = Some(grad),
                    }
                }
            }
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                let buf = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                if let Some(g) = scratch[id].take() {
                    for (b, v) in buf.iter_mut().zip(g) {
                        *b += v;
                    }
                }
            }
        }
    }

    /// Gradient of the step output w.r.t. each input (None = no gradient).
    fn input_grads(
        &self,
        op: &Op,
        inputs: &[NodeId],
        output: NodeId,
        g: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let data = |id: NodeId| -> &[f64] { &self.nodes[id].data };
        let shape = |id: NodeId| -> &[usize] { &self.nodes[id].shape };
        match op {
            Op::Matmul => {
                let (m, k) = (shape(inputs[0])[0], shape(inputs[0])[1]);
                let n = shape(inputs[1])[1];
                let da = compute::matmul_nt(g, data(inputs[1]), m, n, k);
                let db = compute::matmul_tn(data(inputs[0]), g, m, k, n);
                vec![Some(da), Some(db)]
            }
            Op::Transpose2 => {
                let (r, c) = (shape(inputs[0])[0], shape(inputs[0])[1]);
                vec![Some(compute::transpose2(g, c, r))]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::ConcatRows { row_bytes } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(row_bytes.len());
                for len in row_bytes {
                    out.push(Some(g[offset..offset + len].to_vec()));
                    offset += len;
                }
                out
            }
            Op::SliceRows { start_elem } => {
                let mut dx = vec![0.0; data(inputs[0]).len()];
                dx[*start_elem..*start_elem + g.len()].copy_from_slice(g);
                vec![Some(dx)]
            }
            Op::GatherRows { indices, row } => {
                let mut dx = vec![0.0; data(inputs[0]).len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..*row {
                        dx[src * row + j] += g[r * row + j];
                    }
                }
                vec![Some(dx)]
            }
            Op::Add => {
                let rhs_len = data(inputs[1]).len();
                vec![Some(g.to_vec()), Some(reduce_to(g, rhs_len))]
            }
            Op::Sub => {
                let rhs_len = data(inputs[1]).len();
                let mut dr = reduce_to(g, rhs_len);
                for v in dr.iter_mut() {
                    *v = -*v;
                }
                vec![Some(g.to_vec()), Some(dr)]
            }
            Op::Mul => {
                let (a, b) = (data(inputs[0]), data(inputs[1]));
                let da: Vec<f64> =
                    g.iter().enumerate().map(|(i, &gv)| gv * b[i % b.len()]).collect();
                let raw: Vec<f64> = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
                vec![Some(da), Some(reduce_to(&raw, b.len()))]
            }
            Op::Div => {
                let (a, b) = (data(inputs[0]), data(inputs[1]));
                let da: Vec<f64> =
                    g.iter().enumerate().map(|(i, &gv)| gv / b[i % b.len()]).collect();
                let raw: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let bv = b[i % b.len()];
                        -gv * a[i] / (bv * bv)
                    })
                    .collect();
                vec![Some(da), Some(reduce_to(&raw, b.len()))]
            }
            Op::Scale { factor } => {
                vec![Some(g.iter().map(|v| v * factor).collect())]
            }
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Relu => {
                let x = data(inputs[0]);
                vec![Some(g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect())]
            }
            Op::Abs => {
                let x = data(inputs[0]);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else if xv < 0.0 { -gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Exp => {
                let y = data(output);
                vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())]
            }
            Op::Log => {
                let x = data(inputs[0]);
                vec![Some(g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect())]
            }
            Op::Sqrt => {
                let y = data(output);
                vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv * 0.5 / yv).collect())]
            }
            Op::Sigmoid => {
                let y = data(output);
                vec![Some(g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect())]
            }
            Op::Gelu => {
                let x = data(inputs[0]);
                vec![Some(g.iter().zip(x).map(|(&gv, &xv)| gv * compute::gelu_grad(xv)).collect())]
            }
            Op::Softmax { axis } => {
                let y = data(output);
                vec![Some(compute::softmax_backward(y, g, shape(output), *axis))]
            }
            Op::LayerNorm { eps } => {
                let c = data(inputs[1]).len();
                let (dx, dgamma, dbeta) =
                    compute::layernorm_backward(data(inputs[0]), data(inputs[1]), g, c, *eps);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::SumAll => {
                let n = data(inputs[0]).len();
                vec![Some(vec![g[0]; n])]
            }
            Op::RoiAlign { hf, wf, channels, bins, min_size } => {
                let (dgrid, dbox) = compute::roi_align_backward(
                    data(inputs[0]),
                    data(inputs[1]),
                    g,
                    *hf,
                    *wf,
                    *channels,
                    *bins,
                    *min_size,
                );
                vec![Some(dgrid), Some(dbox)]
            }
        }
    }
}

/// Sum-reduce a gradient over a broadcast lhs back to the rhs length
/// (rhs is either the same length, a scalar, or a trailing suffix).
fn reduce_to(g: &[f64], rhs_len: usize) -> Vec<f64> {
    if g.len() == rhs_len {
        return g.to_vec();
    }
    let mut out = vec![0.0; rhs_len];
    for (i, &v) in g.iter().enumerate() {
        out[i % rhs_len] += v;
    }
    out
}
