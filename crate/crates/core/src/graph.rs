//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order: a node may only reference nodes
//! created before it, so the graph is acyclic by construction. Leaves are
//! data inputs, trainable parameters, and non-trainable buffers (batch-norm
//! running statistics). `forward` fills output caches for the ancestors of
//! the requested nodes; `backward` walks them in reverse and accumulates into
//! parameter gradients until `zero_grad` is called.

use crate::loss::{self, CeCache};
use crate::tensor::{self, dim_err, BnCache, Mode, PoolKind, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { requires_grad: bool },
    Param,
    Buffer,
    Conv2d { stride: usize, pad: usize },
    /// Inputs: x, scale, shift, running mean, running var.
    BatchNorm { eps: f64, momentum: f64 },
    Relu,
    Pool { kind: PoolKind, k: usize, stride: usize },
    Upsample2,
    Concat,
    Add,
    LinearHeads { depth: usize },
    /// Inputs: logits `[N, M, C]`, labels `[N, M]`.
    SoftmaxCe { neg_pos_ratio: f64 },
    /// Inputs: predicted offsets `[N, M, 4]`, targets `[N, M, 4]`, labels `[N, M]`.
    SmoothL1 { weight: f64 },
}

impl Op {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Param | Op::Buffer)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param => "param",
            Op::Buffer => "buffer",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Pool { kind: PoolKind::Max, .. } => "maxpool",
            Op::Pool { kind: PoolKind::Avg, .. } => "avgpool",
            Op::Upsample2 => "upsample2",
            Op::Concat => "concat-channels",
            Op::Add => "add",
            Op::LinearHeads { .. } => "linear-heads",
            Op::SoftmaxCe { .. } => "softmax-ce",
            Op::SmoothL1 { .. } => "smooth-l1",
        }
    }
}

#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    Bn(BnCache),
    Argmax(Vec<usize>),
    Ce(CeCache),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    name: Option<String>,
    value: Option<Tensor>,
    grad: Option<Tensor>,
    aux: Aux,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, name: Option<String>, value: Option<Tensor>) -> NodeId {
        let needs_grad = match op {
            Op::Param => true,
            Op::Input { requires_grad } => requires_grad,
            Op::Buffer => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs, name, value, grad: None, aux: Aux::None, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, requires_grad: bool) -> NodeId {
        self.push(Op::Input { requires_grad }, vec![], Some(name.to_string()), None)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Param, vec![], Some(name.to_string()), Some(value))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Buffer, vec![], Some(name.to_string()), Some(value))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { stride, pad }, vec![x, weight, bias], None, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
        momentum: f64,
    ) -> NodeId {
        self.push(Op::BatchNorm { eps, momentum }, vec![x, scale, shift, running_mean, running_var], None, None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x], None, None)
    }

    pub fn pool(&mut self, x: NodeId, kind: PoolKind, k: usize, stride: usize) -> NodeId {
        self.push(Op::Pool { kind, k, stride }, vec![x], None, None)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2, vec![x], None, None)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat, xs.to_vec(), None, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b], None, None)
    }

    pub fn linear_heads(&mut self, heads: &[NodeId], depth: usize) -> NodeId {
        self.push(Op::LinearHeads { depth }, heads.to_vec(), None, None)
    }

    pub fn softmax_ce(&mut self, logits: NodeId, labels: NodeId, neg_pos_ratio: f64) -> NodeId {
        self.push(Op::SoftmaxCe { neg_pos_ratio }, vec![logits, labels], None, None)
    }

    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId, labels: NodeId, weight: f64) -> NodeId {
        self.push(Op::SmoothL1 { weight }, vec![pred, target, labels], None, None)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].name.as_deref()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Supplies data for an input leaf and invalidates every computed value.
    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match self.nodes[id.0].op {
            Op::Input { .. } => {}
            _ => return Err(TensorError::State(format!("node {} is not an input", id.0))),
        }
        self.nodes[id.0].value = Some(value);
        self.invalidate();
        Ok(())
    }

    fn invalidate(&mut self) {
        for node in &mut self.nodes {
            if !node.op.is_leaf() {
                node.value = None;
                node.aux = Aux::None;
            }
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Replaces the value of a parameter or buffer leaf.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param | Op::Buffer) {
            return Err(TensorError::State(format!("node {} is not a parameter or buffer", id.0)));
        }
        if node.value.as_ref().map(|v| v.shape()) != Some(value.shape()) {
            return dim_err("set_leaf_value", format!("shape {:?} does not match leaf {:?}", value.shape(), node.name));
        }
        node.value = Some(value);
        self.invalidate();
        Ok(())
    }

    pub fn params(&self) -> Vec<NodeId> {
        self.node_ids().filter(|&id| self.nodes[id.0].op == Op::Param).collect()
    }

    /// Parameters and buffers, in creation order, with their names.
    pub fn named_leaves(&self) -> Vec<(NodeId, &str, &Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param | Op::Buffer))
            .map(|(i, n)| (NodeId(i), n.name.as_deref().unwrap_or(""), n.value.as_ref().expect("leaf value")))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Param)
            .map(|n| n.value.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Mutable access to a parameter value together with its gradient.
    pub(crate) fn param_and_grad_mut(&mut self, id: NodeId) -> (&mut Tensor, Option<&Tensor>) {
        let node = &mut self.nodes[id.0];
        (node.value.as_mut().expect("param value"), node.grad.as_ref())
    }

    fn ancestors(&self, outputs: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for inp in &self.nodes[i].inputs {
                    needed[inp.0] = true;
                }
            }
        }
        needed
    }

    /// Evaluates every ancestor of `outputs` that is not already cached.
    pub fn forward(&mut self, outputs: &[NodeId], mode: Mode) -> Result<()> {
        let needed = self.ancestors(outputs);
        for i in 0..self.nodes.len() {
            if !needed[i] {
                continue;
            }
            if self.nodes[i].op.is_leaf() {
                if self.nodes[i].value.is_none() {
                    return Err(TensorError::State(format!(
                        "leaf '{}' has no value",
                        self.nodes[i].name.as_deref().unwrap_or("?")
                    )));
                }
                continue;
            }
            self.eval_node(i, mode)?;
        }
        Ok(())
    }

    fn eval_node(&mut self, i: usize, mode: Mode) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let val = |id: &NodeId| before[id.0].value.as_ref().expect("ancestor evaluated");
        let inputs = &node.inputs;
        let mut aux = Aux::None;
        let mut running = None;
        let out = match node.op {
            Op::Input { .. } | Op::Param | Op::Buffer => unreachable!(),
            Op::Conv2d { stride, pad } => tensor::conv2d(val(&inputs[0]), val(&inputs[1]), val(&inputs[2]), stride, pad)?,
            Op::BatchNorm { eps, momentum } => {
                let out = tensor::batchnorm(
                    val(&inputs[0]),
                    val(&inputs[1]),
                    val(&inputs[2]),
                    val(&inputs[3]),
                    val(&inputs[4]),
                    mode,
                    eps,
                    momentum,
                )?;
                aux = Aux::Bn(out.cache);
                running = out.running;
                out.output
            }
            Op::Relu => tensor::relu(val(&inputs[0])),
            Op::Pool { kind, k, stride } => {
                let out = tensor::pool(val(&inputs[0]), kind, k, stride)?;
                aux = Aux::Argmax(out.argmax);
                out.output
            }
            Op::Upsample2 => tensor::upsample2(val(&inputs[0]))?,
            Op::Concat => {
                let xs: Vec<&Tensor> = inputs.iter().map(val).collect();
                tensor::concat_channels(&xs)?
            }
            Op::Add => tensor::add(val(&inputs[0]), val(&inputs[1]))?,
            Op::LinearHeads { depth } => {
                let xs: Vec<&Tensor> = inputs.iter().map(val).collect();
                tensor::linear_heads(&xs, depth)?
            }
            Op::SoftmaxCe { neg_pos_ratio } => {
                let (loss, cache) = loss::softmax_ce_forward(val(&inputs[0]), val(&inputs[1]), neg_pos_ratio)?;
                aux = Aux::Ce(cache);
                Tensor::scalar(loss)
            }
            Op::SmoothL1 { weight } => {
                Tensor::scalar(loss::smooth_l1_forward(val(&inputs[0]), val(&inputs[1]), val(&inputs[2]), weight)?)
            }
        };
        node.value = Some(out);
        node.aux = aux;
        if let Some((rm, rv)) = running {
            let (rm_id, rv_id) = (node.inputs[3].0, node.inputs[4].0);
            let shape = vec![rm.len()];
            before[rm_id].value = Some(Tensor::new(shape.clone(), rm)?);
            before[rv_id].value = Some(Tensor::new(shape, rv)?);
        }
        Ok(())
    }

    /// Backpropagates from a scalar node. Parameter gradients accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        match self.nodes[loss.0].value.as_ref() {
            None => return Err(TensorError::State("backward called before forward".into())),
            Some(v) if v.len() != 1 => {
                return dim_err("backward", format!("loss must be scalar, got shape {:?}", v.shape()))
            }
            Some(_) => {}
        }
        let needed = self.ancestors(&[loss]);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        let seed_shape = self.nodes[loss.0].value.as_ref().expect("checked above").shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !needed[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op.is_leaf() {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            if node.value.is_none() {
                return Err(TensorError::State(format!("node {i} ({}) was not evaluated", node.op.kind_name())));
            }
            let contributions = self.node_backward(i, &g)?;
            for (inp, cg) in contributions {
                match grads[inp.0].as_mut() {
                    Some(acc) => acc.add_assign(&cg),
                    None => grads[inp.0] = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let val = |id: NodeId| self.nodes[id.0].value.as_ref().expect("evaluated");
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut out = Vec::new();
        match (&node.op, &node.aux) {
            (Op::Conv2d { stride, pad }, _) => {
                let grads = tensor::conv2d_backward(val(inputs[0]), val(inputs[1]), *stride, *pad, g, wants(inputs[0]))?;
                if let Some(gx) = grads.input {
                    out.push((inputs[0], gx));
                }
                out.push((inputs[1], grads.weight));
                out.push((inputs[2], grads.bias));
            }
            (Op::BatchNorm { .. }, Aux::Bn(cache)) => {
                let (gx, gs, gb) = tensor::batchnorm_backward(val(inputs[1]), cache, g, wants(inputs[0]))?;
                if let Some(gx) = gx {
                    out.push((inputs[0], gx));
                }
                out.push((inputs[1], gs));
                out.push((inputs[2], gb));
            }
            (Op::Relu, _) => out.push((inputs[0], tensor::relu_backward(val(inputs[0]), g))),
            (Op::Pool { kind, k, stride }, Aux::Argmax(argmax)) => {
                let gx = tensor::pool_backward(val(inputs[0]).shape(), *kind, *k, *stride, argmax, g)?;
                out.push((inputs[0], gx));
            }
            (Op::Upsample2, _) => out.push((inputs[0], tensor::upsample2_backward(g)?)),
            (Op::Concat, _) => {
                let channels: Vec<usize> = inputs.iter().map(|&id| val(id).shape()[1]).collect();
                for (id, part) in inputs.iter().zip(tensor::concat_channels_backward(&channels, g)?) {
                    out.push((*id, part));
                }
            }
            (Op::Add, _) => {
                out.push((inputs[0], g.clone()));
                out.push((inputs[1], g.clone()));
            }
            (Op::LinearHeads { depth }, _) => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|&id| val(id).shape().to_vec()).collect();
                for (id, part) in inputs.iter().zip(tensor::linear_heads_backward(&shapes, *depth, g)?) {
                    out.push((*id, part));
                }
            }
            (Op::SoftmaxCe { .. }, Aux::Ce(cache)) => {
                out.push((inputs[0], loss::softmax_ce_backward(val(inputs[0]), cache, g.data()[0])?));
            }
            (Op::SmoothL1 { weight }, _) => {
                let gx = loss::smooth_l1_backward(val(inputs[0]), val(inputs[1]), val(inputs[2]), *weight, g.data()[0])?;
                out.push((inputs[0], gx));
            }
            (op, _) => return Err(TensorError::State(format!("missing forward cache for {}", op.kind_name()))),
        }
        Ok(out.into_iter().filter(|(id, _)| wants(*id)).collect())
    }
}
