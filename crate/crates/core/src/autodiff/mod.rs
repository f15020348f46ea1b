//! Reverse-mode automatic differentiation over a static tape of tensor nodes.
//!
//! A [`Graph`] is built once by appending primitives; each append evaluates the
//! node immediately. Afterwards leaf values can be replaced with
//! [`Graph::set_value`] and the whole tape replayed with [`Graph::forward`],
//! which is how the training loop reuses one graph for every batch.
//!
//! Every tensor is a row-major `Array2<f64>` whose first axis is the batch.
//! Channel/length layouts for convolutions are flattened as `c * len + l`.
//! Scalars are `1 x 1` tensors.

mod gradcheck;

pub use gradcheck::{central_difference, grad_check, grad_check_sampled};

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type Tensor = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// A differentiable map applied independently to every row of its input.
///
/// Used to put a forward model inside the tape; the Jacobian supplies the adjoint.
pub trait RowMap: Send + Sync {
    fn output_dim(&self) -> usize;
    /// Value and Jacobian (`output_dim x input_dim`) at `row`.
    fn eval_row(&self, row: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

#[derive(Clone, Debug)]
struct BatchNormState {
    input: NodeId,
    gamma: NodeId,
    beta: NodeId,
    channels: usize,
    len: usize,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    // Filled by the last forward pass.
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    inv_std: Array1<f64>,
    xhat: Tensor,
    used_batch_stats: bool,
}

#[derive(Clone, Debug)]
struct ConvState {
    input: NodeId,
    weight: NodeId,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    len: usize,
    cols: Tensor,
}

#[derive(Clone)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Conv1d(Box<ConvState>),
    GlobalAvgPool { input: NodeId, channels: usize, len: usize },
    BatchNorm(Box<BatchNormState>),
    Dropout { input: NodeId, rate: f64, mask: Tensor },
    Concat(Vec<NodeId>),
    Mse(NodeId, NodeId),
    L2Penalty(Vec<NodeId>, f64),
    Map { input: NodeId, map: Arc<dyn RowMap>, jacobians: Vec<Array2<f64>> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    mode: Mode,
    dropout_rng: Option<RngStream>,
    refresh_masks: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

fn mismatch(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode: Mode::Train,
            dropout_rng: None,
            refresh_masks: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Installs the stream that dropout masks are drawn from.
    pub fn set_dropout_rng(&mut self, rng: RngStream) {
        self.dropout_rng = Some(rng);
        self.refresh_masks = true;
    }

    /// Requests fresh dropout masks on the next forward pass. Without this call
    /// the previous masks are replayed, which makes a step exactly repeatable.
    pub fn resample_masks(&mut self) {
        self.refresh_masks = true;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param | Op::Input)
    }

    /// Batch-norm nodes in creation order.
    pub fn batchnorm_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::BatchNorm(_)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn running_stats(&self, id: NodeId) -> Option<(&Array1<f64>, &Array1<f64>)> {
        match &self.nodes[id.0].op {
            Op::BatchNorm(s) => Some((&s.running_mean, &s.running_var)),
            _ => None,
        }
    }

    pub fn set_running_stats(&mut self, id: NodeId, mean: Array1<f64>, var: Array1<f64>) -> Result<()> {
        match &mut self.nodes[id.0].op {
            Op::BatchNorm(s) if s.channels == mean.len() && s.channels == var.len() => {
                s.running_mean = mean;
                s.running_var = var;
                Ok(())
            }
            _ => Err(Error::ShapeMismatch("running statistics do not fit node".into())),
        }
    }

    /// Folds the batch statistics of the last training-mode forward pass into
    /// the running estimates: `running = m * running + (1 - m) * batch`.
    pub fn commit_batchnorm(&mut self) {
        for node in &mut self.nodes {
            if let Op::BatchNorm(s) = &mut node.op {
                if !s.used_batch_stats {
                    continue;
                }
                let n = (node.value.nrows() * s.len) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for c in 0..s.channels {
                    s.running_mean[c] = BATCHNORM_MOMENTUM * s.running_mean[c]
                        + (1.0 - BATCHNORM_MOMENTUM) * s.batch_mean[c];
                    s.running_var[c] = BATCHNORM_MOMENTUM * s.running_var[c]
                        + (1.0 - BATCHNORM_MOMENTUM) * s.batch_var[c] * unbiased;
                }
            }
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Tensor::zeros((0, 0)),
        });
        if let Err(e) = self.eval_node(id.0) {
            self.nodes.pop();
            return Err(e);
        }
        Ok(id)
    }

    // ---- leaves -----------------------------------------------------------

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Input, value });
        id
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Param, value });
        id
    }

    /// Replaces a leaf value. Call [`Graph::forward`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !self.is_leaf(id) {
            return Err(Error::ShapeMismatch(format!("node {} is not a leaf", id.0)));
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: NodeId) -> Result<&mut Tensor> {
        if !self.is_leaf(id) {
            return Err(Error::ShapeMismatch(format!("node {} is not a leaf", id.0)));
        }
        Ok(&mut self.nodes[id.0].value)
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// `a + bias` where `bias` is `1 x cols(a)`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// `a * row` broadcast over the batch, with `row` of shape `1 x cols(a)`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Cos(a))
    }

    /// Stride-1 cross-correlation with zero padding to the input length.
    ///
    /// `input` is `B x (in_ch * len)`, `weight` is `out_ch x (in_ch * kernel)`;
    /// the kernel size must be odd.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        len: usize,
    ) -> Result<NodeId> {
        if kernel.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("conv1d kernel {kernel} must be odd")));
        }
        self.push(Op::Conv1d(Box::new(ConvState {
            input,
            weight,
            in_ch,
            out_ch,
            kernel,
            len,
            cols: Tensor::zeros((0, 0)),
        })))
    }

    /// Mean over the length axis of a `B x (channels * len)` tensor.
    pub fn global_avg_pool(&mut self, input: NodeId, channels: usize, len: usize) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool { input, channels, len })
    }

    /// Per-channel batch normalization of a `B x (channels * len)` tensor.
    /// `gamma` and `beta` are `1 x channels`. Dense layers use `len = 1`.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channels: usize,
        len: usize,
    ) -> Result<NodeId> {
        self.push(Op::BatchNorm(Box::new(BatchNormState {
            input,
            gamma,
            beta,
            channels,
            len,
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            batch_mean: Array1::zeros(channels),
            batch_var: Array1::zeros(channels),
            inv_std: Array1::zeros(channels),
            xhat: Tensor::zeros((0, 0)),
            used_batch_stats: false,
        })))
    }

    pub fn dropout(&mut self, input: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Spec(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.push(Op::Dropout {
            input,
            rate,
            mask: Tensor::zeros((0, 0)),
        })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Concat(parts))
    }

    /// Mean of squared differences over every entry; a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mse(a, b))
    }

    /// `lambda * sum ||w||^2` over the listed nodes; a scalar node.
    pub fn l2_penalty(&mut self, weights: Vec<NodeId>, lambda: f64) -> Result<NodeId> {
        self.push(Op::L2Penalty(weights, lambda))
    }

    pub fn row_map(&mut self, input: NodeId, map: Arc<dyn RowMap>) -> Result<NodeId> {
        self.push(Op::Map {
            input,
            map,
            jacobians: Vec::new(),
        })
    }

    // ---- evaluation -------------------------------------------------------

    /// Recomputes every non-leaf node from current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            self.eval_node(i)?;
        }
        self.refresh_masks = false;
        Ok(())
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let v = |id: NodeId| -> &Tensor { &before[id.0].value };
        let mode = self.mode;
        let value = match &mut node.op {
            Op::Input | Op::Param => return Ok(()),
            Op::MatMul(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if x.ncols() != y.nrows() {
                    return Err(mismatch("matmul", shape(x), shape(y)));
                }
                x.dot(y)
            }
            Op::Transpose(a) => v(*a).t().to_owned(),
            Op::Add(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if x.dim() != y.dim() {
                    return Err(mismatch("add", shape(x), shape(y)));
                }
                x + y
            }
            Op::AddBias(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if y.nrows() != 1 || y.ncols() != x.ncols() {
                    return Err(mismatch("add_bias", shape(x), shape(y)));
                }
                x + y
            }
            Op::Mul(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if x.dim() != y.dim() {
                    return Err(mismatch("mul", shape(x), shape(y)));
                }
                x * y
            }
            Op::MulRow(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if y.nrows() != 1 || y.ncols() != x.ncols() {
                    return Err(mismatch("mul_row", shape(x), shape(y)));
                }
                x * y
            }
            Op::Scale(a, f) => v(*a) * *f,
            Op::Gelu(a) => v(*a).mapv(gelu),
            Op::Softplus(a) => v(*a).mapv(softplus),
            Op::Tanh(a) => v(*a).mapv(f64::tanh),
            Op::Sin(a) => v(*a).mapv(f64::sin),
            Op::Cos(a) => v(*a).mapv(f64::cos),
            Op::Conv1d(s) => {
                let x = v(s.input);
                let w = v(s.weight);
                if x.ncols() != s.in_ch * s.len {
                    return Err(mismatch("conv1d input", shape(x), (x.nrows(), s.in_ch * s.len)));
                }
                if w.dim() != (s.out_ch, s.in_ch * s.kernel) {
                    return Err(mismatch("conv1d weight", shape(w), (s.out_ch, s.in_ch * s.kernel)));
                }
                let b = x.nrows();
                let pad = s.kernel / 2;
                let mut cols = Tensor::zeros((b * s.len, s.in_ch * s.kernel));
                for bi in 0..b {
                    for l in 0..s.len {
                        let mut row = cols.row_mut(bi * s.len + l);
                        for c in 0..s.in_ch {
                            for j in 0..s.kernel {
                                let src = l + j;
                                if src >= pad && src - pad < s.len {
                                    row[c * s.kernel + j] = x[[bi, c * s.len + src - pad]];
                                }
                            }
                        }
                    }
                }
                let out = cols.dot(&w.t());
                let mut y = Tensor::zeros((b, s.out_ch * s.len));
                for bi in 0..b {
                    for l in 0..s.len {
                        for o in 0..s.out_ch {
                            y[[bi, o * s.len + l]] = out[[bi * s.len + l, o]];
                        }
                    }
                }
                s.cols = cols;
                y
            }
            Op::GlobalAvgPool { input, channels, len } => {
                let x = v(*input);
                if x.ncols() != *channels * *len {
                    return Err(mismatch("global_avg_pool", shape(x), (x.nrows(), *channels * *len)));
                }
                let mut y = Tensor::zeros((x.nrows(), *channels));
                for (bi, row) in x.rows().into_iter().enumerate() {
                    for c in 0..*channels {
                        let s: f64 = (0..*len).map(|l| row[c * *len + l]).sum();
                        y[[bi, c]] = s / *len as f64;
                    }
                }
                y
            }
            Op::BatchNorm(s) => {
                let x = v(s.input);
                let gamma = v(s.gamma);
                let beta = v(s.beta);
                let (ch, len) = (s.channels, s.len);
                if x.ncols() != ch * len || gamma.dim() != (1, ch) || beta.dim() != (1, ch) {
                    return Err(mismatch("batchnorm", shape(x), (x.nrows(), ch * len)));
                }
                let b = x.nrows();
                let use_batch = mode == Mode::Train;
                if use_batch {
                    let n = (b * len) as f64;
                    for c in 0..ch {
                        let mut mean = 0.0;
                        for bi in 0..b {
                            for l in 0..len {
                                mean += x[[bi, c * len + l]];
                            }
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for bi in 0..b {
                            for l in 0..len {
                                let d = x[[bi, c * len + l]] - mean;
                                var += d * d;
                            }
                        }
                        var /= n;
                        s.batch_mean[c] = mean;
                        s.batch_var[c] = var;
                        s.inv_std[c] = 1.0 / (var + BATCHNORM_EPS).sqrt();
                    }
                } else {
                    for c in 0..ch {
                        s.inv_std[c] = 1.0 / (s.running_var[c] + BATCHNORM_EPS).sqrt();
                    }
                }
                let means = if use_batch { &s.batch_mean } else { &s.running_mean };
                let mut xhat = Tensor::zeros((b, ch * len));
                let mut y = Tensor::zeros((b, ch * len));
                for bi in 0..b {
                    for c in 0..ch {
                        for l in 0..len {
                            let k = c * len + l;
                            let h = (x[[bi, k]] - means[c]) * s.inv_std[c];
                            xhat[[bi, k]] = h;
                            y[[bi, k]] = gamma[[0, c]] * h + beta[[0, c]];
                        }
                    }
                }
                s.xhat = xhat;
                s.used_batch_stats = use_batch;
                y
            }
            Op::Dropout { input, rate, mask } => {
                let x = v(*input);
                if mode == Mode::Eval || *rate == 0.0 {
                    *mask = Tensor::zeros((0, 0));
                    x.clone()
                } else {
                    if self.refresh_masks || mask.dim() != x.dim() {
                        let rng = self.dropout_rng.get_or_insert_with(|| RngStream::new(0, 0));
                        let keep = 1.0 / (1.0 - *rate);
                        *mask = Tensor::from_shape_fn(x.dim(), |_| {
                            if rng.uniform() < *rate {
                                0.0
                            } else {
                                keep
                            }
                        });
                    }
                    x * &*mask
                }
            }
            Op::Concat(parts) => {
                let rows = v(parts[0]).nrows();
                let mut views = Vec::with_capacity(parts.len());
                for p in parts.iter() {
                    let t = v(*p);
                    if t.nrows() != rows {
                        return Err(mismatch("concat", (rows, 0), shape(t)));
                    }
                    views.push(t.view());
                }
                ndarray::concatenate(Axis(1), &views)
                    .map_err(|e| Error::ShapeMismatch(format!("concat: {e}")))?
            }
            Op::Mse(a, b) => {
                let (x, y) = (v(*a), v(*b));
                if x.dim() != y.dim() {
                    return Err(mismatch("mse", shape(x), shape(y)));
                }
                let n = x.len().max(1) as f64;
                let s: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                Tensor::from_elem((1, 1), s / n)
            }
            Op::L2Penalty(ws, lambda) => {
                let s: f64 = ws.iter().map(|w| v(*w).iter().map(|x| x * x).sum::<f64>()).sum();
                Tensor::from_elem((1, 1), *lambda * s)
            }
            Op::Map { input, map, jacobians } => {
                let x = v(*input);
                let mut y = Tensor::zeros((x.nrows(), map.output_dim()));
                jacobians.clear();
                for (bi, row) in x.rows().into_iter().enumerate() {
                    let (val, jac) = map.eval_row(row)?;
                    y.row_mut(bi).assign(&val);
                    jacobians.push(jac);
                }
                y
            }
        };
        node.value = value;
        Ok(())
    }

    /// Reverse sweep from a scalar node. Adjoints of every node are stored and
    /// can be read with [`Graph::grad`].
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        self.backward_seeded(output, 1.0)
    }

    /// Reverse sweep with the output adjoint seeded to `seed` instead of 1.
    pub fn backward_seeded(&mut self, output: NodeId, seed: f64) -> Result<()> {
        let (r, c) = self.nodes[output.0].value.dim();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::from_elem((1, 1), seed));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let v = |id: NodeId| -> &Tensor { &self.nodes[id.0].value };
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&v(*b).t()));
                    acc(&mut grads, *b, v(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * v(*b));
                    acc(&mut grads, *b, &g * v(*a));
                }
                Op::MulRow(a, b) => {
                    let gb = (&g * v(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * v(*b));
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &g * *f),
                Op::Gelu(a) => {
                    let mut d = v(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let mut d = v(*a).mapv(sigmoid);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = node.value.mapv(|y| 1.0 - y * y);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let mut d = v(*a).mapv(f64::cos);
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Cos(a) => {
                    let mut d = v(*a).mapv(|x| -x.sin());
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Conv1d(s) => {
                    let b = g.nrows();
                    let mut gout = Tensor::zeros((b * s.len, s.out_ch));
                    for bi in 0..b {
                        for l in 0..s.len {
                            for o in 0..s.out_ch {
                                gout[[bi * s.len + l, o]] = g[[bi, o * s.len + l]];
                            }
                        }
                    }
                    let gw = gout.t().dot(&s.cols);
                    let gcols = gout.dot(v(s.weight));
                    let pad = s.kernel / 2;
                    let mut gx = Tensor::zeros((b, s.in_ch * s.len));
                    for bi in 0..b {
                        for l in 0..s.len {
                            let row = gcols.row(bi * s.len + l);
                            for c in 0..s.in_ch {
                                for j in 0..s.kernel {
                                    let src = l + j;
                                    if src >= pad && src - pad < s.len {
                                        gx[[bi, c * s.len + src - pad]] += row[c * s.kernel + j];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, s.weight, gw);
                    acc(&mut grads, s.input, gx);
                }
                Op::GlobalAvgPool { input, channels, len } => {
                    let b = g.nrows();
                    let mut gx = Tensor::zeros((b, channels * len));
                    for bi in 0..b {
                        for c in 0..*channels {
                            let share = g[[bi, c]] / *len as f64;
                            for l in 0..*len {
                                gx[[bi, c * len + l]] = share;
                            }
                        }
                    }
                    acc(&mut grads, *input, gx);
                }
                Op::BatchNorm(s) => {
                    let gamma = v(s.gamma);
                    let (ch, len) = (s.channels, s.len);
                    let b = g.nrows();
                    let mut ggamma = Tensor::zeros((1, ch));
                    let mut gbeta = Tensor::zeros((1, ch));
                    let mut gx = Tensor::zeros((b, ch * len));
                    for c in 0..ch {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for bi in 0..b {
                            for l in 0..len {
                                let k = c * len + l;
                                sum_g += g[[bi, k]];
                                sum_gx += g[[bi, k]] * s.xhat[[bi, k]];
                            }
                        }
                        ggamma[[0, c]] = sum_gx;
                        gbeta[[0, c]] = sum_g;
                        let gm = gamma[[0, c]];
                        if s.used_batch_stats {
                            let n = (b * len) as f64;
                            // dxhat = g * gamma; sums scale by gamma as well.
                            let sdx = gm * sum_g;
                            let sdxx = gm * sum_gx;
                            for bi in 0..b {
                                for l in 0..len {
                                    let k = c * len + l;
                                    let dxhat = g[[bi, k]] * gm;
                                    gx[[bi, k]] = s.inv_std[c] / n
                                        * (n * dxhat - sdx - s.xhat[[bi, k]] * sdxx);
                                }
                            }
                        } else {
                            for bi in 0..b {
                                for l in 0..len {
                                    let k = c * len + l;
                                    gx[[bi, k]] = g[[bi, k]] * gm * s.inv_std[c];
                                }
                            }
                        }
                    }
                    acc(&mut grads, s.input, gx);
                    acc(&mut grads, s.gamma, ggamma);
                    acc(&mut grads, s.beta, gbeta);
                }
                Op::Dropout { input, mask, .. } => {
                    if mask.dim() == g.dim() {
                        acc(&mut grads, *input, &g * mask);
                    } else {
                        acc(&mut grads, *input, g.clone());
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = v(*p).ncols();
                        acc(
                            &mut grads,
                            *p,
                            g.slice(ndarray::s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::Mse(a, b) => {
                    let (x, y) = (v(*a), v(*b));
                    let f = 2.0 * g[[0, 0]] / x.len().max(1) as f64;
                    let d = (x - y) * f;
                    acc(&mut grads, *b, -&d);
                    acc(&mut grads, *a, d);
                }
                Op::L2Penalty(ws, lambda) => {
                    let f = 2.0 * lambda * g[[0, 0]];
                    for w in ws {
                        acc(&mut grads, *w, v(*w) * f);
                    }
                }
                Op::Map { input, jacobians, .. } => {
                    let x = v(*input);
                    let mut gx = Tensor::zeros(x.dim());
                    for (bi, jac) in jacobians.iter().enumerate() {
                        gx.row_mut(bi).assign(&jac.t().dot(&g.row(bi)));
                    }
                    acc(&mut grads, *input, gx);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(x: f64) -> Tensor {
        Tensor::from_elem((1, 1), x)
    }

    #[test]
    fn gelu_and_softplus_closed_forms() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn forward_basic_values() {
        let mut g = Graph::new();
        let x = g.input(scalar(0.0));
        let a = g.gelu(x).unwrap();
        let b = g.softplus(x).unwrap();
        assert_eq!(g.scalar(a), 0.0);
        assert!((g.scalar(b) - std::f64::consts::LN_2).abs() < 1e-12);
        let y = g.input(array![[1.0, -2.0, 3.5]]);
        let m = g.mse(y, y).unwrap();
        assert_eq!(g.scalar(m), 0.0);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn mse_gradient_vanishes_at_target() {
        let mut g = Graph::new();
        let p = g.param(array![[0.3, -1.0], [2.0, 0.0]]);
        let t = g.input(array![[0.3, -1.0], [2.0, 0.0]]);
        let l = g.mse(p, t).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.param(array![[1.0, 2.0]]);
        let y = g.tanh(p).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarOutput { rows: 1, cols: 2 })));
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros((2, 3)));
        let b = g.input(Tensor::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch(_))));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn replay_with_new_leaf_value() {
        let mut g = Graph::new();
        let x = g.input(scalar(2.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar(y), 4.0);
        g.set_value(x, scalar(5.0)).unwrap();
        g.forward().unwrap();
        assert_eq!(g.scalar(y), 25.0);
    }

    #[test]
    fn conv_same_padding_matches_direct_sum() {
        // single channel, kernel 3, length 4
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 2.0, 3.0, 4.0]]);
        let w = g.param(array![[0.5, 1.0, -1.0]]);
        let y = g.conv1d(x, w, 1, 1, 3, 4).unwrap();
        // y_l = 0.5 x_{l-1} + x_l - x_{l+1}
        let expect = [1.0 - 2.0, 0.5 + 2.0 - 3.0, 1.0 + 3.0 - 4.0, 1.5 + 4.0];
        for (l, e) in expect.iter().enumerate() {
            assert!((g.value(y)[[0, l]] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running() {
        let mut g = Graph::new();
        let x = g.input(array![[1.0], [3.0]]);
        let gamma = g.param(array![[1.0]]);
        let beta = g.param(array![[0.0]]);
        let y = g.batchnorm(x, gamma, beta, 1, 1).unwrap();
        let v = g.value(y).clone();
        assert!((v[[0, 0]] + v[[1, 0]]).abs() < 1e-12);
        g.commit_batchnorm();
        let bn = g.batchnorm_nodes()[0];
        let (rm, rv) = g.running_stats(bn).unwrap();
        assert!((rm[0] - 0.2).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        g.set_mode(Mode::Eval);
        g.forward().unwrap();
        let expect = (1.0 - 0.2) / (1.1f64 + BATCHNORM_EPS).sqrt();
        assert!((g.value(y)[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn dropout_masks_replay_until_resampled() {
        let mut g = Graph::new();
        g.set_dropout_rng(RngStream::new(1, 2));
        let x = g.input(Tensor::ones((4, 32)));
        let y = g.dropout(x, 0.5).unwrap();
        g.forward().unwrap();
        let first = g.value(y).clone();
        g.forward().unwrap();
        assert_eq!(g.value(y), &first);
        g.resample_masks();
        g.forward().unwrap();
        assert_ne!(g.value(y), &first);
        g.set_mode(Mode::Eval);
        g.forward().unwrap();
        assert_eq!(g.value(y), &Tensor::ones((4, 32)));
    }

    #[test]
    fn adjoints_scale_linearly() {
        let build = |g: &mut Graph| {
            let w = g.param(array![[0.4, -0.2], [0.1, 0.7]]);
            let x = g.input(array![[1.0, 2.0], [-0.5, 0.3]]);
            let h = g.matmul(x, w).unwrap();
            let a = g.softplus(h).unwrap();
            let t = g.input(Tensor::zeros((2, 2)));
            let l = g.mse(a, t).unwrap();
            (w, l)
        };
        let mut g1 = Graph::new();
        let (w1, l1) = build(&mut g1);
        g1.backward(l1).unwrap();
        let mut g2 = Graph::new();
        let (w2, l2) = build(&mut g2);
        g2.backward_seeded(l2, 3.5).unwrap();
        let a = g1.grad(w1).unwrap() * 3.5;
        let b = g2.grad(w2).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }
}
