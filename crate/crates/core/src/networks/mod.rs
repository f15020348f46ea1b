//! Learned inverse operators: residual MLP, multi-kernel 1D CNN and a DeepONet
//! with a Fourier-feature trunk, all built on the autodiff tape.

mod persist;
mod train;

pub use persist::{OPERATOR_FORMAT_VERSION, PARAMS_LAYOUT};
pub use train::{
    clip_global_norm, loss_probe, pinn_residual, train, AdamW, EpochRecord, LossProbe, Objective, StopReason,
    TrainConfig, TrainData,
};

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, NodeId, Tensor};
use crate::datagen::Standardizer;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::rng::{purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Softplus,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularization {
    pub batchnorm: bool,
    pub dropout: f64,
    /// Strength of the `sum ||W||^2` penalty over weight matrices.
    pub l2: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            batchnorm: true,
            dropout: 0.2,
            l2: 1e-4,
        }
    }
}

impl Regularization {
    /// GELU layers only: no batchnorm, no dropout, no penalty.
    pub fn none() -> Self {
        Self {
            batchnorm: false,
            dropout: 0.0,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    /// Adds a linear projection of the first hidden layer to the last one.
    pub residual: bool,
    pub reg: Regularization,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn paper(output: OutputActivation) -> Self {
        Self {
            hidden: vec![128, 256, 512, 256, 128],
            residual: true,
            reg: Regularization::default(),
            output,
        }
    }

    /// Every hidden width divided by two.
    pub fn halved(output: OutputActivation) -> Self {
        let mut s = Self::paper(output);
        s.hidden.iter_mut().for_each(|w| *w /= 2);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub kernels: Vec<usize>,
    pub filters: usize,
    pub conv_layers: usize,
    pub dense: Vec<usize>,
    pub reg: Regularization,
    pub output: OutputActivation,
}

impl CnnSpec {
    pub fn paper(output: OutputActivation) -> Self {
        Self {
            kernels: vec![1, 3, 5, 7],
            filters: 64,
            conv_layers: 2,
            dense: vec![512, 256],
            reg: Regularization::default(),
            output,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepONetSpec {
    pub branch_depth: usize,
    pub branch_width: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub n_freqs: usize,
    pub basis: usize,
    /// Query points, each coordinate scaled to [0, 1]; one per output component.
    pub coords: Vec<Vec<f64>>,
    pub reg: Regularization,
    pub output: OutputActivation,
}

impl DeepONetSpec {
    pub fn paper(coords: Vec<Vec<f64>>, output: OutputActivation) -> Self {
        Self {
            branch_depth: 4,
            branch_width: 256,
            trunk_depth: 4,
            trunk_width: 256,
            n_freqs: 16,
            basis: 128,
            coords,
            reg: Regularization::default(),
            output,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.coords.first().map_or(0, |c| c.len()) * (2 * self.n_freqs + 1)
    }

    /// Trunk input: Fourier features of every coordinate of every query point.
    pub fn trunk_features(&self) -> Matrix {
        let f = self.feature_dim();
        let mut out = Array2::zeros((self.coords.len(), f));
        for (i, c) in self.coords.iter().enumerate() {
            let row: Vec<f64> = c.iter().flat_map(|&x| fourier_features(x, self.n_freqs)).collect();
            out.row_mut(i).assign(&Array1::from(row));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Architecture {
    Mlp(MlpSpec),
    Cnn(CnnSpec),
    #[serde(rename = "deeponet")]
    DeepONet(DeepONetSpec),
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp(_) => "mlp",
            Architecture::Cnn(_) => "cnn",
            Architecture::DeepONet(_) => "deeponet",
        }
    }

    pub fn output(&self) -> OutputActivation {
        match self {
            Architecture::Mlp(s) => s.output,
            Architecture::Cnn(s) => s.output,
            Architecture::DeepONet(s) => s.output,
        }
    }

    pub fn regularization(&self) -> Regularization {
        match self {
            Architecture::Mlp(s) => s.reg,
            Architecture::Cnn(s) => s.reg,
            Architecture::DeepONet(s) => s.reg,
        }
    }

    pub fn validate(&self, in_dim: usize, out_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if in_dim == 0 || out_dim == 0 {
            return bad(format!("network dims must be positive, got {in_dim} -> {out_dim}"));
        }
        let reg = self.regularization();
        if !(0.0..1.0).contains(&reg.dropout) || reg.l2 < 0.0 {
            return bad(format!("invalid regularization {reg:?}"));
        }
        match self {
            Architecture::Mlp(s) => {
                if s.hidden.is_empty() || s.hidden.contains(&0) {
                    return bad(format!("MLP widths must be non-empty and positive: {:?}", s.hidden));
                }
            }
            Architecture::Cnn(s) => {
                if s.kernels.is_empty() || s.kernels.iter().any(|k| k % 2 == 0) {
                    return bad(format!("CNN kernels must be odd: {:?}", s.kernels));
                }
                if s.filters == 0 || s.conv_layers == 0 || s.dense.contains(&0) {
                    return bad("CNN filters, layers and dense widths must be positive".into());
                }
            }
            Architecture::DeepONet(s) => {
                if s.coords.len() != out_dim {
                    return bad(format!(
                        "DeepONet has {} query points but the output has {out_dim} components",
                        s.coords.len()
                    ));
                }
                if s.n_freqs == 0 || s.basis == 0 || s.branch_width == 0 || s.trunk_width == 0 {
                    return bad("DeepONet sizes must be positive".into());
                }
                let d = s.coords[0].len();
                if d == 0 || s.coords.iter().any(|c| c.len() != d) {
                    return bad("DeepONet query points must share a positive dimension".into());
                }
            }
        }
        Ok(())
    }
}

/// `(x, sin(2 pi k x), cos(2 pi k x))` for `k = 1..=n_freqs`.
pub fn fourier_features(x: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs + 1);
    out.push(x);
    out.extend((1..=n_freqs).map(|k| (2.0 * PI * k as f64 * x).sin()));
    out.extend((1..=n_freqs).map(|k| (2.0 * PI * k as f64 * x).cos()));
    out
}

/// Closed-form parameter count from layer shapes.
pub fn parameter_count(arch: &Architecture, in_dim: usize, out_dim: usize) -> usize {
    // weight plus either batchnorm scale/shift or a bias
    let layer = |fan_in: usize, width: usize, bn: bool| fan_in * width + if bn { 2 * width } else { width };
    match arch {
        Architecture::Mlp(s) => {
            let bn = s.reg.batchnorm;
            let mut n = 0;
            let mut prev = in_dim;
            for &w in &s.hidden {
                n += layer(prev, w, bn);
                prev = w;
            }
            if s.residual && s.hidden.len() > 1 {
                n += s.hidden[0] * prev;
            }
            n + prev * out_dim + out_dim
        }
        Architecture::Cnn(s) => {
            let bn = s.reg.batchnorm;
            let mut n = 0;
            for &k in &s.kernels {
                let mut ch = 1;
                for _ in 0..s.conv_layers {
                    n += s.filters * ch * k + if bn { 2 * s.filters } else { 0 };
                    ch = s.filters;
                }
            }
            let mut prev = s.filters * s.kernels.len();
            for &w in &s.dense {
                n += layer(prev, w, bn);
                prev = w;
            }
            n + prev * out_dim + out_dim
        }
        Architecture::DeepONet(s) => {
            let mut n = 0;
            let mut prev = in_dim;
            for _ in 0..s.branch_depth {
                n += layer(prev, s.branch_width, s.reg.batchnorm);
                prev = s.branch_width;
            }
            n += prev * s.basis + s.basis;
            prev = s.feature_dim();
            for _ in 0..s.trunk_depth {
                n += layer(prev, s.trunk_width, false);
                prev = s.trunk_width;
            }
            n + prev * s.basis + s.basis
        }
    }
}

/// Parameter tensors (graph order) and batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub params: Vec<Tensor>,
    pub running: Vec<(Array1<f64>, Array1<f64>)>,
}

impl NetworkState {
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }
}

/// A network on the tape with handles to its input and standardized output.
pub struct NetGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub output: NodeId,
    /// Weight matrices subject to the L2 penalty.
    pub weights: Vec<NodeId>,
    pub params: Vec<NodeId>,
}

impl NetGraph {
    pub fn state(&self) -> NetworkState {
        NetworkState {
            params: self.params.iter().map(|&p| self.graph.value(p).clone()).collect(),
            running: self
                .graph
                .batchnorm_nodes()
                .into_iter()
                .map(|id| {
                    let (m, v) = self.graph.running_stats(id).expect("batchnorm node");
                    (m.clone(), v.clone())
                })
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: &NetworkState) -> Result<()> {
        for (&p, t) in self.params.iter().zip(&state.params) {
            self.graph.set_value(p, t.clone())?;
        }
        for (id, (m, v)) in self.graph.batchnorm_nodes().into_iter().zip(&state.running) {
            self.graph.set_running_stats(id, m.clone(), v.clone())?;
        }
        Ok(())
    }
}

enum Source<'a> {
    Init(RngStream),
    Stored(std::slice::Iter<'a, Tensor>),
}

struct Builder<'a> {
    g: Graph,
    src: Source<'a>,
    weights: Vec<NodeId>,
}

impl Builder<'_> {
    fn tensor(&mut self, rows: usize, cols: usize, fill: impl Fn(&mut RngStream) -> f64) -> Result<NodeId> {
        let value = match &mut self.src {
            Source::Init(rng) => Array2::from_shape_simple_fn((rows, cols), || fill(rng)),
            Source::Stored(it) => {
                let t = it
                    .next()
                    .ok_or_else(|| Error::Spec("stored parameters exhausted".into()))?;
                if t.dim() != (rows, cols) {
                    return Err(Error::ShapeMismatch(format!(
                        "stored parameter is {:?}, architecture expects {:?}",
                        t.dim(),
                        (rows, cols)
                    )));
                }
                t.clone()
            }
        };
        Ok(self.g.param(value))
    }

    fn weight(&mut self, fan_in: usize, rows: usize, cols: usize) -> Result<NodeId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let id = self.tensor(rows, cols, |r| std * r.normal())?;
        self.weights.push(id);
        Ok(id)
    }

    fn constant(&mut self, rows: usize, cols: usize, v: f64) -> Result<NodeId> {
        self.tensor(rows, cols, |_| v)
    }

    /// `x W (+ b)`, then batchnorm, GELU and dropout as configured.
    fn hidden(&mut self, x: NodeId, fan_in: usize, width: usize, reg: &Regularization) -> Result<NodeId> {
        let w = self.weight(fan_in, fan_in, width)?;
        let mut h = self.g.matmul(x, w)?;
        if reg.batchnorm {
            let gamma = self.constant(1, width, 1.0)?;
            let beta = self.constant(1, width, 0.0)?;
            h = self.g.batchnorm(h, gamma, beta, width, 1)?;
        } else {
            let b = self.constant(1, width, 0.0)?;
            h = self.g.add_bias(h, b)?;
        }
        h = self.g.gelu(h)?;
        if reg.dropout > 0.0 {
            h = self.g.dropout(h, reg.dropout)?;
        }
        Ok(h)
    }

    fn linear(&mut self, x: NodeId, fan_in: usize, width: usize) -> Result<NodeId> {
        let w = self.weight(fan_in, fan_in, width)?;
        let b = self.constant(1, width, 0.0)?;
        let h = self.g.matmul(x, w)?;
        self.g.add_bias(h, b)
    }

    fn head(&mut self, x: NodeId, fan_in: usize, out: usize, act: OutputActivation) -> Result<NodeId> {
        let h = self.linear(x, fan_in, out)?;
        match act {
            OutputActivation::Softplus => self.g.softplus(h),
            OutputActivation::Linear => Ok(h),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub in_dim: usize,
    pub out_dim: usize,
    pub state: NetworkState,
}

impl Network {
    /// Fan-in scaled normal weights, zero biases, unit batchnorm scales.
    pub fn init(arch: Architecture, in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        arch.validate(in_dim, out_dim)?;
        let rng = RngStream::for_purpose(seed, purpose::INIT, 0);
        let ng = build(&arch, in_dim, out_dim, Source::Init(rng), Mode::Eval, 2, None)?;
        Ok(Self {
            state: ng.state(),
            arch,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.state.num_values()
    }

    /// Builds the tape for `batch` rows with this network's parameters.
    pub fn graph(&self, mode: Mode, batch: usize, dropout_rng: Option<RngStream>) -> Result<NetGraph> {
        let mut ng = build(
            &self.arch,
            self.in_dim,
            self.out_dim,
            Source::Stored(self.state.params.iter()),
            mode,
            batch,
            dropout_rng,
        )?;
        if ng.params.len() != self.state.params.len() {
            return Err(Error::Spec("stored parameter count does not match the architecture".into()));
        }
        ng.load_state(&self.state)?;
        Ok(ng)
    }

    /// Inference on standardized inputs (dropout off, running statistics).
    pub fn forward_standardized(&self, z: &Matrix) -> Result<Matrix> {
        if z.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.in_dim,
                z.ncols()
            )));
        }
        let mut ng = self.graph(Mode::Eval, z.nrows().max(1), None)?;
        ng.graph.set_value(ng.input, z.clone())?;
        ng.graph.forward()?;
        Ok(ng.graph.value(ng.output).clone())
    }
}

fn build(
    arch: &Architecture,
    in_dim: usize,
    out_dim: usize,
    src: Source<'_>,
    mode: Mode,
    batch: usize,
    dropout_rng: Option<RngStream>,
) -> Result<NetGraph> {
    let mut g = Graph::new();
    g.set_mode(mode);
    if let Some(r) = dropout_rng {
        g.set_dropout_rng(r);
    }
    let mut b = Builder {
        g,
        src,
        weights: Vec::new(),
    };
    let input = b.g.input(Array2::zeros((batch, in_dim)));
    let output = match arch {
        Architecture::Mlp(s) => {
            let first = b.hidden(input, in_dim, s.hidden[0], &s.reg)?;
            let mut h = first;
            for w in s.hidden.windows(2) {
                h = b.hidden(h, w[0], w[1], &s.reg)?;
            }
            let last = *s.hidden.last().unwrap();
            if s.residual && s.hidden.len() > 1 {
                let p = b.weight(s.hidden[0], s.hidden[0], last)?;
                let skip = b.g.matmul(first, p)?;
                h = b.g.add(h, skip)?;
            }
            b.head(h, last, out_dim, s.output)?
        }
        Architecture::Cnn(s) => {
            let len = in_dim;
            let mut pooled = Vec::new();
            for &k in &s.kernels {
                let mut h = input;
                let mut ch = 1;
                for _ in 0..s.conv_layers {
                    let w = b.weight(ch * k, s.filters, ch * k)?;
                    h = b.g.conv1d(h, w, ch, s.filters, k, len)?;
                    if s.reg.batchnorm {
                        let gamma = b.constant(1, s.filters, 1.0)?;
                        let beta = b.constant(1, s.filters, 0.0)?;
                        h = b.g.batchnorm(h, gamma, beta, s.filters, len)?;
                    }
                    h = b.g.gelu(h)?;
                    ch = s.filters;
                }
                pooled.push(b.g.global_avg_pool(h, s.filters, len)?);
            }
            let mut h = b.g.concat(pooled)?;
            let mut prev = s.filters * s.kernels.len();
            for &w in &s.dense {
                h = b.hidden(h, prev, w, &s.reg)?;
                prev = w;
            }
            b.head(h, prev, out_dim, s.output)?
        }
        Architecture::DeepONet(s) => {
            let mut h = input;
            let mut prev = in_dim;
            for _ in 0..s.branch_depth {
                h = b.hidden(h, prev, s.branch_width, &s.reg)?;
                prev = s.branch_width;
            }
            let branch = b.linear(h, prev, s.basis)?;
            let plain = Regularization::none();
            let mut t = b.g.input(s.trunk_features());
            prev = s.feature_dim();
            for _ in 0..s.trunk_depth {
                t = b.hidden(t, prev, s.trunk_width, &plain)?;
                prev = s.trunk_width;
            }
            let trunk = b.linear(t, prev, s.basis)?;
            let trunk_t = b.g.transpose(trunk)?;
            let out = b.g.matmul(branch, trunk_t)?;
            match s.output {
                OutputActivation::Softplus => b.g.softplus(out)?,
                OutputActivation::Linear => out,
            }
        }
    };
    let params = b.g.params();
    Ok(NetGraph {
        graph: b.g,
        input,
        output,
        weights: b.weights,
        params,
    })
}

/// A network together with the standardization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedOperator {
    pub network: Network,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub stop: StopReason,
}

impl TrainedOperator {
    /// Maps raw observations (rows) to physical parameters.
    pub fn predict_batch(&self, d_raw: &Matrix) -> Result<Matrix> {
        if d_raw.ncols() != self.network.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "operator expects {} observations, got {}",
                self.network.in_dim,
                d_raw.ncols()
            )));
        }
        let z = self.standardizer.input.apply(d_raw);
        let y = self.network.forward_standardized(&z)?;
        Ok(self.standardizer.output.invert(&y))
    }

    pub fn predict(&self, d_raw: &Vector) -> Result<Vector> {
        let row = d_raw.view().insert_axis(ndarray::Axis(0)).to_owned();
        Ok(self.predict_batch(&row)?.row(0).to_owned())
    }
}
