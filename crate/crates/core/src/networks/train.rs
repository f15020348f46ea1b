//! Mini-batch training with AdamW, global-norm clipping, a plateau learning-rate
//! schedule, early stopping and best-validation restore.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkState, OutputActivation, TrainedOperator};
use crate::autodiff::{Graph, Mode, NodeId, Tensor};
use crate::datagen::{split, ScaleMode, Standardizer};
use crate::error::{Error, Result};
use crate::forward::{ForwardMap, ForwardModel};
use crate::numerics::Matrix;
use crate::rng::{purpose, RngStream};

use super::Architecture;

const VALIDATION_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Objective {
    /// Mean squared error against the sampled parameters.
    Erm,
    /// Adds `alpha` times the data-space residual of the prediction.
    Pinn { alpha: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Erm => "nn",
            Objective::Pinn { .. } => "pinn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Validation improvements smaller than this do not count.
    pub min_delta: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Erm,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            batch_size: 256,
            max_epochs: 1000,
            early_stop_patience: 100,
            plateau_factor: 0.5,
            plateau_patience: 15,
            min_delta: 1e-6,
            train_fraction: 0.85,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.batch_size > 0
            && self.plateau_factor > 0.0
            && self.plateau_factor <= 1.0
            && match self.objective {
                Objective::Pinn { alpha } => alpha >= 0.0,
                Objective::Erm => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

/// Training pairs in physical units. `physics` is required for the PINN objective.
#[derive(Clone)]
pub struct TrainData<'a> {
    pub m: &'a Matrix,
    pub d: &'a Matrix,
    pub physics: Option<Arc<dyn ForwardModel>>,
}

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter `i` in place with gradient `g`.
    pub fn update(&mut self, i: usize, theta: &mut Tensor, g: &Tensor) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let decay = 1.0 - self.lr * self.weight_decay;
        let (lr, eps) = (self.lr, self.eps);
        ndarray::Zip::from(theta)
            .and(&mut self.m[i])
            .and(&mut self.v[i])
            .and(g)
            .for_each(|t, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *t = *t * decay - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// Mean over rows and coordinates of `((G(m_hat) - d_raw) / std_d)^2`.
pub fn pinn_residual(model: &dyn ForwardModel, m_hat: &Matrix, d_raw: &Matrix, std_d: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (m, d) in m_hat.rows().into_iter().zip(d_raw.rows()) {
        let p = model.project(&m.to_owned());
        let g = model.evaluate(&p)?;
        for (j, (gv, dv)) in g.iter().zip(d.iter()).enumerate() {
            total += ((gv - dv) / std_d[j]).powi(2);
        }
    }
    Ok(total / (m_hat.nrows() * d_raw.ncols()) as f64)
}

struct LossGraph {
    net: super::NetGraph,
    target: NodeId,
    /// Raw data divided by the input std, present for the PINN objective.
    scaled_data: Option<NodeId>,
    objective: NodeId,
    loss: NodeId,
}

fn build_loss_graph(
    network: &Network,
    st: &Standardizer,
    cfg: &TrainConfig,
    physics: Option<Arc<dyn ForwardModel>>,
    batch: usize,
) -> Result<LossGraph> {
    let dropout_rng = RngStream::for_purpose(cfg.seed, purpose::DROPOUT, 0);
    let mut net = network.graph(Mode::Train, batch, Some(dropout_rng))?;
    let n = network.out_dim;
    let g = &mut net.graph;
    let target = g.input(Array2::zeros((batch, n)));
    let data_fit = g.mse(net.output, target)?;
    let (objective, scaled_data) = match cfg.objective {
        Objective::Erm => (data_fit, None),
        Objective::Pinn { alpha } => {
            let model = physics.ok_or_else(|| Error::Spec("the physics objective needs a forward model".into()))?;
            let m_dim = model.data_dim();
            let std_row = g.input(st.output.std_vector().insert_axis(Axis(0)));
            let shift_row = g.input(st.output.shift_vector().insert_axis(Axis(0)));
            let scaled = g.mul_row(net.output, std_row)?;
            let physical = g.add_bias(scaled, shift_row)?;
            let predicted = g.row_map(physical, Arc::new(ForwardMap::new(model)))?;
            let inv_std = g.input(st.input.std_vector().mapv(|s| 1.0 / s).insert_axis(Axis(0)));
            let predicted_scaled = g.mul_row(predicted, inv_std)?;
            let data = g.input(Array2::zeros((batch, m_dim)));
            let residual = g.mse(predicted_scaled, data)?;
            let weighted = g.scale(residual, alpha)?;
            (g.add(data_fit, weighted)?, Some(data))
        }
    };
    let lambda = network.arch.regularization().l2;
    let penalty = g.l2_penalty(net.weights.clone(), lambda)?;
    let loss = g.add(objective, penalty)?;
    Ok(LossGraph {
        net,
        target,
        scaled_data,
        objective,
        loss,
    })
}

impl LossGraph {
    fn load_batch(&mut self, z: Matrix, y: Matrix, scaled: Option<Matrix>) -> Result<()> {
        let g = &mut self.net.graph;
        g.set_value(self.net.input, z)?;
        g.set_value(self.target, y)?;
        if let (Some(id), Some(s)) = (self.scaled_data, scaled) {
            g.set_value(id, s)?;
        }
        Ok(())
    }
}

fn divide_columns(d: &Matrix, std: &[f64]) -> Matrix {
    let mut out = d.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= std[j];
        }
    }
    out
}

/// The training loss on the first `batch` rows of `data` at initialization,
/// with dropout masks drawn once and then held fixed by every replay.
pub struct LossProbe {
    pub graph: Graph,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
}

pub fn loss_probe(arch: &Architecture, data: &TrainData<'_>, cfg: &TrainConfig, batch: usize) -> Result<LossProbe> {
    cfg.validate()?;
    let rows: Vec<usize> = (0..batch.min(data.m.nrows())).collect();
    let (m, d) = (data.m.select(Axis(0), &rows), data.d.select(Axis(0), &rows));
    let out_mode = match arch.output() {
        OutputActivation::Softplus => ScaleMode::ScaleOnly,
        OutputActivation::Linear => ScaleMode::Full,
    };
    let st = Standardizer::fit(&d, &m, out_mode)?;
    let network = Network::init(arch.clone(), d.ncols(), m.ncols(), cfg.seed)?;
    let mut lg = build_loss_graph(&network, &st, cfg, data.physics.clone(), rows.len())?;
    let scaled = matches!(cfg.objective, Objective::Pinn { .. }).then(|| divide_columns(&d, &st.input.std));
    lg.load_batch(st.input.apply(&d), st.output.apply(&m), scaled)?;
    lg.net.graph.resample_masks();
    lg.net.graph.forward()?;
    Ok(LossProbe {
        params: lg.net.params.clone(),
        loss: lg.loss,
        graph: lg.net.graph,
    })
}

/// Trains `arch` on the pairs in `data`. Rows are split into training and
/// validation partitions; standardization is fitted on the training rows only.
/// Softplus architectures use scale-only output standardization.
pub fn train(arch: &Architecture, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainedOperator> {
    cfg.validate()?;
    let (k, n) = data.m.dim();
    let m_dim = data.d.ncols();
    if data.d.nrows() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} parameter rows but {} data rows",
            data.d.nrows()
        )));
    }
    let (train_idx, val_idx) = split(k, cfg.train_fraction, cfg.seed)?;
    let (m_tr, d_tr) = (data.m.select(Axis(0), &train_idx), data.d.select(Axis(0), &train_idx));
    let (m_va, d_va) = (data.m.select(Axis(0), &val_idx), data.d.select(Axis(0), &val_idx));
    let out_mode = match arch.output() {
        OutputActivation::Softplus => ScaleMode::ScaleOnly,
        OutputActivation::Linear => ScaleMode::Full,
    };
    let st = Standardizer::fit(&d_tr, &m_tr, out_mode)?;
    let (z_tr, y_tr) = (st.input.apply(&d_tr), st.output.apply(&m_tr));
    let (z_va, y_va) = (st.input.apply(&d_va), st.output.apply(&m_va));
    let pinn = matches!(cfg.objective, Objective::Pinn { .. });
    let (s_tr, s_va) = if pinn {
        (
            Some(divide_columns(&d_tr, &st.input.std)),
            Some(divide_columns(&d_va, &st.input.std)),
        )
    } else {
        (None, None)
    };

    let network = Network::init(arch.clone(), m_dim, n, cfg.seed)?;
    let batch = cfg.batch_size.min(train_idx.len());
    let mut lg = build_loss_graph(&network, &st, cfg, data.physics.clone(), batch)?;
    let params = lg.net.params.clone();
    let shapes: Vec<_> = params.iter().map(|&p| lg.net.graph.value(p).dim()).collect();
    let mut opt = AdamW::new(&shapes, cfg.lr, cfg.weight_decay);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_state: NetworkState = lg.net.state();
    let (mut since_best, mut since_plateau) = (0usize, 0usize);
    let mut stop = StopReason::MaxEpochs;
    let k_tr = train_idx.len();

    for epoch in 0..cfg.max_epochs {
        lg.net.graph.set_mode(Mode::Train);
        let order = RngStream::for_purpose(cfg.seed, purpose::SHUFFLE, epoch as u64).permutation(k_tr);
        let mut train_sum = 0.0;
        for (b, rows) in order.chunks(batch).enumerate() {
            let z = z_tr.select(Axis(0), rows);
            let y = y_tr.select(Axis(0), rows);
            let s = s_tr.as_ref().map(|s| s.select(Axis(0), rows));
            lg.load_batch(z, y, s)?;
            let g = &mut lg.net.graph;
            g.resample_masks();
            g.forward()?;
            let loss = g.scalar(lg.loss);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            train_sum += g.scalar(lg.objective) * rows.len() as f64;
            g.backward(lg.loss)?;
            let mut grads: Vec<Tensor> = params
                .iter()
                .zip(&shapes)
                .map(|(&p, &s)| g.grad(p).cloned().unwrap_or_else(|| Array2::zeros(s)))
                .collect();
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.begin_step();
            for (i, (&p, grad)) in params.iter().zip(&grads).enumerate() {
                opt.update(i, g.value_mut(p)?, grad);
            }
            g.commit_batchnorm();
        }
        let train_loss = train_sum / k_tr as f64;

        lg.net.graph.set_mode(Mode::Eval);
        let mut val_sum = 0.0;
        let val_rows: Vec<usize> = (0..val_idx.len()).collect();
        for rows in val_rows.chunks(VALIDATION_CHUNK) {
            let s = s_va.as_ref().map(|s| s.select(Axis(0), rows));
            lg.load_batch(z_va.select(Axis(0), rows), y_va.select(Axis(0), rows), s)?;
            lg.net.graph.forward()?;
            val_sum += lg.net.graph.scalar(lg.objective) * rows.len() as f64;
        }
        let val_loss = val_sum / val_idx.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {:.2e}", opt.lr);

        if val_loss < best_val - cfg.min_delta {
            best_val = val_loss;
            best_state = lg.net.state();
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_plateau >= cfg.plateau_patience {
                opt.lr *= cfg.plateau_factor;
                since_plateau = 0;
            }
            if since_best >= cfg.early_stop_patience {
                stop = StopReason::EarlyStopping;
                break;
            }
        }
    }
    if !best_val.is_finite() {
        best_state = lg.net.state();
    }

    Ok(TrainedOperator {
        network: Network {
            state: best_state,
            ..network
        },
        standardizer: st,
        history,
        config: cfg.clone(),
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_sampled;
    use crate::forward::InterfaceModel;
    use crate::networks::{MlpSpec, Regularization};
    use crate::numerics::Vector;

    fn identity_data(k: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = RngStream::new(seed, 0);
        let m = Array2::from_shape_simple_fn((k, 4), || rng.normal());
        (m.clone(), m)
    }

    fn plain_mlp(hidden: Vec<usize>) -> Architecture {
        Architecture::Mlp(MlpSpec {
            hidden,
            residual: false,
            reg: Regularization::none(),
            output: OutputActivation::Linear,
        })
    }

    #[test]
    fn learns_identity_map() {
        let (m, d) = identity_data(2000, 1);
        let cfg = TrainConfig {
            max_epochs: 500,
            batch_size: 64,
            seed: 2,
            ..TrainConfig::default()
        };
        let op = train(&plain_mlp(vec![8, 8]), &TrainData { m: &m, d: &d, physics: None }, &cfg).unwrap();
        let best = op.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-3, "{best}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (m, d) = identity_data(40, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 5,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let arch = plain_mlp(vec![6]);
        let op = train(&arch, &TrainData { m: &m, d: &d, physics: None }, &cfg).unwrap();
        let init = Network::init(arch, 4, 4, cfg.seed).unwrap();
        assert_eq!(op.network.state.params, init.state.params);
        let first = op.history[0];
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert!(op
            .history
            .iter()
            .all(|h| close(h.train_loss, first.train_loss) && h.val_loss == first.val_loss));
    }

    #[test]
    fn early_stopping_fires_before_max_epochs() {
        let (m, d) = identity_data(60, 4);
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 400,
            early_stop_patience: 100,
            ..TrainConfig::default()
        };
        let op = train(&plain_mlp(vec![4]), &TrainData { m: &m, d: &d, physics: None }, &cfg).unwrap();
        assert_eq!(op.stop, StopReason::EarlyStopping);
        assert_eq!(op.history.len(), 101);
    }

    #[test]
    fn plateau_halves_learning_rate() {
        let (m, d) = identity_data(60, 4);
        let mut cfg = TrainConfig {
            max_epochs: 40,
            early_stop_patience: 100,
            ..TrainConfig::default()
        };
        // a huge min_delta means no epoch counts as an improvement after the first
        cfg.min_delta = 1e9;
        let op = train(&plain_mlp(vec![4]), &TrainData { m: &m, d: &d, physics: None }, &cfg).unwrap();
        let lr: Vec<f64> = op.history.iter().map(|h| h.lr).collect();
        assert_eq!(lr[0], 1e-3);
        assert_eq!(lr[15], 1e-3);
        assert_eq!(lr[16], 5e-4);
        assert_eq!(lr[31], 2.5e-4);
    }

    #[test]
    fn training_is_deterministic() {
        let (m, d) = identity_data(120, 5);
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let arch = Architecture::Mlp(MlpSpec {
            hidden: vec![8, 8],
            residual: true,
            reg: Regularization::default(),
            output: OutputActivation::Softplus,
        });
        let data = TrainData { m: &m, d: &d, physics: None };
        let a = train(&arch, &data, &cfg).unwrap();
        let b = train(&arch, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut grads = vec![Array2::from_elem((3, 3), 2.0), Array2::from_elem((1, 4), -1.0)];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!(pre > 1.0);
        let post: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!(post <= 1.0 + 1e-9);
        let mut small = vec![Array2::from_elem((1, 1), 0.5)];
        assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
        assert_eq!(small[0][[0, 0]], 0.5);
    }

    #[test]
    fn nonfinite_loss_is_reported() {
        let (m, mut d) = identity_data(40, 6);
        d[[3, 1]] = f64::NAN;
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let r = train(&plain_mlp(vec![4]), &TrainData { m: &m, d: &d, physics: None }, &cfg);
        assert!(matches!(r, Err(Error::NonFiniteLoss { epoch: 0, .. })), "{r:?}");
    }

    #[test]
    fn zero_alpha_matches_empirical_risk() {
        let model = Arc::new(InterfaceModel::new(5, 3));
        let mut rng = RngStream::new(7, 0);
        let m = Array2::from_shape_simple_fn((50, 5), || rng.uniform());
        let d = Array2::from_shape_fn((50, 3), |(i, _)| i as f64);
        let d = {
            let mut out = d;
            for i in 0..50 {
                out.row_mut(i).assign(&model.evaluate(&m.row(i).to_owned()).unwrap());
            }
            out
        };
        let arch = plain_mlp(vec![6]);
        let base = TrainConfig {
            max_epochs: 4,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let physics: Option<Arc<dyn ForwardModel>> = Some(model);
        let data = TrainData { m: &m, d: &d, physics };
        let erm = train(&arch, &data, &base).unwrap();
        let pinn = train(
            &arch,
            &data,
            &TrainConfig {
                objective: Objective::Pinn { alpha: 0.0 },
                ..base
            },
        )
        .unwrap();
        assert_eq!(erm.network, pinn.network);
    }

    #[test]
    fn residual_vanishes_on_consistent_data() {
        let model = InterfaceModel::new(5, 3);
        let m = Array2::from_shape_fn((2, 5), |(i, j)| 0.1 * (i + j) as f64);
        let mut d = Array2::zeros((2, 3));
        for i in 0..2 {
            d.row_mut(i).assign(&model.evaluate(&m.row(i).to_owned()).unwrap());
        }
        assert_eq!(pinn_residual(&model, &m, &d, &[1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn physics_loss_gradient_on_toy_interface() {
        let model: Arc<dyn ForwardModel> = Arc::new(InterfaceModel::new(5, 4));
        let mut rng = RngStream::new(9, 0);
        let m = Array2::from_shape_simple_fn((30, 5), || 0.5 * rng.uniform());
        let mut d = Array2::zeros((30, 4));
        for i in 0..30 {
            let row: Vector = model.evaluate(&m.row(i).to_owned()).unwrap();
            d.row_mut(i).assign(&row);
        }
        let arch = Architecture::Mlp(MlpSpec {
            hidden: vec![6, 6],
            residual: true,
            reg: Regularization::default(),
            output: OutputActivation::Softplus,
        });
        let st = Standardizer::fit(&d, &m, ScaleMode::ScaleOnly).unwrap();
        let cfg = TrainConfig {
            objective: Objective::Pinn { alpha: 1.0 },
            ..TrainConfig::default()
        };
        let net = Network::init(arch, 4, 5, 1).unwrap();
        let mut lg = build_loss_graph(&net, &st, &cfg, Some(model), 8).unwrap();
        let rows: Vec<usize> = (0..8).collect();
        let z = st.input.apply(&d.select(Axis(0), &rows));
        let y = st.output.apply(&m.select(Axis(0), &rows));
        let s = divide_columns(&d.select(Axis(0), &rows), &st.input.std);
        lg.load_batch(z, y, Some(s)).unwrap();
        lg.net.graph.forward().unwrap();
        for &p in &lg.net.params.clone() {
            let e = grad_check_sampled(&mut lg.net.graph, lg.loss, p, 1e-5, 10, &mut rng).unwrap();
            assert!(e <= 1e-4, "{e:e}");
        }
    }
}
