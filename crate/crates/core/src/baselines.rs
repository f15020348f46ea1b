//! Classical estimators: closed-form linear MAP, Gauss-Newton MAP and the prior
//! sample mean.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::numerics::{inverse_spd, solve_spd, Matrix, Vector};

/// Step halvings allowed when an iterate leaves the admissible set.
pub const MAX_HALVINGS: usize = 10;

#[derive(Clone, Debug)]
pub struct MapConfig {
    /// Noise standard deviation; the noise covariance is `sigma_d^2 I`.
    pub sigma_d: f64,
    pub cm: Matrix,
    pub m0: Vector,
    pub iters: usize,
}

impl MapConfig {
    pub fn new(sigma_d: f64, cm: Matrix, m0: Vector) -> Result<Self> {
        if !(sigma_d > 0.0) {
            return Err(Error::Spec(format!("noise std must be positive, got {sigma_d}")));
        }
        if cm.dim() != (m0.len(), m0.len()) {
            return Err(Error::ShapeMismatch(format!(
                "prior covariance {:?} does not match mean of length {}",
                cm.dim(),
                m0.len()
            )));
        }
        Ok(Self {
            sigma_d,
            cm,
            m0,
            iters: 10,
        })
    }
}

fn symmetrize(a: &Matrix) -> Matrix {
    (a + &a.t()) * 0.5
}

/// `m0 + C_m G^T (G C_m G^T + C_d)^{-1} (d - G m0)`.
pub fn map_linear(g: &Matrix, d: &Vector, cfg: &MapConfig) -> Result<Vector> {
    let cm_gt = cfg.cm.dot(&g.t());
    let mut s = g.dot(&cm_gt);
    s.diag_mut().mapv_inplace(|v| v + cfg.sigma_d * cfg.sigma_d);
    let innovation = d - &g.dot(&cfg.m0);
    let x = solve_spd(&symmetrize(&s), &innovation)?;
    Ok(&cfg.m0 + &cm_gt.dot(&x))
}

/// Information form `(C_m^{-1} + G^T C_d^{-1} G)^{-1} (G^T C_d^{-1} d + C_m^{-1} m0)`.
pub fn map_linear_information(g: &Matrix, d: &Vector, cfg: &MapConfig) -> Result<Vector> {
    let cm_inv = inverse_spd(&cfg.cm)?;
    let w = 1.0 / (cfg.sigma_d * cfg.sigma_d);
    let a = &cm_inv + &(g.t().dot(g) * w);
    let rhs = g.t().dot(d) * w + cm_inv.dot(&cfg.m0);
    solve_spd(&symmetrize(&a), &rhs)
}

/// `Phi(m) = ||G(m) - d||^2 / sigma_d^2 + (m - m0)^T C_m^{-1} (m - m0)`.
pub fn map_objective(model: &dyn ForwardModel, d: &Vector, cfg: &MapConfig, m: &Vector) -> Result<f64> {
    let r = model.evaluate(m)? - d;
    let dm = m - &cfg.m0;
    let prior = dm.dot(&solve_spd(&cfg.cm, &dm)?);
    Ok(r.dot(&r) / (cfg.sigma_d * cfg.sigma_d) + prior)
}

/// Gradient of the MAP objective for a linear operator `G`.
pub fn map_gradient_linear(g: &Matrix, d: &Vector, cfg: &MapConfig, m: &Vector) -> Result<Vector> {
    let r = g.dot(m) - d;
    let dm = m - &cfg.m0;
    Ok(g.t().dot(&r) * (2.0 / (cfg.sigma_d * cfg.sigma_d)) + solve_spd(&cfg.cm, &dm)? * 2.0)
}

#[derive(Clone, Debug)]
pub struct GaussNewtonResult {
    pub m: Vector,
    /// Objective at the initial point and after each step.
    pub history: Vec<f64>,
    /// Total step halvings forced by admissibility.
    pub halvings: usize,
}

/// Undamped Gauss-Newton from `m0` for `cfg.iters` steps. A step is halved
/// only when the trial point is rejected by the forward model.
pub fn gauss_newton(model: &dyn ForwardModel, d: &Vector, cfg: &MapConfig) -> Result<GaussNewtonResult> {
    let cm_inv = symmetrize(&inverse_spd(&cfg.cm)?);
    let w = 1.0 / (cfg.sigma_d * cfg.sigma_d);
    let mut m = cfg.m0.clone();
    let mut gm = model.evaluate(&m)?;
    let objective = |gm: &Vector, m: &Vector| {
        let r = gm - d;
        let dm = m - &cfg.m0;
        r.dot(&r) * w + dm.dot(&cm_inv.dot(&dm))
    };
    let mut history = vec![objective(&gm, &m)];
    let mut halvings = 0;
    for it in 0..cfg.iters {
        let j = model.jacobian(&m)?;
        let h = symmetrize(&(&j.t().dot(&j) * w + &cm_inv));
        let rhs = j.t().dot(&(d - &gm)) * w - cm_inv.dot(&(&m - &cfg.m0));
        let mut step = solve_spd(&h, &rhs)?;
        let mut tries = 0;
        let (next, g_next) = loop {
            let trial = &m + &step;
            match model.evaluate(&trial) {
                Ok(g) => break (trial, g),
                Err(Error::Domain(msg)) => {
                    if tries == MAX_HALVINGS {
                        return Err(Error::Domain(format!(
                            "Gauss-Newton step {it} still inadmissible after {MAX_HALVINGS} halvings: {msg}"
                        )));
                    }
                    tries += 1;
                    step *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        halvings += tries;
        m = next;
        gm = g_next;
        let phi = objective(&gm, &m);
        if phi > *history.last().unwrap() {
            log::debug!("Gauss-Newton objective increased at step {it}");
        }
        history.push(phi);
    }
    Ok(GaussNewtonResult { m, history, halvings })
}

/// Column-wise mean of parameter samples.
pub fn prior_mean(samples: &Matrix) -> Result<Vector> {
    samples
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Spec("prior mean needs at least one sample".into()))
}

/// `sigma^2 I` helper for configurations without spatial correlation.
pub fn scaled_identity(n: usize, sigma: f64) -> Matrix {
    Array2::from_diag_elem(n, sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{InterfaceModel, ParamGrid, WingModel};
    use crate::numerics::norm2;
    use crate::priors::{build_covariance, PriorFamily, PriorSpec};
    use crate::rng::RngStream;
    use ndarray::array;

    fn wing_cfg(family: PriorFamily, delta: f64) -> (WingModel, MapConfig) {
        let w = WingModel::new(50, 20);
        let spec = PriorSpec::new(family, Vector::zeros(50), 1.0, delta, ParamGrid::line(&w.t)).unwrap();
        let cm = build_covariance(&spec).unwrap();
        (w, MapConfig::new(0.01, cm, Vector::zeros(50)).unwrap())
    }

    #[test]
    fn scalar_map() {
        let cfg = MapConfig::new(1.0, array![[1.0]], array![0.0]).unwrap();
        let m = map_linear(&array![[1.0]], &array![2.0], &cfg).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_innovation_returns_prior_mean() {
        let (w, mut cfg) = wing_cfg(PriorFamily::GaussianCorrelated, 0.05);
        cfg.m0 = Vector::from_elem(50, 0.3);
        let d = w.g.dot(&cfg.m0);
        let m = map_linear(&w.g, &d, &cfg).unwrap();
        assert!((&m - &cfg.m0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn two_forms_agree_and_are_stationary() {
        let mut rng = RngStream::new(4, 0);
        for (family, delta) in [(PriorFamily::GaussianIdentity, 1.0), (PriorFamily::GaussianCorrelated, 0.02)] {
            let (w, cfg) = wing_cfg(family, delta);
            let d: Vector = w.g.dot(&w.true_model()) + &(0..20).map(|_| 0.01 * rng.normal()).collect::<Vector>();
            let a = map_linear(&w.g, &d, &cfg).unwrap();
            let b = map_linear_information(&w.g, &d, &cfg).unwrap();
            let rel = norm2((&a - &b).view()) / norm2(a.view());
            assert!(rel <= 1e-8, "{family}: {rel:e}");
            let g0 = norm2(map_gradient_linear(&w.g, &d, &cfg, &cfg.m0).unwrap().view());
            let g1 = norm2(map_gradient_linear(&w.g, &d, &cfg, &a).unwrap().view());
            assert!(g1 <= 1e-8 * g0, "{family}: {g1:e} vs {g0:e}");
        }
    }

    #[test]
    fn one_gauss_newton_step_solves_linear_problem() {
        let (w, mut cfg) = wing_cfg(PriorFamily::GaussianCorrelated, 0.02);
        cfg.iters = 1;
        let d = w.g.dot(&w.true_model());
        let gn = gauss_newton(&w, &d, &cfg).unwrap();
        let map = map_linear(&w.g, &d, &cfg).unwrap();
        assert!(norm2((&gn.m - &map).view()) <= 1e-8 * norm2(map.view()));
        assert_eq!(gn.history.len(), 2);
        assert!(gn.history[1] <= gn.history[0]);
    }

    #[test]
    fn gauss_newton_stays_put_on_consistent_data() {
        let model = InterfaceModel::new(20, 6);
        let spec = PriorSpec::new(
            PriorFamily::GaussianCorrelated,
            Vector::zeros(20),
            1.0,
            5.0,
            model.grid(),
        )
        .unwrap();
        let cfg = MapConfig::new(0.1, build_covariance(&spec).unwrap(), Vector::zeros(20)).unwrap();
        let d = model.evaluate(&cfg.m0).unwrap();
        let gn = gauss_newton(&model, &d, &cfg).unwrap();
        assert!(gn.m.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn inadmissible_steps_are_halved() {
        // data demanding an interface far above the reference depth
        let model = InterfaceModel::new(10, 5);
        let mut cfg = MapConfig::new(0.01, scaled_identity(10, 30.0), Vector::zeros(10)).unwrap();
        cfg.iters = 1;
        let d = Vector::from_elem(5, 60.0);
        let gn = gauss_newton(&model, &d, &cfg).unwrap();
        assert!(gn.halvings > 0);
        assert!(gn.m.iter().all(|&z| z < 10.0));
        // pushing on eventually exhausts the halvings and aborts with a diagnostic
        cfg.iters = 10;
        assert!(matches!(gauss_newton(&model, &d, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn prior_mean_of_samples() {
        let s = array![[1.0, 2.0]];
        assert_eq!(prior_mean(&s).unwrap(), array![1.0, 2.0]);
        assert!(prior_mean(&Array2::zeros((0, 2))).is_err());
    }
}
