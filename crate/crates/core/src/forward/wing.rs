use ndarray::Array2;

use super::{midpoint_grid, ForwardModel, ParamGrid};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Discretized first-kind Fredholm operator with kernel `t exp(-s t^2)` on [0, 1].
#[derive(Clone, Debug)]
pub struct WingModel {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub dt: f64,
    pub g: Matrix,
}

impl WingModel {
    /// Midpoint grids `t_j = (j - 1/2)/N`, `s_i = (i - 1/2)/M`, `dt = 1/N`.
    pub fn new(n: usize, m: usize) -> Self {
        assert!(n >= 2 && m >= 2, "wing grid needs N, M >= 2");
        let t = midpoint_grid(n, 1.0);
        let s = midpoint_grid(m, 1.0);
        let dt = 1.0 / n as f64;
        let g = Array2::from_shape_fn((m, n), |(i, j)| t[j] * (-s[i] * t[j] * t[j]).exp() * dt);
        Self { t, s, dt, g }
    }

    /// Indicator of (1/3, 2/3) on the t-grid.
    pub fn true_model(&self) -> Vector {
        self.t
            .iter()
            .map(|&t| if t > 1.0 / 3.0 && t < 2.0 / 3.0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Exact right-hand side for the pulse model: `(e^{-s/9} - e^{-4s/9}) / (2s)`.
pub fn wing_rhs_exact(s: f64) -> f64 {
    ((-s / 9.0).exp() - (-4.0 * s / 9.0).exp()) / (2.0 * s)
}

impl ForwardModel for WingModel {
    fn param_dim(&self) -> usize {
        self.t.len()
    }

    fn data_dim(&self) -> usize {
        self.s.len()
    }

    fn evaluate(&self, m: &Vector) -> Result<Vector> {
        if m.len() != self.param_dim() {
            return Err(Error::ShapeMismatch(format!(
                "wing expects {} parameters, got {}",
                self.param_dim(),
                m.len()
            )));
        }
        Ok(self.g.dot(m))
    }

    fn jacobian(&self, _m: &Vector) -> Result<Matrix> {
        Ok(self.g.clone())
    }

    fn grid(&self) -> ParamGrid {
        ParamGrid::line(&self.t)
    }

    fn is_linear(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm2;
    use crate::rng::RngStream;

    #[test]
    fn entry_formula() {
        // t = 0.5, s = 1.0, dt = 0.02
        let v: f64 = 0.5 * (-0.25f64).exp() * 0.02;
        assert!((v - 0.0077880).abs() < 1e-7);
        let w = WingModel::new(50, 20);
        assert!(w.g.iter().all(|&x| x >= 0.0));
        assert!(w.t[0] > 0.0);
        assert!((w.dt - 0.02).abs() < 1e-15);
        let (i, j) = (5, 17);
        let expect = w.t[j] * (-w.s[i] * w.t[j] * w.t[j]).exp() * w.dt;
        assert_eq!(w.g[[i, j]], expect);
    }

    #[test]
    fn row_sums_match_closed_form_integral() {
        let w = WingModel::new(50, 20);
        for (i, &s) in w.s.iter().enumerate() {
            let row: f64 = w.g.row(i).sum();
            let exact = (1.0 - (-s).exp()) / (2.0 * s);
            assert!((row - exact).abs() <= 1e-3, "s={s}: {row} vs {exact}");
        }
    }

    #[test]
    fn true_model_is_pulse() {
        let w = WingModel::new(50, 20);
        let m = w.true_model();
        for (t, v) in w.t.iter().zip(m.iter()) {
            if (*t - 0.5).abs() < 1e-12 {
                assert_eq!(*v, 1.0);
            }
            if *t < 0.3 {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(m.sum(), 16.0);
    }

    #[test]
    fn evaluate_matches_refined_quadrature() {
        // The coarse operator applied to m_true is compared with a 5000-point
        // midpoint quadrature of the same piecewise-constant function.
        let w = WingModel::new(50, 20);
        let m = w.true_model();
        let coarse = w.evaluate(&m).unwrap();
        let fine_model = WingModel::new(5000, 20);
        let fine_m: Vector = fine_model
            .t
            .iter()
            .map(|&t| m[((t * 50.0) as usize).min(49)])
            .collect();
        let fine = fine_model.evaluate(&fine_m).unwrap();
        let rel = norm2((&coarse - &fine).view()) / norm2(fine.view());
        assert!(rel <= 1e-3, "relative discrepancy {rel}");

        // The fine grid also reproduces the analytic right-hand side of the pulse.
        let pulse = fine_model.evaluate(&fine_model.true_model()).unwrap();
        for (i, &s) in fine_model.s.iter().enumerate() {
            assert!((pulse[i] - wing_rhs_exact(s)).abs() < 1e-4);
        }
    }

    #[test]
    fn linearity() {
        let w = WingModel::new(50, 20);
        let mut rng = RngStream::new(5, 0);
        let a: Vector = (0..50).map(|_| rng.normal()).collect();
        let b: Vector = (0..50).map(|_| rng.normal()).collect();
        let lhs = w.evaluate(&(&a * 1.7 - &b * 0.3)).unwrap();
        let rhs = w.evaluate(&a).unwrap() * 1.7 - w.evaluate(&b).unwrap() * 0.3;
        assert!(lhs.iter().zip(rhs.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn refinement_converges() {
        let smooth = |t: f64| (std::f64::consts::PI * t).sin();
        let reference = {
            let w = WingModel::new(8000, 20);
            w.evaluate(&w.t.iter().map(|&t| smooth(t)).collect()).unwrap()
        };
        let errs: Vec<f64> = [25usize, 50, 100]
            .iter()
            .map(|&n| {
                let w = WingModel::new(n, 20);
                let d = w.evaluate(&w.t.iter().map(|&t| smooth(t)).collect()).unwrap();
                (&d - &reference).iter().fold(0.0, |a: f64, v| a.max(v.abs()))
            })
            .collect();
        assert!(errs[1] <= errs[0] * 0.5 && errs[2] <= errs[1] * 0.5, "{errs:?}");
    }
}
