use ndarray::Array2;

use super::{midpoint_grid, ForwardModel, ParamGrid};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const INTERFACE_DEPTH_KM: f64 = 10.0;
/// Interfaces closer than this to the reference depth are rejected.
pub const INTERFACE_MARGIN_KM: f64 = 1e-6;

/// Surface potential-field response of a buried interface `z(w)`:
/// `d(x) = ∫ log(((x-w)^2 + H^2) / ((x-w)^2 + (H - z(w))^2)) dw` over [0, 100] km.
#[derive(Clone, Debug)]
pub struct InterfaceModel {
    pub depth: f64,
    pub width: f64,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub dw: f64,
}

impl InterfaceModel {
    pub fn new(n: usize, m: usize) -> Self {
        let width = 100.0;
        Self {
            depth: INTERFACE_DEPTH_KM,
            width,
            w: midpoint_grid(n, width),
            x: midpoint_grid(m, width),
            dw: width / n as f64,
        }
    }

    /// `z_max exp(-5 (w - w0)^2 / N)` with `z_max = 2.5` km, `w0 = 50.5` km.
    /// The grid size `N` enters the exponent literally.
    pub fn true_model(&self) -> Vector {
        let n = self.w.len() as f64;
        self.w
            .iter()
            .map(|&w| 2.5 * (-5.0 * (w - 50.5) * (w - 50.5) / n).exp())
            .collect()
    }

    fn check(&self, z: &Vector) -> Result<()> {
        if z.len() != self.w.len() {
            return Err(Error::ShapeMismatch(format!(
                "interface expects {} parameters, got {}",
                self.w.len(),
                z.len()
            )));
        }
        let limit = self.depth - INTERFACE_MARGIN_KM;
        if let Some((j, v)) = z.iter().enumerate().find(|(_, &v)| !(v < limit)) {
            return Err(Error::Domain(format!(
                "interface depth z[{j}] = {v} reaches the reference depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

impl ForwardModel for InterfaceModel {
    fn param_dim(&self) -> usize {
        self.w.len()
    }

    fn data_dim(&self) -> usize {
        self.x.len()
    }

    fn evaluate(&self, z: &Vector) -> Result<Vector> {
        self.check(z)?;
        let h2 = self.depth * self.depth;
        Ok(self
            .x
            .iter()
            .map(|&x| {
                self.w
                    .iter()
                    .zip(z.iter())
                    .map(|(&w, &zj)| {
                        let dx2 = (x - w) * (x - w);
                        let hz = self.depth - zj;
                        ((dx2 + h2) / (dx2 + hz * hz)).ln()
                    })
                    .sum::<f64>()
                    * self.dw
            })
            .collect())
    }

    fn jacobian(&self, z: &Vector) -> Result<Matrix> {
        self.check(z)?;
        Ok(Array2::from_shape_fn((self.x.len(), self.w.len()), |(i, j)| {
            let dx2 = (self.x[i] - self.w[j]).powi(2);
            let hz = self.depth - z[j];
            self.dw * 2.0 * hz / (dx2 + hz * hz)
        }))
    }

    fn grid(&self) -> ParamGrid {
        ParamGrid::line(&self.w)
    }

    fn project(&self, z: &Vector) -> Vector {
        let limit = self.depth - INTERFACE_MARGIN_KM;
        z.mapv(|v| if v < limit { v } else { limit - f64::EPSILON * limit })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn flat_interface_gives_zero_data() {
        let m = InterfaceModel::new(100, 15);
        let d = m.evaluate(&Vector::zeros(100)).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn true_model_peak() {
        let m = InterfaceModel::new(100, 15);
        let z = m.true_model();
        assert!((m.w[50] - 50.5).abs() < 1e-12);
        assert!((z[50] - 2.5).abs() < 1e-12);
        assert!(z.iter().all(|&v| v > 0.0 && v <= 2.5));
    }

    #[test]
    fn jacobian_at_zero_is_positive_closed_form() {
        let m = InterfaceModel::new(100, 15);
        let j = m.jacobian(&Vector::zeros(100)).unwrap();
        for i in 0..15 {
            for k in 0..100 {
                let expect = m.dw * 2.0 * 10.0 / ((m.x[i] - m.w[k]).powi(2) + 100.0);
                assert!((j[[i, k]] - expect).abs() < 1e-15);
                assert!(j[[i, k]] > 0.0);
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = InterfaceModel::new(100, 15);
        let mut rng = RngStream::new(3, 0);
        let z: Vector = (0..100).map(|_| 2.0 * rng.uniform() - 0.5).collect();
        let jac = m.jacobian(&z).unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..100 {
            let mut zp = z.clone();
            zp[k] += eps;
            let mut zm = z.clone();
            zm[k] -= eps;
            let fd = (m.evaluate(&zp).unwrap() - m.evaluate(&zm).unwrap()) / (2.0 * eps);
            for i in 0..15 {
                worst = worst.max((fd[i] - jac[[i, k]]).abs() / jac[[i, k]].abs());
            }
        }
        assert!(worst <= 1e-5, "{worst:e}");
    }

    #[test]
    fn domain_error_near_reference_depth() {
        let m = InterfaceModel::new(10, 4);
        let mut z = Vector::zeros(10);
        z[2] = 10.0 - 1e-7;
        assert!(matches!(m.evaluate(&z), Err(Error::Domain(_))));
        assert!(m.evaluate(&m.project(&z)).is_ok());
    }

    #[test]
    fn refinement_converges() {
        let profile = |w: f64| 2.5 * (-5.0 * (w - 50.5).powi(2) / 100.0).exp();
        let reference = {
            let m = InterfaceModel::new(6400, 15);
            m.evaluate(&m.w.iter().map(|&w| profile(w)).collect()).unwrap()
        };
        let errs: Vec<f64> = [50usize, 100, 200]
            .iter()
            .map(|&n| {
                let m = InterfaceModel::new(n, 15);
                let z: Vector = m.w.iter().map(|&w| profile(w)).collect();
                (m.evaluate(&z).unwrap() - &reference).iter().fold(0.0, |a: f64, v| a.max(v.abs()))
            })
            .collect();
        assert!(errs[1] <= errs[0] * 0.5 && errs[2] <= errs[1] * 0.5, "{errs:?}");
    }
}
