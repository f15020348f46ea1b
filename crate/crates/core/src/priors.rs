//! Prior families centred at `m0` with a common marginal standard deviation.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ParamGrid, Topology};
use crate::numerics::{cholesky_jittered, Matrix, Vector};
use crate::rng::{purpose, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFamily {
    GaussianCorrelated,
    GaussianIdentity,
    Laplace,
    Tv,
    Uniform,
}

impl PriorFamily {
    pub const ALL: [PriorFamily; 5] = [
        PriorFamily::GaussianCorrelated,
        PriorFamily::GaussianIdentity,
        PriorFamily::Laplace,
        PriorFamily::Tv,
        PriorFamily::Uniform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PriorFamily::GaussianCorrelated => "gaussian-correlated",
            PriorFamily::GaussianIdentity => "gaussian-identity",
            PriorFamily::Laplace => "laplace",
            PriorFamily::Tv => "tv",
            PriorFamily::Uniform => "uniform",
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, PriorFamily::GaussianCorrelated | PriorFamily::GaussianIdentity)
    }
}

impl fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PriorFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prior family '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct PriorSpec {
    pub family: PriorFamily,
    pub m0: Vector,
    pub sigma: f64,
    /// Correlation length; only read by the correlated Gaussian.
    pub delta: f64,
    pub grid: ParamGrid,
}

/// Serializable description of a prior, recorded alongside datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub family: PriorFamily,
    pub sigma: f64,
    pub delta: f64,
    pub m0: Vec<f64>,
}

impl PriorSpec {
    pub fn new(family: PriorFamily, m0: Vector, sigma: f64, delta: f64, grid: ParamGrid) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Spec(format!("prior sigma must be positive, got {sigma}")));
        }
        if family == PriorFamily::GaussianCorrelated && !(delta > 0.0) {
            return Err(Error::Spec(format!("correlation length must be positive, got {delta}")));
        }
        if m0.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "prior mean has {} entries but the grid has {}",
                m0.len(),
                grid.len()
            )));
        }
        Ok(Self {
            family,
            m0,
            sigma,
            delta,
            grid,
        })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn with_family(&self, family: PriorFamily) -> Result<Self> {
        Self::new(family, self.m0.clone(), self.sigma, self.delta, self.grid.clone())
    }

    pub fn summary(&self) -> PriorSummary {
        PriorSummary {
            family: self.family,
            sigma: self.sigma,
            delta: self.delta,
            m0: self.m0.to_vec(),
        }
    }

    /// Laplace scale matching the marginal variance `sigma^2`.
    pub fn laplace_scale(&self) -> f64 {
        self.sigma / SQRT_2
    }

    /// Uniform half-width matching the marginal variance `sigma^2`.
    pub fn uniform_half_width(&self) -> f64 {
        self.sigma * 3f64.sqrt()
    }
}

/// Prior covariance `C_m`: squared-exponential for the correlated family,
/// `sigma^2 I` for the identity family.
pub fn build_covariance(spec: &PriorSpec) -> Result<Matrix> {
    let n = spec.dim();
    let s2 = spec.sigma * spec.sigma;
    match spec.family {
        PriorFamily::GaussianCorrelated => {
            let two_d2 = 2.0 * spec.delta * spec.delta;
            Ok(Array2::from_shape_fn((n, n), |(j, k)| {
                let r = spec.grid.distance(j, k);
                s2 * (-r * r / two_d2).exp()
            }))
        }
        PriorFamily::GaussianIdentity => Ok(Array2::from_diag_elem(n, s2)),
        other => Err(Error::Spec(format!("family {other} has no covariance model"))),
    }
}

/// Draws prior samples from per-sample RNG streams. The Cholesky factor of the
/// Gaussian covariance is computed once.
#[derive(Clone, Debug)]
pub struct PriorSampler {
    spec: PriorSpec,
    factor: Option<Matrix>,
}

impl PriorSampler {
    pub fn new(spec: &PriorSpec) -> Result<Self> {
        let factor = if spec.family.is_gaussian() {
            let (l, jitter) = cholesky_jittered(&build_covariance(spec)?)?;
            if jitter > 0.0 {
                log::info!("prior covariance factored with jitter {jitter:e}");
            }
            Some(l)
        } else {
            None
        };
        Ok(Self {
            spec: spec.clone(),
            factor,
        })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    /// The RNG stream dedicated to sample `index`.
    pub fn stream(seed: u64, index: usize) -> RngStream {
        RngStream::for_purpose(seed, purpose::PRIOR, index as u64)
    }

    /// One draw, consuming randomness from `rng`. Repeated calls on the same
    /// stream give fresh independent draws.
    pub fn draw(&self, rng: &mut RngStream) -> Vector {
        let spec = &self.spec;
        let n = spec.dim();
        match spec.family {
            PriorFamily::GaussianCorrelated | PriorFamily::GaussianIdentity => {
                let xi: Vector = (0..n).map(|_| rng.normal()).collect();
                &spec.m0 + &self.factor.as_ref().expect("gaussian factor").dot(&xi)
            }
            PriorFamily::Laplace => {
                let b = spec.laplace_scale();
                spec.m0.iter().map(|&m| m + b * rng.laplace()).collect()
            }
            PriorFamily::Uniform => {
                let a = spec.uniform_half_width();
                spec.m0.iter().map(|&m| m + a * (2.0 * rng.uniform() - 1.0)).collect()
            }
            PriorFamily::Tv => {
                let b_grad = spec.sigma / (n as f64 / 2.0).sqrt();
                let walk = match spec.grid.topology {
                    Topology::Line => laplace_walk(n, b_grad, rng),
                    Topology::Grid2d { nx, nz } => {
                        let mut w = Vector::zeros(n);
                        for row in 0..nz {
                            let r = laplace_walk(nx, b_grad, rng);
                            for col in 0..nx {
                                w[row * nx + col] += r[col];
                            }
                        }
                        for col in 0..nx {
                            let c = laplace_walk(nz, b_grad, rng);
                            for row in 0..nz {
                                w[row * nx + col] += c[row];
                            }
                        }
                        w
                    }
                };
                let mean = walk.mean().unwrap_or(0.0);
                let centred = walk.mapv(|v| v - mean);
                let sd = (centred.mapv(|v| v * v).sum() / n as f64).sqrt();
                let scale = if sd > 0.0 { spec.sigma / sd } else { 0.0 };
                &spec.m0 + &(centred * scale)
            }
        }
    }

    /// `k` samples as rows; sample `i` comes from stream `i` of `seed`.
    pub fn sample(&self, k: usize, seed: u64) -> Matrix {
        let mut out = Array2::zeros((k, self.spec.dim()));
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&self.draw(&mut Self::stream(seed, i)));
        }
        out
    }
}

/// Walk starting at zero with `len - 1` Laplace increments.
fn laplace_walk(len: usize, b: f64, rng: &mut RngStream) -> Vector {
    let mut w = Vector::zeros(len);
    for j in 1..len {
        w[j] = w[j - 1] + b * rng.laplace();
    }
    w
}

/// Convenience wrapper over [`PriorSampler`].
pub fn sample(spec: &PriorSpec, k: usize, seed: u64) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Spec("sample count must be at least 1".into()));
    }
    Ok(PriorSampler::new(spec)?.sample(k, seed))
}

/// Per-column mean and unbiased standard deviation of row samples.
pub fn empirical_moments(samples: &Matrix) -> Result<(Vector, Vector)> {
    let k = samples.nrows();
    if k < 2 {
        return Err(Error::Spec(format!("moments need at least 2 samples, got {k}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let std = samples.var_axis(Axis(0), 1.0).mapv(f64::sqrt);
    Ok((mean, std))
}

/// Unbiased sample covariance of row samples.
pub fn empirical_covariance(samples: &Matrix) -> Result<Matrix> {
    let (mean, _) = empirical_moments(samples)?;
    let centred = samples - &mean;
    Ok(centred.t().dot(&centred) / (samples.nrows() as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::midpoint_grid;

    fn line_spec(family: PriorFamily, n: usize, sigma: f64, delta: f64) -> PriorSpec {
        let grid = ParamGrid::line(&midpoint_grid(n, 1.0));
        PriorSpec::new(family, Vector::zeros(n), sigma, delta, grid).unwrap()
    }

    #[test]
    fn covariance_entries() {
        let spec = line_spec(PriorFamily::GaussianCorrelated, 50, 1.3, 0.02);
        let c = build_covariance(&spec).unwrap();
        for j in 0..50 {
            assert!((c[[j, j]] - 1.69).abs() < 1e-15);
        }
        // two points at distance delta * sqrt(2)
        let grid = ParamGrid::line(&[0.0, 0.02 * SQRT_2]);
        let s = PriorSpec::new(PriorFamily::GaussianCorrelated, Vector::zeros(2), 1.0, 0.02, grid).unwrap();
        let c = build_covariance(&s).unwrap();
        assert!((c[[0, 1]] - (-1f64).exp()).abs() < 1e-14);
        let id = build_covariance(&spec.with_family(PriorFamily::GaussianIdentity).unwrap()).unwrap();
        for j in 0..50 {
            for k in 0..50 {
                if j != k {
                    assert_eq!(id[[j, k]], 0.0);
                }
            }
        }
        assert!(build_covariance(&spec.with_family(PriorFamily::Laplace).unwrap()).is_err());
    }

    #[test]
    fn scale_constants() {
        let spec = line_spec(PriorFamily::Laplace, 4, 1.0, 1.0);
        assert!((spec.laplace_scale() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((spec.uniform_half_width() - 1.73205).abs() < 1e-5);
    }

    #[test]
    fn invalid_specs_rejected() {
        let grid = ParamGrid::line(&[0.0, 1.0]);
        assert!(PriorSpec::new(PriorFamily::Uniform, Vector::zeros(2), 0.0, 1.0, grid.clone()).is_err());
        assert!(PriorSpec::new(PriorFamily::GaussianCorrelated, Vector::zeros(2), 1.0, 0.0, grid.clone()).is_err());
        assert!(PriorSpec::new(PriorFamily::Uniform, Vector::zeros(3), 1.0, 1.0, grid).is_err());
    }

    #[test]
    fn correlated_sample_covariance() {
        let k = 20_000;
        let spec = line_spec(PriorFamily::GaussianCorrelated, 50, 1.0, 0.05);
        let c = build_covariance(&spec).unwrap();
        let samples = sample(&spec, k, 11).unwrap();
        let emp = empirical_covariance(&samples).unwrap();
        let worst = (&emp - &c).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst <= 5.0 / (k as f64).sqrt(), "{worst}");
        let (_, sd) = empirical_moments(&samples).unwrap();
        for j in 0..49 {
            let rho = emp[[j, j + 1]] / (sd[j] * sd[j + 1]);
            assert!((rho - c[[j, j + 1]]).abs() <= 0.05);
        }
    }

    #[test]
    fn marginal_calibration_all_families() {
        let k = 50_000;
        let sigma = 0.7;
        for family in PriorFamily::ALL {
            let mut spec = line_spec(family, 20, sigma, 0.1);
            spec.m0 = Vector::from_elem(20, 2.0);
            let samples = sample(&spec, k, 5).unwrap();
            let (mean, sd) = empirical_moments(&samples).unwrap();
            for j in 0..20 {
                assert!((mean[j] - 2.0).abs() <= 4.0 * sigma / (k as f64).sqrt(), "{family} mean {j}");
            }
            if family == PriorFamily::Tv {
                // per-sample normalization: each sample has std sigma exactly,
                // so the averaged marginal variance is sigma^2
                for row in samples.rows().into_iter().take(100) {
                    let c = row.mapv(|v| v - 2.0);
                    let s = (c.mapv(|v| v * v).sum() / 20.0).sqrt();
                    assert!((s - sigma).abs() < 1e-12);
                    assert!(c.sum().abs() < 1e-10);
                }
                let avg_var = sd.mapv(|s| s * s).mean().unwrap();
                assert!((avg_var.sqrt() - sigma).abs() <= 0.05 * sigma, "{avg_var}");
            } else {
                for j in 0..20 {
                    let tol = 4.0 * sigma / (2.0 * k as f64).sqrt();
                    assert!((sd[j] - sigma).abs() <= tol.max(0.0), "{family} sd {j}: {}", sd[j]);
                    assert!((sd[j] - sigma).abs() <= 0.02 * sigma);
                }
            }
        }
    }

    #[test]
    fn tv_grid_walks_are_normalized() {
        let grid = ParamGrid {
            coords: (0..49).map(|k| [(k % 7) as f64, (k / 7) as f64]).collect(),
            topology: Topology::Grid2d { nx: 7, nz: 7 },
        };
        let spec = PriorSpec::new(PriorFamily::Tv, Vector::from_elem(49, 3.0), 0.1, 1.0, grid).unwrap();
        let s = sample(&spec, 200, 9).unwrap();
        for row in s.rows() {
            let c = row.mapv(|v| v - 3.0);
            assert!((c.mapv(|v| v * v).mean().unwrap().sqrt() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_and_stream_independence() {
        for family in PriorFamily::ALL {
            let spec = line_spec(family, 10, 1.0, 0.1);
            let a = sample(&spec, 50, 3).unwrap();
            assert_eq!(a, sample(&spec, 50, 3).unwrap());
            assert_ne!(a, sample(&spec, 50, 4).unwrap());
            // a prefix of a larger draw is the smaller draw
            let b = sample(&spec, 80, 3).unwrap();
            assert_eq!(a, b.slice(ndarray::s![..50, ..]));
        }
    }

    #[test]
    fn constant_samples_have_zero_std() {
        let s = Array2::from_elem((5, 3), 1.5);
        let (m, sd) = empirical_moments(&s).unwrap();
        assert!(m.iter().all(|&v| v == 1.5));
        assert!(sd.iter().all(|&v| v == 0.0));
        assert!(empirical_moments(&Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn samples_export_as_csv() {
        let spec = line_spec(PriorFamily::Uniform, 6, 1.0, 0.1);
        let s = sample(&spec, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        crate::io::write_matrix_csv(&p, &s, None).unwrap();
        assert_eq!(crate::io::read_matrix_csv(&p).unwrap(), s);
    }
}
