//! Exact Bayes computations on priors with finitely many atoms: conditional
//! means, tilted conditional means, posterior variances and a replicate
//! bias-variance experiment.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ParamGrid};
use crate::numerics::{Matrix, Vector};
use crate::rng::{purpose, RngStream};

pub const MAX_ATOMS: usize = 4096;
/// Log-likelihoods below this everywhere are flagged as underflow.
pub const UNDERFLOW_LOG: f64 = -700.0;
pub const MIN_REPLICATES: usize = 8;

#[derive(Clone, Debug)]
pub struct DiscretePrior {
    pub atoms: Vec<Vector>,
    pub weights: Vec<f64>,
}

impl DiscretePrior {
    pub fn new(atoms: Vec<Vector>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() > MAX_ATOMS || atoms.len() != weights.len() {
            return Err(Error::Spec(format!(
                "discrete prior needs 1..={MAX_ATOMS} atoms with one weight each, got {} atoms and {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::ShapeMismatch("atoms must share one dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("weights must be non-negative and sum to 1, sum = {total}")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<Vector>) -> Result<Self> {
        let w = 1.0 / atoms.len().max(1) as f64;
        let n = atoms.len();
        Self::new(atoms, vec![w; n])
    }

    /// Tensor grid of `linspace(lo, hi, per_axis)` in `dim` dimensions, equal weights.
    pub fn grid(dim: usize, per_axis: usize, lo: f64, hi: f64) -> Result<Self> {
        let axis: Vec<f64> = (0..per_axis)
            .map(|i| if per_axis == 1 { lo } else { lo + (hi - lo) * i as f64 / (per_axis - 1) as f64 })
            .collect();
        let total = per_axis.pow(dim as u32);
        let atoms = (0..total)
            .map(|mut k| {
                let mut a = Vector::zeros(dim);
                for j in 0..dim {
                    a[j] = axis[k % per_axis];
                    k /= per_axis;
                }
                a
            })
            .collect();
        Self::uniform(atoms)
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn mean(&self) -> Vector {
        self.atoms
            .iter()
            .zip(&self.weights)
            .fold(Vector::zeros(self.dim()), |acc, (a, &w)| acc + &(a * w))
    }

    /// Marginal standard deviation averaged over components.
    pub fn marginal_std(&self) -> f64 {
        let mean = self.mean();
        let var: f64 = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, &w)| w * (a - &mean).mapv(|v| v * v).sum())
            .sum();
        (var / self.dim() as f64).sqrt()
    }

    fn draw_index(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// A linear operator `d = A m`.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    pub a: Matrix,
}

impl ForwardModel for LinearOperator {
    fn param_dim(&self) -> usize {
        self.a.ncols()
    }
    fn data_dim(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, m: &Vector) -> Result<Vector> {
        if m.len() != self.a.ncols() {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", self.a.ncols(), m.len())));
        }
        Ok(self.a.dot(m))
    }
    fn jacobian(&self, _m: &Vector) -> Result<Matrix> {
        Ok(self.a.clone())
    }
    fn grid(&self) -> ParamGrid {
        ParamGrid::line(&(0..self.a.ncols()).map(|j| j as f64).collect::<Vec<_>>())
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Componentwise cube `d_j = m_j^3`.
#[derive(Clone, Copy, Debug)]
pub struct CubeMap {
    pub dim: usize,
}

impl ForwardModel for CubeMap {
    fn param_dim(&self) -> usize {
        self.dim
    }
    fn data_dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, m: &Vector) -> Result<Vector> {
        Ok(m.mapv(|v| v * v * v))
    }
    fn jacobian(&self, m: &Vector) -> Result<Matrix> {
        Ok(Array2::from_diag(&m.mapv(|v| 3.0 * v * v)))
    }
    fn grid(&self) -> ParamGrid {
        ParamGrid::line(&(0..self.dim).map(|j| j as f64).collect::<Vec<_>>())
    }
}

/// `d = G(m) + eps`, `m` from a discrete prior, `eps ~ N(0, sigma_d^2 I)`.
#[derive(Clone)]
pub struct OracleProblem {
    pub prior: DiscretePrior,
    pub forward: Arc<dyn ForwardModel>,
    pub sigma_d: f64,
    images: Vec<Vector>,
}

/// Posterior atom probabilities at one observation.
#[derive(Clone, Debug)]
pub struct AtomPosterior {
    pub probs: Vec<f64>,
    /// Every unnormalized log weight fell below the underflow threshold.
    pub underflow: bool,
}

impl OracleProblem {
    pub fn new(prior: DiscretePrior, forward: Arc<dyn ForwardModel>, sigma_d: f64) -> Result<Self> {
        if !(sigma_d > 0.0) {
            return Err(Error::Spec(format!("noise std must be positive, got {sigma_d}")));
        }
        let images = prior.atoms.iter().map(|a| forward.evaluate(a)).collect::<Result<_>>()?;
        Ok(Self {
            prior,
            forward,
            sigma_d,
            images,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn data_dim(&self) -> usize {
        self.forward.data_dim()
    }

    /// Probabilities proportional to `w_a phi(d; G(m_a)) exp(-alpha ||G(m_a) - d||^2)`,
    /// computed in the log domain. If no weight survives, the prior weights are
    /// returned and the result is flagged.
    pub fn posterior(&self, d: &Vector, alpha: f64) -> AtomPosterior {
        let s2 = self.sigma_d * self.sigma_d;
        let logs: Vec<f64> = self
            .images
            .iter()
            .zip(&self.prior.weights)
            .map(|(g, &w)| {
                let r2 = (g - d).mapv(|v| v * v).sum();
                let ll = -r2 / (2.0 * s2) - alpha * r2;
                if w > 0.0 {
                    w.ln() + ll
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let underflow = max < UNDERFLOW_LOG;
        if !max.is_finite() {
            log::warn!("posterior weights vanished; falling back to the prior");
            return AtomPosterior {
                probs: self.prior.weights.clone(),
                underflow: true,
            };
        }
        let ex: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = ex.iter().sum();
        AtomPosterior {
            probs: ex.into_iter().map(|e| e / z).collect(),
            underflow,
        }
    }

    fn weighted_mean(&self, probs: &[f64]) -> Vector {
        self.prior
            .atoms
            .iter()
            .zip(probs)
            .fold(Vector::zeros(self.param_dim()), |acc, (a, &p)| acc + &(a * p))
    }

    /// `E[m | d]`.
    pub fn conditional_mean(&self, d: &Vector) -> Vector {
        self.weighted_mean(&self.posterior(d, 0.0).probs)
    }

    /// Conditional mean under the prior tilted by `exp(-alpha ||G(m) - d||^2)`.
    pub fn tilted_conditional_mean(&self, d: &Vector, alpha: f64) -> Vector {
        self.weighted_mean(&self.posterior(d, alpha).probs)
    }

    /// `E[||m - E[m|d]||^2 | d]`.
    pub fn posterior_variance(&self, d: &Vector) -> f64 {
        let p = self.posterior(d, 0.0).probs;
        let mean = self.weighted_mean(&p);
        self.prior
            .atoms
            .iter()
            .zip(&p)
            .map(|(a, &w)| w * (a - &mean).mapv(|v| v * v).sum())
            .sum()
    }

    pub fn conditional_mean_batch(&self, d: &Matrix) -> Matrix {
        let mut out = Array2::zeros((d.nrows(), self.param_dim()));
        for (i, row) in d.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.conditional_mean(&row.to_owned()));
        }
        out
    }

    /// `n` joint draws `(m, d)`; row `i` uses its own stream under `seed`.
    pub fn sample_joint(&self, n: usize, seed: u64) -> (Matrix, Matrix) {
        let mut m = Array2::zeros((n, self.param_dim()));
        let mut d = Array2::zeros((n, self.data_dim()));
        for i in 0..n {
            let mut rng = RngStream::for_purpose(seed, purpose::ORACLE, i as u64);
            let a = self.prior.draw_index(&mut rng);
            m.row_mut(i).assign(&self.prior.atoms[a]);
            let noisy = self.images[a].mapv(|v| v + self.sigma_d * rng.normal());
            d.row_mut(i).assign(&noisy);
        }
        (m, d)
    }

    /// Mean of the posterior variance over `d`, the Bayes risk of `E[m|d]`.
    pub fn expected_posterior_variance(&self, d: &Matrix) -> f64 {
        d.rows()
            .into_iter()
            .map(|r| self.posterior_variance(&r.to_owned()))
            .sum::<f64>()
            / d.nrows() as f64
    }
}

/// Mean over rows of `||a_i - b_i||^2`.
pub fn mean_sq_error(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).mapv(|v| v * v).sum() / a.nrows() as f64
}

/// Risk split of an estimator trained on independent datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub bias2: f64,
    pub variance: f64,
    pub irreducible: f64,
    pub total: f64,
    /// `|bias2 + variance + irreducible - total| / total`.
    pub gap: f64,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// `fit_predict(r, m, d, test_d)` trains on dataset `r` and returns predictions
/// at the test points. Replicates whose training fails are dropped with a
/// warning; fewer than [`MIN_REPLICATES`] successes is an error.
pub fn bias_variance_decompose<F>(
    problem: &OracleProblem,
    replicates: usize,
    k: usize,
    test: (&Matrix, &Matrix),
    seed: u64,
    mut fit_predict: F,
) -> Result<BiasVarianceReport>
where
    F: FnMut(usize, &Matrix, &Matrix, &Matrix) -> Result<Matrix>,
{
    if replicates < MIN_REPLICATES {
        return Err(Error::Spec(format!(
            "bias-variance needs at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    let (m_test, d_test) = test;
    let n_test = d_test.nrows();
    let mut preds = Vec::new();
    for r in 0..replicates {
        let data_seed = seed.wrapping_add(1 + r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (m, d) = problem.sample_joint(k, data_seed);
        match fit_predict(r, &m, &d, d_test) {
            Ok(p) if p.dim() == m_test.dim() => preds.push(p),
            Ok(p) => {
                return Err(Error::ShapeMismatch(format!(
                    "replicate {r} predicted {:?}, expected {:?}",
                    p.dim(),
                    m_test.dim()
                )))
            }
            Err(e) => log::warn!("replicate {r} dropped: {e}"),
        }
    }
    if preds.len() < MIN_REPLICATES {
        return Err(Error::Spec(format!(
            "only {} of {replicates} replicates succeeded",
            preds.len()
        )));
    }
    let rr = preds.len() as f64;
    let mean_pred = preds.iter().fold(Array2::zeros(m_test.dim()), |acc: Matrix, p| acc + p) / rr;
    let cond = problem.conditional_mean_batch(d_test);
    let bias2 = mean_sq_error(&mean_pred, &cond);
    let variance = preds.iter().map(|p| mean_sq_error(p, &mean_pred)).sum::<f64>() / rr;
    let irreducible = problem.expected_posterior_variance(d_test);
    let total = preds.iter().map(|p| mean_sq_error(p, m_test)).sum::<f64>() / rr;
    let gap = (bias2 + variance + irreducible - total).abs() / total;
    Ok(BiasVarianceReport {
        bias2,
        variance,
        irreducible,
        total,
        gap,
        r: preds.len(),
        k,
        n_test,
        seed,
    })
}

/// Self-normalized importance estimate of the tilted conditional mean, with
/// proposals drawn from the prior.
pub fn importance_tilted_mean(problem: &OracleProblem, d: &Vector, alpha: f64, draws: usize, seed: u64) -> Vector {
    let s2 = problem.sigma_d * problem.sigma_d;
    let mut rng = RngStream::for_purpose(seed, purpose::TEST, 0);
    let mut num = Vector::zeros(problem.param_dim());
    let mut den = 0.0;
    for _ in 0..draws {
        let a = problem.prior.draw_index(&mut rng);
        let r2 = (&problem.images[a] - d).mapv(|v| v * v).sum();
        let w = (-r2 / (2.0 * s2) - alpha * r2).exp();
        num += &(&problem.prior.atoms[a] * w);
        den += w;
    }
    num / den
}
