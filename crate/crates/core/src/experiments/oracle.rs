//! Trained networks on an enumerable problem, compared with the exact Bayes
//! estimator.

use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{train, Architecture, MlpSpec, OutputActivation, Regularization, TrainConfig, TrainData};
use crate::numerics::Matrix;
use crate::oracle::{bias_variance_decompose, BiasVarianceReport, DiscretePrior, LinearOperator, OracleProblem};

pub const ORACLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub format_version: u32,
    /// Atoms on a tensor grid of `linspace(lo, hi, atoms_per_axis)` per parameter.
    pub atoms_per_axis: usize,
    pub lo: f64,
    pub hi: f64,
    /// Rows of the linear forward operator.
    pub g: Vec<Vec<f64>>,
    pub sigma_d: f64,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Training pairs for the single-network comparison.
    pub k: usize,
    /// Test draws for the risk estimates.
    pub n_test: usize,
    /// Test points for the pointwise comparison with the conditional mean.
    pub n_points: usize,
    /// Bias-variance replicates; zero skips the decomposition.
    pub replicates: usize,
    pub k_replicate: usize,
    pub seed: u64,
}

impl OracleConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            format_version: ORACLE_FORMAT_VERSION,
            atoms_per_axis: 8,
            lo: -1.5,
            hi: 1.5,
            g: vec![vec![1.0, 0.6], vec![0.6, 0.4]],
            sigma_d: 0.2,
            hidden: vec![64, 64],
            train: TrainConfig {
                max_epochs: 200,
                early_stop_patience: 30,
                batch_size: 128,
                seed,
                ..TrainConfig::default()
            },
            k: 5000,
            n_test: 10_000,
            n_points: 100,
            replicates: 16,
            k_replicate: 2000,
            seed,
        }
    }

    pub fn problem(&self) -> Result<OracleProblem> {
        if self.format_version != ORACLE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "oracle config format version {} is not supported",
                self.format_version
            )));
        }
        let rows = self.g.len();
        let cols = self.g.first().map_or(0, |r| r.len());
        if rows == 0 || self.g.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("forward operator rows must be non-empty and equal length".into()));
        }
        let a = Array2::from_shape_fn((rows, cols), |(i, j)| self.g[i][j]);
        let prior = DiscretePrior::grid(cols, self.atoms_per_axis, self.lo, self.hi)?;
        OracleProblem::new(prior, Arc::new(LinearOperator { a }), self.sigma_d)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::Mlp(MlpSpec {
            hidden: self.hidden.clone(),
            residual: false,
            reg: Regularization::none(),
            output: OutputActivation::Linear,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub format_version: u32,
    pub config: OracleConfig,
    /// Mean enumerated posterior variance over the test draws.
    pub floor: f64,
    pub network_mse: f64,
    pub bayes_mse: f64,
    /// `network_mse / floor`.
    pub ratio: f64,
    /// RMS distance between network and conditional mean at the test points.
    pub rms_to_conditional_mean: f64,
    /// Marginal prior standard deviation, the scale for the RMS distance.
    pub prior_std: f64,
    pub decomposition: Option<BiasVarianceReport>,
}

fn fit_predict(cfg: &OracleConfig, seed: u64, m: &Matrix, d: &Matrix, test: &Matrix) -> Result<Matrix> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let op = train(&cfg.architecture(), &TrainData { m, d, physics: None }, &tc)?;
    op.predict_batch(test)
}

pub fn run_oracle(cfg: &OracleConfig) -> Result<OracleReport> {
    let problem = cfg.problem().map_err(|e| e.at("config"))?;
    let (m_train, d_train) = problem.sample_joint(cfg.k, cfg.seed);
    let (m_test, d_test) = problem.sample_joint(cfg.n_test, cfg.seed ^ 0x5eed_0000_0000_0001);
    let pred = fit_predict(cfg, cfg.seed, &m_train, &d_train, &d_test).map_err(|e| e.at("train"))?;
    let bayes = problem.conditional_mean_batch(&d_test);
    let floor = problem.expected_posterior_variance(&d_test);
    let network_mse = crate::oracle::mean_sq_error(&pred, &m_test);
    let bayes_mse = crate::oracle::mean_sq_error(&bayes, &m_test);
    let n = cfg.n_points.min(cfg.n_test);
    let gap = &pred.slice(s![..n, ..]) - &bayes.slice(s![..n, ..]);
    let rms = (gap.mapv(|v| v * v).sum() / gap.len() as f64).sqrt();
    let decomposition = if cfg.replicates > 0 {
        Some(
            bias_variance_decompose(&problem, cfg.replicates, cfg.k_replicate, (&m_test, &d_test), cfg.seed, |r, m, d, t| {
                fit_predict(cfg, cfg.seed.wrapping_add(1000 + r as u64), m, d, t)
            })
            .map_err(|e| e.at("decompose"))?,
        )
    } else {
        None
    };
    Ok(OracleReport {
        format_version: ORACLE_FORMAT_VERSION,
        config: cfg.clone(),
        floor,
        network_mse,
        bayes_mse,
        ratio: network_mse / floor,
        rms_to_conditional_mean: rms,
        prior_std: problem.prior.marginal_std(),
        decomposition,
    })
}
