//! Training pairs `d_i = G(m_i) + eps_i`, standardization and train/validation splits.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ProblemId};
use crate::io::{read_json, read_matrix_csv, write_json, write_matrix_csv};
use crate::numerics::{Matrix, Vector};
use crate::priors::{PriorSampler, PriorSummary};
use crate::rng::{purpose, RngStream};

pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Redraws allowed per sample before giving up on an inadmissible prior.
const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// K x N parameter samples.
    pub m: Matrix,
    /// K x M noisy data.
    pub d: Matrix,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub problem: ProblemId,
    pub prior: PriorSummary,
    pub k: usize,
    pub sigma_d: f64,
    pub seed: u64,
    /// Prior draws rejected because the forward model refused them.
    pub redraws: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> (Matrix, Matrix) {
        (self.m.select(Axis(0), rows), self.d.select(Axis(0), rows))
    }

    /// Writes `meta.json`, `m.csv` and `d.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("meta.json"), &self.meta)?;
        write_matrix_csv(&dir.join("m.csv"), &self.m, None)?;
        write_matrix_csv(&dir.join("d.csv"), &self.d, None)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let m = read_matrix_csv(&dir.join("m.csv"))?;
        let d = read_matrix_csv(&dir.join("d.csv"))?;
        if m.nrows() != meta.k || d.nrows() != meta.k {
            return Err(Error::ShapeMismatch(format!(
                "dataset declares {} rows but m.csv has {} and d.csv has {}",
                meta.k,
                m.nrows(),
                d.nrows()
            )));
        }
        Ok(Self { m, d, meta })
    }
}

/// Draws `k` pairs. Sample `i` uses prior stream `i` and noise stream `i`, so
/// any prefix of a larger dataset equals the smaller dataset. Prior draws the
/// model rejects as inadmissible are redrawn from the same stream.
pub fn generate(
    model: &dyn ForwardModel,
    problem: ProblemId,
    sampler: &PriorSampler,
    k: usize,
    sigma_d: f64,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Spec("dataset size must be at least 1".into()));
    }
    if !(sigma_d >= 0.0) {
        return Err(Error::Spec(format!("noise std must be non-negative, got {sigma_d}")));
    }
    let (n, mdim) = (model.param_dim(), model.data_dim());
    let mut ms = Array2::zeros((k, n));
    let mut ds = Array2::zeros((k, mdim));
    let mut redraws = 0;
    for i in 0..k {
        let mut prior_rng = PriorSampler::stream(seed, i);
        let mut attempts = 0;
        let (m, g) = loop {
            let m = sampler.draw(&mut prior_rng);
            match model.evaluate(&m) {
                Ok(g) => break (m, g),
                Err(Error::Domain(msg)) if attempts < MAX_REDRAWS => {
                    attempts += 1;
                    log::debug!("sample {i}: redraw after inadmissible prior draw ({msg})");
                }
                Err(e) => return Err(e),
            }
        };
        redraws += attempts;
        let mut noise = RngStream::for_purpose(seed, purpose::NOISE, i as u64);
        ms.row_mut(i).assign(&m);
        for (j, v) in g.iter().enumerate() {
            ds[[i, j]] = v + sigma_d * noise.normal();
        }
    }
    if redraws > 0 {
        log::info!("{problem}: {redraws} prior draws redrawn as inadmissible");
    }
    Ok(Dataset {
        m: ms,
        d: ds,
        meta: DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            problem,
            prior: sampler.spec().summary(),
            k,
            sigma_d,
            seed,
            redraws,
        },
    })
}

/// One noisy observation of `m` from the observation stream `index` of `seed`.
pub fn observe(model: &dyn ForwardModel, m: &Vector, sigma_d: f64, seed: u64, index: u64) -> Result<Vector> {
    let mut rng = RngStream::for_purpose(seed, purpose::OBSERVATION, index);
    Ok(model.evaluate(m)?.mapv(|v| v + sigma_d * rng.normal()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Subtract the mean and divide by the standard deviation.
    Full,
    /// Divide by the standard deviation only, keeping signs.
    ScaleOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub mode: ScaleMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Affine {
    /// Column statistics of `x`. Zero-variance columns get std 1.
    pub fn fit(x: &Matrix, mode: ScaleMode) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::Spec(format!("standardizer needs at least 2 rows, got {}", x.nrows())));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let mut std = x.var_axis(Axis(0), 0.0).mapv(f64::sqrt);
        for (j, s) in std.iter_mut().enumerate() {
            if !(*s > 0.0) {
                log::warn!("coordinate {j} has zero variance; std clamped to 1");
                *s = 1.0;
            }
        }
        Ok(Self {
            mode,
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    fn shift(&self, j: usize) -> f64 {
        match self.mode {
            ScaleMode::Full => self.mean[j],
            ScaleMode::ScaleOnly => 0.0,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift(j)) / self.std[j];
            }
        }
        y
    }

    pub fn invert(&self, y: &Matrix) -> Matrix {
        let mut x = y.clone();
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.shift(j);
            }
        }
        x
    }

    pub fn std_vector(&self) -> Vector {
        Vector::from(self.std.clone())
    }

    pub fn shift_vector(&self) -> Vector {
        (0..self.std.len()).map(|j| self.shift(j)).collect()
    }
}

/// Input (data) and output (parameter) standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input: Affine,
    pub output: Affine,
}

impl Standardizer {
    pub fn fit(d_train: &Matrix, m_train: &Matrix, output_mode: ScaleMode) -> Result<Self> {
        Ok(Self {
            input: Affine::fit(d_train, ScaleMode::Full)?,
            output: Affine::fit(m_train, output_mode)?,
        })
    }
}

/// Deterministic shuffled split; `round(fraction * K)` training rows, and
/// at least one row on each side.
pub fn split(k: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k < 2 {
        return Err(Error::Spec(format!("split needs at least 2 rows, got {k}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Spec(format!("train fraction must be in (0, 1), got {fraction}")));
    }
    let n_train = ((fraction * k as f64).round() as usize).clamp(1, k - 1);
    let perm = RngStream::for_purpose(seed, purpose::SPLIT, 0).permutation(k);
    Ok((perm[..n_train].to_vec(), perm[n_train..].to_vec()))
}
