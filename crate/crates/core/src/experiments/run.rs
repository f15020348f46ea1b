//! The experiment pipeline and its report.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::baselines::{gauss_newton, map_linear, prior_mean, scaled_identity, MapConfig};
use crate::datagen::{generate, observe, Dataset};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, Problem, ProblemId};
use crate::io::write_json;
use crate::networks::{train, StopReason, TrainData, TrainedOperator};
use crate::numerics::{norm2, Vector};
use crate::priors::{build_covariance, PriorFamily, PriorSampler};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Space in which reconstruction error is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorSpace {
    Parameter,
    /// Slowness vectors compared as velocities `1/m`.
    Velocity,
}

impl ErrorSpace {
    pub fn for_problem(problem: ProblemId) -> Self {
        match problem {
            ProblemId::Tomo => ErrorSpace::Velocity,
            _ => ErrorSpace::Parameter,
        }
    }
}

/// `||m_hat - m_true|| / ||m_true||` in the requested space.
pub fn rel_l2(m_hat: &Vector, m_true: &Vector, space: ErrorSpace) -> Result<f64> {
    if m_hat.len() != m_true.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} components, truth has {}",
            m_hat.len(),
            m_true.len()
        )));
    }
    match space {
        ErrorSpace::Parameter => Ok(norm2((m_hat - m_true).view()) / norm2(m_true.view())),
        ErrorSpace::Velocity => {
            if let Some((j, v)) = m_hat.iter().chain(m_true.iter()).enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(Error::Domain(format!("slowness component {j} is {v}, velocity undefined")));
            }
            let vh = m_hat.mapv(|s| 1.0 / s);
            let vt = m_true.mapv(|s| 1.0 / s);
            Ok(norm2((&vh - &vt).view()) / norm2(vt.view()))
        }
    }
}

/// One estimate of `m_true` from the observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub e_rel: f64,
    pub m_hat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub stop: StopReason,
    pub best_val_loss: f64,
    pub num_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub observation: u64,
    pub train: u64,
}

/// Everything needed to recompute the reported errors from stored vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub name: String,
    pub config: ExperimentConfig,
    pub problem: ProblemId,
    pub prior: PriorFamily,
    pub architecture: Option<String>,
    pub objective: Option<String>,
    pub error_space: ErrorSpace,
    pub seeds: Seeds,
    pub coords: Vec<[f64; 2]>,
    pub m_true: Vec<f64>,
    pub d_obs: Vec<f64>,
    pub methods: Vec<MethodResult>,
    pub training: Option<TrainingSummary>,
    /// Kept out of `report.json` so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Writes `report.json` and `timing.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), self)?;
        write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_clock_s": self.wall_clock_s }))
    }

    pub fn load(dir_or_file: &Path) -> Result<Self> {
        let path = if dir_or_file.is_dir() {
            dir_or_file.join("report.json")
        } else {
            dir_or_file.to_path_buf()
        };
        let mut report: Self = crate::io::read_json(&path)?;
        let timing = path.with_file_name("timing.json");
        if timing.exists() {
            let t: serde_json::Value = crate::io::read_json(&timing)?;
            report.wall_clock_s = t["wall_clock_s"].as_f64().unwrap_or(0.0);
        }
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "report format version {} is not supported",
                report.format_version
            )));
        }
        Ok(report)
    }
}

/// Training pairs for `cfg`.
pub fn generate_dataset(cfg: &ExperimentConfig, problem: &Problem) -> Result<Dataset> {
    let spec = cfg.prior_spec(problem).map_err(|e| e.at("prior"))?;
    let sampler = PriorSampler::new(&spec).map_err(|e| e.at("prior"))?;
    generate(problem, cfg.problem, &sampler, cfg.resolved_prior().k, problem.noise_std(), cfg.seed)
        .map_err(|e| e.at("datagen"))
}

/// Trains the configured network on `data`.
pub fn train_operator(cfg: &ExperimentConfig, problem: &Problem, data: &Dataset) -> Result<TrainedOperator> {
    let net = cfg
        .network
        .as_ref()
        .ok_or_else(|| Error::Config("no network configured".into()).at("train"))?;
    let arch = cfg.architecture(problem).expect("network present");
    let mut tc = net.train.clone();
    tc.seed = cfg.seed;
    let physics: Arc<dyn ForwardModel> = Arc::new(problem.clone());
    train(
        &arch,
        &TrainData {
            m: &data.m,
            d: &data.d,
            physics: Some(physics),
        },
        &tc,
    )
    .map_err(|e| e.at("train"))
}

/// The observation every method is evaluated on.
pub fn observation(cfg: &ExperimentConfig, problem: &Problem) -> Result<(Vector, Vector)> {
    let m_true = problem.true_model();
    let d = observe(problem, &m_true, problem.noise_std(), cfg.observation_seed(), 0).map_err(|e| e.at("observe"))?;
    Ok((m_true, d))
}

/// MAP estimates under the correlated and identity covariances: closed form
/// for linear problems, Gauss-Newton otherwise.
pub fn baseline_estimates(cfg: &ExperimentConfig, problem: &Problem, d_obs: &Vector) -> Result<Vec<(String, Vector)>> {
    let p = cfg.resolved_prior();
    let n = problem.param_dim();
    let m0 = Vector::from_elem(n, p.m0);
    let correlated = cfg
        .prior_spec(problem)?
        .with_family(PriorFamily::GaussianCorrelated)
        .and_then(|s| build_covariance(&s))?;
    let mut out = Vec::new();
    for (label, cm) in [("map-correlated", correlated), ("map-identity", scaled_identity(n, p.sigma))] {
        let mc = MapConfig::new(problem.noise_std(), cm, m0.clone())?;
        let m = match problem {
            Problem::Wing(w) => map_linear(&w.g, d_obs, &mc)?,
            _ => gauss_newton(problem, d_obs, &mc)?.m,
        };
        out.push((label.to_string(), m));
    }
    Ok(out)
}

/// Full pipeline. With `artifacts` set, the dataset metadata and trained
/// operator are written below it.
pub fn run(cfg: &ExperimentConfig, artifacts: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate().map_err(|e| e.at("config"))?;
    let problem = cfg.build_problem();
    let space = ErrorSpace::for_problem(cfg.problem);
    let (m_true, d_obs) = observation(cfg, &problem)?;
    let mut estimates: Vec<(String, Vector)> = Vec::new();
    let mut training = None;

    let prior_samples = if cfg.network.is_some() {
        let data = generate_dataset(cfg, &problem)?;
        let op = train_operator(cfg, &problem, &data)?;
        let m_hat = op.predict(&d_obs).map_err(|e| e.at("predict"))?;
        estimates.push(("network".to_string(), m_hat));
        training = Some(TrainingSummary {
            epochs: op.history.len(),
            stop: op.stop,
            best_val_loss: op.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min),
            num_params: op.network.num_params(),
        });
        if let Some(dir) = artifacts {
            op.save(&dir.join("operator")).map_err(|e| e.at("persist"))?;
            write_json(&dir.join("dataset_meta.json"), &data.meta).map_err(|e| e.at("persist"))?;
        }
        data.m
    } else {
        let spec = cfg.prior_spec(&problem).map_err(|e| e.at("prior"))?;
        PriorSampler::new(&spec)
            .map_err(|e| e.at("prior"))?
            .sample(cfg.resolved_prior().k, cfg.seed)
    };

    if cfg.baselines {
        estimates.extend(baseline_estimates(cfg, &problem, &d_obs).map_err(|e| e.at("baseline"))?);
        estimates.push(("prior-mean".to_string(), prior_mean(&prior_samples).map_err(|e| e.at("baseline"))?));
    }

    let methods = estimates
        .into_iter()
        .map(|(method, m)| {
            let e_rel = rel_l2(&m, &m_true, space).map_err(|e| e.at("metrics"))?;
            Ok(MethodResult {
                method,
                e_rel,
                m_hat: m.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        name: cfg.run_name(),
        config: cfg.clone(),
        problem: cfg.problem,
        prior: cfg.prior.family,
        architecture: cfg.network.as_ref().map(|n| n.architecture.name().to_string()),
        objective: cfg.network.as_ref().map(|n| n.train.objective.name().to_string()),
        error_space: space,
        seeds: Seeds {
            data: cfg.seed,
            observation: cfg.observation_seed(),
            train: cfg.seed,
        },
        coords: problem.grid().coords,
        m_true: m_true.to_vec(),
        d_obs: d_obs.to_vec(),
        methods,
        training,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = artifacts {
        report.save(dir).map_err(|e| e.at("persist"))?;
    }
    Ok(report)
}

/// Runs independent experiments on up to `workers` threads; results keep the
/// input order.
pub fn run_all(cfgs: &[ExperimentConfig], out: Option<&Path>, workers: usize) -> Vec<Result<RunReport>> {
    let workers = workers.clamp(1, cfgs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<RunReport>>>> = cfgs.iter().map(|_| Default::default()).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cfgs.len() {
                    break;
                }
                let dir = out.map(|o| o.join(cfgs[i].run_name()));
                let r = run(&cfgs[i], dir.as_deref());
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every run finished"))
        .collect()
}
