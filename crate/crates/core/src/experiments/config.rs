//! Experiment configuration files and the built-in profiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Bending, ForwardModel, Problem, ProblemId, TOMO_V0};
use crate::io::read_json;
use crate::networks::{
    Architecture, CnnSpec, DeepONetSpec, MlpSpec, Objective, OutputActivation, Regularization, TrainConfig,
};
use crate::numerics::Vector;
use crate::priors::{PriorFamily, PriorSpec};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Prior settings; absent values take the per-problem defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub family: PriorFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Constant prior mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Number of training pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl PriorConfig {
    pub fn family(family: PriorFamily) -> Self {
        Self {
            family,
            sigma: None,
            m0: None,
            delta: None,
            k: None,
        }
    }
}

/// Per-problem prior defaults `(sigma, m0, delta, K)`.
pub fn prior_defaults(problem: ProblemId) -> (f64, f64, f64, usize) {
    match problem {
        ProblemId::Wing => (1.0, 0.0, 0.02, 100_000),
        ProblemId::Interface => (1.0, 0.0, 1.0, 100_000),
        ProblemId::Tomo => (0.05 / TOMO_V0, 1.0 / TOMO_V0, 400.0, 50_000),
    }
}

/// Prior settings with every default filled in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedPrior {
    pub family: PriorFamily,
    pub sigma: f64,
    pub m0: f64,
    pub delta: f64,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// DeepONet query coordinates left empty are filled from the problem grid.
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
}

/// One experiment: a problem, a training prior, an optional learned operator
/// and the classical baselines, all evaluated on one fixed observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub problem: ProblemId,
    /// Ray tracing mode; tomography only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bending: Option<Bending>,
    pub prior: PriorConfig,
    /// `None` runs the baselines only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default = "yes")]
    pub baselines: bool,
    pub seed: u64,
    /// Seed of the observation noise; defaults to a fixed per-problem value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

/// Fixed observation noise seeds, shared by every method on a problem.
pub fn default_observation_seed(problem: ProblemId) -> u64 {
    match problem {
        ProblemId::Wing => 20_001,
        ProblemId::Interface => 20_002,
        ProblemId::Tomo => 20_003,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config format version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.bending.is_some() && self.problem != ProblemId::Tomo {
            return Err(Error::Config("bending applies to the tomo problem only".into()));
        }
        let p = self.resolved_prior();
        if !(p.sigma > 0.0) || !(p.delta > 0.0) || p.k < 2 {
            return Err(Error::Config(format!("invalid prior settings {p:?}")));
        }
        if let Some(net) = &self.network {
            net.train.validate()?;
        }
        Ok(())
    }

    pub fn resolved_prior(&self) -> ResolvedPrior {
        let (sigma, m0, delta, k) = prior_defaults(self.problem);
        ResolvedPrior {
            family: self.prior.family,
            sigma: self.prior.sigma.unwrap_or(sigma),
            m0: self.prior.m0.unwrap_or(m0),
            delta: self.prior.delta.unwrap_or(delta),
            k: self.prior.k.unwrap_or(k),
        }
    }

    pub fn observation_seed(&self) -> u64 {
        self.observation_seed.unwrap_or_else(|| default_observation_seed(self.problem))
    }

    pub fn build_problem(&self) -> Problem {
        match self.problem {
            ProblemId::Tomo => Problem::Tomo(crate::forward::TomoModel::new(self.bending.unwrap_or(Bending::Off))),
            id => Problem::default_for(id),
        }
    }

    pub fn prior_spec(&self, problem: &Problem) -> Result<PriorSpec> {
        let p = self.resolved_prior();
        PriorSpec::new(
            p.family,
            Vector::from_elem(problem.param_dim(), p.m0),
            p.sigma,
            p.delta,
            problem.grid(),
        )
    }

    /// Architecture with DeepONet query points filled in for `problem`.
    pub fn architecture(&self, problem: &Problem) -> Option<Architecture> {
        let net = self.network.as_ref()?;
        let mut arch = net.architecture.clone();
        if let Architecture::DeepONet(spec) = &mut arch {
            if spec.coords.is_empty() {
                spec.coords = query_coords(problem);
            }
        }
        Some(arch)
    }

    /// Short identifier used for output directories and table rows.
    pub fn run_name(&self) -> String {
        let (arch, obj) = match &self.network {
            Some(n) => (n.architecture.name(), n.train.objective.name()),
            None => ("none", "none"),
        };
        format!("{}-{}-{arch}-{obj}-s{}", self.problem, self.prior.family, self.seed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Grid coordinates scaled to [0, 1]; 1D problems use the first coordinate only.
pub fn query_coords(problem: &Problem) -> Vec<Vec<f64>> {
    let grid = problem.grid();
    let (lo, hi) = problem.domain();
    let scale = |v: f64| (v - lo) / (hi - lo);
    match problem.id() {
        ProblemId::Tomo => grid.coords.iter().map(|c| vec![scale(c[0]), scale(c[1])]).collect(),
        _ => grid.coords.iter().map(|c| vec![scale(c[0])]).collect(),
    }
}

/// A cartesian product of priors and objectives over a base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub format_version: u32,
    pub base: ExperimentConfig,
    pub priors: Vec<PriorFamily>,
    #[serde(default)]
    pub objectives: Vec<Objective>,
}

impl ExperimentMatrix {
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "matrix format version {} is not supported",
                self.format_version
            )));
        }
        let mut out = Vec::new();
        for &family in &self.priors {
            let objectives: Vec<Option<Objective>> = if self.objectives.is_empty() {
                vec![None]
            } else {
                self.objectives.iter().copied().map(Some).collect()
            };
            for obj in objectives {
                let mut cfg = self.base.clone();
                cfg.prior.family = family;
                if let (Some(o), Some(net)) = (obj, cfg.network.as_mut()) {
                    net.train.objective = o;
                }
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// A configuration file holds either one experiment or a matrix of them.
pub fn load_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("base").is_some() {
        serde_json::from_value::<ExperimentMatrix>(value)?.expand()
    } else {
        let cfg: ExperimentConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(vec![cfg])
    }
}

fn output_for(problem: ProblemId) -> OutputActivation {
    match problem {
        ProblemId::Wing | ProblemId::Interface => OutputActivation::Softplus,
        ProblemId::Tomo => OutputActivation::Linear,
    }
}

/// Training settings of the desk profiles.
pub fn desk_train(seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        seed,
        ..TrainConfig::default()
    }
}

pub const PROFILES: [&str; 9] = [
    "wing-desk",
    "wing-map",
    "interface-desk",
    "tomo-desk",
    "wing-paper",
    "interface-paper",
    "tomo-paper",
    "wing-desk-matrix",
    "smoke",
];

/// Epoch cap of the wing desk profile.
pub const WING_DESK_EPOCHS: usize = 300;
pub const DESK_K: usize = 10_000;

fn single(problem: ProblemId, family: PriorFamily, k: Option<usize>, network: Option<NetworkConfig>, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        format_version: CONFIG_FORMAT_VERSION,
        problem,
        bending: None,
        prior: PriorConfig { k, ..PriorConfig::family(family) },
        network,
        baselines: true,
        seed,
        observation_seed: None,
        out: None,
    }
}

fn mlp(problem: ProblemId, halved: bool) -> Architecture {
    let out = output_for(problem);
    Architecture::Mlp(if halved { MlpSpec::halved(out) } else { MlpSpec::paper(out) })
}

/// A built-in profile as one or more experiments.
pub fn profile(name: &str, seed: u64) -> Result<Vec<ExperimentConfig>> {
    use PriorFamily::*;
    let net = |problem, halved, epochs| {
        Some(NetworkConfig {
            architecture: mlp(problem, halved),
            train: desk_train(seed, epochs),
        })
    };
    let cfgs = match name {
        "wing-desk" => vec![single(ProblemId::Wing, Tv, Some(DESK_K), net(ProblemId::Wing, true, WING_DESK_EPOCHS), seed)],
        "wing-map" => vec![single(ProblemId::Wing, GaussianCorrelated, Some(DESK_K), None, seed)],
        "interface-desk" => vec![single(
            ProblemId::Interface,
            GaussianCorrelated,
            Some(DESK_K),
            net(ProblemId::Interface, true, 200),
            seed,
        )],
        "tomo-desk" => {
            let mut c = single(ProblemId::Tomo, Laplace, Some(DESK_K), net(ProblemId::Tomo, true, 200), seed);
            c.bending = Some(Bending::Off);
            vec![c]
        }
        "wing-paper" | "interface-paper" | "tomo-paper" => {
            let problem: ProblemId = name.trim_end_matches("-paper").parse()?;
            let mut c = single(
                problem,
                GaussianCorrelated,
                None,
                Some(NetworkConfig {
                    architecture: mlp(problem, false),
                    train: TrainConfig {
                        seed,
                        ..TrainConfig::default()
                    },
                }),
                seed,
            );
            if problem == ProblemId::Tomo {
                c.bending = Some(Bending::paper_default());
            }
            vec![c]
        }
        "wing-desk-matrix" => ExperimentMatrix {
            format_version: CONFIG_FORMAT_VERSION,
            base: single(ProblemId::Wing, Tv, Some(DESK_K), net(ProblemId::Wing, true, WING_DESK_EPOCHS), seed),
            priors: PriorFamily::ALL.to_vec(),
            objectives: vec![Objective::Erm, Objective::Pinn { alpha: 1.0 }],
        }
        .expand()?,
        "smoke" => {
            let mut spec = MlpSpec::halved(OutputActivation::Softplus);
            spec.hidden = vec![8, 8];
            vec![single(
                ProblemId::Wing,
                GaussianCorrelated,
                Some(8),
                Some(NetworkConfig {
                    architecture: Architecture::Mlp(spec),
                    train: TrainConfig {
                        max_epochs: 2,
                        batch_size: 4,
                        seed,
                        ..TrainConfig::default()
                    },
                }),
                seed,
            )]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown profile '{other}', expected one of {}",
                PROFILES.join(", ")
            )))
        }
    };
    Ok(cfgs)
}

/// Architectures used by the gradient checks, scaled down for speed.
pub fn small_architectures(problem: &Problem) -> Vec<Architecture> {
    let out = output_for(problem.id());
    let reg = Regularization::default();
    let mut cnn = CnnSpec::paper(out);
    cnn.filters = 3;
    cnn.kernels = vec![1, 3];
    cnn.dense = vec![6];
    let mut don = DeepONetSpec::paper(query_coords(problem), out);
    don.branch_depth = 2;
    don.branch_width = 6;
    don.trunk_depth = 2;
    don.trunk_width = 6;
    don.n_freqs = 2;
    don.basis = 4;
    vec![
        Architecture::Mlp(MlpSpec {
            hidden: vec![6, 8, 6],
            residual: true,
            reg,
            output: out,
        }),
        Architecture::Cnn(cnn),
        Architecture::DeepONet(don),
    ]
}
