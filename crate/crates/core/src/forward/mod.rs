//! Forward operators `G` for the three test problems and their true models.

mod interface;
mod tomo;
mod wing;

pub use interface::{InterfaceModel, INTERFACE_DEPTH_KM, INTERFACE_MARGIN_KM};
pub use tomo::{
    bend_ray, cell_lengths_along, dijkstra_traveltime, path_traveltime, trace_straight_ray,
    Bending, RayPath, TomoGrid, TomoModel, TOMO_V0,
};
pub use wing::{wing_rhs_exact, WingModel};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::RowMap;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemId {
    Wing,
    Interface,
    Tomo,
}

impl ProblemId {
    pub const ALL: [ProblemId; 3] = [ProblemId::Wing, ProblemId::Interface, ProblemId::Tomo];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemId::Wing => "wing",
            ProblemId::Interface => "interface",
            ProblemId::Tomo => "tomo",
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wing" => Ok(ProblemId::Wing),
            "interface" => Ok(ProblemId::Interface),
            "tomo" => Ok(ProblemId::Tomo),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

/// Spatial arrangement of the parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Line,
    /// Row-major grid: index `row * nx + col`, rows along depth.
    Grid2d { nx: usize, nz: usize },
}

/// Coordinates of every parameter component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrid {
    pub coords: Vec<[f64; 2]>,
    pub topology: Topology,
}

impl ParamGrid {
    pub fn line(xs: &[f64]) -> Self {
        Self {
            coords: xs.iter().map(|&x| [x, 0.0]).collect(),
            topology: Topology::Line,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn distance(&self, j: usize, k: usize) -> f64 {
        let (a, b) = (self.coords[j], self.coords[k]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// First coordinate of each component rescaled to [0, 1] over the domain
    /// `[lo, hi]`; used as the DeepONet trunk query.
    pub fn unit_first_coordinate(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.coords.iter().map(|c| (c[0] - lo) / (hi - lo)).collect()
    }
}

pub trait ForwardModel: Send + Sync {
    fn param_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn evaluate(&self, m: &Vector) -> Result<Vector>;
    fn jacobian(&self, m: &Vector) -> Result<Matrix>;
    fn grid(&self) -> ParamGrid;
    /// Whether `evaluate` is linear in `m`.
    fn is_linear(&self) -> bool {
        false
    }
    /// Nearest admissible point; identity for unconstrained models.
    fn project(&self, m: &Vector) -> Vector {
        m.clone()
    }
}

/// A problem instance: one of the three operators behind a common interface.
#[derive(Clone, Debug)]
pub enum Problem {
    Wing(WingModel),
    Interface(InterfaceModel),
    Tomo(TomoModel),
}

impl Problem {
    /// Default-sized instance (wing 50/20, interface 100/15, tomo 7x7 straight rays).
    pub fn default_for(id: ProblemId) -> Self {
        match id {
            ProblemId::Wing => Problem::Wing(WingModel::new(50, 20)),
            ProblemId::Interface => Problem::Interface(InterfaceModel::new(100, 15)),
            ProblemId::Tomo => Problem::Tomo(TomoModel::new(Bending::Off)),
        }
    }

    pub fn id(&self) -> ProblemId {
        match self {
            Problem::Wing(_) => ProblemId::Wing,
            Problem::Interface(_) => ProblemId::Interface,
            Problem::Tomo(_) => ProblemId::Tomo,
        }
    }

    pub fn true_model(&self) -> Vector {
        match self {
            Problem::Wing(w) => w.true_model(),
            Problem::Interface(i) => i.true_model(),
            Problem::Tomo(t) => t.true_model(),
        }
    }

    /// Noise standard deviation used for this problem's observations.
    pub fn noise_std(&self) -> f64 {
        match self {
            Problem::Wing(_) => 0.01,
            Problem::Interface(_) => 0.1,
            Problem::Tomo(_) => 0.001,
        }
    }

    /// Domain of the first spatial coordinate, for trunk-coordinate scaling.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Problem::Wing(_) => (0.0, 1.0),
            Problem::Interface(i) => (0.0, i.width),
            Problem::Tomo(t) => (0.0, t.grid.size),
        }
    }

    fn inner(&self) -> &dyn ForwardModel {
        match self {
            Problem::Wing(w) => w,
            Problem::Interface(i) => i,
            Problem::Tomo(t) => t,
        }
    }
}

impl ForwardModel for Problem {
    fn param_dim(&self) -> usize {
        self.inner().param_dim()
    }
    fn data_dim(&self) -> usize {
        self.inner().data_dim()
    }
    fn evaluate(&self, m: &Vector) -> Result<Vector> {
        self.inner().evaluate(m)
    }
    fn jacobian(&self, m: &Vector) -> Result<Matrix> {
        self.inner().jacobian(m)
    }
    fn grid(&self) -> ParamGrid {
        self.inner().grid()
    }
    fn is_linear(&self) -> bool {
        self.inner().is_linear()
    }
    fn project(&self, m: &Vector) -> Vector {
        self.inner().project(m)
    }
}

/// Puts a forward model inside an autodiff tape. Rows are projected onto the
/// admissible set before evaluation; projected coordinates get zero adjoint.
pub struct ForwardMap {
    model: Arc<dyn ForwardModel>,
}

impl ForwardMap {
    pub fn new(model: Arc<dyn ForwardModel>) -> Self {
        Self { model }
    }
}

impl RowMap for ForwardMap {
    fn output_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn eval_row(&self, row: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let m = row.to_owned();
        let p = self.model.project(&m);
        let val = self.model.evaluate(&p)?;
        let mut jac = self.model.jacobian(&p)?;
        for (j, (a, b)) in m.iter().zip(p.iter()).enumerate() {
            if a != b {
                jac.column_mut(j).fill(0.0);
            }
        }
        Ok((val, jac))
    }
}

/// Midpoint grid `(j - 1/2) * width / n` for `j = 1..=n`.
pub fn midpoint_grid(n: usize, width: f64) -> Vec<f64> {
    (0..n).map(|j| (j as f64 + 0.5) * width / n as f64).collect()
}
