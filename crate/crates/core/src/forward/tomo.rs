//! Cross-well traveltime tomography on a square slowness grid.
//!
//! Coordinates are `[x, z]` in metres with `x` horizontal (sources at `x = 0`,
//! receivers at `x = size`) and `z` depth. Cell `k = row * n + col` covers
//! `[col h, (col+1) h) x [row h, (row+1) h)` with `h = size / n`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ForwardModel, ParamGrid, Topology};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Background velocity (m/s).
pub const TOMO_V0: f64 = 2900.0;
const GAMMA: f64 = 4e-5;
/// Centre of the slow anomaly (shallow, near the source well).
const X_SLOW: [f64; 2] = [500.0, 500.0];
/// Centre of the fast anomaly (deep, near the receiver well).
const X_FAST: [f64; 2] = [1100.0, 1100.0];

/// Interior nodes of a bent ray.
const BEND_NODES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Bending {
    Off,
    On { max_iters: usize, tol: f64 },
}

impl Bending {
    pub fn paper_default() -> Self {
        Bending::On {
            max_iters: 50,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TomoGrid {
    pub n: usize,
    pub size: f64,
}

impl TomoGrid {
    pub fn cell(&self) -> f64 {
        self.size / self.n as f64
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }

    pub fn cell_index(&self, p: [f64; 2]) -> usize {
        let h = self.cell();
        let clamp = |v: f64| ((v / h).floor().max(0.0) as usize).min(self.n - 1);
        clamp(p[1]) * self.n + clamp(p[0])
    }

    pub fn cell_center(&self, k: usize) -> [f64; 2] {
        let h = self.cell();
        let (row, col) = (k / self.n, k % self.n);
        [(col as f64 + 0.5) * h, (row as f64 + 0.5) * h]
    }

    fn clamp_point(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(0.0, self.size), p[1].clamp(0.0, self.size)]
    }
}

/// A ray polyline with its per-cell lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct RayPath {
    pub nodes: Vec<[f64; 2]>,
    pub cell_lengths: Vec<f64>,
    /// Traveltime after each bending sweep (empty for straight rays).
    pub history: Vec<f64>,
    pub converged: bool,
}

impl RayPath {
    pub fn length(&self) -> f64 {
        polyline_length(&self.nodes)
    }

    pub fn traveltime(&self, m: &Vector) -> f64 {
        self.cell_lengths.iter().zip(m.iter()).map(|(l, s)| l * s).sum()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn polyline_length(nodes: &[[f64; 2]]) -> f64 {
    nodes.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Visits each (cell, length) piece of the segment `a -> b`.
fn for_each_piece(grid: &TomoGrid, a: [f64; 2], b: [f64; 2], mut f: impl FnMut(usize, f64)) {
    let len = dist(a, b);
    if len == 0.0 {
        return;
    }
    let h = grid.cell();
    let mut ts = vec![0.0, 1.0];
    for axis in 0..2 {
        let d = b[axis] - a[axis];
        if d != 0.0 {
            for c in 0..=grid.n {
                let t = (c as f64 * h - a[axis]) / d;
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    for w in ts.windows(2) {
        let dt = w[1] - w[0];
        if dt <= 0.0 {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let mid = [a[0] + tm * (b[0] - a[0]), a[1] + tm * (b[1] - a[1])];
        f(grid.cell_index(mid), dt * len);
    }
}

/// Per-cell lengths of a polyline by exact grid-line crossing traversal.
pub fn cell_lengths_along(grid: &TomoGrid, nodes: &[[f64; 2]]) -> Vec<f64> {
    let mut out = vec![0.0; grid.cells()];
    for w in nodes.windows(2) {
        for_each_piece(grid, w[0], w[1], |k, l| out[k] += l);
    }
    out
}

/// Traveltime of a polyline through slowness `m`.
pub fn path_traveltime(grid: &TomoGrid, nodes: &[[f64; 2]], m: &Vector) -> f64 {
    let mut t = 0.0;
    for w in nodes.windows(2) {
        for_each_piece(grid, w[0], w[1], |k, l| t += l * m[k]);
    }
    t
}

pub fn trace_straight_ray(grid: &TomoGrid, source: [f64; 2], receiver: [f64; 2]) -> RayPath {
    let nodes = vec![source, receiver];
    RayPath {
        cell_lengths: cell_lengths_along(grid, &nodes),
        nodes,
        history: Vec::new(),
        converged: true,
    }
}

/// Coarse scan of `[-reach, reach]` refined by golden section. Returns the step
/// only if it strictly lowers `f` below `current`.
fn line_search(f: &impl Fn(f64) -> f64, current: f64, reach: f64) -> Option<f64> {
    let samples = 16;
    let mut best = (0.0, current);
    for s in 0..=samples {
        let d = -reach + 2.0 * reach * s as f64 / samples as f64;
        let v = f(d);
        if v < best.1 {
            best = (d, v);
        }
    }
    let step = 2.0 * reach / samples as f64;
    let refined = golden_section(best.0 - step, best.0 + step, f);
    if refined.1 < best.1 {
        best = refined;
    }
    (best.1 < current * (1.0 - 1e-12)).then_some(best.0)
}

fn golden_section(mut lo: f64, mut hi: f64, f: &impl Fn(f64) -> f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..40 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Pseudo-bending: interior nodes are moved perpendicular to their local chord
/// whenever that strictly lowers traveltime. Stops when a sweep changes the
/// traveltime by less than `tol` (relative) or after `max_iters` sweeps.
///
/// If no node ever moves, the straight ray is returned unchanged.
pub fn bend_ray(
    grid: &TomoGrid,
    m: &Vector,
    straight: &RayPath,
    max_iters: usize,
    tol: f64,
) -> RayPath {
    let (src, rcv) = (straight.nodes[0], *straight.nodes.last().unwrap());
    let segments = BEND_NODES + 1;
    let mut nodes: Vec<[f64; 2]> = (0..=segments)
        .map(|i| {
            let t = i as f64 / segments as f64;
            [src[0] + t * (rcv[0] - src[0]), src[1] + t * (rcv[1] - src[1])]
        })
        .collect();
    nodes[0] = src;
    nodes[segments] = rcv;

    let mut time = path_traveltime(grid, &nodes, m);
    let mut history = Vec::new();
    let mut moved_any = false;
    let mut converged = false;

    let total = dist(src, rcv);
    let axis_perp = if total > 0.0 {
        [-(rcv[1] - src[1]) / total, (rcv[0] - src[0]) / total]
    } else {
        [0.0, 0.0]
    };

    for _ in 0..max_iters {
        // Whole-ray moves along low-order sine shapes escape the local minima
        // that single-node moves get stuck in near sharp velocity contrasts.
        for mode in 1..=3 {
            let base = nodes.clone();
            let shaped = |delta: f64| -> Vec<[f64; 2]> {
                let mut out = base.clone();
                for (k, p) in out.iter_mut().enumerate().take(segments).skip(1) {
                    let w = delta * (mode as f64 * std::f64::consts::PI * k as f64 / segments as f64).sin();
                    *p = grid.clamp_point([p[0] + w * axis_perp[0], p[1] + w * axis_perp[1]]);
                }
                out
            };
            let cost = |delta: f64| path_traveltime(grid, &shaped(delta), m);
            let current = path_traveltime(grid, &base, m);
            if let Some(delta) = line_search(&cost, current, 0.5 * total) {
                nodes = shaped(delta);
                moved_any = true;
            }
        }
        for k in 1..segments {
            let (prev, next) = (nodes[k - 1], nodes[k + 1]);
            let chord = [next[0] - prev[0], next[1] - prev[1]];
            let clen = (chord[0] * chord[0] + chord[1] * chord[1]).sqrt();
            if clen == 0.0 {
                continue;
            }
            let perp = [-chord[1] / clen, chord[0] / clen];
            let base = nodes[k];
            let at = |delta: f64| grid.clamp_point([base[0] + delta * perp[0], base[1] + delta * perp[1]]);
            let local = |delta: f64| {
                let p = at(delta);
                path_traveltime(grid, &[prev, p, next], m)
            };
            let current = local(0.0);
            if let Some(delta) = line_search(&local, current, 0.5 * clen) {
                nodes[k] = at(delta);
                moved_any = true;
            }
        }
        let new_time = path_traveltime(grid, &nodes, m);
        history.push(new_time);
        let rel = (time - new_time) / time;
        time = new_time;
        if rel < tol {
            converged = true;
            break;
        }
    }

    if !moved_any {
        let mut out = straight.clone();
        out.history = history;
        out.converged = true;
        return out;
    }
    if !converged {
        log::warn!("ray bending did not converge within {max_iters} sweeps");
    }
    RayPath {
        cell_lengths: cell_lengths_along(grid, &nodes),
        nodes,
        history,
        converged,
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Shortest traveltime over straight-segment paths on a `(lattice+1)^2` node
/// lattice with neighbour offsets up to `radius` lattice steps. Source and
/// receiver are snapped to the nearest lattice node.
pub fn dijkstra_traveltime(
    grid: &TomoGrid,
    m: &Vector,
    source: [f64; 2],
    receiver: [f64; 2],
    lattice: usize,
    radius: usize,
) -> f64 {
    let side = lattice + 1;
    let step = grid.size / lattice as f64;
    let node_of = |p: [f64; 2]| {
        let i = (p[0] / step).round() as usize;
        let j = (p[1] / step).round() as usize;
        j.min(lattice) * side + i.min(lattice)
    };
    let pos = |id: usize| [(id % side) as f64 * step, (id / side) as f64 * step];
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|a| (-r..=r).map(move |b| (a, b)))
        .filter(|&(a, b)| (a, b) != (0, 0) && gcd(a, b) == 1)
        .collect();

    let (start, goal) = (node_of(source), node_of(receiver));
    let mut best = vec![f64::INFINITY; side * side];
    let mut heap = BinaryHeap::new();
    best[start] = 0.0;
    heap.push(HeapItem(0.0, start));
    while let Some(HeapItem(t, u)) = heap.pop() {
        if u == goal {
            return t;
        }
        if t > best[u] {
            continue;
        }
        let (ui, uj) = ((u % side) as i64, (u / side) as i64);
        for &(di, dj) in &offsets {
            let (vi, vj) = (ui + di, uj + dj);
            if vi < 0 || vj < 0 || vi > lattice as i64 || vj > lattice as i64 {
                continue;
            }
            let v = vj as usize * side + vi as usize;
            let nt = t + path_traveltime(grid, &[pos(u), pos(v)], m);
            if nt < best[v] {
                best[v] = nt;
                heap.push(HeapItem(nt, v));
            }
        }
    }
    best[goal]
}

/// Seven sources on the left well, seven receivers on the right well, 7 x 7 cells
/// over 1600 m x 1600 m. Pair `(i, j)` is data row `i * 7 + j`.
#[derive(Clone, Debug)]
pub struct TomoModel {
    pub grid: TomoGrid,
    pub sources: Vec<[f64; 2]>,
    pub receivers: Vec<[f64; 2]>,
    pub bending: Bending,
    straight: Vec<RayPath>,
}

impl TomoModel {
    pub fn new(bending: Bending) -> Self {
        Self::with_grid(TomoGrid { n: 7, size: 1600.0 }, bending)
    }

    /// Sources and receivers sit at cell-centre depths on the two wells.
    pub fn with_grid(grid: TomoGrid, bending: Bending) -> Self {
        let h = grid.cell();
        let depths: Vec<f64> = (0..grid.n).map(|i| (i as f64 + 0.5) * h).collect();
        let sources: Vec<[f64; 2]> = depths.iter().map(|&z| [0.0, z]).collect();
        let receivers: Vec<[f64; 2]> = depths.iter().map(|&z| [grid.size, z]).collect();
        let straight = sources
            .iter()
            .flat_map(|&s| receivers.iter().map(move |&r| (s, r)))
            .map(|(s, r)| trace_straight_ray(&grid, s, r))
            .collect();
        Self {
            grid,
            sources,
            receivers,
            bending,
            straight,
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.sources
            .iter()
            .flat_map(move |&s| self.receivers.iter().map(move |&r| (s, r)))
    }

    pub fn straight_rays(&self) -> &[RayPath] {
        &self.straight
    }

    pub fn velocity_true(&self, p: [f64; 2]) -> f64 {
        let g = |c: [f64; 2]| (-GAMMA * ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))).exp();
        TOMO_V0 * (1.0 + 0.10 * g(X_FAST)) * (1.0 - 0.15 * g(X_SLOW))
    }

    /// Slowness `1 / v_true` at the cell centres.
    pub fn true_model(&self) -> Vector {
        (0..self.grid.cells())
            .map(|k| 1.0 / self.velocity_true(self.grid.cell_center(k)))
            .collect()
    }

    /// Rays for the current bending mode; bent rays depend on `m`.
    pub fn rays(&self, m: &Vector) -> Vec<RayPath> {
        match self.bending {
            Bending::Off => self.straight.clone(),
            Bending::On { max_iters, tol } => self
                .straight
                .iter()
                .map(|s| bend_ray(&self.grid, m, s, max_iters, tol))
                .collect(),
        }
    }

    /// Path-length matrix `L` with `t = L m`.
    pub fn build_path_matrix(&self, m: &Vector) -> Result<Matrix> {
        if matches!(self.bending, Bending::On { .. }) {
            self.check(m)?;
        }
        let rays = self.rays(m);
        let mut l = Array2::zeros((rays.len(), self.grid.cells()));
        for (i, ray) in rays.iter().enumerate() {
            for (k, &v) in ray.cell_lengths.iter().enumerate() {
                l[[i, k]] = v;
            }
        }
        Ok(l)
    }

    fn check(&self, m: &Vector) -> Result<()> {
        if m.len() != self.grid.cells() {
            return Err(Error::ShapeMismatch(format!(
                "tomography expects {} slowness values, got {}",
                self.grid.cells(),
                m.len()
            )));
        }
        if let Some((k, v)) = m.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::Domain(format!("slowness m[{k}] = {v} is not positive")));
        }
        Ok(())
    }
}

impl ForwardModel for TomoModel {
    fn param_dim(&self) -> usize {
        self.grid.cells()
    }

    fn data_dim(&self) -> usize {
        self.sources.len() * self.receivers.len()
    }

    fn evaluate(&self, m: &Vector) -> Result<Vector> {
        self.check(m)?;
        Ok(self.build_path_matrix(m)?.dot(m))
    }

    /// Frozen-ray Jacobian: the path matrix at `m`.
    fn jacobian(&self, m: &Vector) -> Result<Matrix> {
        self.check(m)?;
        self.build_path_matrix(m)
    }

    fn grid(&self) -> ParamGrid {
        ParamGrid {
            coords: (0..self.grid.cells()).map(|k| self.grid.cell_center(k)).collect(),
            topology: Topology::Grid2d {
                nx: self.grid.n,
                nz: self.grid.n,
            },
        }
    }

    fn is_linear(&self) -> bool {
        self.bending == Bending::Off
    }

    fn project(&self, m: &Vector) -> Vector {
        m.mapv(|v| v.max(1e-12))
    }
}
