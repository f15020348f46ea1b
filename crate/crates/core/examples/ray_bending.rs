//! Pseudo-bending in a two-layer medium against straight rays and a lattice
//! shortest path.

use priorlab::forward::{bend_ray, dijkstra_traveltime, trace_straight_ray, TomoGrid};
use priorlab::numerics::Vector;

fn main() {
    let g = TomoGrid { n: 7, size: 1600.0 };
    let m = Vector::from_shape_fn(49, |k| if k / 7 >= 4 { 1.0 / 4000.0 } else { 1.0 / 2000.0 });
    let z = 3.5 * g.cell();
    let straight = trace_straight_ray(&g, [0.0, z], [1600.0, z]);
    let bent = bend_ray(&g, &m, &straight, 50, 1e-4);
    let lattice = dijkstra_traveltime(&g, &m, [0.0, z], [1600.0, z], 56, 4);
    println!("straight {:.6} s, bent {:.6} s, lattice {:.6} s", straight.traveltime(&m), bent.traveltime(&m), lattice);
    println!("bent path depth at mid-offset: {:.1} m over {} sweeps", bent.nodes[bent.nodes.len() / 2][1], bent.history.len());
}
