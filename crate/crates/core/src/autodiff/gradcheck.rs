//! Central finite-difference checks of tape adjoints.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::RngStream;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Spec(format!("finite-difference step {eps:e} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)` for coordinate `(row, col)` of `leaf`.
/// Dropout masks are replayed, so the derivative is taken at frozen masks.
pub fn central_difference(
    graph: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    row: usize,
    col: usize,
    eps: f64,
) -> Result<f64> {
    let orig = graph.value(leaf)[[row, col]];
    graph.value_mut(leaf)?[[row, col]] = orig + eps;
    graph.forward()?;
    let plus = graph.scalar(output);
    graph.value_mut(leaf)?[[row, col]] = orig - eps;
    graph.forward()?;
    let minus = graph.scalar(output);
    graph.value_mut(leaf)?[[row, col]] = orig;
    graph.forward()?;
    Ok((plus - minus) / (2.0 * eps))
}

fn discrepancy(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

fn check_coords(
    graph: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    check_eps(eps)?;
    graph.forward()?;
    graph.backward(output)?;
    let ad = graph
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| ndarray::Array2::zeros(graph.value(leaf).dim()));
    let mut worst = 0.0f64;
    for &(r, c) in coords {
        let fd = central_difference(graph, output, leaf, r, c, eps)?;
        worst = worst.max(discrepancy(ad[[r, c]], fd));
    }
    Ok(worst)
}

/// Maximum over every coordinate of `leaf` of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check(graph: &mut Graph, output: NodeId, leaf: NodeId, eps: f64) -> Result<f64> {
    let (r, c) = graph.value(leaf).dim();
    let coords: Vec<_> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
    check_coords(graph, output, leaf, eps, &coords)
}

/// As [`grad_check`] but over at most `max_coords` coordinates drawn without
/// replacement, for leaves too large to probe exhaustively.
pub fn grad_check_sampled(
    graph: &mut Graph,
    output: NodeId,
    leaf: NodeId,
    eps: f64,
    max_coords: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let (r, c) = graph.value(leaf).dim();
    let total = r * c;
    let picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        rng.permutation(total).into_iter().take(max_coords).collect()
    };
    let coords: Vec<_> = picks.into_iter().map(|k| (k / c, k % c)).collect();
    check_coords(graph, output, leaf, eps, &coords)
}
