//! Draws from each prior family on the wing grid and prints their moments.

use priorlab::forward::{ForwardModel, WingModel};
use priorlab::numerics::Vector;
use priorlab::priors::{empirical_moments, sample, PriorFamily, PriorSpec};

fn main() -> priorlab::Result<()> {
    let grid = WingModel::new(50, 20).grid();
    for family in PriorFamily::ALL {
        let spec = PriorSpec::new(family, Vector::zeros(50), 1.0, 0.02, grid.clone())?;
        let s = sample(&spec, 5000, 1)?;
        let (mean, sd) = empirical_moments(&s)?;
        let tv: f64 = s
            .rows()
            .into_iter()
            .map(|r| (1..r.len()).map(|j| (r[j] - r[j - 1]).abs()).sum::<f64>())
            .sum::<f64>()
            / 5000.0;
        println!(
            "{family:<20} mean {:+.3}  std {:.3}  mean total variation {tv:.2}",
            mean.mean().unwrap(),
            sd.mean().unwrap()
        );
    }
    Ok(())
}
