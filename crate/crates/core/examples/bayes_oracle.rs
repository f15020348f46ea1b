//! Exact conditional means on an enumerable prior, with and without the
//! physics tilt, and the risk floor they imply.

use std::sync::Arc;

use ndarray::array;
use priorlab::oracle::{DiscretePrior, LinearOperator, OracleProblem};

fn main() -> priorlab::Result<()> {
    let problem = OracleProblem::new(
        DiscretePrior::grid(2, 8, -1.5, 1.5)?,
        Arc::new(LinearOperator { a: array![[1.0, 0.6], [0.6, 0.4]] }),
        0.2,
    )?;
    let d = array![0.8, 0.4];
    for alpha in [0.0, 1.0, 10.0, 1e6] {
        let m = problem.tilted_conditional_mean(&d, alpha);
        println!("alpha {alpha:>9}: E[m|d] = [{:+.4}, {:+.4}]", m[0], m[1]);
    }
    println!("posterior variance at d: {:.4}", problem.posterior_variance(&d));
    let (_, ds) = problem.sample_joint(5000, 1);
    println!("Bayes risk floor E[Var(m|d)]: {:.4}", problem.expected_posterior_variance(&ds));
    Ok(())
}
