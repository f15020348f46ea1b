//! Closed-form MAP on the wing problem and Gauss-Newton on the interface problem.

use priorlab::experiments::{baseline_estimates, observation, profile, rel_l2, ErrorSpace, ExperimentConfig};

fn main() -> priorlab::Result<()> {
    let wing = profile("wing-map", 0)?.remove(0);
    let mut interface: ExperimentConfig = wing.clone();
    interface.problem = priorlab::forward::ProblemId::Interface;
    for cfg in [wing, interface] {
        let problem = cfg.build_problem();
        let (m_true, d) = observation(&cfg, &problem)?;
        for (name, m) in baseline_estimates(&cfg, &problem, &d)? {
            println!("{} {name}: e_rel {:.4}", cfg.problem, rel_l2(&m, &m_true, ErrorSpace::Parameter)?);
        }
    }
    Ok(())
}
