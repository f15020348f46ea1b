//! Runs a baseline-only experiment for two priors and writes the summary tables.

use priorlab::experiments::{profile, report_emit, run_all};
use priorlab::priors::PriorFamily;

fn main() -> priorlab::Result<()> {
    let base = profile("wing-map", 0)?.remove(0);
    let cfgs: Vec<_> = [PriorFamily::GaussianCorrelated, PriorFamily::Tv]
        .into_iter()
        .map(|f| {
            let mut c = base.clone();
            c.prior.family = f;
            c
        })
        .collect();
    let out = std::env::temp_dir().join("priorlab-example-run");
    let reports = run_all(&cfgs, Some(&out), 2).into_iter().collect::<priorlab::Result<Vec<_>>>()?;
    for r in &reports {
        for m in &r.methods {
            println!("{:<40} {:<15} e_rel {:.4}", r.name, m.method, m.e_rel);
        }
    }
    report_emit(&reports, &out)?;
    println!("tables written to {}", out.display());
    Ok(())
}
