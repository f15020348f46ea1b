use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use priorlab::experiments::{
    baseline_estimates, generate_dataset, load_configs, observation, profile, rel_l2, report_emit, run_all,
    run_oracle, train_operator, ErrorSpace, ExperimentConfig, OracleConfig, RunReport,
};
use priorlab::io::{read_json, write_json};
use priorlab::{Error, Result};

#[derive(Parser)]
#[command(name = "priorlab", version, about = "Learned inverse operators and their classical baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON); overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every configured experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "priorlab-out")]
    out: PathBuf,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, default_value = "wing-desk")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a training dataset.
    Generate,
    /// Generate data and train the configured network.
    Train,
    /// Classical estimates on the fixed observation.
    Baseline,
    /// Compare trained networks with the exact Bayes estimator on an enumerable problem.
    Oracle,
    /// Full pipeline for every configured experiment, then the summary tables.
    Run,
    /// Summary tables from existing run directories.
    Report {
        /// Run directories or report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    let mut cfgs = match &cli.config {
        Some(path) => load_configs(path).map_err(|e| e.at("config"))?,
        None => profile(&cli.profile, cli.seed.unwrap_or(0)).map_err(|e| e.at("config"))?,
    };
    if let Some(seed) = cli.seed {
        for c in &mut cfgs {
            c.seed = seed;
        }
    }
    Ok(cfgs)
}

fn single(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfgs = configs(cli)?;
    if cfgs.len() != 1 {
        return Err(Error::Config(format!("this command takes one experiment, the configuration holds {}", cfgs.len())).at("config"));
    }
    Ok(cfgs.remove(0))
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| cli.out.clone())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => {
            let cfg = single(cli)?;
            let problem = cfg.build_problem();
            let data = generate_dataset(&cfg, &problem)?;
            let dir = out_dir(cli, &cfg);
            data.save(&dir).map_err(|e| e.at("persist"))?;
            println!("wrote {} pairs to {}", data.len(), dir.display());
        }
        Command::Train => {
            let cfg = single(cli)?;
            let problem = cfg.build_problem();
            let data = generate_dataset(&cfg, &problem)?;
            let op = train_operator(&cfg, &problem, &data)?;
            let dir = out_dir(cli, &cfg);
            op.save(&dir).map_err(|e| e.at("persist"))?;
            println!("trained for {} epochs ({:?}); operator in {}", op.history.len(), op.stop, dir.display());
        }
        Command::Baseline => {
            let cfg = single(cli)?;
            let problem = cfg.build_problem();
            let (m_true, d_obs) = observation(&cfg, &problem)?;
            let space = ErrorSpace::for_problem(cfg.problem);
            let mut rows = Vec::new();
            for (method, m) in baseline_estimates(&cfg, &problem, &d_obs).map_err(|e| e.at("baseline"))? {
                let e_rel = rel_l2(&m, &m_true, space).map_err(|e| e.at("metrics"))?;
                println!("{method}: e_rel = {e_rel:.4}");
                rows.push(serde_json::json!({ "method": method, "e_rel": e_rel, "m_hat": m.to_vec() }));
            }
            let dir = out_dir(cli, &cfg);
            std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).at("persist"))?;
            write_json(
                &dir.join("baselines.json"),
                &serde_json::json!({ "config": cfg, "m_true": m_true.to_vec(), "d_obs": d_obs.to_vec(), "methods": rows }),
            )
            .map_err(|e| e.at("persist"))?;
        }
        Command::Oracle => {
            let mut cfg: OracleConfig = match &cli.config {
                Some(p) => read_json(p).map_err(|e| e.at("config"))?,
                None => OracleConfig::desk(0),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
                cfg.train.seed = seed;
            }
            let report = run_oracle(&cfg)?;
            println!(
                "network/floor risk = {:.4}, RMS to conditional mean = {:.4} (prior std {:.3})",
                report.ratio, report.rms_to_conditional_mean, report.prior_std
            );
            if let Some(d) = &report.decomposition {
                println!(
                    "bias2 {:.5} + variance {:.5} + irreducible {:.5} vs total {:.5} (gap {:.2}%)",
                    d.bias2,
                    d.variance,
                    d.irreducible,
                    d.total,
                    100.0 * d.gap
                );
            }
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::from(e).at("persist"))?;
            write_json(&cli.out.join("oracle.json"), &report).map_err(|e| e.at("persist"))?;
        }
        Command::Run => {
            let cfgs = configs(cli)?;
            let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
            let mut reports = Vec::new();
            for (cfg, r) in cfgs.iter().zip(run_all(&cfgs, Some(&cli.out), workers)) {
                let r = r?;
                for m in &r.methods {
                    println!("{} {}: e_rel = {:.4}", cfg.run_name(), m.method, m.e_rel);
                }
                reports.push(r);
            }
            emit(&reports, &cli.out)?;
        }
        Command::Report { reports } => {
            let loaded = reports
                .iter()
                .map(|p| RunReport::load(p))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at("report"))?;
            emit(&loaded, &cli.out)?;
        }
    }
    Ok(())
}

fn emit(reports: &[RunReport], dir: &Path) -> Result<()> {
    report_emit(reports, dir).map_err(|e| e.at("report"))?;
    println!("wrote metrics.csv, reconstructions.csv and meta.json to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
