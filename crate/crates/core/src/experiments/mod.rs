//! Configuration-driven experiment runs, error metrics and result files.

mod config;
mod oracle;
mod report;
mod run;

pub use config::{
    default_observation_seed, desk_train, load_configs, prior_defaults, profile, query_coords, small_architectures,
    ExperimentConfig, ExperimentMatrix, NetworkConfig, PriorConfig, ResolvedPrior, CONFIG_FORMAT_VERSION, DESK_K,
    PROFILES, WING_DESK_EPOCHS,
};
pub use oracle::{run_oracle, OracleConfig, OracleReport, ORACLE_FORMAT_VERSION};
pub use report::{report_emit, BASELINE_METHODS};
pub use run::{
    baseline_estimates, generate_dataset, observation, rel_l2, run, run_all, train_operator, ErrorSpace,
    MethodResult, RunReport, Seeds, TrainingSummary, REPORT_FORMAT_VERSION,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Objective;
    use crate::numerics::Vector;
    use crate::priors::PriorFamily;
    use ndarray::array;

    #[test]
    fn rel_l2_examples() {
        let t = array![1.0, -2.0, 2.0];
        assert_eq!(rel_l2(&t, &t, ErrorSpace::Parameter).unwrap(), 0.0);
        assert_eq!(rel_l2(&Vector::zeros(3), &t, ErrorSpace::Parameter).unwrap(), 1.0);
        assert!((rel_l2(&(&t * 2.0), &t, ErrorSpace::Parameter).unwrap() - 1.0).abs() < 1e-15);
        let s = array![0.5, 0.25];
        assert_eq!(rel_l2(&s, &s, ErrorSpace::Velocity).unwrap(), 0.0);
        assert!(matches!(rel_l2(&array![0.5, 0.0], &s, ErrorSpace::Velocity), Err(crate::Error::Domain(_))));
        assert!(rel_l2(&array![1.0], &s, ErrorSpace::Parameter).is_err());
    }

    #[test]
    fn defaults_and_strict_parsing() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"format_version":1,"problem":"tomo","prior":{"family":"laplace"},"seed":3}"#,
        )
        .unwrap();
        let p = cfg.resolved_prior();
        assert_eq!(p.k, 50_000);
        assert_eq!(p.delta, 400.0);
        assert!(cfg.baselines && cfg.network.is_none());
        let bad = r#"{"format_version":1,"problem":"wing","prior":{"family":"tv"},"seed":3,"epocs":5}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let mut v2 = cfg.clone();
        v2.format_version = 2;
        assert!(v2.validate().is_err());
        for name in PROFILES {
            for c in profile(name, 1).unwrap() {
                let text = serde_json::to_string(&c).unwrap();
                assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
            }
        }
        assert!(profile("nope", 1).is_err());
    }

    #[test]
    fn wing_matrix_has_ten_runs() {
        let cfgs = profile("wing-desk-matrix", 0).unwrap();
        assert_eq!(cfgs.len(), 10);
        let objectives: Vec<_> = cfgs.iter().map(|c| c.network.as_ref().unwrap().train.objective).collect();
        assert_eq!(objectives.iter().filter(|o| matches!(o, Objective::Pinn { .. })).count(), 5);
    }

    #[test]
    fn observation_does_not_depend_on_k_or_seed() {
        let mut a = profile("wing-map", 1).unwrap().remove(0);
        let mut b = a.clone();
        b.prior.k = Some(50);
        b.seed = 99;
        let p = a.build_problem();
        assert_eq!(observation(&a, &p).unwrap().1, observation(&b, &p).unwrap().1);
        a.observation_seed = Some(5);
        assert_ne!(observation(&a, &p).unwrap().1, observation(&b, &p).unwrap().1);
    }

    #[test]
    fn map_only_wing_run() {
        let cfg = profile("wing-map", 1).unwrap().remove(0);
        let r = run(&cfg, None).unwrap();
        let map = r.method("map-correlated").unwrap().e_rel;
        assert!((map - 0.631).abs() < 0.04, "{map}");
        assert!(r.method("network").is_none());
        assert!(r.method("prior-mean").unwrap().e_rel > 0.9);
    }

    #[test]
    fn nonlinear_baseline_runs() {
        for problem in ["interface", "tomo"] {
            let cfg: ExperimentConfig = serde_json::from_str(&format!(
                r#"{{"format_version":1,"problem":"{problem}","prior":{{"family":"gaussian-correlated","k":100}},"seed":1}}"#
            ))
            .unwrap();
            let r = run(&cfg, None).unwrap();
            for m in &r.methods {
                assert!(m.e_rel.is_finite() && m.e_rel < 1.0, "{problem} {}: {}", m.method, m.e_rel);
            }
        }
    }

    #[test]
    fn smoke_run_is_total_and_deterministic() {
        let cfg = profile("smoke", 4).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let a = run(&cfg, Some(&dir.path().join("a"))).unwrap();
        let b = run(&cfg, Some(&dir.path().join("b"))).unwrap();
        assert!(a.methods.iter().all(|m| m.e_rel.is_finite()));
        assert_eq!(a.methods.len(), 4);
        let ra = std::fs::read(dir.path().join("a/report.json")).unwrap();
        let rb = std::fs::read(dir.path().join("b/report.json")).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.methods, b.methods);
        assert!(dir.path().join("a/operator/params.bin").exists());
        assert_eq!(RunReport::load(&dir.path().join("a")).unwrap(), a);
        assert_eq!(a.config.prior.family, PriorFamily::GaussianCorrelated);
    }

    #[test]
    fn emitted_tables_match_reports() {
        let mut cfgs = profile("wing-map", 2).unwrap();
        let mut other = cfgs[0].clone();
        other.prior.family = PriorFamily::Tv;
        other.prior.k = Some(200);
        cfgs.push(other);
        let reports: Vec<RunReport> = run_all(&cfgs, None, 2).into_iter().map(|r| r.unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        report_emit(&reports, dir.path()).unwrap();

        let mut rd = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        let head = rd.headers().unwrap().clone();
        let col = |name: &str| head.iter().position(|h| h == name).unwrap();

        let mut rc = csv::Reader::from_path(dir.path().join("reconstructions.csv")).unwrap();
        let rh = rc.headers().unwrap().clone();
        let table: Vec<Vec<f64>> = rc
            .records()
            .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(table.len(), 50);
        let column = |name: &str| -> Vector {
            let c = rh.iter().position(|h| h == name).unwrap();
            table.iter().map(|row| row[c]).collect()
        };
        let m_true = column("m_true");
        for (row, rep) in rows.iter().zip(&reports) {
            for (field, method) in [("e_rel_map_correlated", "map-correlated"), ("e_rel_prior_mean", "prior-mean")] {
                let stored: f64 = row[col(field)].parse().unwrap();
                let m_hat = column(&format!("{}/{method}", rep.name));
                let again = rel_l2(&m_hat, &m_true, ErrorSpace::Parameter).unwrap();
                assert!((stored - again).abs() <= 1e-12);
            }
            assert_eq!(&row[col("e_rel")], "");
        }
        let meta: serde_json::Value = crate::io::read_json(&dir.path().join("meta.json")).unwrap();
        assert_eq!(meta["runs"].as_array().unwrap().len(), 2);
        assert!(report_emit(&[], dir.path()).is_err());
    }

    #[test]
    fn stage_is_named_in_errors() {
        let mut cfg = profile("smoke", 0).unwrap().remove(0);
        cfg.network.as_mut().unwrap().train.lr = -1.0;
        let msg = run(&cfg, None).unwrap_err().to_string();
        assert!(msg.starts_with("[config]"), "{msg}");
    }
}
