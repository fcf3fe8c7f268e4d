use soav_mud::detect::{DetectorConfig, DetectorKind};
use soav_mud::harness::{
    aggregate, draw_trial, emit_csv, run_point, run_sweep, run_trial, write_csv, DetectorOutcome, ExperimentConfig,
    Values, CSV_HEADER,
};

fn config(n: usize, m: usize, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        n_users: n,
        n_meas: m,
        trials,
        rho: Values::One(0.8),
        snr_db: Some(Values::Many(vec![6.0, 10.0])),
        master_seed: 99,
        parallelism: 2,
        ..ExperimentConfig::default()
    }
}

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&run_sweep(cfg).unwrap(), cfg, &mut out).unwrap();
    out
}

#[test]
fn same_seed_same_bytes_any_thread_count() {
    let cfg = config(12, 9, 40);
    let reference = csv_bytes(&ExperimentConfig { parallelism: 1, ..cfg.clone() });
    for p in [2, 3, 8] {
        assert_eq!(csv_bytes(&ExperimentConfig { parallelism: p, ..cfg.clone() }), reference);
    }
    assert_ne!(csv_bytes(&ExperimentConfig { master_seed: 100, ..cfg }), reference);
}

#[test]
fn every_detector_sees_the_same_instance() {
    let cfg = ExperimentConfig {
        detectors: [
            DetectorKind::Lmmse,
            DetectorKind::Lasso,
            DetectorKind::MapSoav,
            DetectorKind::ExhaustiveMap,
        ]
        .into_iter()
        .map(DetectorConfig::new)
        .collect(),
        ..config(6, 5, 10)
    };
    let point = cfg.axis_points().unwrap()[0];
    for t in 0..cfg.trials {
        let rec = run_trial(&cfg, &point, t).unwrap();
        let hashes: Vec<u64> = rec
            .outcomes
            .iter()
            .map(|o| match o {
                DetectorOutcome::Ok { instance_hash, .. } => *instance_hash,
                DetectorOutcome::Failed(e) => panic!("{e}"),
            })
            .collect();
        assert_eq!(hashes.len(), 4);
        assert!(hashes.iter().all(|&h| h == hashes[0]));
    }
}

#[test]
fn reported_mean_matches_per_trial_records() {
    let cfg = config(15, 10, 60);
    for point in cfg.axis_points().unwrap() {
        let records = run_point(&cfg, &point).unwrap();
        assert_eq!(records.len(), 60);
        assert!(records.iter().enumerate().all(|(i, r)| r.trial_index == i));
        let summary = aggregate(&cfg, &point, &records).unwrap();
        for (d, s) in summary.detectors.iter().enumerate() {
            let ratios: Vec<f64> = records
                .iter()
                .filter_map(|r| match r.outcomes[d] {
                    DetectorOutcome::Ok { errors, .. } => Some(errors as f64 / 15.0),
                    DetectorOutcome::Failed(_) => None,
                })
                .collect();
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            assert!((s.error_ratio - mean).abs() <= 1e-12);
            assert_eq!(s.trials + s.failures, 60);
        }
    }
}

#[test]
fn csv_parses_back_to_the_summary() {
    let cfg = config(10, 7, 30);
    let results = run_sweep(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    emit_csv(&results, &cfg, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().take_while(|l| l.starts_with('#')).count() >= 3);
    assert!(text.contains("C=14.6052"));
    assert!(!text.contains("parallelism"));

    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(&path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header.join(","), CSV_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), results.len() * cfg.detectors.len());
    let mut it = rows.iter();
    for r in &results {
        for d in &r.detectors {
            let row = it.next().unwrap();
            assert_eq!(&row[0], "snr_db");
            assert_eq!(row[1].parse::<f64>().unwrap(), r.axis_value);
            assert_eq!(&row[2], d.kind.name());
            assert_eq!(row[3].parse::<usize>().unwrap(), d.trials);
            let ratio: f64 = row[4].parse().unwrap();
            assert!((ratio - d.error_ratio).abs() <= 1e-6 * d.error_ratio.max(1e-300));
            assert_eq!(row[6].parse::<u64>().unwrap(), 99);
            assert_eq!(row[7].parse::<usize>().unwrap(), 0);
        }
    }
}

#[test]
fn near_noiseless_square_system_is_decoded_exactly() {
    let cfg = ExperimentConfig {
        snr_db: Some(Values::One(60.0)),
        detectors: vec![DetectorConfig::new(DetectorKind::Lmmse)],
        ..config(10, 10, 50)
    };
    let res = run_sweep(&cfg).unwrap();
    assert_eq!(res[0].detectors[0].error_ratio, 0.0);
}

#[test]
fn map_soav_beats_lasso_on_paired_trials() {
    let cfg = ExperimentConfig {
        rho: Values::One(0.8),
        snr_db: Some(Values::One(8.0)),
        detectors: vec![
            DetectorConfig::new(DetectorKind::Lasso),
            DetectorConfig::new(DetectorKind::MapSoav),
        ],
        ..config(10, 7, 400)
    };
    let res = &run_sweep(&cfg).unwrap()[0];
    let lasso = res.summary(DetectorKind::Lasso).unwrap().error_ratio;
    let soav = res.summary(DetectorKind::MapSoav).unwrap().error_ratio;
    assert!(soav <= lasso, "map-soav {soav} vs lasso {lasso}");
}

#[test]
fn draws_follow_the_configured_shape() {
    let cfg = config(12, 9, 1);
    let point = cfg.axis_points().unwrap()[1];
    let (prior, inst) = draw_trial(&cfg, &point, 0).unwrap();
    assert_eq!((inst.n_meas(), inst.n_users()), (9, 12));
    assert_eq!(inst.sigma_w2, point.sigma_w2);
    assert!(inst.b.iter().all(|b| prior.alphabet().contains(b)));
}
