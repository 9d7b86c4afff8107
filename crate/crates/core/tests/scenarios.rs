use std::collections::HashSet;
use std::fs;

use rangesim::scenarios::*;

fn pair(d: f64, replicas: usize) -> ScenarioConfig {
    ScenarioConfig { replicas, ..ScenarioConfig::new(Layout::Pair, 1, d) }
}

#[test]
fn json_uses_field_names_and_defaults() {
    let cfg = ScenarioConfig::from_json(r#"{"layout": "random_disc", "n_reflectors": 4, "distance_m": 30}"#).unwrap();
    assert_eq!(cfg, ScenarioConfig::new(Layout::RandomDisc, 4, 30.0));
    assert_eq!(cfg.resolved_waiting_window(), Some(9488));
    let back = ScenarioConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.scenario_id(), cfg.scenario_id());
    assert_eq!(cfg.scenario_id().len(), 16);
}

#[test]
fn unknown_fields_are_rejected() {
    let err = ScenarioConfig::from_json(r#"{"layout": "pair", "distance_m": 5, "colour": 1}"#).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(ScenarioConfig::from_json(r#"{"layout": "ring", "distance_m": 5}"#).is_err());
}

#[test]
fn validation_lists_every_problem() {
    let mut cfg = ScenarioConfig::new(Layout::Pair, 3, -1.0);
    cfg.bandwidth_hz = Some(30e6);
    cfg.snr_db = Some(10.0);
    cfg.noise_power_w = Some(1e-9);
    cfg.replicas = 0;
    let v = cfg.validate();
    assert_eq!(v.len(), 5, "{v:?}");
    for key in ["pair", "distance_m", "integer", "snr_db", "replicas"] {
        assert!(v.iter().any(|p| p.contains(key)), "{key}: {v:?}");
    }
    let err = run_scenario(&cfg).unwrap_err();
    assert!(err.is_validation());
    let mut over = ScenarioConfig::new(Layout::Pair, 1, 5.0);
    over.bandwidth_hz = Some(200e6);
    assert_eq!(over.validate().len(), 1);
}

#[test]
fn budget_check_rejects_overlong_batches() {
    let mut cfg = pair(10.0, 1);
    cfg.waiting_window = Some(100_000);
    cfg.session_duration_s = Some(1e-3);
    assert!(cfg.validate().iter().any(|p| p.contains("session target")), "{:?}", cfg.validate());
    cfg.session_duration_s = None;
    assert!(cfg.validate().is_empty());
    cfg.waiting_window = None;
    cfg.session_duration_s = Some(40e-6);
    assert!(!cfg.validate().is_empty());
}

#[test]
fn waiting_window_follows_the_session_target() {
    let mut cfg = pair(10.0, 1);
    cfg.session_duration_s = Some(100e-6);
    assert_eq!(cfg.resolved_waiting_window(), Some(488));
    cfg.bandwidth_hz = Some(25e6);
    assert_eq!(cfg.upsample_factor(), 4);
    assert_eq!(cfg.resolved_waiting_window(), None);
    assert!(!cfg.validate().is_empty());
    cfg.session_duration_s = Some(1e-3);
    assert_eq!(cfg.resolved_waiting_window(), Some(7952));
}

#[test]
fn layouts_place_nodes_where_asked() {
    let eq = ScenarioConfig::new(Layout::Equidistant, 30, 12.0);
    let (ini, rs) = place_nodes(&eq, 4);
    assert_eq!(ini.id, 0);
    assert_eq!(rs.iter().map(|r| r.id).collect::<Vec<_>>(), (1..=30).collect::<Vec<_>>());
    for r in &rs {
        assert!((r.position.distance_to(&ini.position) - 12.0).abs() < 1e-9);
        assert!(r.is_synchronized());
        assert_eq!(r.key, ini.key);
    }
    let disc = ScenarioConfig::new(Layout::RandomDisc, 2000, 30.0);
    let (ini, rs) = place_nodes(&disc, 5);
    let d: Vec<f64> = rs.iter().map(|r| r.position.distance_to(&ini.position)).collect();
    assert!(d.iter().all(|&x| (1.0..=30.0).contains(&x)));
    let inner = d.iter().filter(|&&x| x < 30.0 / 2f64.sqrt()).count();
    assert!((inner as f64 / 2000.0 - 0.5).abs() < 0.05, "{inner}");
    let (a, _) = place_nodes(&disc, 6);
    assert_ne!(a.key, ini.key);
}

#[test]
fn pair_run_is_accurate() {
    let report = run_scenario(&pair(10.0, 10)).unwrap();
    assert_eq!(report.replicas.len(), 10);
    assert!(report.aggregate.mae_m.unwrap() < 0.25, "{:?}", report.aggregate);
    assert_eq!(report.aggregate.failure_rate, 0.0);
    assert!(report.aggregate.ci95_m.is_some());
}

fn read(dir: &std::path::Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn reruns_write_identical_bytes() {
    let mut cfg = ScenarioConfig::new(Layout::RandomDisc, 5, 20.0);
    cfg.replicas = 4;
    cfg.seed = 77;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_report(&run_scenario(&cfg).unwrap(), a.path()).unwrap();
    emit_report(&run_scenario(&cfg).unwrap(), b.path()).unwrap();
    for f in ["sessions.csv", "aggregate.csv", "config.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    cfg.seed = 78;
    let c = tempfile::tempdir().unwrap();
    emit_report(&run_scenario(&cfg).unwrap(), c.path()).unwrap();
    assert_ne!(read(a.path(), "sessions.csv"), read(c.path(), "sessions.csv"));
}

#[test]
fn csv_schema_and_recomputable_mae() {
    let mut cfg = ScenarioConfig::new(Layout::Equidistant, 6, 8.0);
    cfg.replicas = 3;
    let report = run_scenario(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();

    let mut r = csv::Reader::from_path(dir.path().join("sessions.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), SESSION_HEADER);
    let mut abs = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        rows += 1;
        assert_eq!(&rec[0], report.scenario_id);
        if let Ok(e) = rec[5].parse::<f64>() {
            abs.push(e.abs());
        }
    }
    assert_eq!(rows, 18);
    let mae = abs.iter().sum::<f64>() / abs.len() as f64;
    assert!((mae - report.aggregate.mae_m.unwrap()).abs() < 1e-12);

    let mut r = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), AGGREGATE_HEADER);
    let rec = r.records().next().unwrap().unwrap();
    assert_eq!(&rec[0], "");
    assert_eq!(rec[1].parse::<f64>().unwrap(), report.aggregate.mae_m.unwrap());

    let side: serde_json::Value = serde_json::from_str(&read(dir.path(), "config.json")).unwrap();
    assert_eq!(side["scenario_id"], report.scenario_id.as_str());
    assert_eq!(side["seed"], report.seed);
    assert_eq!(ScenarioConfig::from_json(&side["config"].to_string()).unwrap(), report.config);
}

#[test]
fn all_failed_report_has_blank_mae() {
    let mut cfg = pair(10.0, 2);
    cfg.noise_power_w = Some(1.0);
    let report = run_scenario(&cfg).unwrap();
    assert_eq!(report.aggregate.failure_rate, 1.0);
    assert_eq!(report.aggregate.mae_m, None);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let agg = read(dir.path(), "aggregate.csv");
    let row = agg.lines().nth(1).unwrap();
    assert_eq!(row, ",,1,");
    assert_eq!(aggregate(&[]).failure_rate, 1.0);
}

#[test]
fn replicas_use_distinct_seeds() {
    let report = run_scenario(&pair(10.0, 20)).unwrap();
    let seeds: HashSet<u64> = report.replicas.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 20);
    let errors: HashSet<u64> = report.replicas.iter().map(|r| r.reflectors[0].error.unwrap().to_bits()).collect();
    assert!(errors.len() > 15);
}

#[test]
fn sweep_axes_and_outputs() {
    let base = pair(10.0, 2);
    assert!(sweep(&base, "colour", &[1.0]).unwrap_err().is_validation());
    assert!(sweep(&base, "batch_size", &[2.5]).unwrap_err().is_validation());
    assert!(sweep(&base, "bandwidth_hz", &[30e6]).unwrap_err().is_validation());
    let reports = sweep(&base, "distance_m", &[5.0, 15.0]).unwrap();
    assert_eq!(reports.len(), 2);
    assert_ne!(reports[0].seed, reports[1].seed);
    assert_eq!(reports[1].config.distance_m, 15.0);
    assert_eq!(reports, sweep(&base, "distance_m", &[5.0, 15.0]).unwrap());
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&reports, dir.path()).unwrap();
    let agg = read(dir.path(), "aggregate.csv");
    let firsts: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(firsts, ["5", "15"]);
    let side: serde_json::Value = serde_json::from_str(&read(dir.path(), "config.json")).unwrap();
    assert_eq!(side["axis"], "distance_m");
    assert_eq!(side["points"].as_array().unwrap().len(), 2);
}

#[test]
fn twenty_reflectors_fit_a_short_session() {
    let mut cfg = ScenarioConfig::new(Layout::Equidistant, 1, 10.0);
    cfg.session_duration_s = Some(100e-6);
    cfg.replicas = 3;
    for r in sweep(&cfg, "n_reflectors", &[1.0, 5.0, 10.0, 15.0, 20.0]).unwrap() {
        assert!(r.aggregate.failure_rate <= 0.02, "{:?}: {}", r.axis, r.aggregate.failure_rate);
    }
}

#[test]
fn cancellation_lowers_failures_in_crowded_short_sessions() {
    let mut cfg = ScenarioConfig::new(Layout::Equidistant, 20, 10.0);
    cfg.session_duration_s = Some(100e-6);
    cfg.replicas = 10;
    let on = run_scenario(&cfg).unwrap().aggregate.failure_rate;
    cfg.sic = false;
    let off = run_scenario(&cfg).unwrap().aggregate.failure_rate;
    assert!(on < off, "on {on} off {off}");
}

#[test]
fn thread_override_is_validated() {
    std::env::set_var(THREADS_ENV, "2");
    assert_eq!(threads_from_env().unwrap(), Some(2));
    assert_eq!(with_worker_pool(rayon::current_num_threads).unwrap(), 2);
    std::env::set_var(THREADS_ENV, "zero");
    assert!(threads_from_env().is_err());
    std::env::remove_var(THREADS_ENV);
    assert_eq!(threads_from_env().unwrap(), None);
}
