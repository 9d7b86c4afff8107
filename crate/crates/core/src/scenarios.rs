//! Declarative experiments: layouts, replicas, sweeps and result files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::Adversary;
use crate::channel::{noise_power_for_snr, Position};
use crate::detector::PeakCriterion;
use crate::error::{Error, Result};
use crate::protocol::{
    derive_seed, run_session, InitiatorNode, NodeClock, ProtocolConfig, ReflectorNode, ReflectorOutcome, SessionEnv,
    DEFAULT_MASK_FRACTION,
};
use crate::sequences::SharedKey;
use crate::sic::Replica;

pub const THREADS_ENV: &str = "RANGESIM_THREADS";

pub const SESSION_HEADER: [&str; 8] = [
    "scenario_id",
    "replica",
    "reflector_id",
    "true_distance_m",
    "est_distance_m",
    "error_m",
    "failed",
    "n_responses_received",
];
pub const AGGREGATE_HEADER: [&str; 4] = ["axis_value", "mae_m", "failure_rate", "ci95_m"];

const STREAM_REPLICA: u64 = 11;
const STREAM_SWEEP: u64 = 12;
const STREAM_LAYOUT: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Pair,
    Equidistant,
    RandomDisc,
}

macro_rules! defaults {
    ($($name:ident: $t:ty = $v:expr;)*) => {
        $(fn $name() -> $t { $v })*
    };
}

defaults! {
    d_one_usize: usize = 1;
    d_min_distance: f64 = 1.0;
    d_sample_rate: f64 = 100e6;
    d_seq_len: usize = 512;
    d_alpha: f64 = 50.0;
    d_vicinity: usize = 256;
    d_batch: usize = 10;
    d_epoch: f64 = 1.0;
    d_true: bool = true;
    d_replicas: usize = 10;
    d_carrier: f64 = 2.45e9;
    d_tof_max: f64 = 1e-6;
    d_mask: f64 = DEFAULT_MASK_FRACTION;
}

/// Default SNR when neither SNR nor noise power is configured.
pub const DEFAULT_SNR_DB: f64 = 20.0;
/// Default session length when no waiting window is configured.
pub const DEFAULT_SESSION_S: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub layout: Layout,
    #[serde(default = "d_one_usize")]
    pub n_reflectors: usize,
    /// Pair distance, circle radius or disc radius.
    pub distance_m: f64,
    /// Inner radius of the random disc.
    #[serde(default = "d_min_distance")]
    pub min_distance_m: f64,
    #[serde(default = "d_sample_rate")]
    pub sample_rate_hz: f64,
    /// Signal bandwidth; defaults to the sample rate.
    #[serde(default)]
    pub bandwidth_hz: Option<f64>,
    #[serde(default = "d_seq_len")]
    pub sequence_length: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_vicinity")]
    pub vicinity: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Waiting window in samples; derived from the session target if absent.
    #[serde(default)]
    pub waiting_window: Option<u32>,
    #[serde(default)]
    pub session_duration_s: Option<f64>,
    #[serde(default = "d_epoch")]
    pub epoch_duration_s: f64,
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Distance at which `snr_db` holds; defaults to `distance_m`.
    #[serde(default)]
    pub snr_reference_m: Option<f64>,
    #[serde(default)]
    pub noise_power_w: Option<f64>,
    #[serde(default = "d_true")]
    pub sic: bool,
    #[serde(default)]
    pub sic_replica: Replica,
    #[serde(default = "d_true")]
    pub subsample_interpolation: bool,
    #[serde(default)]
    pub adversary: Option<Adversary>,
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_carrier")]
    pub carrier_hz: f64,
    #[serde(default = "d_tof_max")]
    pub tof_max_s: f64,
    #[serde(default)]
    pub hardware_latency_s: f64,
    #[serde(default = "d_mask")]
    pub tx_mask_fraction: f64,
}

impl ScenarioConfig {
    pub fn new(layout: Layout, n_reflectors: usize, distance_m: f64) -> Self {
        Self {
            layout,
            n_reflectors,
            distance_m,
            min_distance_m: d_min_distance(),
            sample_rate_hz: d_sample_rate(),
            bandwidth_hz: None,
            sequence_length: d_seq_len(),
            alpha: d_alpha(),
            vicinity: d_vicinity(),
            batch_size: d_batch(),
            waiting_window: None,
            session_duration_s: None,
            epoch_duration_s: d_epoch(),
            snr_db: None,
            snr_reference_m: None,
            noise_power_w: None,
            sic: true,
            sic_replica: Replica::Pattern,
            subsample_interpolation: true,
            adversary: None,
            replicas: d_replicas(),
            seed: 0,
            carrier_hz: d_carrier(),
            tof_max_s: d_tof_max(),
            hardware_latency_s: 0.0,
            tx_mask_fraction: d_mask(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth_hz.unwrap_or(self.sample_rate_hz)
    }

    pub fn upsample_factor(&self) -> usize {
        (self.sample_rate_hz / self.bandwidth()).round().max(1.0) as usize
    }

    pub fn session_target(&self) -> Option<f64> {
        match (self.waiting_window, self.session_duration_s) {
            (Some(_), t) => t,
            (None, t) => Some(t.unwrap_or(DEFAULT_SESSION_S)),
        }
    }

    /// Waiting window from the explicit value or the session target.
    pub fn resolved_waiting_window(&self) -> Option<u32> {
        if let Some(w) = self.waiting_window {
            return Some(w);
        }
        let t = 1.0 / self.sample_rate_hz;
        let t_resp = (self.sequence_length * self.upsample_factor()) as f64 * t;
        let target = self.session_target()?;
        let w = ((target / self.batch_size as f64 - t_resp) / t + 1e-9).floor();
        (w >= 1.0 && w <= f64::from(u32::MAX)).then_some(w as u32)
    }

    fn reference_distance(&self) -> f64 {
        self.snr_reference_m.unwrap_or(self.distance_m)
    }

    pub fn noise_power(&self) -> f64 {
        if let Some(p) = self.noise_power_w {
            return p;
        }
        let tx_power = 1.0 / self.upsample_factor() as f64;
        noise_power_for_snr(
            tx_power,
            self.reference_distance(),
            self.snr_db.unwrap_or(DEFAULT_SNR_DB),
            self.carrier_hz,
        )
    }

    pub fn protocol(&self) -> Result<ProtocolConfig> {
        let problems = self.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        Ok(self.protocol_unchecked())
    }

    fn protocol_unchecked(&self) -> ProtocolConfig {
        ProtocolConfig {
            sequence_length: self.sequence_length,
            criterion: PeakCriterion {
                alpha: self.alpha,
                vicinity: self.vicinity,
                main_lobe: 2,
            },
            waiting_window: self.resolved_waiting_window().unwrap_or(1),
            batch_size: self.batch_size,
            sample_rate_hz: self.sample_rate_hz,
            upsample_factor: self.upsample_factor(),
            mask_fraction: self.tx_mask_fraction,
            epoch_duration: self.epoch_duration_s,
            tof_max: self.tof_max_s,
            hardware_latency: self.hardware_latency_s,
            sic: self.sic,
            replica: self.sic_replica,
            subsample_interpolation: self.subsample_interpolation,
            carrier_hz: self.carrier_hz,
            noise_power: self.noise_power(),
        }
    }

    /// Every violated invariant, empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if self.n_reflectors == 0 {
            v.push("n_reflectors must be at least 1".into());
        }
        if self.layout == Layout::Pair && self.n_reflectors != 1 {
            v.push("pair layout takes exactly one reflector".into());
        }
        if !pos(self.distance_m) {
            v.push("distance_m must be positive".into());
        }
        if self.layout == Layout::RandomDisc && !(pos(self.min_distance_m) && self.min_distance_m < self.distance_m) {
            v.push("min_distance_m must be positive and below distance_m".into());
        }
        if !pos(self.sample_rate_hz) {
            v.push("sample_rate_hz must be positive".into());
        }
        let b = self.bandwidth();
        if !pos(b) {
            v.push("bandwidth_hz must be positive".into());
        } else if pos(self.sample_rate_hz) {
            let ratio = self.sample_rate_hz / b;
            if b > self.sample_rate_hz * (1.0 + 1e-12) {
                v.push("bandwidth_hz must not exceed sample_rate_hz".into());
            } else if (ratio - ratio.round()).abs() > 1e-9 * ratio {
                v.push("sample_rate_hz / bandwidth_hz must be an integer".into());
            }
        }
        if self.snr_db.is_some() && self.noise_power_w.is_some() {
            v.push("set at most one of snr_db and noise_power_w".into());
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            v.push("snr_db must be finite".into());
        }
        if self.noise_power_w.is_some_and(|p| !(p >= 0.0 && p.is_finite())) {
            v.push("noise_power_w must be non-negative".into());
        }
        if self.snr_reference_m.is_some_and(|d| !pos(d)) {
            v.push("snr_reference_m must be positive".into());
        }
        if self.replicas == 0 {
            v.push("replicas must be at least 1".into());
        }
        if self.session_duration_s.is_some_and(|t| !pos(t)) {
            v.push("session_duration_s must be positive".into());
        }
        if self.waiting_window == Some(0) {
            v.push("waiting_window must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if v.is_empty() {
            match self.resolved_waiting_window() {
                None => v.push("session_duration_s is too short for one waiting slot per response".into()),
                Some(w) => {
                    if let Some(target) = self.session_target() {
                        let t = 1.0 / self.sample_rate_hz;
                        let need = self.batch_size as f64
                            * (f64::from(w) * t + (self.sequence_length * self.upsample_factor()) as f64 * t);
                        if need > target * (1.0 + 1e-9) {
                            v.push(format!("batch needs {need:.3e} s, above the session target {target:.3e} s"));
                        }
                    }
                }
            }
        }
        if v.is_empty() {
            v.extend(self.protocol_unchecked().validate());
        }
        if let Some(a) = &self.adversary {
            v.extend(a.validate());
        }
        v
    }

    /// Stable identifier derived from the canonical JSON form.
    pub fn scenario_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Node placement for one replica.
pub fn place_nodes(cfg: &ScenarioConfig, seed: u64) -> (InitiatorNode, Vec<ReflectorNode>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_LAYOUT, 0));
    let key = SharedKey::random(&mut rng);
    let initiator = InitiatorNode {
        id: 0,
        position: Position::ORIGIN,
        clock: NodeClock::default(),
        key: key.clone(),
    };
    let reflectors = (0..cfg.n_reflectors)
        .map(|i| {
            let pos = match cfg.layout {
                Layout::Pair => Position::planar(cfg.distance_m, 0.0),
                Layout::Equidistant => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    Position::planar(cfg.distance_m * a.cos(), cfg.distance_m * a.sin())
                }
                Layout::RandomDisc => {
                    let (lo, hi) = (cfg.min_distance_m.powi(2), cfg.distance_m.powi(2));
                    let r = rng.random_range(lo..hi).sqrt();
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    Position::planar(r * a.cos(), r * a.sin())
                }
            };
            ReflectorNode::new(i as u32 + 1, pos, key.clone()).synchronized()
        })
        .collect();
    (initiator, reflectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaResult {
    pub replica: usize,
    pub seed: u64,
    pub session_duration: f64,
    pub reflectors: Vec<ReflectorOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mae_m: Option<f64>,
    pub mean_error_m: Option<f64>,
    pub failure_rate: f64,
    pub ci95_m: Option<f64>,
    pub total_reflectors: usize,
    pub failed_reflectors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub scenario_id: String,
    pub config: ScenarioConfig,
    pub seed: u64,
    /// Sweep axis and value this report belongs to.
    pub axis: Option<(String, f64)>,
    pub replicas: Vec<ReplicaResult>,
    pub aggregate: Aggregate,
}

/// One row of the per-session table.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRow {
    pub scenario_id: String,
    pub replica: usize,
    pub reflector_id: u32,
    pub true_distance_m: f64,
    pub est_distance_m: Option<f64>,
    pub error_m: Option<f64>,
    pub failed: bool,
    pub n_responses_received: usize,
}

impl ScenarioReport {
    pub fn rows(&self) -> Vec<SessionRow> {
        self.replicas
            .iter()
            .flat_map(|r| {
                r.reflectors.iter().map(move |o| SessionRow {
                    scenario_id: self.scenario_id.clone(),
                    replica: r.replica,
                    reflector_id: o.reflector_id,
                    true_distance_m: o.true_distance,
                    est_distance_m: o.estimate.as_ref().map(|e| e.final_distance),
                    error_m: o.error,
                    failed: o.failed,
                    n_responses_received: o.n_responses_received,
                })
            })
            .collect()
    }
}

pub fn aggregate(replicas: &[ReplicaResult]) -> Aggregate {
    let all: Vec<&ReflectorOutcome> = replicas.iter().flat_map(|r| &r.reflectors).collect();
    let errors: Vec<f64> = all.iter().filter_map(|o| o.error).collect();
    let failed = all.iter().filter(|o| o.failed).count();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let per_replica: Vec<f64> = replicas
        .iter()
        .filter_map(|r| {
            let e: Vec<f64> = r.reflectors.iter().filter_map(|o| o.error.map(f64::abs)).collect();
            mean(&e)
        })
        .collect();
    let ci95_m = (per_replica.len() >= 2).then(|| {
        let m = per_replica.iter().sum::<f64>() / per_replica.len() as f64;
        let var = per_replica.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (per_replica.len() - 1) as f64;
        1.96 * (var / per_replica.len() as f64).sqrt()
    });
    Aggregate {
        mae_m: mean(&abs),
        mean_error_m: mean(&errors),
        failure_rate: if all.is_empty() { 1.0 } else { failed as f64 / all.len() as f64 },
        ci95_m,
        total_reflectors: all.len(),
        failed_reflectors: failed,
    }
}

/// Worker count from `RANGESIM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Run `f` on a pool sized by `RANGESIM_THREADS`, or the global pool.
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads_from_env()? {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn run_with_seed(cfg: &ScenarioConfig, seed: u64, axis: Option<(String, f64)>) -> Result<ScenarioReport> {
    let proto = cfg.protocol()?;
    let replicas: Result<Vec<ReplicaResult>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| {
            let rs = derive_seed(seed, STREAM_REPLICA, i as u64);
            let (initiator, reflectors) = place_nodes(cfg, rs);
            let env = SessionEnv {
                epoch: 1 + i as u64,
                seed: rs,
            };
            let res = run_session(&initiator, &reflectors, &proto, &env, cfg.adversary.as_ref())?;
            Ok(ReplicaResult {
                replica: i,
                seed: rs,
                session_duration: res.session_duration,
                reflectors: res.reflectors,
            })
        })
        .collect();
    let replicas = replicas?;
    let mut echoed = cfg.clone();
    echoed.seed = seed;
    Ok(ScenarioReport {
        scenario_id: echoed.scenario_id(),
        aggregate: aggregate(&replicas),
        config: echoed,
        seed,
        axis,
        replicas,
    })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    run_with_seed(cfg, cfg.seed, None)
}

pub const SWEEP_AXES: [&str; 20] = [
    "n_reflectors",
    "distance_m",
    "min_distance_m",
    "sample_rate_hz",
    "bandwidth_hz",
    "sequence_length",
    "alpha",
    "vicinity",
    "batch_size",
    "waiting_window",
    "session_duration_s",
    "epoch_duration_s",
    "snr_db",
    "snr_reference_m",
    "noise_power_w",
    "replicas",
    "carrier_hz",
    "tof_max_s",
    "hardware_latency_s",
    "tx_mask_fraction",
];

const INTEGER_AXES: [&str; 6] = [
    "n_reflectors",
    "sequence_length",
    "vicinity",
    "batch_size",
    "waiting_window",
    "replicas",
];

/// Copy of `base` with `axis` set to `value`.
pub fn with_axis(base: &ScenarioConfig, axis: &str, value: f64) -> Result<ScenarioConfig> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(Error::InvalidConfig(vec![format!(
            "unknown sweep axis {axis:?}; expected one of {}",
            SWEEP_AXES.join(", ")
        )]));
    }
    let mut json = serde_json::to_value(base)?;
    let v = if INTEGER_AXES.contains(&axis) {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(Error::InvalidConfig(vec![format!("axis {axis} needs non-negative integers, got {value}")]));
        }
        serde_json::Value::from(value as u64)
    } else {
        serde_json::Value::from(value)
    };
    json[axis] = v;
    Ok(serde_json::from_value(json)?)
}

pub fn sweep(base: &ScenarioConfig, axis: &str, values: &[f64]) -> Result<Vec<ScenarioReport>> {
    let cfgs: Vec<ScenarioConfig> = values.iter().map(|&v| with_axis(base, axis, v)).collect::<Result<_>>()?;
    let problems: Vec<String> = cfgs
        .iter()
        .zip(values)
        .flat_map(|(c, v)| c.validate().into_iter().map(move |p| format!("{axis}={v}: {p}")))
        .collect();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    cfgs.par_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (c, &v))| run_with_seed(c, derive_seed(base.seed, STREAM_SWEEP, i as u64), Some((axis.to_string(), v))))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `sessions.csv`, `aggregate.csv` and `config.json` into `dir`.
pub fn emit_reports(reports: &[ScenarioReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("sessions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(SESSION_HEADER).map_err(csv_err(&path))?;
    for r in reports {
        for row in r.rows() {
            w.write_record([
                row.scenario_id,
                row.replica.to_string(),
                row.reflector_id.to_string(),
                row.true_distance_m.to_string(),
                fmt_opt(row.est_distance_m),
                fmt_opt(row.error_m),
                row.failed.to_string(),
                row.n_responses_received.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(AGGREGATE_HEADER).map_err(csv_err(&path))?;
    for r in reports {
        let a = &r.aggregate;
        w.write_record([
            r.axis.as_ref().map(|(_, v)| v.to_string()).unwrap_or_default(),
            fmt_opt(a.mae_m),
            a.failure_rate.to_string(),
            fmt_opt(a.ci95_m),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("config.json");
    let points: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "scenario_id": r.scenario_id,
                "seed": r.seed,
                "axis_value": r.axis.as_ref().map(|(_, v)| *v),
                "config": r.config,
            })
        })
        .collect();
    let sidecar = match reports {
        [single] if single.axis.is_none() => serde_json::json!({
            "scenario_id": single.scenario_id,
            "seed": single.seed,
            "config": single.config,
        }),
        _ => serde_json::json!({
            "axis": reports.first().and_then(|r| r.axis.as_ref().map(|(a, _)| a.clone())),
            "points": points,
        }),
    };
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(())
}

pub fn emit_report(report: &ScenarioReport, dir: &Path) -> Result<()> {
    emit_reports(std::slice::from_ref(report), dir)
}
