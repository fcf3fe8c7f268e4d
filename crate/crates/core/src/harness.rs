//! Monte Carlo experiment engine.
//!
//! Every trial draws its own random stream from `(master_seed, axis point,
//! trial index)`, so sweep results are bitwise independent of the number of
//! worker threads. Within a trial all detectors see the same instance.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{detect, soav_weights, DetectorConfig, DetectorKind};
use crate::prior::{
    gaussian_matrix, seeded_stream, sigma_from_snr, snr_from_sigma, synthesize, NoiseMode, SnrSpec,
    SymbolPrior, SystemInstance,
};
use crate::soav::SoavWeights;
use crate::{Error, Result};

/// Stream reserved for the shared signature matrix in fixed-matrix runs.
const FIXED_MATRIX_STREAM: u64 = u64::MAX;

/// A scalar or a list of values in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    One(f64),
    Many(Vec<f64>),
}

impl Values {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Values::One(v) => vec![*v],
            Values::Many(v) => v.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Values::One(_) => 1,
            Values::Many(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<f64> for Values {
    fn from(v: f64) -> Self {
        Values::One(v)
    }
}

impl From<Vec<f64>> for Values {
    fn from(v: Vec<f64>) -> Self {
        Values::Many(v)
    }
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding), a comma
/// list, or a single number.
pub fn parse_values(text: &str) -> Result<Values> {
    let bad = |what: &str| Error::Config(format!("cannot parse {what} in {text:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(s));
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts.as_slice() else {
            return Err(bad("range (expected start:stop:step)"));
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(Error::Config(format!("empty or invalid range {text:?}")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // round to kill accumulated binary noise such as 0.15000000000000002
        let values = (0..count)
            .map(|i| {
                let v = start + step * i as f64;
                (v * 1e12).round() / 1e12
            })
            .collect();
        Ok(Values::Many(values))
    } else if text.contains(',') {
        Ok(Values::Many(text.split(',').map(num).collect::<Result<_>>()?))
    } else {
        Ok(Values::One(num(text)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_users: usize,
    pub n_meas: usize,
    pub trials: usize,
    pub rho: Values,
    pub snr_db: Option<Values>,
    /// Fixed noise variance; excludes `snr_db`.
    pub sigma_w2_override: Option<f64>,
    pub detectors: Vec<DetectorConfig>,
    pub master_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub parallelism: usize,
    /// Draw one signature matrix for the whole run instead of one per trial.
    pub fix_matrix: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_meas: 70,
            trials: 1000,
            rho: Values::One(0.8),
            snr_db: Some(Values::One(10.0)),
            sigma_w2_override: None,
            detectors: [DetectorKind::Lmmse, DetectorKind::Lasso, DetectorKind::MapSoav]
                .into_iter()
                .map(DetectorConfig::new)
                .collect(),
            master_seed: 0,
            parallelism: 0,
            fix_matrix: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SnrDb,
    Rho,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SnrDb => "snr_db",
            Axis::Rho => "rho",
        }
    }
}

/// One point of the sweep axis with its derived noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisPoint {
    pub index: usize,
    pub axis: Axis,
    pub value: f64,
    pub rho: f64,
    pub sigma_w2: f64,
    pub snr_db: f64,
}

impl ExperimentConfig {
    pub fn from_json_str(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_meas == 0 {
            return Err(Error::Config("n_users and n_meas must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("no detectors configured".into()));
        }
        if self.trials > u32::MAX as usize {
            return Err(Error::Config("too many trials".into()));
        }
        for d in &self.detectors {
            d.validate()?;
        }
        self.axis_points().map(|_| ())
    }

    /// Resolves the sweep axis. A fixed `sigma_w2_override` sweeps `rho`;
    /// otherwise whichever of `rho` / `snr_db` has several values is swept
    /// (SNR when both are scalars).
    pub fn axis_points(&self) -> Result<Vec<AxisPoint>> {
        let rhos = self.rho.to_vec();
        if rhos.is_empty() {
            return Err(Error::Config("rho list is empty".into()));
        }
        for &rho in &rhos {
            SnrSpec::new(0.0, rho)?;
        }
        let point = |index, axis, value, rho: f64, sigma_w2: f64, snr_db| AxisPoint {
            index,
            axis,
            value,
            rho,
            sigma_w2,
            snr_db,
        };
        match (&self.sigma_w2_override, &self.snr_db) {
            (Some(_), Some(_)) => Err(Error::Config(
                "sigma_w2_override and snr_db are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Config("either snr_db or sigma_w2_override is required".into())),
            (Some(s2), None) => {
                if !(*s2 > 0.0) || !s2.is_finite() {
                    return Err(Error::Config(format!("sigma_w2_override must be positive, got {s2}")));
                }
                Ok(rhos
                    .iter()
                    .enumerate()
                    .map(|(i, &rho)| {
                        point(i, Axis::Rho, rho, rho, *s2, snr_from_sigma(*s2, rho, self.n_users, self.n_meas))
                    })
                    .collect())
            }
            (None, Some(snr)) => {
                let snrs = snr.to_vec();
                if snrs.is_empty() {
                    return Err(Error::Config("snr_db list is empty".into()));
                }
                let sigma = |snr_db, rho| sigma_from_snr(SnrSpec { snr_db, rho }, self.n_users, self.n_meas);
                match (rhos.len(), snrs.len()) {
                    (1, _) => Ok(snrs
                        .iter()
                        .enumerate()
                        .map(|(i, &s)| point(i, Axis::SnrDb, s, rhos[0], sigma(s, rhos[0]), s))
                        .collect()),
                    (_, 1) => Ok(rhos
                        .iter()
                        .enumerate()
                        .map(|(i, &r)| point(i, Axis::Rho, r, r, sigma(snrs[0], r), snrs[0]))
                        .collect()),
                    _ => Err(Error::Config("sweep either rho or snr_db, not both".into())),
                }
            }
        }
    }
}

/// Fraction of positions where `decided` and `truth` differ.
pub fn error_ratio(decided: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if decided.len() != truth.len() || truth.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "decided has {} entries, truth has {}",
            decided.len(),
            truth.len()
        )));
    }
    Ok(error_count(decided, truth) as f64 / truth.len() as f64)
}

fn error_count(decided: &DVector<f64>, truth: &DVector<f64>) -> usize {
    decided.iter().zip(truth.iter()).filter(|(a, b)| a != b).count()
}

/// FNV-1a over the bit patterns of every array in the instance.
pub fn instance_hash(inst: &SystemInstance) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: f64| {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for v in inst
        .s
        .iter()
        .chain(inst.gains.iter())
        .chain(inst.b.iter())
        .chain(inst.w.iter())
        .chain(inst.y.iter())
    {
        feed(*v);
    }
    feed(inst.sigma_w2);
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorOutcome {
    Ok {
        errors: usize,
        iterations: usize,
        instance_hash: u64,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_index: usize,
    /// One entry per configured detector, in configuration order.
    pub outcomes: Vec<DetectorOutcome>,
}

/// Trial stream id: axis index in the high half, trial index in the low half.
fn trial_stream(point: &AxisPoint, trial_index: usize) -> u64 {
    ((point.index as u64) << 32) | trial_index as u64
}

/// The prior and instance seen by every detector in one trial.
pub fn draw_trial(config: &ExperimentConfig, point: &AxisPoint, trial_index: usize) -> Result<(SymbolPrior, SystemInstance)> {
    let prior = SymbolPrior::bpsk_with_inactivity(point.rho)?;
    let mut rng = seeded_stream(config.master_seed, trial_stream(point, trial_index));
    let s = if config.fix_matrix {
        gaussian_matrix(
            config.n_meas,
            config.n_users,
            &mut seeded_stream(config.master_seed, FIXED_MATRIX_STREAM),
        )
    } else {
        gaussian_matrix(config.n_meas, config.n_users, &mut rng)
    };
    let gains = DVector::from_element(config.n_users, 1.0);
    let instance = synthesize(&prior, s, gains, point.sigma_w2, NoiseMode::Gaussian, &mut rng)?;
    Ok((prior, instance))
}

/// Draws a fresh instance (unless the matrix is fixed) and runs every
/// configured detector on it. Detector failures are recorded, not raised.
pub fn run_trial(config: &ExperimentConfig, point: &AxisPoint, trial_index: usize) -> Result<TrialRecord> {
    let (prior, instance) = draw_trial(config, point, trial_index)?;
    let outcomes = config
        .detectors
        .iter()
        .map(|d| match detect(d, &instance, &prior) {
            Ok(res) => DetectorOutcome::Ok {
                errors: error_count(&res.decided, &instance.b),
                iterations: res.diagnostics.iterations(),
                instance_hash: instance_hash(&instance),
            },
            Err(e) => DetectorOutcome::Failed(e.to_string()),
        })
        .collect();
    Ok(TrialRecord {
        trial_index,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorSummary {
    pub kind: DetectorKind,
    /// Trials that completed for this detector.
    pub trials: usize,
    pub failures: usize,
    pub error_ratio: f64,
    pub std_err: f64,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub axis_value: f64,
    pub rho: f64,
    pub sigma_w2: f64,
    pub snr_db: f64,
    pub master_seed: u64,
    pub detectors: Vec<DetectorSummary>,
    /// Relaxation weights, present when a MAP-SOAV detector is configured.
    pub weights: Option<SoavWeights>,
}

impl SweepResult {
    pub fn summary(&self, kind: DetectorKind) -> Option<&DetectorSummary> {
        self.detectors.iter().find(|d| d.kind == kind)
    }
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs all trials of one axis point, returned in trial order.
pub fn run_point(config: &ExperimentConfig, point: &AxisPoint) -> Result<Vec<TrialRecord>> {
    thread_pool(config.parallelism)?.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(config, point, t))
            .collect()
    })
}

/// Mean and standard error over trials, summed in trial order.
pub fn aggregate(config: &ExperimentConfig, point: &AxisPoint, records: &[TrialRecord]) -> Result<SweepResult> {
    let n = config.n_users as f64;
    let detectors = config
        .detectors
        .iter()
        .enumerate()
        .map(|(d, cfg)| {
            let mut ratios = Vec::with_capacity(records.len());
            let mut iterations = 0usize;
            let mut failures = 0;
            for rec in records {
                match &rec.outcomes[d] {
                    DetectorOutcome::Ok { errors, iterations: it, .. } => {
                        ratios.push(*errors as f64 / n);
                        iterations += it;
                    }
                    DetectorOutcome::Failed(_) => failures += 1,
                }
            }
            let k = ratios.len();
            let mean = if k == 0 { f64::NAN } else { ratios.iter().sum::<f64>() / k as f64 };
            let std_err = if k > 1 {
                let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
                (var / k as f64).sqrt()
            } else {
                0.0
            };
            DetectorSummary {
                kind: cfg.kind,
                trials: k,
                failures,
                error_ratio: mean,
                std_err,
                mean_iterations: if k == 0 { 0.0 } else { iterations as f64 / k as f64 },
            }
        })
        .collect();
    let weights = match config.detectors.iter().find(|d| d.kind == DetectorKind::MapSoav) {
        Some(d) => Some(soav_weights(&SymbolPrior::bpsk_with_inactivity(point.rho)?, d.offset)?),
        None => None,
    };
    Ok(SweepResult {
        axis: point.axis,
        axis_value: point.value,
        rho: point.rho,
        sigma_w2: point.sigma_w2,
        snr_db: point.snr_db,
        master_seed: config.master_seed,
        detectors,
        weights,
    })
}

/// Runs every axis point in order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepResult>> {
    config.validate()?;
    config
        .axis_points()?
        .iter()
        .map(|p| aggregate(config, p, &run_point(config, p)?))
        .collect()
}

/// Formats like C's `%.{digits}g`.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const CSV_HEADER: &str = "axis,axis_value,detector,trials,error_ratio,std_err,master_seed,failures";

/// Writes `#` metadata lines (config, per-point noise level and relaxation
/// weights) followed by the CSV table.
pub fn write_csv<W: Write>(results: &[SweepResult], config: &ExperimentConfig, mut out: W) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Config("no results to write".into()));
    }
    let mut meta = serde_json::to_value(config)?;
    // execution detail, not part of the experiment
    if let Some(obj) = meta.as_object_mut() {
        obj.remove("parallelism");
    }
    let mut text = String::new();
    writeln!(text, "# config={}", serde_json::to_string(&meta)?).unwrap();
    for r in results {
        writeln!(
            text,
            "# point {}={} rho={} sigma_w2={} snr_db={}",
            r.axis.name(),
            r.axis_value,
            r.rho,
            r.sigma_w2,
            r.snr_db
        )
        .unwrap();
        if let Some(w) = &r.weights {
            let join = |f: &dyn Fn(f64) -> String| w.q.iter().map(|&q| f(q)).collect::<Vec<_>>().join(";");
            writeln!(
                text,
                "# weights {}={} C={} q={} C_exact={} q_exact={} convex={}",
                r.axis.name(),
                r.axis_value,
                format_sig(w.c, 6),
                join(&|q| format_sig(q, 6)),
                w.c,
                join(&|q| format!("{q}")),
                w.is_convex()
            )
            .unwrap();
        }
    }
    writeln!(text, "{CSV_HEADER}").unwrap();
    for r in results {
        for d in &r.detectors {
            writeln!(
                text,
                "{},{},{},{},{},{},{},{}",
                r.axis.name(),
                format_sig(r.axis_value, 6),
                d.kind.name(),
                d.trials,
                format_sig(d.error_ratio, 6),
                format_sig(d.std_err, 6),
                r.master_seed,
                d.failures
            )
            .unwrap();
        }
    }
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn emit_csv(results: &[SweepResult], config: &ExperimentConfig, destination: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(destination)?;
    write_csv(results, config, std::io::BufWriter::new(file))
}
