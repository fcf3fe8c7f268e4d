//! Symbol detectors: LMMSE, LASSO, MAP-SOAV and the exhaustive MAP oracle.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::optim::{fista, L1Penalty, ProxRule, QuadraticData, SoavPenalty, SolveReport, SolverConfig};
use crate::prior::{SymbolPrior, SystemInstance};
use crate::soav::{default_offset, solve_weights, SoavWeights, DEFAULT_OFFSET};
use crate::{Error, Result};

/// Largest lattice the exhaustive detector will enumerate.
pub const ENUMERATION_BOUND: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Lmmse,
    Lasso,
    #[serde(alias = "map_soav")]
    MapSoav,
    #[serde(alias = "exhaustive_map")]
    ExhaustiveMap,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Lmmse => "lmmse",
            DetectorKind::Lasso => "lasso",
            DetectorKind::MapSoav => "map-soav",
            DetectorKind::ExhaustiveMap => "exhaustive-map",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "lmmse" => Ok(DetectorKind::Lmmse),
            "lasso" => Ok(DetectorKind::Lasso),
            "map-soav" | "soav" => Ok(DetectorKind::MapSoav),
            "exhaustive-map" | "exhaustive" | "map" => Ok(DetectorKind::ExhaustiveMap),
            other => Err(Error::Config(format!("unknown detector {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Weight on the squared residual in the LASSO objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Dead-zone half width of the ternary threshold map.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Margin used to pick the relaxation offset `C`.
    #[serde(default = "default_soav_offset")]
    pub offset: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub prox: ProxRule,
}

fn default_lambda() -> f64 {
    30.0
}

fn default_alpha() -> f64 {
    0.5
}

fn default_soav_offset() -> f64 {
    DEFAULT_OFFSET
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            kind,
            lambda: default_lambda(),
            alpha: default_alpha(),
            offset: default_soav_offset(),
            solver: SolverConfig::default(),
            prox: ProxRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.offset.is_finite() {
            return Err(Error::Config(format!("offset must be finite, got {}", self.offset)));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostics {
    ClosedForm,
    Solver {
        iterations: usize,
        final_objective: f64,
        lipschitz: f64,
        converged: bool,
    },
    Enumeration {
        candidates: u64,
        objective: f64,
    },
}

impl Diagnostics {
    pub fn iterations(&self) -> usize {
        match self {
            Diagnostics::Solver { iterations, .. } => *iterations,
            _ => 0,
        }
    }
}

impl From<&SolveReport> for Diagnostics {
    fn from(r: &SolveReport) -> Self {
        Diagnostics::Solver {
            iterations: r.iterations,
            final_objective: r.final_objective,
            lipschitz: r.lipschitz,
            converged: r.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Continuous estimate before the symbol decision.
    pub raw: DVector<f64>,
    /// Symbol decisions, each an alphabet entry.
    pub decided: DVector<f64>,
    pub diagnostics: Diagnostics,
}

/// Ternary threshold map: `-1` below `-alpha`, `0` on `[-alpha, alpha)`,
/// `1` from `alpha` up.
pub fn threshold_map(raw: &DVector<f64>, alpha: f64) -> DVector<f64> {
    raw.map(|v| {
        if v < -alpha {
            -1.0
        } else if v < alpha {
            0.0
        } else {
            1.0
        }
    })
}

/// Maps a continuous estimate onto the alphabet: the threshold map for
/// `{-1, 0, 1}`, nearest symbol (ties to the smaller) otherwise.
pub fn decide(raw: &DVector<f64>, prior: &SymbolPrior, alpha: f64) -> DVector<f64> {
    if prior.is_ternary() {
        return threshold_map(raw, alpha);
    }
    let r = prior.alphabet();
    raw.map(|v| {
        r.iter()
            .copied()
            .fold((f64::INFINITY, r[0]), |best, s| {
                let d = (v - s).abs();
                if d < best.0 {
                    (d, s)
                } else {
                    best
                }
            })
            .1
    })
}

fn quadratic(instance: &SystemInstance, scale: f64) -> Result<QuadraticData> {
    QuadraticData::new(instance.effective_matrix(), instance.y.clone(), scale)
}

/// LMMSE estimate `W y` with `W = m2 A S^T (m2 S A^2 S^T + sigma_w2 I)^{-1}`,
/// where `m2 = E[b_n^2]` (`1 - rho` for BPSK with inactivity).
pub fn lmmse(instance: &SystemInstance, prior: &SymbolPrior, alpha: f64) -> Result<DetectionResult> {
    let b = instance.effective_matrix();
    let m2 = prior.second_moment();
    let mut gram = &b * b.transpose() * m2;
    for i in 0..gram.nrows() {
        gram[(i, i)] += instance.sigma_w2;
    }
    let chol = gram.cholesky().ok_or(Error::SingularSystem("lmmse"))?;
    let u = chol.solve(&instance.y);
    let raw = b.tr_mul(&u) * m2;
    Ok(DetectionResult {
        decided: decide(&raw, prior, alpha),
        raw,
        diagnostics: Diagnostics::ClosedForm,
    })
}

/// `argmin_x lambda ||y - S A x||^2 + ||x||_1`.
pub fn lasso(instance: &SystemInstance, prior: &SymbolPrior, config: &DetectorConfig) -> Result<DetectionResult> {
    let data = quadratic(instance, config.lambda)?;
    let report = fista(&data, &L1Penalty { weight: 1.0 }, &config.solver)?;
    Ok(DetectionResult {
        decided: decide(&report.solution, prior, config.alpha),
        diagnostics: Diagnostics::from(&report),
        raw: report.solution,
    })
}

/// Relaxation weights used by [`map_soav`] for this prior and offset margin.
pub fn soav_weights(prior: &SymbolPrior, offset: f64) -> Result<SoavWeights> {
    solve_weights(prior, default_offset(prior, offset))
}

/// `argmin_x (1 / 2 sigma_w2) ||y - S A x||^2 + sum_l q_l ||x - r_l 1||_1`.
pub fn map_soav(instance: &SystemInstance, prior: &SymbolPrior, config: &DetectorConfig) -> Result<DetectionResult> {
    let weights = soav_weights(prior, config.offset)?;
    let penalty = SoavPenalty::new(weights.q, prior.alphabet().to_vec(), config.prox)?;
    let data = quadratic(instance, 1.0 / (2.0 * instance.sigma_w2))?;
    let report = fista(&data, &penalty, &config.solver)?;
    Ok(DetectionResult {
        decided: decide(&report.solution, prior, config.alpha),
        diagnostics: Diagnostics::from(&report),
        raw: report.solution,
    })
}

/// MAP objective over lattice points with constants dropped:
/// `(1 / 2 sigma_w2) ||y - S A x||^2 + sum_l (log p_l) ||x - r_l 1||_0`.
pub fn map_objective(x: &DVector<f64>, instance: &SystemInstance, prior: &SymbolPrior) -> Result<f64> {
    if x.len() != instance.n_users() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, system has {} users",
            x.len(),
            instance.n_users()
        )));
    }
    let residual = &instance.y - instance.effective_matrix() * x;
    let prior_term: f64 = prior
        .alphabet()
        .iter()
        .zip(prior.probs())
        .map(|(&r, &p)| p.ln() * x.iter().filter(|&&v| v != r).count() as f64)
        .sum();
    Ok(residual.norm_squared() / (2.0 * instance.sigma_w2) + prior_term)
}

/// Exact MAP decision by enumerating the whole lattice. Ties keep the
/// lexicographically first symbol-index vector.
pub fn exhaustive_map(instance: &SystemInstance, prior: &SymbolPrior) -> Result<DetectionResult> {
    let n = instance.n_users();
    let k = prior.len();
    let candidates = (k as f64).powi(n as i32);
    if candidates > ENUMERATION_BOUND as f64 {
        return Err(Error::EnumerationBound {
            candidates,
            bound: ENUMERATION_BOUND,
        });
    }
    let b = instance.effective_matrix();
    let r = prior.alphabet();
    let logs: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    let total_log: f64 = logs.iter().sum();
    // a coordinate equal to r_i contributes sum_{l != i} log p_l
    let symbol_cost: Vec<f64> = logs.iter().map(|l| total_log - l).collect();
    let inv_two_sigma = 1.0 / (2.0 * instance.sigma_w2);

    let columns: Vec<DVector<f64>> = (0..n).map(|j| b.column(j).into_owned()).collect();
    let mut idx = vec![0usize; n];
    let mut best = (f64::INFINITY, idx.clone());
    let mut residual = DVector::zeros(instance.n_meas());
    loop {
        residual.copy_from(&instance.y);
        let mut prior_term = 0.0;
        for (j, &i) in idx.iter().enumerate() {
            residual.axpy(-r[i], &columns[j], 1.0);
            prior_term += symbol_cost[i];
        }
        let value = residual.norm_squared() * inv_two_sigma + prior_term;
        if value < best.0 {
            best = (value, idx.clone());
        }
        // odometer, last coordinate fastest: lexicographic order
        let mut pos = n;
        loop {
            if pos == 0 {
                let decided = DVector::from_iterator(n, best.1.iter().map(|&i| r[i]));
                return Ok(DetectionResult {
                    raw: decided.clone(),
                    decided,
                    diagnostics: Diagnostics::Enumeration {
                        candidates: candidates as u64,
                        objective: best.0,
                    },
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Runs the configured detector on one instance.
pub fn detect(config: &DetectorConfig, instance: &SystemInstance, prior: &SymbolPrior) -> Result<DetectionResult> {
    match config.kind {
        DetectorKind::Lmmse => lmmse(instance, prior, config.alpha),
        DetectorKind::Lasso => lasso(instance, prior, config),
        DetectorKind::MapSoav => map_soav(instance, prior, config),
        DetectorKind::ExhaustiveMap => exhaustive_map(instance, prior),
    }
}
