//! Accelerated proximal gradient (FISTA) for `F(x) = scale ||y - B x||^2 + g(x)`
//! with a separable regularizer `g`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::soav::{exact_prox, ternary_map};
use crate::{Error, Result};

/// Safety factor applied to the power-iteration estimate of the gradient's
/// Lipschitz constant.
pub const LIPSCHITZ_MARGIN: f64 = 1.01;

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 1000;

/// The smooth term `scale * ||y - B x||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticData {
    pub b: DMatrix<f64>,
    pub y: DVector<f64>,
    pub scale: f64,
}

impl QuadraticData {
    pub fn new(b: DMatrix<f64>, y: DVector<f64>, scale: f64) -> Result<Self> {
        if b.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, y has {} entries",
                b.nrows(),
                y.len()
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("quadratic scale must be positive, got {scale}")));
        }
        Ok(Self { b, y, scale })
    }

    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.scale * (&self.y - &self.b * x).norm_squared()
    }
}

/// `2 scale B^T (B x - y)`.
pub fn gradient(data: &QuadraticData, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, B has {} columns",
            x.len(),
            data.dim()
        )));
    }
    let mut residual = data.y.clone();
    residual.gemv(1.0, &data.b, x, -1.0);
    Ok(data.b.tr_mul(&residual) * (2.0 * data.scale))
}

/// Largest eigenvalue of `B^T B` by power iteration.
pub fn spectral_norm_squared(b: &DMatrix<f64>) -> Result<f64> {
    let n = b.ncols();
    if n == 0 || b.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateOperator);
    }
    // deterministic start with no special alignment to coordinate axes
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.754_877_666).sin());
    v.normalize_mut();
    let mut bv = DVector::zeros(b.nrows());
    let mut next = DVector::zeros(n);
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        bv.gemv(1.0, b, &v, 0.0);
        next.gemv_tr(1.0, b, &bv, 0.0);
        let rayleigh = v.dot(&next);
        let norm = next.norm();
        if norm == 0.0 {
            // start vector in the null space; the operator is nonzero so
            // restart from another direction
            v = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.5 });
            v.normalize_mut();
            continue;
        }
        v.copy_from(&next);
        v /= norm;
        let converged = (rayleigh - estimate).abs() <= POWER_TOL * rayleigh.abs();
        estimate = rayleigh;
        if converged {
            break;
        }
    }
    Ok(estimate)
}

/// `1.01 * 2 scale sigma_max(B)^2`, an upper bound on the Lipschitz
/// constant of [`gradient`].
pub fn estimate_lipschitz(data: &QuadraticData) -> Result<f64> {
    Ok(LIPSCHITZ_MARGIN * 2.0 * data.scale * spectral_norm_squared(&data.b)?)
}

/// Separable regularizer with an elementwise proximity operator.
pub trait Regularizer: Sync {
    /// `argmin_u g_1(u) + (v - u)^2 / (2 gamma)` for one coordinate.
    fn prox(&self, v: f64, gamma: f64) -> f64;

    /// `g(x)`.
    fn value(&self, x: &DVector<f64>) -> f64;
}

/// `g = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPenalty;

impl Regularizer for NoPenalty {
    fn prox(&self, v: f64, _gamma: f64) -> f64 {
        v
    }

    fn value(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }
}

/// `g = weight * ||x||_1`.
#[derive(Debug, Clone, Copy)]
pub struct L1Penalty {
    pub weight: f64,
}

impl Regularizer for L1Penalty {
    fn prox(&self, v: f64, gamma: f64) -> f64 {
        soft_threshold(v, gamma * self.weight)
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.weight * x.lp_norm(1)
    }
}

/// How the SOAV prox is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxRule {
    /// Closed-form piecewise map for `{-1, 0, 1}`; exact enumeration otherwise.
    #[default]
    ClosedForm,
    /// Exact global minimizer by enumeration, for any alphabet and weights.
    Exact,
}

/// `g = sum_l q_l ||x - r_l 1||_1`.
#[derive(Debug, Clone)]
pub struct SoavPenalty {
    pub q: Vec<f64>,
    pub alphabet: Vec<f64>,
    pub rule: ProxRule,
    ternary: bool,
}

impl SoavPenalty {
    pub fn new(q: Vec<f64>, alphabet: Vec<f64>, rule: ProxRule) -> Result<Self> {
        if q.len() != alphabet.len() || q.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} symbols",
                q.len(),
                alphabet.len()
            )));
        }
        let ternary = alphabet == [-1.0, 0.0, 1.0];
        Ok(Self { q, alphabet, rule, ternary })
    }
}

impl Regularizer for SoavPenalty {
    fn prox(&self, v: f64, gamma: f64) -> f64 {
        if self.ternary && self.rule == ProxRule::ClosedForm {
            ternary_map(v, gamma, &self.q)
        } else {
            exact_prox(v, gamma, &self.q, &self.alphabet)
        }
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .map(|&u| self.q.iter().zip(&self.alphabet).map(|(q, r)| q * (u - r).abs()).sum::<f64>())
            .sum()
    }
}

/// `sign(v) max(|v| - gamma, 0)`.
pub fn soft_threshold(v: f64, gamma: f64) -> f64 {
    if v > gamma {
        v - gamma
    } else if v < -gamma {
        v + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Step-size constant; estimated per problem when absent.
    pub lipschitz: Option<f64>,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lipschitz: None,
            max_iters: 500,
            rel_tol: 1e-8,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lipschitz {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("Lipschitz constant must be positive, got {l}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::Config(format!("rel_tol must be non-negative, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub iterations: usize,
    pub final_objective: f64,
    /// `F(x^(k))` for `k = 1..=iterations` when requested.
    pub objective_trace: Option<Vec<f64>>,
    pub lipschitz: f64,
    /// Whether the relative-change test fired before `max_iters`.
    pub converged: bool,
}

/// `F(x) = scale ||y - B x||^2 + g(x)`.
pub fn objective(data: &QuadraticData, reg: &dyn Regularizer, x: &DVector<f64>) -> f64 {
    data.value(x) + reg.value(x)
}

/// `||x - prox_{g/L}(x - grad f(x) / L)||_2`; zero exactly at minimizers of
/// convex problems.
pub fn fixed_point_residual(
    data: &QuadraticData,
    reg: &dyn Regularizer,
    x: &DVector<f64>,
    lipschitz: f64,
) -> Result<f64> {
    let g = gradient(data, x)?;
    let gamma = lipschitz.recip();
    Ok(x
        .iter()
        .zip(g.iter())
        .map(|(&xi, &gi)| (xi - reg.prox(xi - gamma * gi, gamma)).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Accelerated proximal gradient from `x^(0) = 0`, `t_1 = 1`:
///
/// ```text
/// x^(k)       = prox_{g/L}(z^(k) - grad f(z^(k)) / L)
/// t_{k+1}     = (1 + sqrt(1 + 4 t_k^2)) / 2
/// z^(k+1)     = x^(k) + ((t_k - 1) / t_{k+1}) (x^(k) - x^(k-1))
/// ```
///
/// Stops after `max_iters` or once `||x^(k) - x^(k-1)|| <= rel_tol (1 + ||x^(k)||)`.
pub fn fista(data: &QuadraticData, reg: &dyn Regularizer, config: &SolverConfig) -> Result<SolveReport> {
    config.validate()?;
    let lipschitz = match config.lipschitz {
        Some(l) => l,
        None => estimate_lipschitz(data)?,
    };
    let n = data.dim();
    let gamma = lipschitz.recip();
    let two_scale = 2.0 * data.scale;

    let mut x_prev = DVector::zeros(n);
    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut residual = DVector::zeros(data.b.nrows());
    let mut grad = DVector::zeros(n);
    let mut t = 1.0_f64;
    let mut trace = config.record_trajectory.then(|| Vec::with_capacity(config.max_iters));
    let mut iterations = 0;
    let mut converged = false;

    for k in 1..=config.max_iters {
        iterations = k;
        residual.copy_from(&data.y);
        residual.gemv(1.0, &data.b, &z, -1.0);
        grad.gemv_tr(two_scale, &data.b, &residual, 0.0);

        let mut step_sq = 0.0;
        let mut x_sq = 0.0;
        for i in 0..n {
            let xi = reg.prox(z[i] - gamma * grad[i], gamma);
            if !xi.is_finite() {
                return Err(Error::Divergence { iteration: k });
            }
            let d = xi - x[i];
            step_sq += d * d;
            x_sq += xi * xi;
            x_prev[i] = x[i];
            x[i] = xi;
        }

        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        for i in 0..n {
            z[i] = x[i] + momentum * (x[i] - x_prev[i]);
        }
        t = t_next;

        if let Some(trace) = trace.as_mut() {
            trace.push(objective(data, reg, &x));
        }
        if step_sq.sqrt() <= config.rel_tol * (1.0 + x_sq.sqrt()) {
            converged = true;
            break;
        }
    }

    let final_objective = objective(data, reg, &x);
    if !final_objective.is_finite() {
        return Err(Error::Divergence { iteration: iterations });
    }
    Ok(SolveReport {
        solution: x,
        iterations,
        final_objective,
        objective_trace: trace,
        lipschitz,
        converged,
    })
}
