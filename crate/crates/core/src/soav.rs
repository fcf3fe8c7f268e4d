//! Sum-of-absolute-values relaxation of the MAP detection problem.
//!
//! The `l0` prior term `sum_l (log p_l) ||x - r_l 1||_0 + C` is replaced by
//! `sum_l q_l ||x - r_l 1||_1`, with `q` chosen so both agree on every
//! lattice point: `R q = P_C`, `R_ij = |r_i - r_j|`,
//! `P_C[i] = sum_{l != i} log p_l + C`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::prior::{SymbolPrior, SystemInstance};
use crate::{Error, Result};

/// Margin added to `|min_i sum_{l != i} log p_l|` by [`default_offset`].
pub const DEFAULT_OFFSET: f64 = 10.0;

const PIVOT_TOL: f64 = 1e-12;

/// Relaxation weights `q` and the offset `C` that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoavWeights {
    pub q: Vec<f64>,
    pub c: f64,
}

impl SoavWeights {
    /// The relaxed objective is convex iff every weight is non-negative.
    pub fn is_convex(&self) -> bool {
        self.q.iter().all(|&q| q >= 0.0)
    }

    /// `sum_l q_l |u - r_l|`.
    pub fn penalty(&self, alphabet: &[f64], u: f64) -> f64 {
        self.q.iter().zip(alphabet).map(|(q, r)| q * (u - r).abs()).sum()
    }
}

/// Builds `R` and `P_C` for the given prior and offset.
pub fn build_weight_system(prior: &SymbolPrior, c: f64) -> (DMatrix<f64>, DVector<f64>) {
    let r = prior.alphabet();
    let n = r.len();
    let logs: Vec<f64> = prior.probs().iter().map(|p| p.ln()).collect();
    let big_r = DMatrix::from_fn(n, n, |i, j| (r[i] - r[j]).abs());
    let p_c = DVector::from_fn(n, |i, _| {
        logs.iter()
            .enumerate()
            .filter(|&(l, _)| l != i)
            .map(|(_, v)| v)
            .sum::<f64>()
            + c
    });
    (big_r, p_c)
}

/// `|min_i sum_{l != i} log p_l| + offset`.
pub fn default_offset(prior: &SymbolPrior, offset: f64) -> f64 {
    let (_, p0) = build_weight_system(prior, 0.0);
    p0.min().abs() + offset
}

/// Solves `R q = P_C` by Gaussian elimination with partial pivoting.
pub fn solve_weights(prior: &SymbolPrior, c: f64) -> Result<SoavWeights> {
    let (r, p_c) = build_weight_system(prior, c);
    let q = solve_pivoted(r, p_c)?;
    Ok(SoavWeights { q: q.iter().copied().collect(), c })
}

fn solve_pivoted(mut a: DMatrix<f64>, mut rhs: DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    for k in 0..n {
        let (offset, pivot) = a
            .view((k, k), (n - k, 1))
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot < PIVOT_TOL {
            return Err(Error::SingularWeightSystem(pivot));
        }
        let p = k + offset;
        a.swap_rows(k, p);
        rhs.swap_rows(k, p);
        for i in k + 1..n {
            let factor = a[(i, k)] / a[(k, k)];
            if factor != 0.0 {
                for j in k..n {
                    a[(i, j)] -= factor * a[(k, j)];
                }
                rhs[i] -= factor * rhs[k];
            }
        }
    }
    let mut x = DVector::zeros(n);
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|j| a[(i, j)] * x[j]).sum();
        x[i] = (rhs[i] - tail) / a[(i, i)];
    }
    Ok(x)
}

/// `(1 / 2 sigma_w2) ||y - S A x||^2 + sum_l q_l ||x - r_l 1||_1`.
pub fn soav_objective(
    x: &DVector<f64>,
    instance: &SystemInstance,
    weights: &SoavWeights,
    prior: &SymbolPrior,
) -> Result<f64> {
    if x.len() != instance.n_users() {
        return Err(Error::DimensionMismatch(format!(
            "x has {} entries, system has {} users",
            x.len(),
            instance.n_users()
        )));
    }
    if weights.q.len() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} symbols",
            weights.q.len(),
            prior.len()
        )));
    }
    let residual = &instance.y - instance.effective_matrix() * x;
    let data = residual.norm_squared() / (2.0 * instance.sigma_w2);
    let reg: f64 = x.iter().map(|&u| weights.penalty(prior.alphabet(), u)).sum();
    Ok(data + reg)
}

/// Parameters of the scalar proximity operator of `gamma * sum_l q_l |u - r_l|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxSpec {
    pub gamma: f64,
    pub q: Vec<f64>,
    pub alphabet: Vec<f64>,
}

impl ProxSpec {
    pub fn new(gamma: f64, q: Vec<f64>, alphabet: Vec<f64>) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Config(format!("prox step must be positive, got {gamma}")));
        }
        if q.len() != alphabet.len() || q.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} symbols",
                q.len(),
                alphabet.len()
            )));
        }
        Ok(Self { gamma, q, alphabet })
    }

    pub fn from_weights(gamma: f64, weights: &SoavWeights, prior: &SymbolPrior) -> Result<Self> {
        Self::new(gamma, weights.q.clone(), prior.alphabet().to_vec())
    }

    pub fn is_ternary(&self) -> bool {
        self.alphabet == [-1.0, 0.0, 1.0]
    }

    /// The scalar prox subproblem `sum q_l |u - r_l| + (v - u)^2 / (2 gamma)`.
    pub fn subproblem(&self, v: f64, u: f64) -> f64 {
        subproblem(v, u, self.gamma, &self.q, &self.alphabet)
    }

    /// Breakpoints `Q_0..Q_5` of the ternary piecewise map.
    pub fn ternary_breakpoints(&self) -> [f64; 6] {
        ternary_breakpoints(self.gamma, &self.q)
    }
}

fn subproblem(v: f64, u: f64, gamma: f64, q: &[f64], alphabet: &[f64]) -> f64 {
    q.iter().zip(alphabet).map(|(q, r)| q * (u - r).abs()).sum::<f64>() + (v - u).powi(2) / (2.0 * gamma)
}

fn ternary_breakpoints(g: f64, q: &[f64]) -> [f64; 6] {
    let (q0, q1, q2) = (q[0], q[1], q[2]);
    [
        -1.0 + g * (-q0 - q1 - q2),
        -1.0 + g * (q0 - q1 - q2),
        g * (q0 - q1 - q2),
        g * (q0 + q1 - q2),
        1.0 + g * (q0 + q1 - q2),
        1.0 + g * (q0 + q1 + q2),
    ]
}

/// Closed-form prox for the alphabet `{-1, 0, 1}`.
///
/// Branches are tested in order with half-open intervals; with a negative
/// `q_1` the interval `[Q_2, Q_3)` is empty and the map never returns 0.
pub fn prox_ternary(v: f64, spec: &ProxSpec) -> Result<f64> {
    if !spec.is_ternary() {
        return Err(Error::UnsupportedAlphabet(spec.alphabet.clone()));
    }
    Ok(ternary_map(v, spec.gamma, &spec.q))
}

/// The piecewise map for `{-1, 0, 1}`; `q` must have three entries.
#[inline]
pub(crate) fn ternary_map(v: f64, g: f64, q: &[f64]) -> f64 {
    let (q0, q1, q2) = (q[0], q[1], q[2]);
    let [b0, b1, b2, b3, b4, b5] = ternary_breakpoints(g, q);
    if v < b0 {
        v - g * (-q0 - q1 - q2)
    } else if v < b1 {
        -1.0
    } else if v < b2 {
        v - g * (q0 - q1 - q2)
    } else if v < b3 {
        0.0
    } else if v < b4 {
        v - g * (q0 + q1 - q2)
    } else if v < b5 {
        1.0
    } else {
        v - g * (q0 + q1 + q2)
    }
}

/// Exact global minimizer of the scalar prox subproblem for any alphabet
/// and any sign of the weights.
///
/// On each of the `L + 2` intervals cut out by the symbols the subproblem is
/// a quadratic with curvature `1 / gamma`, so its minimum is either the
/// interval's stationary point or a symbol. All candidates are compared;
/// ties keep the smaller candidate.
pub fn prox_general(v: f64, spec: &ProxSpec) -> f64 {
    exact_prox(v, spec.gamma, &spec.q, &spec.alphabet)
}

pub(crate) fn exact_prox(v: f64, gamma: f64, q: &[f64], r: &[f64]) -> f64 {
    let n = r.len();
    let mut best_u = f64::NAN;
    let mut best_val = f64::INFINITY;
    let mut consider = |u: f64| {
        let val = subproblem(v, u, gamma, q, r);
        if val < best_val || (val == best_val && u < best_u) {
            best_val = val;
            best_u = u;
        }
    };
    // interval k lies above the first k symbols; slope = sum q_l sign(u - r_l)
    let mut slope: f64 = -q.iter().sum::<f64>();
    for k in 0..=n {
        if k > 0 {
            slope += 2.0 * q[k - 1];
        }
        let u = v - gamma * slope;
        let lo = if k == 0 { f64::NEG_INFINITY } else { r[k - 1] };
        let hi = if k == n { f64::INFINITY } else { r[k] };
        if u > lo && u < hi {
            consider(u);
        }
    }
    for &sym in r {
        consider(sym);
    }
    best_u
}
