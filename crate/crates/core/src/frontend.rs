//! Sampled-waveform filter-bank receiver.
//!
//! Integrals over the symbol interval `[0, T]` are left-Riemann sums over
//! `P` samples spaced `sample_period` apart; sample `i` stands for the
//! waveform on `[i tau, (i + 1) tau)`, so sampling smooth waveforms at cell
//! midpoints makes `s~` a midpoint-rule quadrature. The bank produces the
//! cross-correlation matrix `S~` (`s~_mn = int s_n(t) h_m(T - t) dt`) and the
//! filter Gram matrix `H`, and whitening turns the filter outputs
//! `y~ = S~ A b + w~`, `cov(w~) = sigma^2 H`, into the detector model.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default number of samples per symbol interval.
pub const DEFAULT_SAMPLES: usize = 64;

const ENERGY_TOL: f64 = 1e-9;
const PD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformBank {
    pub sample_period: f64,
    /// One sampled signature `s_n` per user.
    pub signatures: Vec<Vec<f64>>,
    /// One sampled impulse response `h_m` per filter.
    pub filters: Vec<Vec<f64>>,
}

impl WaveformBank {
    pub fn new(sample_period: f64, signatures: Vec<Vec<f64>>, filters: Vec<Vec<f64>>) -> Result<Self> {
        let bank = Self {
            sample_period,
            signatures,
            filters,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Rescales each signature to unit energy before validating.
    pub fn normalized(sample_period: f64, mut signatures: Vec<Vec<f64>>, filters: Vec<Vec<f64>>) -> Result<Self> {
        for s in &mut signatures {
            let energy = sample_period * s.iter().map(|v| v * v).sum::<f64>();
            if energy > 0.0 {
                let k = energy.sqrt().recip();
                s.iter_mut().for_each(|v| *v *= k);
            }
        }
        Self::new(sample_period, signatures, filters)
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let bank: Self = serde_json::from_str(json)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn samples(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_period > 0.0) {
            return Err(Error::InvalidWaveforms(format!(
                "sample period must be positive, got {}",
                self.sample_period
            )));
        }
        if self.signatures.is_empty() || self.filters.is_empty() {
            return Err(Error::InvalidWaveforms("need at least one signature and one filter".into()));
        }
        let p = self.samples();
        if p == 0 {
            return Err(Error::InvalidWaveforms("waveforms must have at least one sample".into()));
        }
        if let Some(bad) = self
            .signatures
            .iter()
            .chain(&self.filters)
            .find(|v| v.len() != p)
        {
            return Err(Error::InvalidWaveforms(format!(
                "all waveforms need {p} samples, found one with {}",
                bad.len()
            )));
        }
        for (n, s) in self.signatures.iter().enumerate() {
            let energy = self.sample_period * s.iter().map(|v| v * v).sum::<f64>();
            if (energy - 1.0).abs() > ENERGY_TOL {
                return Err(Error::InvalidWaveforms(format!(
                    "signature {n} has energy {energy}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// `M x N` matrix of `s~_mn = tau * sum_i s_n[i] h_m[P - 1 - i]`.
pub fn cross_correlate(bank: &WaveformBank) -> Result<DMatrix<f64>> {
    bank.validate()?;
    let p = bank.samples();
    Ok(DMatrix::from_fn(bank.filters.len(), bank.signatures.len(), |m, n| {
        let (s, h) = (&bank.signatures[n], &bank.filters[m]);
        bank.sample_period * (0..p).map(|i| s[i] * h[p - 1 - i]).sum::<f64>()
    }))
}

/// Filter Gram matrix `H_ij = tau * sum_k h_i[k] h_j[k]`, exactly symmetric.
pub fn gram(bank: &WaveformBank) -> Result<DMatrix<f64>> {
    bank.validate()?;
    let m = bank.filters.len();
    let mut h = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = bank.sample_period
                * bank.filters[i]
                    .iter()
                    .zip(&bank.filters[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhitenMode {
    /// `S = H^{-1} S~`; the resulting noise covariance is `sigma^2 H^{-1}`.
    Paper,
    /// `S = H^{-1/2} S~`; the resulting noise covariance is `sigma^2 I`.
    #[default]
    Symmetric,
}

/// Returns `(S, T)` where `S = T S~` and `T` is `H^{-1}` or `H^{-1/2}`.
pub fn whiten(s_tilde: &DMatrix<f64>, h: &DMatrix<f64>, mode: WhitenMode) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = h.nrows();
    if h.ncols() != m || s_tilde.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "H is {}x{}, S~ has {} rows",
            h.nrows(),
            h.ncols(),
            s_tilde.nrows()
        )));
    }
    match mode {
        WhitenMode::Paper => {
            let chol = h.clone().cholesky().ok_or(Error::SingularGram(f64::NAN))?;
            let min_pivot = chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d * d)
                .fold(f64::INFINITY, f64::min);
            if min_pivot < PD_TOL {
                return Err(Error::SingularGram(min_pivot));
            }
            Ok((chol.solve(s_tilde), chol.inverse()))
        }
        WhitenMode::Symmetric => {
            let eig = h.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            if !(min_eig >= PD_TOL) {
                return Err(Error::SingularGram(min_eig));
            }
            let inv_sqrt = DVector::from_iterator(m, eig.eigenvalues.iter().map(|l| l.sqrt().recip()));
            let v = &eig.eigenvectors;
            let t = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
            Ok((&t * s_tilde, t))
        }
    }
}

/// Front-end matrices for one waveform bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendModel {
    pub s_tilde: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub noise_transform: DMatrix<f64>,
    pub mode: WhitenMode,
}

impl FrontendModel {
    pub fn build(bank: &WaveformBank, mode: WhitenMode) -> Result<Self> {
        let s_tilde = cross_correlate(bank)?;
        let h = gram(bank)?;
        let (s, noise_transform) = whiten(&s_tilde, &h, mode)?;
        Ok(Self {
            s_tilde,
            h,
            s,
            noise_transform,
            mode,
        })
    }

    /// Maps raw filter outputs `y~` to the whitened observation `y`.
    pub fn whiten_observation(&self, y_tilde: &DVector<f64>) -> Result<DVector<f64>> {
        if y_tilde.len() != self.h.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} filter outputs, got {}",
                self.h.nrows(),
                y_tilde.len()
            )));
        }
        Ok(&self.noise_transform * y_tilde)
    }
}
