//! Symbol priors, random instance synthesis and SNR bookkeeping.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-12;

/// Discrete symbol alphabet `r_0 < ... < r_L` with prior probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolPrior {
    alphabet: Vec<f64>,
    probs: Vec<f64>,
}

impl SymbolPrior {
    pub fn new(alphabet: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if alphabet.len() < 2 {
            return Err(Error::InvalidPrior(format!(
                "alphabet needs at least two symbols, got {}",
                alphabet.len()
            )));
        }
        if alphabet.len() != probs.len() {
            return Err(Error::InvalidPrior(format!(
                "{} symbols but {} probabilities",
                alphabet.len(),
                probs.len()
            )));
        }
        if alphabet.iter().any(|r| !r.is_finite()) || alphabet.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPrior(format!(
                "alphabet must be finite and strictly increasing: {alphabet:?}"
            )));
        }
        if probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidPrior(format!(
                "probabilities must be positive: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidPrior(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { alphabet, probs })
    }

    /// BPSK with inactivity: alphabet `{-1, 0, 1}` with `P(0) = rho` and
    /// `P(-1) = P(1) = (1 - rho) / 2`.
    ///
    /// `rho = 0` has no inactive symbol, so the zero is dropped and the
    /// prior degenerates to equiprobable `{-1, 1}`.
    pub fn bpsk_with_inactivity(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidPrior(format!(
                "non-active rate must lie in [0, 1), got {rho}"
            )));
        }
        if rho == 0.0 {
            return Self::new(vec![-1.0, 1.0], vec![0.5, 0.5]);
        }
        let active = (1.0 - rho) / 2.0;
        Self::new(vec![-1.0, 0.0, 1.0], vec![active, rho, active])
    }

    pub fn alphabet(&self) -> &[f64] {
        &self.alphabet
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Number of symbols, `L + 1`.
    pub fn len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabet.is_empty()
    }

    pub fn is_ternary(&self) -> bool {
        self.alphabet == [-1.0, 0.0, 1.0]
    }

    /// `E[b_n^2]`; equals `1 - rho` for BPSK with inactivity.
    pub fn second_moment(&self) -> f64 {
        self.alphabet
            .iter()
            .zip(&self.probs)
            .map(|(r, p)| p * r * r)
            .sum()
    }

    /// Index of `value` in the alphabet, if it is a symbol.
    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.alphabet.iter().position(|&r| r == value)
    }
}

/// SNR in decibels together with the non-active rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub snr_db: f64,
    pub rho: f64,
}

impl SnrSpec {
    pub fn new(snr_db: f64, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {rho}")));
        }
        Ok(Self { snr_db, rho })
    }
}

/// Noise variance for a given SNR: `N (1 - rho) / M * 10^(-snr/10)`.
pub fn sigma_from_snr(spec: SnrSpec, n_users: usize, n_meas: usize) -> f64 {
    n_users as f64 * (1.0 - spec.rho) / n_meas as f64 * 10f64.powf(-spec.snr_db / 10.0)
}

/// Inverse of [`sigma_from_snr`]: `10 log10(N (1 - rho) / (M sigma_w2))`.
pub fn snr_from_sigma(sigma_w2: f64, rho: f64, n_users: usize, n_meas: usize) -> f64 {
    10.0 * (n_users as f64 * (1.0 - rho) / (n_meas as f64 * sigma_w2)).log10()
}

/// Draws `n` i.i.d. symbols from the prior.
pub fn draw_symbols<R: Rng + ?Sized>(prior: &SymbolPrior, n: usize, rng: &mut R) -> DVector<f64> {
    draw_from(prior.alphabet(), prior.probs(), n, rng)
}

fn draw_from<R: Rng + ?Sized>(
    alphabet: &[f64],
    probs: &[f64],
    n: usize,
    rng: &mut R,
) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (r, p) in alphabet.iter().zip(probs) {
            acc += p;
            if u < acc {
                return *r;
            }
        }
        // rounding left u above the accumulated total; land on the last
        // symbol with positive mass
        let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1);
        alphabet[last]
    })
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// `m x n` matrix with orthonormal rows (`m <= n`), from the QR factor of
/// a Gaussian matrix.
pub fn orthonormal_rows<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(m <= n, "need m <= n for orthonormal rows, got {m} x {n}");
    let q = gaussian_matrix(n, m, rng).qr().q();
    q.columns(0, m).transpose()
}

/// Whether synthesized observations carry Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// `w = 0`; the stored `sigma_w2` is still used by the detectors.
    Noiseless,
}

/// One realization of `y = S A b + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInstance {
    /// `M x N` (whitened) signature matrix.
    pub s: DMatrix<f64>,
    /// Diagonal of the channel-gain matrix `A`.
    pub gains: DVector<f64>,
    pub sigma_w2: f64,
    pub b: DVector<f64>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
}

impl SystemInstance {
    pub fn n_users(&self) -> usize {
        self.s.ncols()
    }

    pub fn n_meas(&self) -> usize {
        self.s.nrows()
    }

    /// The product `S A`.
    pub fn effective_matrix(&self) -> DMatrix<f64> {
        let mut sa = self.s.clone();
        for (mut col, &a) in sa.column_iter_mut().zip(self.gains.iter()) {
            col *= a;
        }
        sa
    }

    /// Builds an instance from given parts, with `w = y - S A b`.
    pub fn from_observation(
        s: DMatrix<f64>,
        gains: DVector<f64>,
        sigma_w2: f64,
        b: DVector<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        check_dims(&s, &gains, sigma_w2)?;
        if b.len() != s.ncols() || y.len() != s.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "S is {}x{}, b has {} entries, y has {}",
                s.nrows(),
                s.ncols(),
                b.len(),
                y.len()
            )));
        }
        let mut inst = Self {
            w: DVector::zeros(y.len()),
            s,
            gains,
            sigma_w2,
            b,
            y,
        };
        inst.w = &inst.y - inst.effective_matrix() * &inst.b;
        Ok(inst)
    }
}

fn check_dims(s: &DMatrix<f64>, gains: &DVector<f64>, sigma_w2: f64) -> Result<()> {
    if s.nrows() == 0 || s.ncols() == 0 {
        return Err(Error::DimensionMismatch("S must be non-empty".into()));
    }
    if gains.len() != s.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "S has {} columns but A has {} gains",
            s.ncols(),
            gains.len()
        )));
    }
    if !(sigma_w2 > 0.0) || !sigma_w2.is_finite() {
        return Err(Error::Config(format!(
            "noise variance must be positive, got {sigma_w2}"
        )));
    }
    Ok(())
}

/// Draws `b` from the prior and `w ~ N(0, sigma_w2 I)`, then forms
/// `y = S A b + w`. Symbols are drawn before noise.
pub fn synthesize<R: Rng + ?Sized>(
    prior: &SymbolPrior,
    s: DMatrix<f64>,
    gains: DVector<f64>,
    sigma_w2: f64,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<SystemInstance> {
    check_dims(&s, &gains, sigma_w2)?;
    let b = draw_symbols(prior, s.ncols(), rng);
    let w = match noise {
        NoiseMode::Gaussian => {
            let dist = Normal::new(0.0, sigma_w2.sqrt())
                .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
            DVector::from_fn(s.nrows(), |_, _| dist.sample(rng))
        }
        NoiseMode::Noiseless => DVector::zeros(s.nrows()),
    };
    let mut inst = SystemInstance {
        y: DVector::zeros(s.nrows()),
        s,
        gains,
        sigma_w2,
        b,
        w,
    };
    inst.y = inst.effective_matrix() * &inst.b + &inst.w;
    Ok(inst)
}

/// Independent random stream `stream` under `master_seed`.
///
/// Distinct `(master_seed, stream)` pairs give non-overlapping ChaCha
/// streams, so trial results do not depend on execution order.
pub fn seeded_stream(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn prior_validation() {
        assert!(SymbolPrior::new(vec![0.0], vec![1.0]).is_err());
        assert!(SymbolPrior::new(vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(SymbolPrior::new(vec![0.0, 1.0], vec![0.0, 1.0]).is_err());
        assert!(SymbolPrior::new(vec![0.0, 1.0], vec![0.4, 0.5]).is_err());
        assert!(SymbolPrior::new(vec![0.0, 1.0], vec![0.5]).is_err());
        assert!(SymbolPrior::bpsk_with_inactivity(1.0).is_err());
        assert!(SymbolPrior::bpsk_with_inactivity(-0.1).is_err());
        let p = SymbolPrior::bpsk_with_inactivity(0.8).unwrap();
        assert!(p.is_ternary());
        assert_relative_eq!(p.second_moment(), 0.2, epsilon = 1e-15);
        let binary = SymbolPrior::bpsk_with_inactivity(0.0).unwrap();
        assert_eq!(binary.alphabet(), &[-1.0, 1.0]);
    }

    #[test]
    fn degenerate_distribution_returns_last_symbol() {
        let mut rng = seeded_stream(1, 0);
        let x = draw_from(&[-1.0, 0.0, 1.0], &[0.0, 0.0, 1.0], 1000, &mut rng);
        assert!(x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn symbol_frequencies_follow_prior() {
        let n = 1_000_000;
        // 3 sigma binomial bound at n = 1e6 is below 0.002 for both rates
        for (rho, check) in [(0.8, 1usize), (0.05, 2)] {
            let prior = SymbolPrior::bpsk_with_inactivity(rho).unwrap();
            let mut rng = seeded_stream(7, rho.to_bits());
            let b = draw_symbols(&prior, n, &mut rng);
            let zeros = b.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
            let plus = b.iter().filter(|&&v| v == 1.0).count() as f64 / n as f64;
            let minus = b.iter().filter(|&&v| v == -1.0).count() as f64 / n as f64;
            assert!((zeros - rho).abs() < 0.002, "zeros {zeros}");
            if check == 2 {
                assert!((plus - 0.475).abs() < 0.002, "plus {plus}");
                assert!((minus - 0.475).abs() < 0.002, "minus {minus}");
            }
        }
    }

    #[test]
    fn chi_square_goodness_of_fit() {
        // critical value of chi^2 with 2 dof at significance 0.001
        const CRIT: f64 = 13.816;
        let n = 1_000_000;
        for seed in [3u64, 11, 29] {
            let prior = SymbolPrior::bpsk_with_inactivity(0.3).unwrap();
            let mut rng = seeded_stream(seed, 0);
            let b = draw_symbols(&prior, n, &mut rng);
            let chi2: f64 = prior
                .alphabet()
                .iter()
                .zip(prior.probs())
                .map(|(&r, &p)| {
                    let observed = b.iter().filter(|&&v| v == r).count() as f64;
                    let expected = p * n as f64;
                    (observed - expected).powi(2) / expected
                })
                .sum();
            assert!(chi2 < CRIT, "seed {seed}: chi2 = {chi2}");
        }
    }

    #[test]
    fn sigma_from_snr_values() {
        let fixed = sigma_from_snr(SnrSpec::new(5.0, 0.95).unwrap(), 100, 70);
        assert!((fixed - 0.0226).abs() < 5e-5, "{fixed}");
        assert_eq!(sigma_from_snr(SnrSpec::new(0.0, 0.0).unwrap(), 10, 10), 1.0);
        let s = sigma_from_snr(SnrSpec::new(10.0, 0.8).unwrap(), 100, 70);
        assert_relative_eq!(s, 0.2 * 100.0 / 70.0 / 10.0, max_relative = 1e-14);
        assert!((s - 0.0285714).abs() < 1e-7);
    }

    #[test]
    fn snr_roundtrip() {
        for &(snr, rho, n, m) in &[(5.0, 0.8, 100, 70), (-3.5, 0.05, 8, 6), (16.0, 0.0, 20, 20)] {
            let s2 = sigma_from_snr(SnrSpec::new(snr, rho).unwrap(), n, m);
            assert!((snr_from_sigma(s2, rho, n, m) - snr).abs() < 1e-10);
        }
    }

    #[test]
    fn noiseless_identity_returns_symbols() {
        let prior = SymbolPrior::bpsk_with_inactivity(0.5).unwrap();
        let mut rng = seeded_stream(5, 5);
        let inst = synthesize(
            &prior,
            DMatrix::identity(12, 12),
            DVector::from_element(12, 1.0),
            0.1,
            NoiseMode::Noiseless,
            &mut rng,
        )
        .unwrap();
        assert_eq!(inst.y, inst.b);
        assert!(inst.b.iter().all(|&v| prior.index_of(v).is_some()));
    }

    #[test]
    fn synthesis_is_deterministic_and_exact() {
        let prior = SymbolPrior::bpsk_with_inactivity(0.2).unwrap();
        let make = || {
            let mut rng = seeded_stream(99, 3);
            let s = gaussian_matrix(7, 10, &mut rng);
            synthesize(&prior, s, DVector::from_element(10, 1.0), 0.3, NoiseMode::Gaussian, &mut rng)
                .unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a, b);
        // bitwise construction identity
        assert_eq!(a.y, a.effective_matrix() * &a.b + &a.w);
    }

    #[test]
    fn synthesis_rejects_bad_dimensions() {
        let prior = SymbolPrior::bpsk_with_inactivity(0.2).unwrap();
        let mut rng = seeded_stream(0, 0);
        let s = DMatrix::zeros(3, 4);
        assert!(matches!(
            synthesize(&prior, s.clone(), DVector::zeros(3), 0.1, NoiseMode::Gaussian, &mut rng),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(synthesize(&prior, s, DVector::zeros(4), 0.0, NoiseMode::Gaussian, &mut rng).is_err());
    }

    #[test]
    fn noise_covariance_is_scaled_identity() {
        let (m, n) = (70, 100);
        let sigma_w2 = 0.05;
        let prior = SymbolPrior::bpsk_with_inactivity(0.8).unwrap();
        let mut rng = seeded_stream(2024, 0);
        let s = gaussian_matrix(m, n, &mut rng);
        let gains = DVector::from_element(n, 1.0);
        let draws = 100_000;
        let mut cov = DMatrix::<f64>::zeros(m, m);
        for _ in 0..draws {
            let inst =
                synthesize(&prior, s.clone(), gains.clone(), sigma_w2, NoiseMode::Gaussian, &mut rng)
                    .unwrap();
            cov.syger(1.0, &inst.w, &inst.w, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        cov /= draws as f64;
        let target = DMatrix::<f64>::identity(m, m) * sigma_w2;
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn gaussian_matrix_moments_and_seeding() {
        let a = gaussian_matrix(1, 1, &mut seeded_stream(1, 1));
        let b = gaussian_matrix(1, 1, &mut seeded_stream(1, 1));
        assert_eq!(a, b);
        let s = gaussian_matrix(70, 100, &mut seeded_stream(8, 0));
        let mean = s.mean();
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        let other = gaussian_matrix(70, 100, &mut seeded_stream(9, 0));
        assert_ne!(s, other);
    }
}
