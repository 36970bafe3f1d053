use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{CtesError, Dataset, Sequence};

/// Multivariate Hawkes process with exponential kernels,
/// `lambda_i(t) = mu_i + sum_{t_k < t} alpha[i][c_k] * exp(-beta (t - t_k))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    /// `alpha[i][j]`: jump in the intensity of mark `i` after an event of mark `j`.
    pub alpha: Vec<Vec<f64>>,
    pub beta: f64,
}

impl HawkesParams {
    pub fn poisson(rate: f64) -> Self {
        Self {
            mu: vec![rate],
            alpha: vec![vec![0.0]],
            beta: 1.0,
        }
    }

    pub fn num_marks(&self) -> usize {
        self.mu.len()
    }

    /// Rejects malformed or explosive parameters.
    pub fn validate(&self) -> Result<(), CtesError> {
        let k = self.mu.len();
        if k == 0 {
            return Err(CtesError::InvalidParam("at least one mark is required".into()));
        }
        if self.mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(CtesError::InvalidParam("base rates must be finite and >= 0".into()));
        }
        if self.alpha.len() != k || self.alpha.iter().any(|r| r.len() != k) {
            return Err(CtesError::InvalidParam(format!("alpha must be {k}x{k}")));
        }
        if self.alpha.iter().flatten().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(CtesError::InvalidParam("excitations must be finite and >= 0".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(CtesError::InvalidParam("beta must be positive".into()));
        }
        let branching: Vec<Vec<f64>> = self
            .alpha
            .iter()
            .map(|r| r.iter().map(|a| a / self.beta).collect())
            .collect();
        let rho = spectral_radius(&branching);
        if rho >= 1.0 {
            return Err(CtesError::NonStationary(rho));
        }
        if self.mu.iter().all(|&m| m == 0.0) {
            return Err(CtesError::InvalidParam("all base rates are zero; no events can occur".into()));
        }
        Ok(())
    }
}

/// Spectral radius of a nonnegative square matrix via the Gelfand formula
/// `lim ||A^k||^(1/k)`, evaluated by repeated squaring with log-scale
/// renormalisation. Works for reducible and periodic matrices where plain
/// power iteration oscillates.
pub fn spectral_radius(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let norm = |m: &[Vec<f64>]| {
        m.iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut log_scale = 0.0; // A^k = exp(log_scale) * m
    let mut k = 1.0f64;
    for _ in 0..40 {
        let s = norm(&m);
        if s == 0.0 {
            return 0.0;
        }
        for row in m.iter_mut() {
            row.iter_mut().for_each(|x| *x /= s);
        }
        log_scale += s.ln();
        let mut sq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for p in 0..n {
                let v = m[i][p];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    sq[i][j] += v * m[p][j];
                }
            }
        }
        m = sq;
        log_scale *= 2.0;
        k *= 2.0;
    }
    let s = norm(&m);
    if s == 0.0 {
        return 0.0;
    }
    ((log_scale + s.ln()) / k).exp()
}

/// One realisation on `[0, horizon]` by Ogata thinning.
///
/// Between events the total intensity only decays, so its value right after
/// the current time bounds it until the next candidate.
pub fn simulate_hawkes<T: Scalar, R: Rng + ?Sized>(
    params: &HawkesParams,
    horizon: f64,
    rng: &mut R,
) -> Result<Sequence<T>, CtesError> {
    params.validate()?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(CtesError::InvalidParam("horizon must be positive".into()));
    }
    let k = params.num_marks();
    let beta = params.beta;
    // excitation[i]: sum of kernel contributions into mark i at time `t`
    let mut excitation = vec![0.0f64; k];
    let mut t = 0.0f64;
    let mut times: Vec<f64> = Vec::new();
    let mut marks = Vec::new();
    loop {
        let bound: f64 = params.mu.iter().zip(&excitation).map(|(m, e)| m + e).sum();
        let wait = Exp::new(bound).expect("positive bound").sample(rng);
        let candidate = t + wait;
        if candidate > horizon {
            break;
        }
        let decay = (-beta * wait).exp();
        excitation.iter_mut().for_each(|e| *e *= decay);
        t = candidate;
        let rates: Vec<f64> = params.mu.iter().zip(&excitation).map(|(m, e)| m + e).collect();
        let total: f64 = rates.iter().sum();
        let u: f64 = rng.random::<f64>() * bound;
        if u >= total {
            continue;
        }
        let mut acc = 0.0;
        let mut mark = k - 1;
        for (i, r) in rates.iter().enumerate() {
            acc += r;
            if u < acc {
                mark = i;
                break;
            }
        }
        if times.last().is_some_and(|&last| t <= last) {
            continue;
        }
        times.push(t);
        marks.push(mark);
        for (i, e) in excitation.iter_mut().enumerate() {
            *e += params.alpha[i][mark];
        }
    }
    if times.is_empty() {
        return Err(CtesError::NoEvents { horizon });
    }
    Sequence::new(times.into_iter().map(T::lit).collect(), marks)
}

/// Settings for a seeded synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub hawkes: HawkesParams,
    pub horizon: f64,
    pub num_sequences: usize,
    /// Longer realisations are truncated to their first `max_len` events.
    pub max_len: usize,
    /// Shorter realisations are discarded and redrawn.
    pub min_len: usize,
    pub seed: u64,
    pub name: String,
}

impl SyntheticConfig {
    /// Three marks where each mark excites the next one cyclically
    /// (`alpha[(k + 1) % 3][k] = 1.2`, `beta = 2`, branching ratio 0.6),
    /// truncated to at most 64 events.
    pub fn cyclic_hawkes(num_sequences: usize, seed: u64) -> Self {
        let mut alpha = vec![vec![0.0; 3]; 3];
        for k in 0..3 {
            alpha[(k + 1) % 3][k] = 1.2;
        }
        Self {
            hawkes: HawkesParams {
                mu: vec![0.036, 0.03, 0.024],
                alpha,
                beta: 2.0,
            },
            horizon: 250.0,
            num_sequences,
            max_len: 64,
            min_len: 4,
            seed,
            name: "cyclic-hawkes".into(),
        }
    }

    /// Homogeneous Poisson process with a single mark.
    pub fn poisson(rate: f64, horizon: f64, num_sequences: usize, seed: u64) -> Self {
        Self {
            hawkes: HawkesParams::poisson(rate),
            horizon,
            num_sequences,
            max_len: 64,
            min_len: 2,
            seed,
            name: "poisson".into(),
        }
    }
}

/// Draws `num_sequences` sequences from one seeded stream.
pub fn simulate_dataset<T: Scalar>(cfg: &SyntheticConfig) -> Result<Dataset<T>, CtesError> {
    cfg.hawkes.validate()?;
    if cfg.min_len == 0 || cfg.max_len < cfg.min_len {
        return Err(CtesError::InvalidParam("need 1 <= min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    let mut attempts = 0usize;
    while sequences.len() < cfg.num_sequences {
        attempts += 1;
        if attempts > 100 * cfg.num_sequences.max(1) + 1000 {
            return Err(CtesError::InvalidParam(format!(
                "could not draw sequences with at least {} events on horizon {}",
                cfg.min_len, cfg.horizon
            )));
        }
        match simulate_hawkes::<T, _>(&cfg.hawkes, cfg.horizon, &mut rng) {
            Ok(s) if s.len() >= cfg.min_len => sequences.push(s.truncated(cfg.max_len)),
            Ok(_) | Err(CtesError::NoEvents { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Dataset::new(cfg.name.clone(), cfg.hawkes.num_marks(), sequences)
}
