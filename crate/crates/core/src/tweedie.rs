//! Tweedie compound Poisson–Gamma distribution for index 𝒫 ∈ (1, 2).
//!
//! Two parameterizations are supported: the compound form `{λ, α, β}`
//! (Poisson rate, Gamma shape, Gamma *scale*) and the exponential-dispersion
//! form `{μ, 𝒫, φ}`. All densities are computed in log space.
//!
//! The marginal density of a positive observation is an infinite mixture
//! over the latent Poisson count `n`; [`marginal_log_likelihood`] truncates it
//! to at most `n_max` terms, and [`series_log_density_oracle`] sums it to a
//! relative tolerance for use as a reference value.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::autodiff::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TweedieError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("observation {0} is outside the support [0, ∞)")]
    Domain(f64),
    #[error("truncation config: {0}")]
    Config(String),
    #[error("series did not converge within {terms} terms (last relative term {last_bound:e})")]
    NonConvergence { terms: usize, last_bound: f64 },
}

/// `{λ, α, β}`: Poisson rate, Gamma shape, Gamma scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundParams {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `{μ, 𝒫, φ}`: mean, variance power, dispersion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmParams {
    pub mu: f64,
    pub p_index: f64,
    pub dispersion: f64,
}

fn positive(name: &str, v: f64) -> Result<(), TweedieError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(TweedieError::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

impl CompoundParams {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Result<Self, TweedieError> {
        let c = CompoundParams { lambda, alpha, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TweedieError> {
        positive("lambda", self.lambda)?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)
    }

    pub fn to_edm(&self) -> Result<EdmParams, TweedieError> {
        to_edm(self)
    }
}

impl EdmParams {
    pub fn new(mu: f64, p_index: f64, dispersion: f64) -> Result<Self, TweedieError> {
        let e = EdmParams {
            mu,
            p_index,
            dispersion,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), TweedieError> {
        positive("mu", self.mu)?;
        positive("dispersion", self.dispersion)?;
        if !(self.p_index > 1.0 && self.p_index < 2.0) {
            return Err(TweedieError::InvalidParameter(format!(
                "p_index must lie in (1, 2), got {}",
                self.p_index
            )));
        }
        Ok(())
    }

    pub fn to_compound(&self) -> Result<CompoundParams, TweedieError> {
        to_compound(self)
    }
}

/// `μ = λαβ`, `𝒫 = (α+2)/(α+1)`, `φ = λ^(1−𝒫)(αβ)^(2−𝒫)/(2−𝒫)`.
pub fn to_edm(c: &CompoundParams) -> Result<EdmParams, TweedieError> {
    c.validate()?;
    let CompoundParams { lambda, alpha, beta } = *c;
    let p = (alpha + 2.0) / (alpha + 1.0);
    // 2 − 𝒫 = α/(α+1) and 1 − 𝒫 = −1/(α+1), written out to avoid cancellation
    let two_minus_p = alpha / (alpha + 1.0);
    let one_minus_p = -1.0 / (alpha + 1.0);
    let log_phi = one_minus_p * lambda.ln() + two_minus_p * (alpha * beta).ln() - two_minus_p.ln();
    let e = EdmParams {
        mu: lambda * alpha * beta,
        p_index: p,
        dispersion: log_phi.exp(),
    };
    if !(e.p_index > 1.0 && e.p_index < 2.0) {
        // α so large that 𝒫 rounds to 1
        return Err(TweedieError::InvalidParameter(format!(
            "alpha {alpha} maps to p_index {} outside (1, 2)",
            e.p_index
        )));
    }
    e.validate()?;
    Ok(e)
}

/// `λ = μ^(2−𝒫)/(φ(2−𝒫))`, `α = (2−𝒫)/(𝒫−1)`, `β = φ(𝒫−1)μ^(𝒫−1)`.
pub fn to_compound(e: &EdmParams) -> Result<CompoundParams, TweedieError> {
    e.validate()?;
    let EdmParams {
        mu,
        p_index: p,
        dispersion: phi,
    } = *e;
    let c = CompoundParams {
        lambda: mu.powf(2.0 - p) / (phi * (2.0 - p)),
        alpha: (2.0 - p) / (p - 1.0),
        beta: phi * (p - 1.0) * mu.powf(p - 1.0),
    };
    c.validate()?;
    Ok(c)
}

/// Returns `(mean, variance) = (μ, φμ^𝒫)`.
pub fn tweedie_moments(e: &EdmParams) -> (f64, f64) {
    (e.mu, e.dispersion * e.mu.powf(e.p_index))
}

/// How many latent-count terms the truncated marginal sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationConfig {
    pub n_max: usize,
    /// Place the window around the dominant count instead of `1..=n_max`.
    pub adaptive: bool,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig {
            n_max: 10,
            adaptive: true,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<(), TweedieError> {
        if self.n_max < 1 {
            return Err(TweedieError::Config("n_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// `log P(Y = y, N = n | λ, α, β)`.
///
/// Mismatched branches (`y = 0, n > 0` or `y > 0, n = 0`) carry no mass and
/// return `−∞`.
pub fn joint_log_density(y: f64, n: u64, c: &CompoundParams) -> Result<f64, TweedieError> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(TweedieError::Domain(y));
    }
    c.validate()?;
    let CompoundParams { lambda, alpha, beta } = *c;
    Ok(match (y == 0.0, n == 0) {
        (true, true) => -lambda,
        (true, false) | (false, true) => f64::NEG_INFINITY,
        (false, false) => {
            let n = n as f64;
            let shape = n * alpha;
            let gamma = (shape - 1.0) * y.ln() - y / beta - shape * beta.ln() - ln_gamma(shape);
            let poisson = n * lambda.ln() - lambda - ln_gamma(n + 1.0);
            gamma + poisson
        }
    })
}

/// Lazily evaluated `(nα, log Γ(nα))` for a shared shape `α`.
///
/// Observations that share `α` reuse the same nodes, which keeps the tape
/// small when the summation windows overlap.
pub struct ShapeCache<S> {
    alpha: S,
    entries: Vec<Option<(S, S)>>,
    /// `log Γ(nα)` as plain floats, NaN until computed.
    scores: Vec<f64>,
}

impl<S: Real> ShapeCache<S> {
    pub fn new(alpha: S) -> Self {
        ShapeCache {
            alpha,
            entries: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    /// `(nα, log Γ(nα))` for `n >= 1`.
    pub fn get(&mut self, n: usize) -> (S, S) {
        if self.entries.len() <= n {
            self.entries.resize(n + 1, None);
        }
        if let Some(entry) = self.entries[n] {
            return entry;
        }
        let shape = self.alpha * n as f64;
        let entry = (shape, shape.ln_gamma());
        self.entries[n] = Some(entry);
        entry
    }

    /// `log Γ(nα)` without recording anything.
    pub fn ln_gamma_value(&mut self, n: usize) -> f64 {
        if n >= 1 << 16 {
            return ln_gamma(n as f64 * self.alpha.value());
        }
        if self.scores.len() <= n {
            self.scores.resize(n + 1, f64::NAN);
        }
        if self.scores[n].is_nan() {
            self.scores[n] = ln_gamma(n as f64 * self.alpha.value());
        }
        self.scores[n]
    }
}

const LN_FACTORIAL_TABLE: usize = 1024;

/// `log n!`, tabulated for small `n`.
pub fn ln_factorial(n: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    if n < LN_FACTORIAL_TABLE {
        let table = TABLE.get_or_init(|| {
            let mut t = Vec::with_capacity(LN_FACTORIAL_TABLE);
            t.push(0.0);
            for k in 1..LN_FACTORIAL_TABLE {
                t.push(ln_gamma(k as f64 + 1.0));
            }
            t
        });
        table[n]
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// Count indices summed for a positive observation.
///
/// Fixed mode returns `1..=n_max`. Adaptive mode locates the dominant count by
/// hill-climbing the (concave) log summand, then grows the window one index
/// at a time toward the larger neighbouring term. Windows are nested in
/// `n_max`, so the truncated sum is nondecreasing in `n_max`.
pub fn summation_window(
    y: f64,
    alpha: f64,
    log_beta: f64,
    log_lambda: f64,
    t: &TruncationConfig,
) -> std::ops::RangeInclusive<usize> {
    let mut cache = ShapeCache::new(alpha);
    window_with(y, alpha, log_beta, log_lambda, t, &mut cache)
}

fn window_with<S: Real>(
    y: f64,
    alpha: f64,
    log_beta: f64,
    log_lambda: f64,
    t: &TruncationConfig,
    cache: &mut ShapeCache<S>,
) -> std::ops::RangeInclusive<usize> {
    if !t.adaptive {
        return 1..=t.n_max.max(1);
    }
    let log_ratio = y.ln() - log_beta;
    // summand of the count mixture without the terms constant in n
    let mut score = |n: usize| {
        n as f64 * alpha * log_ratio - cache.ln_gamma_value(n) + n as f64 * log_lambda - ln_factorial(n)
    };
    // E[N | y] ≈ y / (αβ)
    let guess = (y / (alpha * log_beta.exp())).round();
    let mut mode = if guess.is_finite() && guess >= 1.0 {
        guess.min(1e7) as usize
    } else {
        1
    };
    let mut current = score(mode);
    loop {
        let up = score(mode + 1);
        if up > current {
            mode += 1;
            current = up;
            continue;
        }
        if mode > 1 {
            let down = score(mode - 1);
            if down > current {
                mode -= 1;
                current = down;
                continue;
            }
        }
        break;
    }
    let mut lo = mode;
    let mut hi = mode;
    let mut lo_score = if lo > 1 { score(lo - 1) } else { f64::NEG_INFINITY };
    let mut hi_score = score(hi + 1);
    while hi - lo + 1 < t.n_max {
        if lo_score >= hi_score && lo > 1 {
            lo -= 1;
            lo_score = if lo > 1 { score(lo - 1) } else { f64::NEG_INFINITY };
        } else {
            hi += 1;
            hi_score = score(hi + 1);
        }
    }
    lo..=hi
}

/// Truncated `log p(y)` from log-scale parameters, generic over the scalar
/// type so the same code runs on plain floats and on a tape.
pub fn log_marginal<S: Real>(
    y: f64,
    log_lambda: S,
    log_beta: S,
    shapes: &mut ShapeCache<S>,
    t: &TruncationConfig,
) -> S {
    if y == 0.0 {
        return -log_lambda.exp();
    }
    let alpha = shapes.alpha().value();
    let window = window_with(y, alpha, log_beta.value(), log_lambda.value(), t, shapes);
    let log_y = y.ln();
    // terms constant in n: −log y − y/β − λ
    let offset = (-log_beta).exp() * (-y) - log_lambda.exp() - log_y;
    let log_ratio = -log_beta + log_y;
    let terms: Vec<S> = window
        .map(|n| {
            let (shape, lg) = shapes.get(n);
            shape * log_ratio - lg + log_lambda * n as f64 + (offset - ln_factorial(n))
        })
        .collect();
    S::log_sum_exp(&terms)
}

/// Truncated marginal `log Σ_n P(y, n | λ, α, β)`; exactly `−λ` at `y = 0`.
pub fn marginal_log_likelihood(
    y: f64,
    c: &CompoundParams,
    t: &TruncationConfig,
) -> Result<f64, TweedieError> {
    t.validate()?;
    c.validate()?;
    if !(y >= 0.0) || !y.is_finite() {
        return Err(TweedieError::Domain(y));
    }
    let mut shapes = ShapeCache::new(c.alpha);
    Ok(log_marginal(y, c.lambda.ln(), c.beta.ln(), &mut shapes, t))
}

const ORACLE_MAX_TERMS: usize = 100_000;

/// Reference log density: the count series summed until the next term is
/// below `rel_tol` of the running total and past the summand's mode.
pub fn series_log_density_oracle(y: f64, e: &EdmParams, rel_tol: f64) -> Result<f64, TweedieError> {
    if !(rel_tol > 0.0 && rel_tol <= 1e-3) {
        return Err(TweedieError::Config(format!(
            "rel_tol must lie in (0, 1e-3], got {rel_tol}"
        )));
    }
    if !(y >= 0.0) || !y.is_finite() {
        return Err(TweedieError::Domain(y));
    }
    let c = to_compound(e)?;
    if y == 0.0 {
        return Ok(-c.lambda);
    }
    let log_ratio = y.ln() - c.beta.ln();
    let log_lambda = c.lambda.ln();
    let offset = -y.ln() - y / c.beta - c.lambda;
    let term = |n: usize| {
        let shape = n as f64 * c.alpha;
        shape * log_ratio - ln_gamma(shape) + n as f64 * log_lambda - ln_gamma(n as f64 + 1.0)
            + offset
    };
    let mut total = term(1);
    let mut previous = total;
    let mut last_bound = 1.0;
    for n in 2..=ORACLE_MAX_TERMS {
        let t = term(n);
        let shifted = t.max(total);
        total = shifted + ((total - shifted).exp() + (t - shifted).exp()).ln();
        last_bound = (t - total).exp();
        let past_mode = t < previous;
        previous = t;
        if past_mode && last_bound < rel_tol {
            return Ok(total);
        }
    }
    Err(TweedieError::NonConvergence {
        terms: ORACLE_MAX_TERMS,
        last_bound,
    })
}

/// One draw of `Σ_{i≤N} G_i`, `N ~ Poisson(λ)`, `G_i ~ Gamma(α, β)`.
///
/// The sum of `n` Gamma variables is drawn as a single `Gamma(nα, β)`.
pub fn tweedie_sample<R: Rng + ?Sized>(c: &CompoundParams, rng: &mut R) -> Result<f64, TweedieError> {
    c.validate()?;
    let poisson = Poisson::new(c.lambda)
        .map_err(|e| TweedieError::InvalidParameter(format!("poisson: {e}")))?;
    let n: f64 = poisson.sample(rng);
    if n == 0.0 {
        return Ok(0.0);
    }
    let gamma = Gamma::new(n * c.alpha, c.beta)
        .map_err(|e| TweedieError::InvalidParameter(format!("gamma: {e}")))?;
    let y: f64 = gamma.sample(rng);
    // a positive count must give a strictly positive, normal value
    Ok(if y.is_normal() { y } else { f64::MIN_POSITIVE })
}
