//! Tweedie mixed-effects model: a fixed-effects predictor, one random
//! intercept per group, log link, and the constraint maps from unconstrained
//! latents to `(𝒫, φ, σ_b)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::tweedie::{self, log_marginal, CompoundParams, EdmParams, ShapeCache, TruncationConfig, TweedieError};

/// Linear predictors beyond this magnitude are rejected instead of overflowing
/// `exp`.
pub const MAX_ABS_ETA: f64 = 30.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("observation {index}: linear predictor {eta} exceeds |η| ≤ {MAX_ABS_ETA}")]
    Overflow { index: usize, eta: f64 },
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Tweedie(#[from] TweedieError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    OneHot,
}

/// Responses, a row-major fixed-effects design and the group of every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub responses: Vec<f64>,
    /// Row-major `M × D`.
    pub fixed_design: Vec<f64>,
    pub n_covariates: usize,
    /// Empty when the model has no random effect.
    pub group_index: Vec<usize>,
    pub group_count: usize,
    pub column_names: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
    pub group_labels: Vec<String>,
    pub response_name: String,
    pub group_name: Option<String>,
}

impl Dataset {
    /// Builds a dataset from rows, naming the response `y`, columns `x1..xD`
    /// and groups `g00, g01, ..`.
    pub fn from_rows(
        responses: Vec<f64>,
        rows: &[Vec<f64>],
        group_index: Vec<usize>,
        group_count: usize,
    ) -> Result<Self, ModelError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() != responses.len() {
            return Err(ModelError::Shape(format!(
                "{} design rows for {} responses",
                rows.len(),
                responses.len()
            )));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(ModelError::Shape(format!("row {bad} has a different width")));
        }
        let data = Dataset {
            fixed_design: rows.iter().flatten().copied().collect(),
            n_covariates: d,
            column_names: (1..=d).map(|k| format!("x{k}")).collect(),
            column_kinds: vec![ColumnKind::Continuous; d],
            group_labels: group_labels(group_count),
            response_name: "y".into(),
            group_name: (group_count > 0).then(|| "group".into()),
            responses,
            group_index,
            group_count,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.responses.len();
        if self.fixed_design.len() != m * self.n_covariates {
            return Err(ModelError::Shape(format!(
                "design has {} cells, expected {m} × {}",
                self.fixed_design.len(),
                self.n_covariates
            )));
        }
        if self.column_names.len() != self.n_covariates || self.column_kinds.len() != self.n_covariates {
            return Err(ModelError::Shape("column metadata does not match the design width".into()));
        }
        if let Some(i) = self.responses.iter().position(|y| !(*y >= 0.0) || !y.is_finite()) {
            return Err(ModelError::InvalidData(format!(
                "response {} at row {i} is not a finite nonnegative number",
                self.responses[i]
            )));
        }
        if self.group_count == 0 {
            if !self.group_index.is_empty() {
                return Err(ModelError::Shape("group ids given but group_count is 0".into()));
            }
        } else {
            if self.group_index.len() != m {
                return Err(ModelError::Shape(format!(
                    "{} group ids for {m} rows",
                    self.group_index.len()
                )));
            }
            if let Some(i) = self.group_index.iter().position(|&g| g >= self.group_count) {
                return Err(ModelError::InvalidData(format!(
                    "group id {} at row {i} is not below {}",
                    self.group_index[i], self.group_count
                )));
            }
            if self.group_labels.len() != self.group_count {
                return Err(ModelError::Shape("group labels do not match group_count".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_covariates;
        &self.fixed_design[i * d..(i + 1) * d]
    }

    pub fn group_of(&self, i: usize) -> Option<usize> {
        self.group_index.get(i).copied()
    }

    /// Rows `indices`, in that order, with all metadata kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            responses: indices.iter().map(|&i| self.responses[i]).collect(),
            fixed_design: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            group_index: if self.group_index.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.group_index[i]).collect()
            },
            ..self.clone_metadata()
        }
    }

    /// `self` followed by the rows of `other`; metadata must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, ModelError> {
        if self.n_covariates != other.n_covariates || self.group_count != other.group_count {
            return Err(ModelError::Shape("datasets have different layouts".into()));
        }
        let mut out = self.clone();
        out.responses.extend_from_slice(&other.responses);
        out.fixed_design.extend_from_slice(&other.fixed_design);
        out.group_index.extend_from_slice(&other.group_index);
        Ok(out)
    }

    fn clone_metadata(&self) -> Dataset {
        Dataset {
            responses: Vec::new(),
            fixed_design: Vec::new(),
            n_covariates: self.n_covariates,
            group_index: Vec::new(),
            group_count: self.group_count,
            column_names: self.column_names.clone(),
            column_kinds: self.column_kinds.clone(),
            group_labels: self.group_labels.clone(),
            response_name: self.response_name.clone(),
            group_name: self.group_name.clone(),
        }
    }
}

/// Zero-padded labels that sort in numeric order.
pub fn group_labels(group_count: usize) -> Vec<String> {
    let width = group_count.saturating_sub(1).to_string().len().max(2);
    (0..group_count).map(|g| format!("g{g:0width$}")).collect()
}

/// Link between mean and linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSpec {
    #[default]
    Log,
}

impl LinkSpec {
    pub fn inverse(&self, eta: f64) -> f64 {
        match self {
            LinkSpec::Log => eta.exp(),
        }
    }

    pub fn apply(&self, mu: f64) -> f64 {
        match self {
            LinkSpec::Log => mu.ln(),
        }
    }
}

/// Shape of the fixed-effects function `f_w`.
///
/// With `hidden_width = 0` it is linear, `w_0 + x·w_{1:D}`. Otherwise it is
/// `v_0 + Σ_h v_h tanh(c_h + a_h·x)` and the weight vector is laid out as
/// `[v_0, v_1..v_H, (c_1, a_1), .., (c_H, a_H)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FixedEffectsSpec {
    pub hidden_width: usize,
}

impl FixedEffectsSpec {
    pub fn n_weights(&self, n_covariates: usize) -> usize {
        match self.hidden_width {
            0 => n_covariates + 1,
            h => 1 + h + h * (n_covariates + 1),
        }
    }

    /// Recovers the spec from a weight count; linear whenever `len == D + 1`.
    pub fn infer(n_weights: usize, n_covariates: usize) -> Result<Self, ModelError> {
        if n_weights == n_covariates + 1 {
            return Ok(FixedEffectsSpec { hidden_width: 0 });
        }
        let per_unit = n_covariates + 2;
        if n_weights > 1 && (n_weights - 1).is_multiple_of(per_unit) {
            return Ok(FixedEffectsSpec {
                hidden_width: (n_weights - 1) / per_unit,
            });
        }
        Err(ModelError::Shape(format!(
            "{n_weights} fixed weights do not fit {n_covariates} covariates"
        )))
    }

    /// `f_w(x)` for one row.
    pub fn evaluate<S: Real>(&self, weights: &[S], x: &[f64]) -> S {
        let d = x.len();
        match self.hidden_width {
            0 => S::affine_const(&weights[1..], x, weights[0]),
            h => {
                let hidden: Vec<S> = (0..h)
                    .map(|k| {
                        let base = 1 + h + k * (d + 1);
                        S::affine_const(&weights[base + 1..base + 1 + d], x, weights[base]).tanh()
                    })
                    .collect();
                S::affine(&weights[1..=h], &hidden, weights[0])
            }
        }
    }
}

/// One draw of every latent quantity: fixed weights, the three unconstrained
/// scalars and the standardized random effects `ε` (with `b = σ_b ε`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent<S> {
    pub fixed_weights: Vec<S>,
    pub raw_p: S,
    pub raw_log_dispersion: S,
    pub raw_log_sigma_b: S,
    pub group_noise: Vec<S>,
}

pub type LatentAssignment = Latent<f64>;

/// Number of global latents for `n_weights` fixed weights.
pub fn global_dim(n_weights: usize) -> usize {
    n_weights + 3
}

impl<S: Real> Latent<S> {
    /// `[w..., raw_p, raw_log_dispersion, raw_log_sigma_b]`.
    pub fn global_vector(&self) -> Vec<S> {
        let mut v = self.fixed_weights.clone();
        v.extend([self.raw_p, self.raw_log_dispersion, self.raw_log_sigma_b]);
        v
    }

    pub fn from_global(global: &[S], group_noise: Vec<S>) -> Result<Self, ModelError> {
        if global.len() < 4 {
            return Err(ModelError::Shape(format!(
                "global latent vector of length {} is too short",
                global.len()
            )));
        }
        let k = global.len() - 3;
        Ok(Latent {
            fixed_weights: global[..k].to_vec(),
            raw_p: global[k],
            raw_log_dispersion: global[k + 1],
            raw_log_sigma_b: global[k + 2],
            group_noise,
        })
    }

    /// `𝒫 = 1 + sigmoid(raw_p)`.
    pub fn p_index(&self) -> S {
        self.raw_p.sigmoid() + 1.0
    }

    pub fn dispersion(&self) -> S {
        self.raw_log_dispersion.exp()
    }

    pub fn sigma_b(&self) -> S {
        self.raw_log_sigma_b.exp()
    }

    pub fn random_effects(&self) -> Vec<S> {
        reparam_random_effects(self.sigma_b(), &self.group_noise)
    }

    pub fn values(&self) -> LatentAssignment {
        Latent {
            fixed_weights: self.fixed_weights.iter().map(Real::value).collect(),
            raw_p: self.raw_p.value(),
            raw_log_dispersion: self.raw_log_dispersion.value(),
            raw_log_sigma_b: self.raw_log_sigma_b.value(),
            group_noise: self.group_noise.iter().map(Real::value).collect(),
        }
    }
}

impl LatentAssignment {
    /// Latents that reproduce the given constrained values.
    pub fn from_constrained(
        fixed_weights: Vec<f64>,
        p_index: f64,
        dispersion: f64,
        sigma_b: f64,
        random_effects: &[f64],
    ) -> Result<Self, ModelError> {
        if !(p_index > 1.0 && p_index < 2.0) || !(dispersion > 0.0) || !(sigma_b > 0.0) {
            return Err(ModelError::InvalidData(format!(
                "constrained values out of range: p={p_index}, φ={dispersion}, σ_b={sigma_b}"
            )));
        }
        let s = p_index - 1.0;
        Ok(Latent {
            fixed_weights,
            raw_p: (s / (1.0 - s)).ln(),
            raw_log_dispersion: dispersion.ln(),
            raw_log_sigma_b: sigma_b.ln(),
            group_noise: random_effects.iter().map(|b| b / sigma_b).collect(),
        })
    }
}

/// `b_g = σ_b · ε_g`.
pub fn reparam_random_effects<S: Real>(sigma_b: S, noise: &[S]) -> Vec<S> {
    noise.iter().map(|&e| sigma_b * e).collect()
}

/// `η_i = f_w(X_i) + b[group_i]` for every row.
pub fn linear_predictor(data: &Dataset, w: &[f64], b: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_dims(data, w.len(), b.len())?;
    let spec = FixedEffectsSpec::infer(w.len(), data.n_covariates)?;
    Ok((0..data.len())
        .map(|i| {
            let fixed = spec.evaluate(w, data.row(i));
            fixed + data.group_of(i).map_or(0.0, |g| b[g])
        })
        .collect())
}

fn check_dims(data: &Dataset, n_weights: usize, n_effects: usize) -> Result<(), ModelError> {
    FixedEffectsSpec::infer(n_weights, data.n_covariates)?;
    if n_effects != data.group_count {
        return Err(ModelError::Shape(format!(
            "{n_effects} random effects for {} groups",
            data.group_count
        )));
    }
    Ok(())
}

/// Compound parameters per observation with `μ_i = exp(η_i)` and shared
/// `(𝒫, φ)`.
pub fn per_obs_params(eta: &[f64], p_index: f64, dispersion: f64) -> Result<Vec<CompoundParams>, ModelError> {
    eta.iter()
        .enumerate()
        .map(|(index, &e)| {
            if !(e.abs() <= MAX_ABS_ETA) {
                return Err(ModelError::Overflow { index, eta: e });
            }
            let edm = EdmParams::new(LinkSpec::Log.inverse(e), p_index, dispersion)?;
            Ok(tweedie::to_compound(&edm)?)
        })
        .collect()
}

/// Global quantities shared by every observation term.
struct SharedTerms<S> {
    spec: FixedEffectsSpec,
    /// 𝒫 − 1
    s: S,
    /// 2 − 𝒫
    one_minus_s: S,
    /// log λ_i = (2−𝒫)η_i + lambda_offset
    lambda_offset: S,
    /// log β_i = (𝒫−1)η_i + beta_offset
    beta_offset: S,
    effects: Vec<S>,
    shapes: ShapeCache<S>,
}

impl<S: Real> SharedTerms<S> {
    fn new(data: &Dataset, z: &Latent<S>) -> Result<Self, ModelError> {
        check_dims(data, z.fixed_weights.len(), z.group_noise.len())?;
        let raw = z.raw_p;
        let log_phi = z.raw_log_dispersion;
        Ok(SharedTerms {
            spec: FixedEffectsSpec::infer(z.fixed_weights.len(), data.n_covariates)?,
            s: raw.sigmoid(),
            one_minus_s: (-raw).sigmoid(),
            // −log(2−𝒫) = softplus(raw), log(𝒫−1) = −softplus(−raw)
            lambda_offset: raw.softplus() - log_phi,
            beta_offset: log_phi - (-raw).softplus(),
            effects: z.random_effects(),
            shapes: ShapeCache::new((-raw).exp()),
        })
    }

    fn observation(
        &mut self,
        data: &Dataset,
        weights: &[S],
        i: usize,
        t: &TruncationConfig,
    ) -> Result<S, ModelError> {
        let fixed = self.spec.evaluate(weights, data.row(i));
        let eta = match data.group_of(i) {
            Some(g) => fixed + self.effects[g],
            None => fixed,
        };
        if !(eta.value().abs() <= MAX_ABS_ETA) {
            return Err(ModelError::Overflow {
                index: i,
                eta: eta.value(),
            });
        }
        let log_lambda = eta * self.one_minus_s + self.lambda_offset;
        let log_beta = eta * self.s + self.beta_offset;
        Ok(log_marginal(data.responses[i], log_lambda, log_beta, &mut self.shapes, t))
    }
}

/// `Σ_g log N(b_g; 0, σ_b²)` with `b = σ_b ε`.
pub fn random_effect_log_prior<S: Real>(z: &Latent<S>) -> Option<S> {
    if z.group_noise.is_empty() {
        return None;
    }
    let squares: Vec<S> = z.group_noise.iter().map(|&e| e * e).collect();
    let g = z.group_noise.len() as f64;
    Some(S::sum(&squares) * -0.5 - z.raw_log_sigma_b * g - HALF_LN_2PI * g)
}

/// Full-data log-likelihood plus the random-effect prior.
pub fn model_log_likelihood<S: Real>(
    data: &Dataset,
    z: &Latent<S>,
    t: &TruncationConfig,
) -> Result<S, ModelError> {
    let rows: Vec<usize> = (0..data.len()).collect();
    model_log_likelihood_rows(data, &rows, 1.0, z, t)
}

/// `data_weight · Σ_{i∈rows} log p(y_i | z) + Σ_g log N(b_g; 0, σ_b²)`.
///
/// With `data_weight = M / |rows|` this is an unbiased minibatch estimate of
/// [`model_log_likelihood`].
pub fn model_log_likelihood_rows<S: Real>(
    data: &Dataset,
    rows: &[usize],
    data_weight: f64,
    z: &Latent<S>,
    t: &TruncationConfig,
) -> Result<S, ModelError> {
    t.validate()?;
    let mut shared = SharedTerms::new(data, z)?;
    let terms = rows
        .iter()
        .map(|&i| shared.observation(data, &z.fixed_weights, i, t))
        .collect::<Result<Vec<S>, _>>()?;
    let prior = random_effect_log_prior(z);
    let data_term = if terms.is_empty() {
        None
    } else {
        Some(S::sum(&terms) * data_weight)
    };
    match (data_term, prior) {
        (Some(d), Some(p)) => Ok(d + p),
        (Some(d), None) => Ok(d),
        (None, Some(p)) => Ok(p),
        (None, None) => Ok(z.raw_p.lift(0.0)),
    }
}

/// Per-observation `log p(y_i | z)` without the prior term.
pub fn observation_log_likelihoods(
    data: &Dataset,
    z: &LatentAssignment,
    t: &TruncationConfig,
) -> Result<Vec<f64>, ModelError> {
    let rows: Vec<usize> = (0..data.len()).collect();
    observation_log_likelihoods_rows(data, &rows, z, t)
}

/// `log p(y_i | z)` for `i ∈ rows`, in that order.
pub fn observation_log_likelihoods_rows(
    data: &Dataset,
    rows: &[usize],
    z: &LatentAssignment,
    t: &TruncationConfig,
) -> Result<Vec<f64>, ModelError> {
    t.validate()?;
    let mut shared = SharedTerms::new(data, z)?;
    rows.iter()
        .map(|&i| shared.observation(data, &z.fixed_weights, i, t))
        .collect()
}
