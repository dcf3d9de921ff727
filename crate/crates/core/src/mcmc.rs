//! Random-walk Metropolis over the same posterior the variational fit
//! targets, for checking it on small data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avb::{read_json, write_json, AvbError, DrawTable, HyperPrior};
use crate::model::{
    global_dim, model_log_likelihood, observation_log_likelihoods_rows, Dataset, FixedEffectsSpec, Latent,
    LatentAssignment, ModelError,
};
use crate::tweedie::TruncationConfig;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const TARGET_ACCEPTANCE: f64 = 0.25;
const TUNE_EVERY: usize = 50;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid chain configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] AvbError),
}

/// Proposal standard deviations per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSizes {
    /// One per fixed weight; a single value is broadcast.
    pub weights: Vec<f64>,
    pub raw_p: f64,
    pub raw_log_dispersion: f64,
    pub raw_log_sigma_b: f64,
    pub group_effects: f64,
    /// Moves `w_0 + δ, b − δ`, which leaves every linear predictor unchanged.
    pub intercept_shift: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes {
            weights: vec![0.05],
            raw_p: 0.1,
            raw_log_dispersion: 0.05,
            raw_log_sigma_b: 0.3,
            group_effects: 0.05,
            intercept_shift: 0.1,
        }
    }
}

impl StepSizes {
    fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().copied().chain([
            self.raw_p,
            self.raw_log_dispersion,
            self.raw_log_sigma_b,
            self.group_effects,
            self.intercept_shift,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub step_sizes: StepSizes,
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Adapt step sizes toward 25% acceptance during burn-in.
    pub tune: bool,
    /// Drop the data term, leaving the prior.
    pub likelihood: bool,
    pub truncation: TruncationConfig,
    pub fixed_effects: FixedEffectsSpec,
    /// Starting point; defaults to the intercept at `log(mean y)` and
    /// everything else at zero.
    pub init: Option<LatentAssignment>,
    /// Prior over the global latents; defaults to standard normal.
    pub prior: Option<HyperPrior>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            step_sizes: StepSizes::default(),
            iterations: 20_000,
            burn_in: 5_000,
            thinning: 5,
            seed: 0,
            tune: true,
            likelihood: true,
            truncation: TruncationConfig::default(),
            fixed_effects: FixedEffectsSpec::default(),
            init: None,
            prior: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(McmcError::Config(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thinning == 0 {
            return Err(McmcError::Config("thinning must be >= 1".into()));
        }
        if self.step_sizes.weights.is_empty() || self.step_sizes.all().any(|s| !(s > 0.0) || !s.is_finite()) {
            return Err(McmcError::Config("every step size must be finite and > 0".into()));
        }
        self.truncation
            .validate()
            .map_err(|e| McmcError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thinning
    }
}

/// Post-burn-in acceptance rate of every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub weights: Vec<f64>,
    pub raw_p: f64,
    pub raw_log_dispersion: f64,
    pub raw_log_sigma_b: f64,
    pub group_effects: f64,
    pub intercept_shift: f64,
}

impl Acceptance {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().copied().chain([
            self.raw_p,
            self.raw_log_dispersion,
            self.raw_log_sigma_b,
            self.group_effects,
            self.intercept_shift,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub draws: DrawTable,
    pub acceptance: Acceptance,
    /// Step sizes after tuning.
    pub step_sizes: StepSizes,
    pub config: ChainConfig,
}

impl ChainResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), McmcError> {
        Ok(write_json(path.as_ref(), self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, McmcError> {
        Ok(read_json(path.as_ref())?)
    }
}

/// `log p(y, b | z) + log P(z_global)`.
pub fn log_unnormalized_posterior(
    data: &Dataset,
    z: &LatentAssignment,
    prior: &HyperPrior,
    t: &TruncationConfig,
) -> Result<f64, McmcError> {
    let global = z.global_vector();
    if global.len() != prior.dim() {
        return Err(McmcError::Config(format!(
            "prior over {} coordinates for {} global latents",
            prior.dim(),
            global.len()
        )));
    }
    Ok(model_log_likelihood(data, z, t)? + prior.log_density_f64(&global))
}

/// Chain state in the effect scale, with per-row log-likelihoods cached.
struct State {
    weights: Vec<f64>,
    raw_p: f64,
    raw_log_dispersion: f64,
    raw_log_sigma_b: f64,
    effects: Vec<f64>,
    row_ll: Vec<f64>,
}

impl State {
    fn latent(&self) -> LatentAssignment {
        let sigma = self.raw_log_sigma_b.exp();
        Latent {
            fixed_weights: self.weights.clone(),
            raw_p: self.raw_p,
            raw_log_dispersion: self.raw_log_dispersion,
            raw_log_sigma_b: self.raw_log_sigma_b,
            group_noise: self.effects.iter().map(|b| b / sigma).collect(),
        }
    }

    fn global(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend([self.raw_p, self.raw_log_dispersion, self.raw_log_sigma_b]);
        v
    }

    fn effect_log_prior(&self) -> f64 {
        let ls = self.raw_log_sigma_b;
        let inv = (-ls).exp();
        self.effects
            .iter()
            .map(|b| {
                let u = b * inv;
                -0.5 * u * u - ls - HALF_LN_2PI
            })
            .sum()
    }
}

struct Chain<'a> {
    data: &'a Dataset,
    rows_by_group: Vec<Vec<usize>>,
    all_rows: Vec<usize>,
    prior: HyperPrior,
    cfg: &'a ChainConfig,
    rng: ChaCha8Rng,
}

impl Chain<'_> {
    fn row_ll(&self, s: &State, rows: &[usize]) -> Result<Vec<f64>, McmcError> {
        if !self.cfg.likelihood {
            return Ok(vec![0.0; rows.len()]);
        }
        Ok(observation_log_likelihoods_rows(self.data, rows, &s.latent(), &self.cfg.truncation)?)
    }

    fn accept(&mut self, delta: f64) -> bool {
        delta >= 0.0 || self.rng.random::<f64>().ln() < delta
    }

    fn noise(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Proposes a change to a global coordinate that touches every row.
    fn global_move(&mut self, s: &mut State, step: f64, coordinate: usize) -> Result<bool, McmcError> {
        let mut proposal = State {
            weights: s.weights.clone(),
            effects: s.effects.clone(),
            row_ll: Vec::new(),
            ..*s
        };
        let delta = step * self.noise();
        let k = s.weights.len();
        match coordinate {
            c if c < k => proposal.weights[c] += delta,
            c if c == k => proposal.raw_p += delta,
            _ => proposal.raw_log_dispersion += delta,
        }
        proposal.row_ll = match self.row_ll(&proposal, &self.all_rows) {
            Ok(ll) => ll,
            Err(McmcError::Model(ModelError::Overflow { .. })) => return Ok(false),
            Err(e) => return Err(e),
        };
        let diff = proposal.row_ll.iter().sum::<f64>() - s.row_ll.iter().sum::<f64>()
            + self.prior.log_density_f64(&proposal.global())
            - self.prior.log_density_f64(&s.global());
        let accepted = diff.is_finite() && self.accept(diff);
        if accepted {
            *s = proposal;
        }
        Ok(accepted)
    }

    fn sigma_move(&mut self, s: &mut State, step: f64) -> bool {
        let old_prior = s.effect_log_prior() + self.prior.log_density_f64(&s.global());
        let old = s.raw_log_sigma_b;
        s.raw_log_sigma_b += step * self.noise();
        let new_prior = s.effect_log_prior() + self.prior.log_density_f64(&s.global());
        let accepted = self.accept(new_prior - old_prior);
        if !accepted {
            s.raw_log_sigma_b = old;
        }
        accepted
    }

    fn shift_move(&mut self, s: &mut State, step: f64) -> bool {
        let delta = step * self.noise();
        let old_prior = s.effect_log_prior() + self.prior.log_density_f64(&s.global());
        s.weights[0] += delta;
        s.effects.iter_mut().for_each(|b| *b -= delta);
        let new_prior = s.effect_log_prior() + self.prior.log_density_f64(&s.global());
        let accepted = self.accept(new_prior - old_prior);
        if !accepted {
            s.weights[0] -= delta;
            s.effects.iter_mut().for_each(|b| *b += delta);
        }
        accepted
    }

    /// One sweep over the groups; returns the number of accepted moves.
    fn effect_moves(&mut self, s: &mut State, step: f64) -> Result<usize, McmcError> {
        let mut accepted = 0;
        for g in 0..s.effects.len() {
            let rows = std::mem::take(&mut self.rows_by_group[g]);
            let old_b = s.effects[g];
            let old_prior = s.effect_log_prior();
            let old_ll: f64 = rows.iter().map(|&i| s.row_ll[i]).sum();
            s.effects[g] += step * self.noise();
            let new_ll = match self.row_ll(s, &rows) {
                Ok(ll) => Some(ll),
                Err(McmcError::Model(ModelError::Overflow { .. })) => None,
                Err(e) => return Err(e),
            };
            let ok = match &new_ll {
                Some(ll) => {
                    let diff = ll.iter().sum::<f64>() - old_ll + s.effect_log_prior() - old_prior;
                    diff.is_finite() && self.accept(diff)
                }
                None => false,
            };
            if ok {
                for (&i, v) in rows.iter().zip(new_ll.expect("checked")) {
                    s.row_ll[i] = v;
                }
                accepted += 1;
            } else {
                s.effects[g] = old_b;
            }
            self.rows_by_group[g] = rows;
        }
        Ok(accepted)
    }
}

/// Running acceptance counts for one block.
#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    accepted: usize,
    proposed: usize,
}

impl Counter {
    fn record(&mut self, accepted: usize, proposed: usize) {
        self.accepted += accepted;
        self.proposed += proposed;
    }

    fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

fn tune(step: &mut f64, window: &mut Counter) {
    if window.proposed > 0 {
        *step *= (2.0 * (window.rate() - TARGET_ACCEPTANCE)).exp();
        *step = step.clamp(1e-6, 10.0);
    }
    *window = Counter::default();
}

/// Blockwise random-walk Metropolis. Deterministic given `cfg.seed`.
pub fn run_chain(data: &Dataset, cfg: &ChainConfig) -> Result<ChainResult, McmcError> {
    cfg.validate()?;
    data.validate()?;
    let k = cfg.fixed_effects.n_weights(data.n_covariates);
    let g = data.group_count;
    let prior = cfg.prior.clone().unwrap_or_else(|| HyperPrior::standard(global_dim(k)));
    if prior.dim() != global_dim(k) {
        return Err(McmcError::Config(format!(
            "prior over {} coordinates for {} global latents",
            prior.dim(),
            global_dim(k)
        )));
    }
    let mut steps = cfg.step_sizes.clone();
    if steps.weights.len() == 1 {
        steps.weights = vec![steps.weights[0]; k];
    } else if steps.weights.len() != k {
        return Err(McmcError::Config(format!("{} weight step sizes for {k} weights", steps.weights.len())));
    }

    let mut rows_by_group = vec![Vec::new(); g];
    for (i, &grp) in data.group_index.iter().enumerate() {
        rows_by_group[grp].push(i);
    }
    let mut chain = Chain {
        data,
        rows_by_group,
        all_rows: (0..data.len()).collect(),
        prior,
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };

    let init = match &cfg.init {
        Some(z) => z.clone(),
        None => {
            let mean_y = data.responses.iter().sum::<f64>() / data.len().max(1) as f64;
            let mut w = vec![0.0; k];
            if cfg.likelihood && mean_y > 0.0 {
                w[0] = mean_y.ln();
            }
            Latent {
                fixed_weights: w,
                raw_p: 0.0,
                raw_log_dispersion: 0.0,
                raw_log_sigma_b: 0.0,
                group_noise: vec![0.0; g],
            }
        }
    };
    if init.fixed_weights.len() != k || init.group_noise.len() != g {
        return Err(McmcError::Config("initial point does not match the model".into()));
    }
    let mut state = State {
        effects: init.random_effects(),
        weights: init.fixed_weights,
        raw_p: init.raw_p,
        raw_log_dispersion: init.raw_log_dispersion,
        raw_log_sigma_b: init.raw_log_sigma_b,
        row_ll: Vec::new(),
    };
    state.row_ll = chain.row_ll(&state, &chain.all_rows.clone())?;
    if state.row_ll.iter().any(|v| !v.is_finite()) {
        return Err(McmcError::Config("initial point has a non-finite likelihood".into()));
    }

    // counters: weights.., raw_p, raw_log_dispersion, raw_log_sigma_b, effects, shift
    let n_blocks = k + 5;
    let mut window = vec![Counter::default(); n_blocks];
    let mut kept = vec![Counter::default(); n_blocks];
    let mut draws = DrawTable::new(k, g);

    for it in 0..cfg.iterations {
        let mut outcome = vec![(0usize, 0usize); n_blocks];
        for (c, slot) in outcome.iter_mut().enumerate().take(k + 2) {
            let step = if c < k {
                steps.weights[c]
            } else if c == k {
                steps.raw_p
            } else {
                steps.raw_log_dispersion
            };
            let a = chain.global_move(&mut state, step, c)?;
            *slot = (usize::from(a), 1);
        }
        if g > 0 {
            let a = chain.sigma_move(&mut state, steps.raw_log_sigma_b);
            outcome[k + 2] = (usize::from(a), 1);
            outcome[k + 3] = (chain.effect_moves(&mut state, steps.group_effects)?, g);
            let a = chain.shift_move(&mut state, steps.intercept_shift);
            outcome[k + 4] = (usize::from(a), 1);
        } else {
            let a = chain.sigma_move(&mut state, steps.raw_log_sigma_b);
            outcome[k + 2] = (usize::from(a), 1);
        }

        let burning = it < cfg.burn_in;
        for (b, &(a, p)) in outcome.iter().enumerate() {
            if burning {
                window[b].record(a, p);
            } else {
                kept[b].record(a, p);
            }
        }
        if burning && cfg.tune && (it + 1) % TUNE_EVERY == 0 {
            for (c, w) in steps.weights.iter_mut().enumerate() {
                tune(w, &mut window[c]);
            }
            tune(&mut steps.raw_p, &mut window[k]);
            tune(&mut steps.raw_log_dispersion, &mut window[k + 1]);
            tune(&mut steps.raw_log_sigma_b, &mut window[k + 2]);
            tune(&mut steps.group_effects, &mut window[k + 3]);
            tune(&mut steps.intercept_shift, &mut window[k + 4]);
        }
        if !burning && (it - cfg.burn_in + 1).is_multiple_of(cfg.thinning) && draws.len() < cfg.retained() {
            draws.push(&state.latent());
        }
    }

    let acceptance = Acceptance {
        weights: kept[..k].iter().map(Counter::rate).collect(),
        raw_p: kept[k].rate(),
        raw_log_dispersion: kept[k + 1].rate(),
        raw_log_sigma_b: kept[k + 2].rate(),
        group_effects: kept[k + 3].rate(),
        intercept_shift: kept[k + 4].rate(),
    };
    let names = ["raw_p", "raw_log_dispersion", "raw_log_sigma_b", "group_effects", "intercept_shift"];
    let rates: Vec<f64> = acceptance.all().collect();
    for (b, rate) in rates.iter().enumerate() {
        let skipped = g == 0 && b >= k + 3;
        if *rate < 0.01 && !skipped {
            let name = if b < k { format!("w{b}") } else { names[b - k].to_string() };
            log::warn!("block {name} accepted {rate:.4} of proposals; try a smaller step size");
        }
    }
    Ok(ChainResult {
        draws,
        acceptance,
        step_sizes: steps,
        config: cfg.clone(),
    })
}
