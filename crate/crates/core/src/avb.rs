//! Adversarial variational Bayes for the Tweedie mixed model.
//!
//! An inference network maps Gaussian noise to the global latents, a critic
//! estimates the log density ratio between those draws and a trainable
//! Gaussian hyper prior, and the two are trained in alternation. Group
//! effects use a reparameterized Gaussian posterior per group whose prior
//! and entropy terms are exact, so the critic only sees the global latents.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    log_sum_exp_f64, AdamConfig, AdamState, AutodiffError, OptimError, ParamStore, Real, Tape, Var,
};
use crate::data::Standardization;
use crate::evaluation::quantile_sorted;
use crate::model::{
    global_dim, model_log_likelihood_rows, observation_log_likelihoods_rows, Dataset, FixedEffectsSpec, Latent,
    LatentAssignment, ModelError,
};
use crate::tweedie::{to_compound, tweedie_sample, EdmParams, TruncationConfig, TweedieError};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error)]
pub enum AvbError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tweedie(#[from] TweedieError),
    #[error("step {step}: {source}")]
    Optim {
        step: usize,
        #[source]
        source: OptimError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training aborted at step {step}: {detail}")]
    NonFinite {
        step: usize,
        detail: String,
        checkpoint: Box<Checkpoint>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Dense layers with `tanh` between them and a linear output layer.
///
/// Layer `l` stores its `out × in` weights row-major followed by its `out`
/// biases, starting at `offset` in the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub sizes: Vec<usize>,
    pub offset: usize,
}

impl MlpLayout {
    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    /// Registers the layers in `store` with `N(0, 1/fan_in)` weights (the
    /// last layer scaled by `output_scale`) and zero biases.
    fn register<R: Rng + ?Sized>(
        sizes: Vec<usize>,
        store: &mut ParamStore,
        prefix: &str,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        let offset = store.len();
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = if l + 1 == n_layers { output_scale } else { 1.0 } / (fan_in as f64).sqrt();
            store
                .register(&format!("{prefix}.layer{l}.weight"), fan_in * fan_out, |_| {
                    scale * rng.sample::<f64, _>(StandardNormal)
                })
                .expect("fresh store");
            store
                .register(&format!("{prefix}.layer{l}.bias"), fan_out, |_| 0.0)
                .expect("fresh store");
        }
        MlpLayout { sizes, offset }
    }

    fn layer<'a, S>(&self, params: &'a [S], l: usize) -> (&'a [S], &'a [S]) {
        let start = self.offset + self.sizes.windows(2).take(l).map(|w| w[1] * (w[0] + 1)).sum::<usize>();
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let weights = &params[start..start + fan_in * fan_out];
        let bias = &params[start + fan_in * fan_out..start + fan_out * (fan_in + 1)];
        (weights, bias)
    }

    fn finish<S: Real>(&self, params: &[S], mut h: Vec<S>) -> Vec<S> {
        let n_layers = self.sizes.len() - 1;
        for l in 1..n_layers {
            h = h.into_iter().map(Real::tanh).collect();
            let (weights, bias) = self.layer(params, l);
            let fan_in = self.sizes[l];
            h = bias
                .iter()
                .enumerate()
                .map(|(j, &b)| S::affine(&weights[j * fan_in..(j + 1) * fan_in], &h, b))
                .collect();
        }
        h
    }

    /// Forward pass on constant inputs.
    pub fn forward_const<S: Real>(&self, params: &[S], input: &[f64]) -> Vec<S> {
        let (weights, bias) = self.layer(params, 0);
        let fan_in = self.sizes[0];
        let h = bias
            .iter()
            .enumerate()
            .map(|(j, &b)| S::affine_const(&weights[j * fan_in..(j + 1) * fan_in], input, b))
            .collect();
        self.finish(params, h)
    }

    pub fn forward<S: Real>(&self, params: &[S], input: &[S]) -> Vec<S> {
        let (weights, bias) = self.layer(params, 0);
        let fan_in = self.sizes[0];
        let h = bias
            .iter()
            .enumerate()
            .map(|(j, &b)| S::affine(&weights[j * fan_in..(j + 1) * fan_in], input, b))
            .collect();
        self.finish(params, h)
    }
}

/// `Q_θ`: noise → global latents, plus a Gaussian posterior per group on the
/// effects `b_g = m_g + exp(s_g) ξ_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceNet {
    pub net: MlpLayout,
    pub n_weights: usize,
    pub n_groups: usize,
    pub params: ParamStore,
}

impl InferenceNet {
    /// A network for `n_weights` fixed weights and `n_groups` groups; the
    /// output biases start at zero, i.e. at `𝒫 = 1.5`, `φ = 1`, `σ_b = 1`.
    pub fn new<R: Rng + ?Sized>(
        noise_dim: usize,
        hidden: usize,
        n_weights: usize,
        n_groups: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let sizes = if hidden == 0 {
            vec![noise_dim, global_dim(n_weights)]
        } else {
            vec![noise_dim, hidden, global_dim(n_weights)]
        };
        let net = MlpLayout::register(sizes, &mut params, "inference", output_scale, rng);
        params.register("group.mean", n_groups, |_| 0.0).expect("fresh store");
        params.register("group.log_scale", n_groups, |_| 0.0).expect("fresh store");
        InferenceNet {
            net,
            n_weights,
            n_groups,
            params,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Output-layer biases, one per global latent.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let last = self.net.sizes.len() - 2;
        self.params
            .get_mut(&format!("inference.layer{last}.bias"))
            .expect("registered")
    }

    fn group_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            self.params.range("group.mean").expect("registered"),
            self.params.range("group.log_scale").expect("registered"),
        )
    }

    /// The latents for given noise, on any scalar type.
    pub fn transform<S: Real>(&self, params: &[S], noise: &LatentNoise) -> Result<Latent<S>, AvbError> {
        if noise.global.len() != self.noise_dim() || noise.group.len() != self.n_groups {
            return Err(AvbError::Shape(format!(
                "noise of size ({}, {}) for a network expecting ({}, {})",
                noise.global.len(),
                noise.group.len(),
                self.noise_dim(),
                self.n_groups
            )));
        }
        let global = self.net.forward_const(params, &noise.global);
        let (mean, log_scale) = self.group_ranges();
        let inv_sigma_b = (-global[global.len() - 1]).exp();
        let group = noise
            .group
            .iter()
            .enumerate()
            .map(|(g, &xi)| (params[mean.start + g] + params[log_scale.start + g].exp() * xi) * inv_sigma_b)
            .collect();
        Ok(Latent::from_global(&global, group)?)
    }

    /// Entropy of the group posterior.
    pub fn group_entropy<S: Real>(&self, params: &[S]) -> Option<S> {
        if self.n_groups == 0 {
            return None;
        }
        let (_, log_scale) = self.group_ranges();
        let g = self.n_groups as f64;
        Some(S::sum(&params[log_scale]) + g * (0.5 + HALF_LN_2PI))
    }
}

/// Noise consumed by one posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub global: Vec<f64>,
    pub group: Vec<f64>,
}

impl LatentNoise {
    pub fn draw<R: Rng + ?Sized>(noise_dim: usize, n_groups: usize, rng: &mut R) -> Self {
        LatentNoise {
            global: (0..noise_dim).map(|_| rng.sample(StandardNormal)).collect(),
            group: (0..n_groups).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// One posterior draw with fresh noise.
pub fn sample_posterior<R: Rng + ?Sized>(q: &InferenceNet, rng: &mut R) -> LatentAssignment {
    let noise = LatentNoise::draw(q.noise_dim(), q.n_groups, rng);
    q.transform(q.params.values(), &noise).expect("noise sized from the network")
}

/// `T(z)`: a scalar logit estimating `log q(z) − log p(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: MlpLayout,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = ParamStore::new();
        let net = MlpLayout::register(sizes, &mut params, "critic", 1.0, rng);
        Discriminator { net, params }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logit<S: Real>(&self, params: &[S], z: &[S]) -> S {
        self.net.forward(params, z)[0]
    }

    pub fn logit_const<S: Real>(&self, params: &[S], z: &[f64]) -> S {
        self.net.forward_const(params, z)[0]
    }

    pub fn evaluate(&self, z: &[f64]) -> f64 {
        self.logit_const(self.params.values(), z)
    }
}

/// Which hyper-prior parameters the generator step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperPriorMode {
    Frozen,
    /// Location and scale of the fixed-weight coordinates only.
    #[default]
    Weights,
    All,
}

/// `P_ψ(z) = N(μ_ψ, diag(exp(2 ℓ_ψ)))` over the global latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub params: ParamStore,
    /// One flag per entry of `params`.
    pub trainable: Vec<bool>,
}

impl HyperPrior {
    /// Standard normal prior over `dim` coordinates.
    pub fn standard(dim: usize) -> Self {
        let mut params = ParamStore::new();
        params.register("location", dim, |_| 0.0).expect("fresh store");
        params.register("log_scale", dim, |_| 0.0).expect("fresh store");
        HyperPrior {
            params,
            trainable: vec![false; 2 * dim],
        }
    }

    /// Standard normal prior over the globals of a model with `n_weights`
    /// fixed weights, trainable as `mode` says.
    pub fn for_model(n_weights: usize, mode: HyperPriorMode) -> Self {
        let dim = global_dim(n_weights);
        let mut prior = HyperPrior::standard(dim);
        for k in 0..dim {
            let on = match mode {
                HyperPriorMode::Frozen => false,
                HyperPriorMode::Weights => k < n_weights,
                HyperPriorMode::All => true,
            };
            prior.trainable[k] = on;
            prior.trainable[dim + k] = on;
        }
        prior
    }

    pub fn dim(&self) -> usize {
        self.params.len() / 2
    }

    pub fn location(&self) -> &[f64] {
        &self.params.values()[..self.dim()]
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.params.values()[self.dim()..]
    }

    /// Trainable entries as leaves, the rest as constants.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .values()
            .iter()
            .zip(&self.trainable)
            .map(|(&v, &on)| if on { tape.var(v) } else { tape.constant(v) })
            .collect()
    }

    /// `μ + exp(ℓ) ⊙ ε`.
    pub fn transform<S: Real>(&self, params: &[S], noise: &[f64]) -> Vec<S> {
        let d = self.dim();
        (0..d).map(|k| params[d + k].exp() * noise[k] + params[k]).collect()
    }

    pub fn log_density<S: Real>(&self, params: &[S], z: &[S]) -> S {
        let d = self.dim();
        let terms: Vec<S> = (0..d)
            .map(|k| {
                let u = (z[k] - params[k]) * (-params[d + k]).exp();
                u * u * -0.5 - params[d + k] - HALF_LN_2PI
            })
            .collect();
        S::sum(&terms)
    }

    pub fn log_density_f64(&self, z: &[f64]) -> f64 {
        self.log_density(self.params.values(), z)
    }
}

/// A reparameterized draw from the hyper prior.
pub fn sample_prior<R: Rng + ?Sized>(h: &HyperPrior, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h.dim()).map(|_| rng.sample(StandardNormal)).collect();
    h.transform(h.params.values(), &noise)
}

/// `mean[−log σ(T(z_Q))] + mean[−log(1 − σ(T(z_P)))]`, with the batches as
/// constants.
pub fn discriminator_loss<S: Real>(
    t: &Discriminator,
    params: &[S],
    posterior_batch: &[Vec<f64>],
    prior_batch: &[Vec<f64>],
) -> Result<S, AvbError> {
    if posterior_batch.is_empty() || prior_batch.is_empty() {
        return Err(AvbError::Config("discriminator batches must be non-empty".into()));
    }
    if let Some(z) = posterior_batch.iter().chain(prior_batch).find(|z| z.len() != t.input_dim()) {
        return Err(AvbError::Shape(format!(
            "latent of length {} for a critic over {}",
            z.len(),
            t.input_dim()
        )));
    }
    let q_terms: Vec<S> = posterior_batch
        .iter()
        .map(|z| (-t.logit_const(params, z)).softplus())
        .collect();
    let p_terms: Vec<S> = prior_batch.iter().map(|z| t.logit_const(params, z).softplus()).collect();
    Ok(S::sum(&q_terms) / posterior_batch.len() as f64 + S::sum(&p_terms) / prior_batch.len() as f64)
}

/// Rows of one generator step and the weight that makes their sum unbiased
/// for the whole training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub rows: Vec<usize>,
    pub data_weight: f64,
}

impl Minibatch {
    pub fn full(data: &Dataset) -> Self {
        Minibatch {
            rows: (0..data.len()).collect(),
            data_weight: 1.0,
        }
    }

    /// `size` rows drawn without replacement.
    pub fn sample<R: Rng + ?Sized>(data: &Dataset, size: usize, rng: &mut R) -> Self {
        if size >= data.len() {
            return Minibatch::full(data);
        }
        let rows = rand::seq::index::sample(rng, data.len(), size).into_vec();
        Minibatch {
            data_weight: data.len() as f64 / size as f64,
            rows,
        }
    }
}

/// `mean_k [T(z_k) − log p(y, b_k | z_k) − H(q(b))]` over the given noise.
///
/// The hyper prior enters as `−log P_ψ(z̄) + log P_ψ(z̄)|value` with `z̄` the
/// draw held constant, which leaves the value at the critic-based estimate
/// while giving `ψ` the gradient of the prior term.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<'t>(
    data: &Dataset,
    batch: &Minibatch,
    q: &InferenceNet,
    q_params: &[Var<'t>],
    t: &Discriminator,
    t_params: &[Var<'t>],
    h: &HyperPrior,
    h_params: &[Var<'t>],
    noise: &[LatentNoise],
    truncation: &TruncationConfig,
) -> Result<Var<'t>, AvbError> {
    if noise.is_empty() {
        return Err(AvbError::Config("need at least one latent draw".into()));
    }
    if t.input_dim() != q.output_dim() || h.dim() != q.output_dim() {
        return Err(AvbError::Shape(format!(
            "inference output {} vs critic input {} vs prior dim {}",
            q.output_dim(),
            t.input_dim(),
            h.dim()
        )));
    }
    let tape = q_params[0].tape();
    let mut per_draw = Vec::with_capacity(noise.len());
    for n in noise {
        let z = q.transform(q_params, n)?;
        let global = z.global_vector();
        let log_lik = model_log_likelihood_rows(data, &batch.rows, batch.data_weight, &z, truncation)?;
        let mut loss = t.logit(t_params, &global) - log_lik;
        if let Some(entropy) = q.group_entropy(q_params) {
            loss = loss - entropy;
        }
        let frozen: Vec<Var<'t>> = global.iter().map(|v| tape.constant(v.value())).collect();
        let log_prior = h.log_density(h_params, &frozen);
        loss = loss - log_prior + log_prior.value();
        per_draw.push(loss);
    }
    Ok(Var::sum(&per_draw) / noise.len() as f64)
}

/// Loss value and the gradient buffer of every network after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub loss: f64,
    pub inference: Vec<f64>,
    pub critic: Vec<f64>,
    pub hyper: Vec<f64>,
}

/// Generator loss and gradients for a minibatch and fresh noise. Critic
/// parameters sit on the tape as constants.
pub fn generator_loss<R: Rng + ?Sized>(
    data: &Dataset,
    batch: &Minibatch,
    q: &InferenceNet,
    t: &Discriminator,
    h: &HyperPrior,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepGradients, AvbError> {
    let noise: Vec<LatentNoise> = (0..cfg.latent_draws)
        .map(|_| LatentNoise::draw(q.noise_dim(), q.n_groups, rng))
        .collect();
    with_scratch_tape(|tape| {
        let qv = q.params.on_tape(tape, true);
        let tv = t.params.on_tape(tape, false);
        let hv = h.on_tape(tape);
        let loss = generator_objective(data, batch, q, &qv, t, &tv, h, &hv, &noise, &cfg.truncation)?;
        let grads = tape.backward(loss)?;
        Ok(StepGradients {
            loss: loss.value(),
            inference: grads.wrt_all(&qv),
            critic: grads.wrt_all(&tv),
            hyper: grads.wrt_all(&hv),
        })
    })
}

thread_local! {
    static SCRATCH: Tape = Tape::new();
}

/// Runs `f` on a cleared per-thread tape, so repeated steps reuse its
/// buffers. `f` must not call back into this function.
fn with_scratch_tape<T>(f: impl FnOnce(&Tape) -> T) -> T {
    SCRATCH.with(|tape| {
        tape.reset();
        f(tape)
    })
}

/// Critic loss and gradients on fresh posterior and prior batches. Only the
/// critic is on the tape, so the other buffers are zero.
pub fn critic_step_gradients<R: Rng + ?Sized>(
    q: &InferenceNet,
    t: &Discriminator,
    h: &HyperPrior,
    batch_size: usize,
    rng: &mut R,
) -> Result<StepGradients, AvbError> {
    let posterior: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| sample_posterior(q, rng).global_vector())
        .collect();
    let prior: Vec<Vec<f64>> = (0..batch_size).map(|_| sample_prior(h, rng)).collect();
    with_scratch_tape(|tape| {
        let tv = t.params.on_tape(tape, true);
        let loss = discriminator_loss(t, &tv, &posterior, &prior)?;
        let grads = tape.backward(loss)?;
        Ok(StepGradients {
            loss: loss.value(),
            inference: vec![0.0; q.params.len()],
            critic: grads.wrt_all(&tv),
            hyper: vec![0.0; h.params.len()],
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub minibatch_size: usize,
    pub outer_steps: usize,
    pub truncation: TruncationConfig,
    pub inference_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    pub hyper_optimizer: AdamConfig,
    pub seed: u64,
    /// Posterior draws stored in the fit.
    pub latent_sample_count: usize,
    /// Latent draws averaged in each generator step.
    pub latent_draws: usize,
    pub critic_batch_size: usize,
    pub noise_dim: usize,
    pub inference_hidden: usize,
    pub critic_hidden: Vec<usize>,
    /// Scale of the initial output-layer weights of the inference network.
    pub inference_output_scale: f64,
    /// Initial `log` scale of every group posterior.
    pub group_log_scale_init: f64,
    pub fixed_effects: FixedEffectsSpec,
    pub hyper_prior: HyperPriorMode,
    /// Keep the critic at its initial parameters.
    pub freeze_critic: bool,
    /// Generator steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    /// Steps before validation may select a checkpoint or stop training.
    pub min_steps: usize,
    /// Fixed latent draws used for the validation likelihood.
    pub validation_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_critic: 3,
            minibatch_size: 256,
            outer_steps: 5000,
            truncation: TruncationConfig::default(),
            inference_optimizer: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            critic_optimizer: AdamConfig::default(),
            hyper_optimizer: AdamConfig::default(),
            seed: 0,
            latent_sample_count: 1000,
            latent_draws: 1,
            critic_batch_size: 128,
            noise_dim: 8,
            inference_hidden: 32,
            critic_hidden: vec![32, 32],
            inference_output_scale: 0.1,
            group_log_scale_init: -2.0,
            fixed_effects: FixedEffectsSpec::default(),
            hyper_prior: HyperPriorMode::default(),
            freeze_critic: false,
            eval_every: 50,
            patience: 10,
            validation_draws: 16,
            min_steps: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AvbError> {
        let positive = [
            ("n_critic", self.n_critic),
            ("outer_steps", self.outer_steps),
            ("minibatch_size", self.minibatch_size),
            ("latent_sample_count", self.latent_sample_count),
            ("latent_draws", self.latent_draws),
            ("critic_batch_size", self.critic_batch_size),
            ("noise_dim", self.noise_dim),
            ("eval_every", self.eval_every),
            ("validation_draws", self.validation_draws),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AvbError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.critic_hidden.contains(&0) {
            return Err(AvbError::Config("critic hidden widths must be >= 1".into()));
        }
        if !(self.inference_output_scale >= 0.0) || !self.group_log_scale_init.is_finite() {
            return Err(AvbError::Config("initial scales must be finite".into()));
        }
        self.truncation.validate()?;
        for (name, adam) in [
            ("inference", self.inference_optimizer),
            ("critic", self.critic_optimizer),
            ("hyper", self.hyper_optimizer),
        ] {
            AdamState::new(0, adam).map_err(|e| AvbError::Config(format!("{name} optimizer: {e}")))?;
        }
        Ok(())
    }
}

/// Parameters of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub inference: InferenceNet,
    pub discriminator: Discriminator,
    pub hyper_prior: HyperPrior,
}

/// Networks and optimizer state between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub inference: InferenceNet,
    pub discriminator: Discriminator,
    pub hyper_prior: HyperPrior,
    inference_adam: AdamState,
    critic_adam: AdamState,
    hyper_adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
}

impl TrainState {
    /// Fresh networks for `data`, with the intercept output starting at
    /// `log(mean y)`.
    pub fn new(data: &Dataset, cfg: &TrainConfig) -> Result<Self, AvbError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(AvbError::Config("training data is empty".into()));
        }
        data.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_weights = cfg.fixed_effects.n_weights(data.n_covariates);
        let mut inference = InferenceNet::new(
            cfg.noise_dim,
            cfg.inference_hidden,
            n_weights,
            data.group_count,
            cfg.inference_output_scale,
            &mut rng,
        );
        let mean_y = data.responses.iter().sum::<f64>() / data.len() as f64;
        inference.output_bias_mut()[0] = mean_y.max(1e-8).ln();
        let (_, log_scale) = inference.group_ranges();
        inference.params.values_mut()[log_scale].fill(cfg.group_log_scale_init);
        let discriminator = Discriminator::new(global_dim(n_weights), &cfg.critic_hidden, &mut rng);
        let hyper_prior = HyperPrior::for_model(n_weights, cfg.hyper_prior);
        Self::from_parts(inference, discriminator, hyper_prior, cfg, rng)
    }

    /// Starts from given networks, e.g. a checkpoint.
    pub fn from_parts(
        inference: InferenceNet,
        discriminator: Discriminator,
        hyper_prior: HyperPrior,
        cfg: &TrainConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self, AvbError> {
        let adam = |len, c| AdamState::new(len, c).map_err(|e| AvbError::Config(e.to_string()));
        Ok(TrainState {
            inference_adam: adam(inference.params.len(), cfg.inference_optimizer)?,
            critic_adam: adam(discriminator.params.len(), cfg.critic_optimizer)?,
            hyper_adam: adam(hyper_prior.params.len(), cfg.hyper_optimizer)?,
            inference,
            discriminator,
            hyper_prior,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            inference: self.inference.clone(),
            discriminator: self.discriminator.clone(),
            hyper_prior: self.hyper_prior.clone(),
        }
    }

    fn abort(&self, last_good: &Checkpoint, detail: String) -> AvbError {
        AvbError::NonFinite {
            step: self.step,
            detail,
            checkpoint: Box::new(last_good.clone()),
        }
    }

    /// `n_critic` critic updates followed by one update of `θ` and `ψ`.
    /// Returns the last critic loss and the generator loss.
    pub fn outer_step(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64), AvbError> {
        let step = self.step;
        let optim = |source| AvbError::Optim { step, source };
        let mut critic_loss = f64::NAN;
        for _ in 0..cfg.n_critic {
            let g = critic_step_gradients(
                &self.inference,
                &self.discriminator,
                &self.hyper_prior,
                cfg.critic_batch_size,
                &mut self.rng,
            )?;
            critic_loss = g.loss;
            if !cfg.freeze_critic {
                self.critic_adam
                    .step(&mut self.discriminator.params, &g.critic)
                    .map_err(optim)?;
            }
        }
        let batch = Minibatch::sample(data, cfg.minibatch_size, &mut self.rng);
        let g = generator_loss(
            data,
            &batch,
            &self.inference,
            &self.discriminator,
            &self.hyper_prior,
            cfg,
            &mut self.rng,
        )?;
        if !g.loss.is_finite() {
            return Err(AvbError::Config(format!("generator loss is {}", g.loss)));
        }
        self.inference_adam
            .step(&mut self.inference.params, &g.inference)
            .map_err(optim)?;
        self.hyper_adam.step(&mut self.hyper_prior.params, &g.hyper).map_err(optim)?;
        self.step += 1;
        Ok((critic_loss, g.loss))
    }
}

/// Loss traces, one entry per outer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
    /// `(step, mean validation negative log-likelihood)`.
    #[serde(default)]
    pub validation_nll: Vec<(usize, f64)>,
    /// Step whose parameters were kept.
    pub best_step: usize,
}

impl Traces {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,discriminator_loss,generator_loss,validation_nll\n");
        let mut valid = self.validation_nll.iter().peekable();
        for (k, (d, g)) in self.discriminator_loss.iter().zip(&self.generator_loss).enumerate() {
            let v = match valid.peek() {
                Some(&&(s, v)) if s == k + 1 => {
                    valid.next();
                    v.to_string()
                }
                _ => String::new(),
            };
            out.push_str(&format!("{},{d},{g},{v}\n", k + 1));
        }
        out
    }
}

/// Posterior draws in constrained form: columns `w0..`, `p_index`,
/// `dispersion`, `sigma_b`, `b0..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DrawTable {
    pub fn new(n_weights: usize, n_groups: usize) -> Self {
        let mut columns: Vec<String> = (0..n_weights).map(|k| format!("w{k}")).collect();
        columns.extend(["p_index", "dispersion", "sigma_b"].map(String::from));
        columns.extend((0..n_groups).map(|g| format!("b{g}")));
        DrawTable {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn n_weights(&self) -> usize {
        self.columns.iter().take_while(|c| c.starts_with('w')).count()
    }

    pub fn n_groups(&self) -> usize {
        self.columns.len() - self.n_weights() - 3
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, z: &LatentAssignment) {
        let mut row = z.fixed_weights.clone();
        row.extend([z.p_index(), z.dispersion(), z.sigma_b()]);
        row.extend(z.random_effects());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.rows[i][..self.n_weights()]
    }

    pub fn p_index(&self, i: usize) -> f64 {
        self.rows[i][self.n_weights()]
    }

    pub fn dispersion(&self, i: usize) -> f64 {
        self.rows[i][self.n_weights() + 1]
    }

    pub fn sigma_b(&self, i: usize) -> f64 {
        self.rows[i][self.n_weights() + 2]
    }

    pub fn effects(&self, i: usize) -> &[f64] {
        &self.rows[i][self.n_weights() + 3..]
    }

    /// Column means.
    pub fn means(&self) -> Vec<f64> {
        let s = self.rows.len().max(1) as f64;
        (0..self.columns.len())
            .map(|k| self.rows.iter().map(|r| r[k]).sum::<f64>() / s)
            .collect()
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        Some(c.iter().sum::<f64>() / c.len().max(1) as f64)
    }

    /// Weight means `(w0, w1, ..)`.
    pub fn weight_means(&self) -> Vec<f64> {
        self.means()[..self.n_weights()].to_vec()
    }

    /// Group effects of every draw.
    pub fn effect_draws(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.effects(i).to_vec()).collect()
    }

    /// Draw `i` as unconstrained latents.
    pub fn latent(&self, i: usize) -> Result<LatentAssignment, ModelError> {
        LatentAssignment::from_constrained(
            self.weights(i).to_vec(),
            self.p_index(i),
            self.dispersion(i),
            self.sigma_b(i),
            self.effects(i),
        )
    }
}

/// What a fit needs to interpret new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub response_name: String,
    pub column_names: Vec<String>,
    pub group_name: Option<String>,
    pub group_labels: Vec<String>,
    pub standardization: Standardization,
    pub fixed_effects: FixedEffectsSpec,
    pub n_train: usize,
    pub train_mean_response: f64,
}

impl FitMetadata {
    /// Metadata for a model trained on `data`, already standardized by
    /// `standardization`.
    pub fn describe(data: &Dataset, standardization: Standardization, fixed_effects: FixedEffectsSpec) -> Self {
        FitMetadata {
            response_name: data.response_name.clone(),
            column_names: data.column_names.clone(),
            group_name: data.group_name.clone(),
            group_labels: data.group_labels.clone(),
            standardization,
            fixed_effects,
            n_train: data.len(),
            train_mean_response: data.responses.iter().sum::<f64>() / data.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub metadata: FitMetadata,
    pub config: TrainConfig,
    pub draws: DrawTable,
    pub traces: Traces,
    pub networks: Checkpoint,
}

impl FitResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AvbError> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AvbError> {
        read_json(path.as_ref())
    }

    /// Predictions for raw (unstandardized) rows; columns must match the
    /// training columns by name.
    pub fn predict(&self, raw: &Dataset, seed: u64) -> Result<Vec<Prediction>, AvbError> {
        if raw.column_names != self.metadata.column_names {
            let missing: Vec<&String> = self
                .metadata
                .column_names
                .iter()
                .filter(|c| !raw.column_names.contains(c))
                .collect();
            let extra: Vec<&String> = raw
                .column_names
                .iter()
                .filter(|c| !self.metadata.column_names.contains(c))
                .collect();
            return Err(AvbError::Shape(format!(
                "columns differ from training: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let data = self
            .metadata
            .standardization
            .apply(raw)
            .map_err(|e| AvbError::Shape(e.to_string()))?;
        posterior_predict(&self.draws, &self.metadata.group_labels, &data, seed)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AvbError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| AvbError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| AvbError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AvbError> {
    let text = std::fs::read_to_string(path).map_err(|source| AvbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| AvbError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Mean over `noise` draws of the predictive density, as `−mean_i log p̂(y_i)`.
fn validation_nll(
    q: &InferenceNet,
    valid: &Dataset,
    noise: &[LatentNoise],
    truncation: &TruncationConfig,
) -> Result<f64, AvbError> {
    let rows: Vec<usize> = (0..valid.len()).collect();
    let per_draw = noise
        .iter()
        .map(|n| {
            let z = q.transform(q.params.values(), n)?;
            Ok(observation_log_likelihoods_rows(valid, &rows, &z, truncation)?)
        })
        .collect::<Result<Vec<Vec<f64>>, AvbError>>()?;
    let log_s = (noise.len() as f64).ln();
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let terms: Vec<f64> = per_draw.iter().map(|d| d[i]).collect();
            log_sum_exp_f64(&terms) - log_s
        })
        .sum();
    Ok(-total / valid.len().max(1) as f64)
}

/// Trains on all of `data` for `outer_steps` steps.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<FitResult, AvbError> {
    let state = TrainState::new(data, cfg)?;
    train_from(state, data, None, cfg)
}

/// Trains on `data`, stopping early when the validation likelihood stops
/// improving and keeping the best parameters.
pub fn train_with_validation(data: &Dataset, valid: &Dataset, cfg: &TrainConfig) -> Result<FitResult, AvbError> {
    let state = TrainState::new(data, cfg)?;
    train_from(state, data, Some(valid), cfg)
}

/// Runs the alternating optimization from `state` and draws the posterior.
pub fn train_from(
    mut state: TrainState,
    data: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<FitResult, AvbError> {
    cfg.validate()?;
    if let Some(v) = valid {
        if v.n_covariates != data.n_covariates || v.group_count != data.group_count {
            return Err(AvbError::Shape("validation set layout differs from training".into()));
        }
    }
    let q = &state.inference;
    let validation_noise: Vec<LatentNoise> = (0..cfg.validation_draws)
        .map(|_| LatentNoise::draw(q.noise_dim(), q.n_groups, &mut state.rng))
        .collect();
    let mut traces = Traces::default();
    let mut last_good = state.checkpoint();
    let mut best = (f64::INFINITY, state.checkpoint());
    let mut stale = 0;
    for _ in 0..cfg.outer_steps {
        let (d_loss, g_loss) = match state.outer_step(data, cfg) {
            Ok(losses) => losses,
            Err(AvbError::Optim { source, .. }) => return Err(state.abort(&last_good, source.to_string())),
            Err(AvbError::Config(detail)) => return Err(state.abort(&last_good, detail)),
            Err(AvbError::Autodiff(e)) => return Err(state.abort(&last_good, e.to_string())),
            Err(AvbError::Model(ModelError::Overflow { index, eta })) => {
                return Err(state.abort(&last_good, format!("row {index}: linear predictor {eta}")))
            }
            Err(e) => return Err(e),
        };
        if !d_loss.is_finite() {
            return Err(state.abort(&last_good, format!("discriminator loss is {d_loss}")));
        }
        traces.discriminator_loss.push(d_loss);
        traces.generator_loss.push(g_loss);
        last_good = state.checkpoint();
        let step = state.step_count();
        if let Some(v) = valid.filter(|_| step.is_multiple_of(cfg.eval_every)) {
            let nll = validation_nll(&state.inference, v, &validation_noise, &cfg.truncation)?;
            log::debug!("step {step}: validation nll {nll:.6}");
            traces.validation_nll.push((step, nll));
            if step < cfg.min_steps {
                continue;
            }
            if nll < best.0 {
                best = (nll, state.checkpoint());
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log::info!("early stop at step {step}; keeping step {}", best.1.step);
                    break;
                }
            }
        }
    }
    let networks = if best.0.is_finite() { best.1 } else { state.checkpoint() };
    traces.best_step = networks.step;
    let mut draws = DrawTable::new(networks.inference.n_weights, networks.inference.n_groups);
    for _ in 0..cfg.latent_sample_count {
        let z = sample_posterior(&networks.inference, &mut state.rng);
        draws.push(&z);
    }
    let identity = Standardization::identity(data.n_covariates);
    Ok(FitResult {
        metadata: FitMetadata::describe(data, identity, cfg.fixed_effects),
        config: cfg.clone(),
        draws,
        traces,
        networks,
    })
}

/// Settings for training a critic between two fixed samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Learning rate at the last step relative to the first; decays
    /// geometrically.
    pub final_lr_fraction: f64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        CriticTrainConfig {
            steps: 10_000,
            batch_size: 256,
            optimizer: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.02,
        }
    }
}

/// Fits `t` to separate `sample_q` (label 1) from `sample_p` (label 0);
/// returns the loss trace.
pub fn train_critic<R, Q, P>(
    t: &mut Discriminator,
    mut sample_q: Q,
    mut sample_p: P,
    cfg: &CriticTrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>, AvbError>
where
    R: Rng + ?Sized,
    Q: FnMut(&mut R) -> Vec<f64>,
    P: FnMut(&mut R) -> Vec<f64>,
{
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.final_lr_fraction > 0.0) {
        return Err(AvbError::Config("critic training needs steps, batch size and a positive lr fraction".into()));
    }
    let mut adam = AdamState::new(t.params.len(), cfg.optimizer).map_err(|e| AvbError::Config(e.to_string()))?;
    let decay = cfg.final_lr_fraction.powf(1.0 / cfg.steps as f64);
    let mut trace = Vec::with_capacity(cfg.steps);
    let tape = Tape::new();
    for step in 0..cfg.steps {
        let posterior: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| sample_q(rng)).collect();
        let prior: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| sample_p(rng)).collect();
        tape.reset();
        let tv = t.params.on_tape(&tape, true);
        let loss = discriminator_loss(t, &tv, &posterior, &prior)?;
        let grads = tape.backward(loss)?;
        adam.step(&mut t.params, &grads.wrt_all(&tv))
            .map_err(|source| AvbError::Optim { step, source })?;
        adam.config.learning_rate *= decay;
        trace.push(loss.value());
    }
    Ok(trace)
}

/// Predictive summary for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Averages `μ` over the draws; quantiles come from one compound draw per
/// posterior draw. Rows whose group label is not in `group_labels` get a
/// fresh `σ_b ε` per draw.
pub fn posterior_predict(
    draws: &DrawTable,
    group_labels: &[String],
    data: &Dataset,
    seed: u64,
) -> Result<Vec<Prediction>, AvbError> {
    if draws.is_empty() {
        return Err(AvbError::Config("no posterior draws".into()));
    }
    let spec = FixedEffectsSpec::infer(draws.n_weights(), data.n_covariates)?;
    if draws.n_groups() != group_labels.len() {
        return Err(AvbError::Shape(format!(
            "{} effect columns for {} group labels",
            draws.n_groups(),
            group_labels.len()
        )));
    }
    let known: Vec<Option<usize>> = data
        .group_labels
        .iter()
        .map(|l| group_labels.iter().position(|k| k == l))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = draws.len();
    let mut out = Vec::with_capacity(data.len());
    let mut samples = vec![0.0; s];
    for i in 0..data.len() {
        let group = data.group_of(i).map(|g| known[g]);
        let mut mean = 0.0;
        for (k, sample) in samples.iter_mut().enumerate() {
            let b = match group {
                Some(Some(g)) => draws.effects(k)[g],
                Some(None) => draws.sigma_b(k) * rng.sample::<f64, _>(StandardNormal),
                None => 0.0,
            };
            let eta = spec.evaluate(draws.weights(k), data.row(i)) + b;
            let mu = eta.exp();
            if !mu.is_finite() || mu <= 0.0 {
                return Err(ModelError::Overflow { index: i, eta }.into());
            }
            mean += mu;
            let c = to_compound(&EdmParams::new(mu, draws.p_index(k), draws.dispersion(k))?)?;
            *sample = tweedie_sample(&c, &mut rng)?;
        }
        samples.sort_by(f64::total_cmp);
        out.push(Prediction {
            mean: mean / s as f64,
            q05: quantile_sorted(&samples, 0.05),
            q50: quantile_sorted(&samples, 0.5),
            q95: quantile_sorted(&samples, 0.95),
        });
    }
    Ok(out)
}

pub fn predictions_to_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("row,mean,q05,q50,q95\n");
    for (i, p) in predictions.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{},{}\n", p.mean, p.q05, p.q50, p.q95));
    }
    out
}

/// Draws `n` values of a standard normal, for samplers passed to
/// [`train_critic`].
pub fn normal_vector<R: Rng + ?Sized>(n: usize, mean: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| mean + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::data::{simulate_dataset, SimTruth};

    fn toy_data() -> Dataset {
        let rows = vec![
            vec![0.5, -1.0],
            vec![1.5, 0.2],
            vec![-0.3, 0.7],
            vec![0.0, 0.0],
            vec![2.0, -0.4],
        ];
        Dataset::from_rows(vec![0.0, 2.3, 0.7, 0.0, 5.1], &rows, vec![0, 1, 0, 1, 1], 2).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_gives_the_center_of_the_constraints() {
        let mut q = InferenceNet::new(8, 32, 3, 2, 1.0, &mut rng(1));
        q.params.values_mut().fill(0.0);
        let z = sample_posterior(&q, &mut rng(2));
        assert_eq!(z.fixed_weights, vec![0.0; 3]);
        assert_eq!(z.p_index(), 1.5);
        assert_eq!(z.dispersion(), 1.0);
        assert_eq!(z.sigma_b(), 1.0);
        assert_eq!(q.output_dim(), 2 + 1 + 3);
    }

    #[test]
    fn posterior_draws_are_deterministic_per_seed() {
        let q = InferenceNet::new(8, 32, 3, 2, 1.0, &mut rng(1));
        assert_eq!(sample_posterior(&q, &mut rng(5)), sample_posterior(&q, &mut rng(5)));
        assert_ne!(sample_posterior(&q, &mut rng(5)), sample_posterior(&q, &mut rng(6)));
    }

    #[test]
    fn prior_examples() {
        let h = HyperPrior::standard(3);
        assert_eq!(h.transform(h.params.values(), &[0.0; 3]), vec![0.0; 3]);
        let mut h = HyperPrior::standard(1);
        h.params.values_mut().copy_from_slice(&[0.7, 0.4_f64.ln()]);
        let mut r = rng(3);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_prior(&h, &mut r)[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 3.0 * 0.4 / (n as f64).sqrt());
        let report = finite_diff_check(
            |_, v| {
                let prior = HyperPrior::standard(2);
                let draws = prior.transform(v, &[0.3, -1.2]);
                draws[0] + draws[1]
            },
            &[0.1, -0.5, 0.2, -0.3],
            1e-5,
        )
        .unwrap();
        assert!((report.coordinates[0].numeric - 1.0).abs() < 1e-8);
        assert!((report.coordinates[1].numeric - 1.0).abs() < 1e-8);
        assert!(report.max_rel_error < 1e-8);
    }

    fn zero_critic(dim: usize) -> Discriminator {
        let mut t = Discriminator::new(dim, &[32, 32], &mut rng(0));
        t.params.values_mut().fill(0.0);
        t
    }

    #[test]
    fn discriminator_loss_examples() {
        let t = zero_critic(2);
        let q = vec![vec![0.3, 1.0], vec![-2.0, 0.5]];
        let p = vec![vec![1.0, 1.0]];
        let loss: f64 = discriminator_loss(&t, t.params.values(), &q, &p).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-15);

        // T(z) = 20 tanh(10 tanh(10 z)) in one dimension
        let mut sep = zero_critic(1);
        let set = |t: &mut Discriminator, l: usize, k: usize, v: f64| {
            t.params.get_mut(&format!("critic.layer{l}.weight")).unwrap()[k] = v;
        };
        set(&mut sep, 0, 0, 10.0);
        set(&mut sep, 1, 0, 10.0);
        set(&mut sep, 2, 0, 20.0);
        let loss: f64 = discriminator_loss(&sep, sep.params.values(), &[vec![1.0]], &[vec![-1.0]]).unwrap();
        assert!(loss < 1e-8, "{loss}");

        // swapping the batches and negating T leaves the loss unchanged
        let t = Discriminator::new(2, &[8], &mut rng(9));
        let mut neg = t.clone();
        let last = neg.net.sizes.len() - 2;
        for name in [format!("critic.layer{last}.weight"), format!("critic.layer{last}.bias")] {
            neg.params.get_mut(&name).unwrap().iter_mut().for_each(|v| *v = -*v);
        }
        let a: f64 = discriminator_loss(&t, t.params.values(), &q, &p).unwrap();
        let b: f64 = discriminator_loss(&neg, neg.params.values(), &p, &q).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(discriminator_loss::<f64>(&t, t.params.values(), &[], &p).is_err());
    }

    fn fixed_latent_net(n_weights: usize, n_groups: usize, bias: &[f64]) -> InferenceNet {
        let mut q = InferenceNet::new(8, 32, n_weights, n_groups, 1.0, &mut rng(0));
        q.params.values_mut().fill(0.0);
        q.output_bias_mut().copy_from_slice(bias);
        q
    }

    #[test]
    fn generator_loss_with_zero_critic_is_the_negative_log_likelihood() {
        // λ = μ^{2−𝒫} / (φ(2−𝒫)) = 1 at μ = 1, 𝒫 = 1.5, φ = 2
        let data = Dataset::from_rows(vec![0.0], &[vec![]], vec![], 0).unwrap();
        let q = fixed_latent_net(1, 0, &[0.0, 0.0, 2f64.ln(), 0.0]);
        let t = zero_critic(4);
        let h = HyperPrior::for_model(1, HyperPriorMode::Frozen);
        let cfg = TrainConfig::default();
        let g = generator_loss(&data, &Minibatch::full(&data), &q, &t, &h, &cfg, &mut rng(1)).unwrap();
        assert!((g.loss - 1.0).abs() < 1e-14, "{}", g.loss);
    }

    #[test]
    fn generator_gradient_matches_central_differences() {
        let data = toy_data();
        let mut r = rng(7);
        let q = InferenceNet::new(3, 4, 3, 2, 0.3, &mut r);
        let t = Discriminator::new(6, &[5, 4], &mut r);
        let mut h = HyperPrior::for_model(3, HyperPriorMode::All);
        h.params.values_mut().iter_mut().enumerate().for_each(|(k, v)| *v = 0.05 * k as f64 - 0.2);
        let noise: Vec<LatentNoise> = (0..2).map(|_| LatentNoise::draw(3, 2, &mut r)).collect();
        let batch = Minibatch::full(&data);
        let mut x = q.params.values().to_vec();
        x.extend_from_slice(t.params.values());
        x.extend_from_slice(h.params.values());
        let (nq, nt) = (q.params.len(), t.params.len());
        // the stop-gradient in the prior term has no finite-difference
        // counterpart, so the critic is checked on its own objective below
        let report = finite_diff_check(
            |_, v| {
                generator_objective(
                    &data,
                    &batch,
                    &q,
                    &v[..nq],
                    &t,
                    &v[nq..nq + nt],
                    &h,
                    &v[nq + nt..],
                    &noise,
                    &TruncationConfig::default(),
                )
                .unwrap()
            },
            &x,
            1e-5,
        )
        .unwrap();
        let worst = report.coordinates[..nq + nt]
            .iter()
            .map(|c| c.rel_error)
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
        assert!(report.non_finite.is_empty());
    }

    #[test]
    fn hyper_prior_gradient_is_that_of_the_negative_log_prior() {
        let data = toy_data();
        let mut r = rng(8);
        let q = InferenceNet::new(3, 4, 3, 2, 0.3, &mut r);
        let t = Discriminator::new(6, &[5], &mut r);
        let h = HyperPrior::for_model(3, HyperPriorMode::All);
        let noise = vec![LatentNoise::draw(3, 2, &mut r)];
        let z = q.transform(q.params.values(), &noise[0]).unwrap().global_vector();
        let tape = Tape::new();
        let qv = q.params.on_tape(&tape, false);
        let tv = t.params.on_tape(&tape, false);
        let hv = h.on_tape(&tape);
        let loss = generator_objective(&data, &Minibatch::full(&data), &q, &qv, &t, &tv, &h, &hv, &noise, &TruncationConfig::default()).unwrap();
        let got = tape.backward(loss).unwrap().wrt_all(&hv);
        let report = finite_diff_check(|_, v| -h.log_density(v, &v[0].tape().constants(&z)), h.params.values(), 1e-5).unwrap();
        for (g, c) in got.iter().zip(&report.coordinates) {
            assert!((g - c.numeric).abs() < 1e-6 * c.numeric.abs().max(1.0));
        }
    }

    #[test]
    fn discriminator_gradient_matches_central_differences() {
        let mut r = rng(10);
        let t = Discriminator::new(3, &[6, 5], &mut r);
        let post: Vec<Vec<f64>> = (0..4).map(|_| normal_vector(3, 1.0, &mut r)).collect();
        let prior: Vec<Vec<f64>> = (0..5).map(|_| normal_vector(3, 0.0, &mut r)).collect();
        let report = finite_diff_check(
            |_, v| discriminator_loss(&t, v, &post, &prior).unwrap(),
            t.params.values(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn masked_gradient_buffers_are_exactly_zero() {
        let data = toy_data();
        let cfg = TrainConfig {
            critic_batch_size: 8,
            minibatch_size: 3,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&data, &cfg).unwrap();
        let mut r = rng(4);
        let c = critic_step_gradients(&state.inference, &state.discriminator, &state.hyper_prior, 8, &mut r).unwrap();
        assert!(c.inference.iter().chain(&c.hyper).all(|&g| g == 0.0));
        assert!(c.critic.iter().any(|&g| g != 0.0));
        let batch = Minibatch::sample(&data, 3, &mut r);
        let g = generator_loss(&data, &batch, &state.inference, &state.discriminator, &state.hyper_prior, &cfg, &mut r).unwrap();
        assert!(g.critic.iter().all(|&v| v == 0.0));
        assert!(g.inference.iter().any(|&v| v != 0.0));
        let dim = state.hyper_prior.dim();
        for (k, v) in g.hyper.iter().enumerate() {
            if !state.hyper_prior.trainable[k] {
                assert_eq!(*v, 0.0, "frozen hyper coordinate {k} (dim {dim})");
            }
        }
    }

    #[test]
    fn minibatch_weight_and_rows() {
        let data = toy_data();
        let b = Minibatch::sample(&data, 2, &mut rng(0));
        assert_eq!(b.rows.len(), 2);
        assert_eq!(b.data_weight, 2.5);
        assert_ne!(b.rows[0], b.rows[1]);
        assert_eq!(Minibatch::sample(&data, 10, &mut rng(0)), Minibatch::full(&data));
    }

    #[test]
    fn prediction_examples() {
        let data = Dataset::from_rows(vec![1.0], &[vec![0.0]], vec![], 0).unwrap();
        let mut draws = DrawTable::new(2, 0);
        draws.rows.push(vec![0.0, 0.0, 1.5, 1.0, 1.0]);
        let p = posterior_predict(&draws, &[], &data, 0).unwrap();
        assert_eq!(p[0].mean, 1.0);
        draws.rows.push(vec![3f64.ln(), 0.0, 1.5, 1.0, 1.0]);
        let p = posterior_predict(&draws, &[], &data, 0).unwrap();
        assert!((p[0].mean - 2.0).abs() < 1e-15);
        assert!(p[0].q05 <= p[0].q50 && p[0].q50 <= p[0].q95);
        let wide = Dataset::from_rows(vec![1.0], &[vec![0.0, 1.0]], vec![], 0).unwrap();
        assert!(posterior_predict(&draws, &[], &wide, 0).is_err());
    }

    #[test]
    fn unseen_groups_use_fresh_effects() {
        let mut data = Dataset::from_rows(vec![1.0, 1.0], &[vec![0.0], vec![0.0]], vec![0, 1], 2).unwrap();
        data.group_labels = vec!["known".into(), "new".into()];
        let mut draws = DrawTable::new(2, 1);
        for _ in 0..2000 {
            draws.rows.push(vec![0.0, 0.0, 1.5, 1.0, 0.5, 0.7]);
        }
        let p = posterior_predict(&draws, &["known".into()], &data, 3).unwrap();
        assert!((p[0].mean - 0.7f64.exp()).abs() < 1e-12);
        // E exp(σ ε) = exp(σ²/2)
        assert!((p[1].mean - 0.125f64.exp()).abs() < 0.05, "{}", p[1].mean);
    }

    #[test]
    fn draw_table_round_trips_latents() {
        let z = LatentAssignment {
            fixed_weights: vec![0.1, -0.4],
            raw_p: 0.3,
            raw_log_dispersion: -0.2,
            raw_log_sigma_b: 0.4,
            group_noise: vec![1.0, -0.5, 0.2],
        };
        let mut table = DrawTable::new(2, 3);
        table.push(&z);
        assert_eq!(table.n_weights(), 2);
        assert_eq!(table.n_groups(), 3);
        let back = table.latent(0).unwrap();
        assert!((back.raw_p - z.raw_p).abs() < 1e-12);
        for (a, b) in back.group_noise.iter().zip(&z.group_noise) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn smoke_training_is_finite_and_deterministic() {
        let truth = SimTruth {
            n_obs: 200,
            n_groups: 4,
            ..SimTruth::default()
        };
        let (data, _) = simulate_dataset(&truth, &mut rng(1)).unwrap();
        let cfg = TrainConfig {
            outer_steps: 200,
            latent_sample_count: 50,
            ..TrainConfig::default()
        };
        let a = train(&data, &cfg).unwrap();
        assert_eq!(a.traces.generator_loss.len(), 200);
        assert!(a.traces.generator_loss.iter().chain(&a.traces.discriminator_loss).all(|v| v.is_finite()));
        for i in 0..a.draws.len() {
            assert!(a.draws.p_index(i) > 1.0 && a.draws.p_index(i) < 2.0);
            assert!(a.draws.sigma_b(i) > 0.0 && a.draws.dispersion(i) > 0.0);
        }
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { n_critic: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { outer_steps: 0, ..TrainConfig::default() }.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"outer_steps": 7}"#).unwrap();
        assert_eq!(partial.outer_steps, 7);
        assert_eq!(partial.n_critic, 3);
    }
}
