//! The `tweedie-avb` command-line front end.
//!
//! Every subcommand reads an optional JSON [`RunConfig`], applies the flag
//! overrides, writes the resolved config next to its outputs and then runs.
//! Feeding the echoed config back through `--config` reproduces the outputs.
//!
//! | subcommand | reads | writes |
//! |---|---|---|
//! | `simulate` | — | `data.csv`, `truth.json` |
//! | `fit` | `data` | `fit.json`, `trace.csv`, `chain.json` with `--mcmc` |
//! | `evaluate` | `data`, `fit.json` | `gini_matrix.csv`, `gini_matrix.json`, `lorenz_<baseline>_<model>.csv`, `posterior_summary.json`, `posterior_p_hist.csv` |
//! | `predict` | `data`, `fit.json` | `predictions.csv` |
//!
//! Exit codes: 0 on success, 1 for configuration, input and I/O errors, 2
//! when training or sampling hits a numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avb::{predictions_to_csv, posterior_predict, train_with_validation, AvbError, FitResult, TrainConfig};
use crate::data::{load_csv, simulate_dataset, split_dataset, write_csv, DataError, SchemaConfig, SimTruth, SplitSpec};
use crate::evaluation::{
    gini_index, ordered_lorenz, pairwise_gini_matrix, posterior_summary, split_gini, EvaluationError, GiniMatrix,
    PosteriorSummary,
};
use crate::mcmc::{run_chain, ChainConfig, ChainResult, McmcError};
use crate::model::ModelError;
use crate::tweedie::TruncationConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Avb(#[from] AvbError),
    #[error(transparent)]
    Mcmc(#[from] McmcError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
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
    #[error("{path}: {detail}")]
    Input { path: PathBuf, detail: String },
    #[error("training aborted at step {step}: {detail}; last good parameters in {}", checkpoint.display())]
    Aborted {
        step: usize,
        detail: String,
        checkpoint: PathBuf,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Aborted { .. }
            | CliError::Avb(AvbError::NonFinite { .. })
            | CliError::Avb(AvbError::Model(ModelError::Overflow { .. }))
            | CliError::Mcmc(McmcError::Model(ModelError::Overflow { .. })) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tweedie-avb", version, about = "Bayesian Tweedie mixed models fitted with adversarial variational Bayes")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, training, sampling and prediction.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Input CSV.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Fit to evaluate or predict with; defaults to `<out>/fit.json`.
    #[arg(long, global = true)]
    pub fit: Option<PathBuf>,
    /// Terms in the truncated marginal likelihood.
    #[arg(long, global = true)]
    pub n_max: Option<usize>,
    /// Generator steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset from the mixed model.
    Simulate,
    /// Split, standardize and fit.
    Fit {
        /// Also run the Metropolis reference sampler on the training split.
        #[arg(long)]
        mcmc: bool,
    },
    /// Gini matrix, Lorenz curves and posterior summaries on the test split.
    Evaluate,
    /// Predictive means and quantiles for every row of `data`.
    Predict,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit { .. } => "fit",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
        }
    }
}

/// A model compared in `evaluate`: another fit, or a CSV with a `mean`
/// column aligned with the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraModel {
    pub name: String,
    #[serde(default)]
    pub fit: Option<PathBuf>,
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub histogram_bins: usize,
    /// Random halves of the test split used for Gini standard errors.
    pub gini_splits: usize,
    pub extra_models: Vec<ExtraModel>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            histogram_bins: 30,
            gini_splits: 20,
            extra_models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of `split`, `train` and `chain`.
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    /// Read from the CSV header when absent: `y` (or the first column) is
    /// the response, `group` the grouping column, names containing `=` are
    /// indicators and everything else is continuous.
    pub schema: Option<SchemaConfig>,
    pub split: SplitSpec,
    pub truth: SimTruth,
    pub train: TrainConfig,
    pub chain: ChainConfig,
    /// Overrides the truncation of `train` and `chain`.
    pub truncation: TruncationConfig,
    pub mcmc: bool,
    pub fit: Option<PathBuf>,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            schema: None,
            split: SplitSpec::default(),
            truth: SimTruth::default(),
            train: TrainConfig::default(),
            chain: ChainConfig::default(),
            truncation: TruncationConfig::default(),
            mcmc: false,
            fit: None,
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Applies the flags and propagates the shared settings.
    pub fn resolve(mut self, cli: &Cli) -> Result<Self, CliError> {
        if let Some(seed) = cli.seed {
            self.seed = seed;
        }
        if let Some(out) = &cli.out {
            self.out = out.clone();
        }
        if let Some(data) = &cli.data {
            self.data = Some(data.clone());
        }
        if let Some(fit) = &cli.fit {
            self.fit = Some(fit.clone());
        }
        if let Some(n) = cli.n_max {
            self.truncation.n_max = n;
        }
        if let Some(steps) = cli.steps {
            self.train.outer_steps = steps;
        }
        if let Command::Fit { mcmc: true } = cli.command {
            self.mcmc = true;
        }
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.chain.seed = self.seed;
        self.train.truncation = self.truncation;
        self.chain.truncation = self.truncation;
        self.chain.fixed_effects = self.train.fixed_effects;
        if self.schema.is_none() && cli.command != Command::Simulate {
            if let Some(data) = &self.data {
                self.schema = Some(infer_schema(data)?);
            }
        }
        Ok(self)
    }

    fn fit_path(&self) -> PathBuf {
        self.fit.clone().unwrap_or_else(|| self.out.join("fit.json"))
    }

    fn input(&self) -> Result<(&Path, &SchemaConfig), CliError> {
        match (&self.data, &self.schema) {
            (Some(d), Some(s)) => Ok((d, s)),
            _ => Err(CliError::Config("no input data; pass --data or set `data`".into())),
        }
    }

    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        self.truncation.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match command {
            Command::Simulate => self.truth.validate()?,
            Command::Fit { .. } => {
                self.input()?;
                self.split.validate()?;
                self.train.validate()?;
                if self.mcmc {
                    self.chain.validate()?;
                }
            }
            Command::Evaluate => {
                self.input()?;
                self.split.validate()?;
                if self.evaluate.gini_splits < 2 || self.evaluate.histogram_bins == 0 {
                    return Err(CliError::Config("need gini_splits >= 2 and histogram_bins >= 1".into()));
                }
                for m in &self.evaluate.extra_models {
                    if m.fit.is_some() == m.predictions.is_some() {
                        return Err(CliError::Config(format!(
                            "extra model `{}` needs exactly one of `fit` and `predictions`",
                            m.name
                        )));
                    }
                }
            }
            Command::Predict => {
                self.input()?;
            }
        }
        Ok(())
    }
}

/// Parses the process arguments, runs and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli)?;
    cfg.validate(cli.command)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(format!("{}_config.json", cli.command.name())), &cfg)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Fit { .. } => cmd_fit(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Predict => cmd_predict(&cfg),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (data, truth) = simulate_dataset(&cfg.truth, &mut rng)?;
    write_csv(cfg.out.join("data.csv"), &data)?;
    write_json(&cfg.out.join("truth.json"), &truth)?;
    log::info!("wrote {} rows to {}", data.len(), cfg.out.display());
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let (path, schema) = cfg.input()?;
    let raw = load_csv(path, schema)?;
    if raw.is_empty() {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            detail: "no rows".into(),
        });
    }
    let (train, valid, _) = split_dataset(&raw, &cfg.split)?;
    let (train, others, transform) = crate::data::standardize(&train, &[&valid])?;
    log::info!("fitting on {} rows, validating on {}", train.len(), others[0].len());
    let mut fit = match train_with_validation(&train, &others[0], &cfg.train) {
        Ok(fit) => fit,
        Err(AvbError::NonFinite {
            step,
            detail,
            checkpoint,
        }) => {
            let path = cfg.out.join("checkpoint.json");
            write_json(&path, &checkpoint)?;
            return Err(CliError::Aborted {
                step,
                detail,
                checkpoint: path,
            });
        }
        Err(e) => return Err(e.into()),
    };
    fit.metadata.standardization = transform;
    fit.save(cfg.out.join("fit.json"))?;
    write_text(&cfg.out.join("trace.csv"), &fit.traces.to_csv())?;
    log::info!(
        "best step {}; posterior mean p = {:.4}",
        fit.traces.best_step,
        fit.draws.mean_of("p_index").unwrap_or(f64::NAN)
    );
    if cfg.mcmc {
        let chain = run_chain(&train, &cfg.chain)?;
        chain.save(cfg.out.join("chain.json"))?;
        log::info!(
            "chain: {} draws; posterior mean p = {:.4}",
            chain.draws.len(),
            chain.draws.mean_of("p_index").unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// Posterior summaries written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub p_index: PosteriorSummary,
    pub dispersion: PosteriorSummary,
    pub sigma_b_squared: PosteriorSummary,
    pub fixed_weights: Vec<PosteriorSummary>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let (path, schema) = cfg.input()?;
    let fit_path = cfg.fit_path();
    let fit = load_fit(&fit_path)?;
    let raw = load_csv(path, schema)?;
    let (_, _, test) = split_dataset(&raw, &cfg.split)?;

    let mean_y = fit.metadata.train_mean_response;
    if !(mean_y > 0.0) {
        return Err(CliError::Input {
            path: fit_path,
            detail: "training responses are all zero".into(),
        });
    }
    let mut models: Vec<(String, Vec<f64>)> = vec![
        ("intercept".into(), vec![mean_y; test.len()]),
        ("avb".into(), prediction_means(&fit, &test, cfg.seed)?),
    ];
    let chain_path = fit_path.with_file_name("chain.json");
    if chain_path.exists() {
        let chain = ChainResult::load(&chain_path)?;
        let scaled = fit.metadata.standardization.apply(&test)?;
        let preds = posterior_predict(&chain.draws, &fit.metadata.group_labels, &scaled, cfg.seed)?;
        models.push(("mcmc".into(), preds.iter().map(|p| p.mean).collect()));
    }
    for extra in &cfg.evaluate.extra_models {
        let preds = match (&extra.fit, &extra.predictions) {
            (Some(f), _) => prediction_means(&load_fit(f)?, &test, cfg.seed)?,
            (None, Some(p)) => read_mean_column(p, test.len())?,
            (None, None) => unreachable!("validated"),
        };
        models.push((extra.name.clone(), preds));
    }

    let mut matrix = pairwise_gini_matrix(&test.responses, &models)?;
    matrix.standard_errors = Some(split_standard_errors(&test.responses, &models, cfg)?);
    write_text(&cfg.out.join("gini_matrix.csv"), &matrix.to_csv())?;
    write_json(&cfg.out.join("gini_matrix.json"), &matrix)?;
    for (i, (base_name, base)) in models.iter().enumerate() {
        for (j, (model_name, pred)) in models.iter().enumerate() {
            if i != j {
                let curve = ordered_lorenz(&test.responses, base, pred)?;
                write_text(&cfg.out.join(format!("lorenz_{base_name}_{model_name}.csv")), &curve.to_csv())?;
            }
        }
    }
    log_matrix(&matrix);

    let summary = summarize(&fit, cfg.evaluate.histogram_bins)?;
    write_json(&cfg.out.join("posterior_summary.json"), &summary)?;
    write_text(&cfg.out.join("posterior_p_hist.csv"), &summary.p_index.histogram.to_csv())?;
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let (path, schema) = cfg.input()?;
    let fit = load_fit(&cfg.fit_path())?;
    let raw = load_csv(path, schema)?;
    let preds = fit.predict(&raw, cfg.seed).map_err(|e| match e {
        AvbError::Shape(detail) => CliError::Input {
            path: path.to_path_buf(),
            detail,
        },
        e => e.into(),
    })?;
    write_text(&cfg.out.join("predictions.csv"), &predictions_to_csv(&preds))?;
    Ok(())
}

/// Summaries of `𝒫`, `φ`, `σ_b²` and the fixed weights.
pub fn summarize(fit: &FitResult, bins: usize) -> Result<SummaryReport, CliError> {
    let column = |name: &str| {
        fit.draws
            .column(name)
            .ok_or_else(|| CliError::Config(format!("fit has no `{name}` draws")))
    };
    let sigma2: Vec<f64> = column("sigma_b")?.iter().map(|s| s * s).collect();
    let fixed_weights = (0..fit.draws.n_weights())
        .map(|k| posterior_summary(&column(&format!("w{k}"))?, bins).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    Ok(SummaryReport {
        p_index: posterior_summary(&column("p_index")?, bins)?,
        dispersion: posterior_summary(&column("dispersion")?, bins)?,
        sigma_b_squared: posterior_summary(&sigma2, bins)?,
        fixed_weights,
    })
}

/// Posterior predictive means for raw rows.
pub fn prediction_means(fit: &FitResult, raw: &crate::model::Dataset, seed: u64) -> Result<Vec<f64>, CliError> {
    Ok(fit.predict(raw, seed)?.iter().map(|p| p.mean).collect())
}

/// Standard error of every off-diagonal Gini over random halves of the rows.
fn split_standard_errors(
    y: &[f64],
    models: &[(String, Vec<f64>)],
    cfg: &RunConfig,
) -> Result<Vec<Vec<Option<f64>>>, CliError> {
    let n = y.len();
    let half = (n / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subsets: Vec<Vec<usize>> = (0..cfg.evaluate.gini_splits)
        .map(|_| rand::seq::index::sample(&mut rng, n, half).into_vec())
        .collect();
    let k = models.len();
    let mut out = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let pick = |v: &[f64], rows: &[usize]| rows.iter().map(|&r| v[r]).collect::<Vec<f64>>();
            let split = split_gini(subsets.len(), |s| {
                let rows = &subsets[s];
                let curve = ordered_lorenz(&pick(y, rows), &pick(&models[i].1, rows), &pick(&models[j].1, rows))?;
                Ok::<f64, EvaluationError>(gini_index(&curve))
            });
            // A half with no claims has no curve; leave the entry empty.
            out[i][j] = split.ok().map(|s| s.standard_error);
        }
    }
    Ok(out)
}

fn log_matrix(matrix: &GiniMatrix) {
    for r in matrix.reports() {
        let se = r.standard_error.map(|s| format!(" (se {s:.4})")).unwrap_or_default();
        log::info!("gini {} vs {}: {:.4}{se}", r.baseline_name, r.model_name, r.gini);
    }
}

fn load_fit(path: &Path) -> Result<FitResult, CliError> {
    if !path.exists() {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            detail: "fit artifact not found; run `fit` first".into(),
        });
    }
    Ok(FitResult::load(path)?)
}

fn read_mean_column(path: &Path, expected: usize) -> Result<Vec<f64>, CliError> {
    let bad = |detail: String| CliError::Input {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "mean")
        .ok_or_else(|| bad("missing column `mean`".into()))?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let value = record.get(col).unwrap_or("");
        out.push(
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("row {row}: cannot parse {value:?}")))?,
        );
    }
    if out.len() != expected {
        return Err(bad(format!("{} predictions for {expected} test rows", out.len())));
    }
    Ok(out)
}

/// The default schema for a CSV, read from its header.
pub fn infer_schema(path: &Path) -> Result<SchemaConfig, CliError> {
    let bad = |detail: String| CliError::Input {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let response = if headers.iter().any(|h| h == "y") {
        "y".to_string()
    } else {
        headers.first().cloned().ok_or_else(|| bad("empty header".into()))?
    };
    let group = headers.iter().find(|h| *h == "group").cloned();
    let (indicators, fixed): (Vec<String>, Vec<String>) = headers
        .iter()
        .filter(|h| **h != response && Some(*h) != group.as_ref())
        .cloned()
        .partition(|h| h.contains('='));
    Ok(SchemaConfig {
        response_column: response,
        fixed_columns: fixed,
        group_column: group,
        categorical_columns: Vec::new(),
        indicator_columns: indicators,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_text(path, &text)
}
