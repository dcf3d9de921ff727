//! CSV ingestion, train/valid/test splitting, covariate standardization and
//! synthetic data with a known ground truth.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{group_labels, linear_predictor, ColumnKind, Dataset, ModelError};
use crate::tweedie::{to_compound, tweedie_sample, EdmParams, TweedieError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}, column `{column}`: cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row}: response {value} is negative or not finite")]
    InvalidResponse { path: PathBuf, row: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tweedie(#[from] TweedieError),
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub response_column: String,
    /// Numeric covariates, standardized before fitting.
    #[serde(default)]
    pub fixed_columns: Vec<String>,
    #[serde(default)]
    pub group_column: Option<String>,
    /// Expanded to drop-first indicator columns named `column=level`.
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    /// Numeric 0/1 columns that are already indicators and must not be
    /// standardized.
    #[serde(default)]
    pub indicator_columns: Vec<String>,
}

impl SchemaConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let covariates = self
            .fixed_columns
            .iter()
            .chain(&self.categorical_columns)
            .chain(&self.indicator_columns)
            .chain(&self.group_column);
        let mut seen = HashSet::new();
        for name in covariates {
            if *name == self.response_column {
                return Err(DataError::Config(format!(
                    "response column `{name}` is also listed as a covariate"
                )));
            }
            if !seen.insert(name) {
                return Err(DataError::Config(format!("column `{name}` is listed twice")));
            }
        }
        Ok(())
    }

    /// The schema that reads back a dataset written by [`write_csv`].
    pub fn for_dataset(data: &Dataset) -> SchemaConfig {
        let pick = |kind: ColumnKind| {
            data.column_names
                .iter()
                .zip(&data.column_kinds)
                .filter(|(_, k)| **k == kind)
                .map(|(n, _)| n.clone())
                .collect()
        };
        SchemaConfig {
            response_column: data.response_name.clone(),
            fixed_columns: pick(ColumnKind::Continuous),
            group_column: data.group_name.clone(),
            categorical_columns: Vec::new(),
            indicator_columns: pick(ColumnKind::OneHot),
        }
    }
}

/// Reads `path` into a [`Dataset`].
///
/// Design columns appear in the order: fixed, indicator, then the expanded
/// categoricals. Group labels and categorical levels are sorted before
/// encoding.
pub fn load_csv(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<Dataset, DataError> {
    schema.validate()?;
    let path = path.as_ref();
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let position = |column: &str| {
        headers
            .iter()
            .position(|h| h.trim() == column)
            .ok_or_else(|| DataError::MissingColumn {
                path: path.to_path_buf(),
                column: column.to_string(),
            })
    };
    let response_at = position(&schema.response_column)?;
    let numeric_at: Vec<usize> = schema
        .fixed_columns
        .iter()
        .chain(&schema.indicator_columns)
        .map(|c| position(c))
        .collect::<Result<_, _>>()?;
    let categorical_at: Vec<usize> = schema
        .categorical_columns
        .iter()
        .map(|c| position(c))
        .collect::<Result<_, _>>()?;
    let group_at = schema.group_column.as_deref().map(position).transpose()?;

    let parse = |row: usize, at: usize, raw: &str| {
        raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            row,
            column: headers[at].to_string(),
            value: raw.to_string(),
        })
    };

    let mut responses = Vec::new();
    let mut numeric = Vec::new();
    let mut categorical: Vec<Vec<String>> = vec![Vec::new(); categorical_at.len()];
    let mut groups = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = r + 1;
        let y = parse(row, response_at, &record[response_at])?;
        if !(y >= 0.0) || !y.is_finite() {
            return Err(DataError::InvalidResponse {
                path: path.to_path_buf(),
                row,
                value: y,
            });
        }
        responses.push(y);
        for &at in &numeric_at {
            numeric.push(parse(row, at, &record[at])?);
        }
        for (k, &at) in categorical_at.iter().enumerate() {
            categorical[k].push(record[at].trim().to_string());
        }
        if let Some(at) = group_at {
            groups.push(record[at].trim().to_string());
        }
    }

    let m = responses.len();
    let n_numeric = numeric_at.len();
    let mut columns: Vec<Vec<f64>> = (0..n_numeric)
        .map(|k| (0..m).map(|i| numeric[i * n_numeric + k]).collect())
        .collect();
    let mut column_names: Vec<String> = schema
        .fixed_columns
        .iter()
        .chain(&schema.indicator_columns)
        .cloned()
        .collect();
    let mut column_kinds = vec![ColumnKind::Continuous; schema.fixed_columns.len()];
    column_kinds.resize(n_numeric, ColumnKind::OneHot);
    for (name, values) in schema.categorical_columns.iter().zip(&categorical) {
        let (levels, codes) = encode_labels(values);
        for (level_code, level) in levels.iter().enumerate().skip(1) {
            columns.push(codes.iter().map(|&c| f64::from(u8::from(c == level_code))).collect());
            column_names.push(format!("{name}={level}"));
            column_kinds.push(ColumnKind::OneHot);
        }
    }
    let (labels, group_index) = match group_at {
        Some(_) => encode_labels(&groups),
        None => (Vec::new(), Vec::new()),
    };
    let d = columns.len();
    let data = Dataset {
        responses,
        fixed_design: (0..m).flat_map(|i| columns.iter().map(move |c| c[i])).collect(),
        n_covariates: d,
        group_count: labels.len(),
        group_index,
        column_names,
        column_kinds,
        group_labels: labels,
        response_name: schema.response_column.clone(),
        group_name: schema.group_column.clone(),
    };
    data.validate()?;
    Ok(data)
}

/// Sorted distinct labels and the code of every entry.
fn encode_labels(values: &[String]) -> (Vec<String>, Vec<usize>) {
    let levels: Vec<String> = values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let lookup: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let codes = values.iter().map(|v| lookup[v.as_str()]).collect();
    (levels, codes)
}

/// Writes the response, every design column and the group label.
///
/// Floats are written in shortest round-trip form, so [`load_csv`] with
/// [`SchemaConfig::for_dataset`] restores the dataset exactly as long as its
/// group labels are sorted.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![data.response_name.clone()];
    header.extend(data.column_names.iter().cloned());
    if let Some(g) = &data.group_name {
        header.push(g.clone());
    }
    writer.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut record = vec![data.responses[i].to_string()];
        record.extend(data.row(i).iter().map(f64::to_string));
        if data.group_name.is_some() {
            record.push(data.group_of(i).map_or_else(String::new, |g| data.group_labels[g].clone()));
        }
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, f) in [("train", self.train), ("valid", self.valid), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(DataError::Config(format!("{name} fraction {f} is not in (0, 1)")));
            }
        }
        let total = self.train + self.valid + self.test;
        if (total - 1.0).abs() > 1e-12 {
            return Err(DataError::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes for `m` rows; train takes the remainder.
    pub fn sizes(&self, m: usize) -> Result<(usize, usize, usize), DataError> {
        self.validate()?;
        let valid = (m as f64 * self.valid).round_ties_even() as usize;
        let test = (m as f64 * self.test).round_ties_even() as usize;
        let train = m.saturating_sub(valid + test);
        if train == 0 || valid == 0 || test == 0 {
            return Err(DataError::Config(format!(
                "splitting {m} rows gives an empty partition ({train}, {valid}, {test})"
            )));
        }
        Ok((train, valid, test))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..m` cut into contiguous train/valid/test blocks.
pub fn split_indices(m: usize, spec: &SplitSpec) -> Result<SplitIndices, DataError> {
    let (train, valid, _) = spec.sizes(m)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = order.split_off(train + valid);
    let valid = order.split_off(train);
    Ok(SplitIndices {
        train: order,
        valid,
        test,
    })
}

pub fn split_dataset(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let idx = split_indices(data.len(), spec)?;
    Ok((data.subset(&idx.train), data.subset(&idx.valid), data.subset(&idx.test)))
}

/// Per-column affine transform `x ↦ (x − mean) / scale`; identity where
/// `scale == 1` and `mean == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn identity(n_covariates: usize) -> Self {
        Standardization {
            means: vec![0.0; n_covariates],
            scales: vec![1.0; n_covariates],
        }
    }

    /// Means and population standard deviations (divisor `n`) of the
    /// continuous columns of `train`.
    pub fn fit(train: &Dataset) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::Config("cannot standardize an empty training set".into()));
        }
        let n = train.len() as f64;
        let mut out = Standardization::identity(train.n_covariates);
        for k in 0..train.n_covariates {
            if train.column_kinds[k] != ColumnKind::Continuous {
                continue;
            }
            let mean = (0..train.len()).map(|i| train.row(i)[k]).sum::<f64>() / n;
            let var = (0..train.len()).map(|i| (train.row(i)[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 * mean.abs().max(1.0) {
                out.means[k] = mean;
                out.scales[k] = sd;
            } else {
                log::warn!("column `{}` has zero variance; left unscaled", train.column_names[k]);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset, DataError> {
        if data.n_covariates != self.means.len() {
            return Err(ModelError::Shape(format!(
                "standardization has {} columns, dataset has {}",
                self.means.len(),
                data.n_covariates
            ))
            .into());
        }
        let mut out = data.clone();
        let d = data.n_covariates;
        for (cell, x) in out.fixed_design.iter_mut().enumerate() {
            let k = cell % d;
            if self.scales[k] != 1.0 || self.means[k] != 0.0 {
                *x = (*x - self.means[k]) / self.scales[k];
            }
        }
        Ok(out)
    }
}

/// Standardizes `train` and applies the same transform to `others`.
pub fn standardize(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, Standardization), DataError> {
    let transform = Standardization::fit(train)?;
    let train_out = transform.apply(train)?;
    let others_out = others.iter().map(|d| transform.apply(d)).collect::<Result<_, _>>()?;
    Ok((train_out, others_out, transform))
}

/// How simulated covariates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateSpec {
    #[default]
    StandardNormal,
    Uniform {
        low: f64,
        high: f64,
    },
}

/// Ground truth of a synthetic dataset. `fixed_weights` is `(w_0, w_1..w_D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimTruth {
    pub fixed_weights: Vec<f64>,
    pub p_index: f64,
    pub dispersion: f64,
    pub sigma_b: f64,
    /// Filled with the realized draws by [`simulate_dataset`]; when given,
    /// used as is.
    #[serde(default)]
    pub group_effects: Option<Vec<f64>>,
    #[serde(default)]
    pub covariates: CovariateSpec,
    pub n_obs: usize,
    pub n_groups: usize,
}

impl Default for SimTruth {
    fn default() -> Self {
        SimTruth {
            fixed_weights: vec![0.1, 0.3, -0.2],
            p_index: 1.5,
            dispersion: 1.0,
            sigma_b: 0.5,
            group_effects: None,
            covariates: CovariateSpec::StandardNormal,
            n_obs: 5000,
            n_groups: 10,
        }
    }
}

impl SimTruth {
    pub fn n_covariates(&self) -> usize {
        self.fixed_weights.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_obs == 0 {
            return Err(DataError::Config("n_obs must be positive".into()));
        }
        if self.fixed_weights.is_empty() {
            return Err(DataError::Config("fixed_weights needs at least the intercept".into()));
        }
        if !(self.p_index > 1.0 && self.p_index < 2.0) {
            return Err(DataError::Config(format!("p_index {} is not in (1, 2)", self.p_index)));
        }
        if !(self.dispersion > 0.0) || !(self.sigma_b >= 0.0) {
            return Err(DataError::Config("dispersion must be > 0 and sigma_b >= 0".into()));
        }
        if let Some(b) = &self.group_effects {
            if b.len() != self.n_groups {
                return Err(DataError::Config(format!(
                    "{} group effects for {} groups",
                    b.len(),
                    self.n_groups
                )));
            }
        }
        if let CovariateSpec::Uniform { low, high } = self.covariates {
            if !(low < high) {
                return Err(DataError::Config(format!("uniform range [{low}, {high}) is empty")));
            }
        }
        Ok(())
    }
}

/// Draws a dataset from the mixed model and returns it with the realized
/// group effects filled in.
pub fn simulate_dataset<R: Rng + ?Sized>(truth: &SimTruth, rng: &mut R) -> Result<(Dataset, SimTruth), DataError> {
    truth.validate()?;
    let (m, d, g) = (truth.n_obs, truth.n_covariates(), truth.n_groups);
    let fixed_design: Vec<f64> = (0..m * d)
        .map(|_| match truth.covariates {
            CovariateSpec::StandardNormal => rng.sample(StandardNormal),
            CovariateSpec::Uniform { low, high } => rng.random_range(low..high),
        })
        .collect();
    let group_index: Vec<usize> = if g == 0 {
        Vec::new()
    } else {
        (0..m).map(|_| rng.random_range(0..g)).collect()
    };
    let effects = match &truth.group_effects {
        Some(b) => b.clone(),
        None => {
            let normal = Normal::new(0.0, truth.sigma_b).map_err(|e| DataError::Config(e.to_string()))?;
            (0..g).map(|_| normal.sample(rng)).collect()
        }
    };
    let mut data = Dataset {
        responses: vec![0.0; m],
        fixed_design,
        n_covariates: d,
        group_index,
        group_count: g,
        column_names: (1..=d).map(|k| format!("x{k}")).collect(),
        column_kinds: vec![ColumnKind::Continuous; d],
        group_labels: group_labels(g),
        response_name: "y".into(),
        group_name: (g > 0).then(|| "group".into()),
    };
    let eta = linear_predictor(&data, &truth.fixed_weights, &effects)?;
    for (y, e) in data.responses.iter_mut().zip(eta) {
        let c = to_compound(&EdmParams::new(e.exp(), truth.p_index, truth.dispersion)?)?;
        *y = tweedie_sample(&c, rng)?;
    }
    data.validate()?;
    let realized = SimTruth {
        group_effects: Some(effects),
        ..truth.clone()
    };
    Ok((data, realized))
}
