//! Ordered Lorenz curves, Gini indices, pairwise Gini matrices and
//! posterior summaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("{what} at index {index} is {value}")]
    Domain { what: &'static str, index: usize, value: f64 },
    #[error("predictions sum to zero while the responses do not")]
    DegeneratePredictions,
    #[error("responses sum to zero; the ordered Lorenz curve is undefined")]
    DegenerateResponses,
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("baseline `{baseline}`, model `{model}`: {source}")]
    Pair {
        baseline: String,
        model: String,
        #[source]
        source: Box<EvaluationError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Points `(F_p, F_y)` from `(0, 0)` to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorenzCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sorts by relativity `ŷ_i / p_i` and accumulates the baseline and
/// response shares, emitting one point per distinct relativity.
pub fn ordered_lorenz(y: &[f64], baseline: &[f64], predictions: &[f64]) -> Result<LorenzCurve, EvaluationError> {
    if y.len() != baseline.len() || y.len() != predictions.len() {
        return Err(EvaluationError::Length(format!(
            "{} responses, {} baseline values, {} predictions",
            y.len(),
            baseline.len(),
            predictions.len()
        )));
    }
    if y.is_empty() {
        return Err(EvaluationError::TooFew { need: 1, got: 0 });
    }
    check_each("baseline", baseline, |p| p > 0.0 && p.is_finite())?;
    check_each("prediction", predictions, |v| v >= 0.0 && v.is_finite())?;
    check_each("response", y, |v| v >= 0.0 && v.is_finite())?;
    if y.iter().sum::<f64>() == 0.0 {
        return Err(EvaluationError::DegenerateResponses);
    }
    if predictions.iter().sum::<f64>() == 0.0 {
        return Err(EvaluationError::DegeneratePredictions);
    }
    let relativity: Vec<f64> = predictions.iter().zip(baseline).map(|(v, p)| v / p).collect();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| relativity[a].total_cmp(&relativity[b]));
    // summed in sorted order so the running shares end at exactly 1
    let total_p: f64 = order.iter().map(|&i| baseline[i]).sum();
    let total_y: f64 = order.iter().map(|&i| y[i]).sum();

    let mut points = Vec::with_capacity(y.len() + 1);
    points.push((0.0, 0.0));
    let (mut cum_p, mut cum_y) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        cum_p += baseline[i];
        cum_y += y[i];
        let tied_with_next = order.get(k + 1).is_some_and(|&j| relativity[j] == relativity[i]);
        if !tied_with_next {
            points.push((cum_p / total_p, cum_y / total_y));
        }
    }
    Ok(LorenzCurve { points })
}

fn check_each(what: &'static str, xs: &[f64], ok: impl Fn(f64) -> bool) -> Result<(), EvaluationError> {
    match xs.iter().position(|&x| !ok(x)) {
        Some(index) => Err(EvaluationError::Domain {
            what,
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// `1 − 2 ∫ F_y dF_p` by the trapezoid rule.
pub fn gini_index(curve: &LorenzCurve) -> f64 {
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    1.0 - 2.0 * area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniReport {
    pub gini: f64,
    pub baseline_name: String,
    pub model_name: String,
    pub standard_error: Option<f64>,
}

/// Rows are baselines, columns are models; the diagonal is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniMatrix {
    pub names: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<Vec<Option<f64>>>>,
}

impl GiniMatrix {
    pub fn get(&self, baseline: usize, model: usize) -> Option<f64> {
        self.entries[baseline][model]
    }

    pub fn reports(&self) -> Vec<GiniReport> {
        let mut out = Vec::new();
        for (i, row) in self.entries.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                if let Some(gini) = g {
                    out.push(GiniReport {
                        gini: *gini,
                        baseline_name: self.names[i].clone(),
                        model_name: self.names[j].clone(),
                        standard_error: self.standard_errors.as_ref().and_then(|se| se[i][j]),
                    });
                }
            }
        }
        out
    }

    /// Header row and column of model names; empty cells on the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("baseline");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.names.iter().zip(&self.entries) {
            out.push_str(name);
            for g in row {
                out.push(',');
                if let Some(g) = g {
                    out.push_str(&g.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Gini of every model against every other model as baseline.
pub fn pairwise_gini_matrix(y: &[f64], models: &[(String, Vec<f64>)]) -> Result<GiniMatrix, EvaluationError> {
    if models.len() < 2 {
        return Err(EvaluationError::TooFew {
            need: 2,
            got: models.len(),
        });
    }
    let k = models.len();
    let mut entries = vec![vec![None; k]; k];
    for (i, (base_name, base)) in models.iter().enumerate() {
        for (j, (model_name, pred)) in models.iter().enumerate() {
            if i == j {
                continue;
            }
            let curve = ordered_lorenz(y, base, pred).map_err(|e| EvaluationError::Pair {
                baseline: base_name.clone(),
                model: model_name.clone(),
                source: Box::new(e),
            })?;
            entries[i][j] = Some(gini_index(&curve));
        }
    }
    Ok(GiniMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        entries,
        standard_errors: None,
    })
}

/// Sample standard deviation (divisor `n − 1`).
pub fn sample_std(xs: &[f64]) -> Result<f64, EvaluationError> {
    if xs.len() < 2 {
        return Err(EvaluationError::TooFew { need: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Ok((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Gini index averaged over `n_splits` resamples, with the sample standard
/// deviation across them as its standard error.
///
/// `evaluate(k)` returns the Gini of split `k`; it is called for
/// `k = 0..n_splits` in order.
pub fn split_gini<E>(
    n_splits: usize,
    mut evaluate: impl FnMut(usize) -> Result<f64, E>,
) -> Result<SplitGini, E>
where
    E: From<EvaluationError>,
{
    let values = (0..n_splits).map(&mut evaluate).collect::<Result<Vec<f64>, E>>()?;
    let standard_error = sample_std(&values)?;
    Ok(SplitGini {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        standard_error,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitGini {
    pub mean: f64,
    pub standard_error: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from the minimum to the maximum draw.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the last bin is closed. Constant
    /// input gives a single bin.
    pub fn new(xs: &[f64], bins: usize) -> Self {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) || bins <= 1 {
            return Histogram {
                edges: vec![lo, hi],
                counts: vec![xs.len()],
            };
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0; bins];
        for &x in xs {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram {
            edges: (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect(),
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[k], self.edges[k + 1], c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: f64,
    /// Sample variance (divisor `n − 1`).
    pub variance: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub histogram: Histogram,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn posterior_summary(draws: &[f64], bins: usize) -> Result<PosteriorSummary, EvaluationError> {
    if draws.len() < 2 {
        return Err(EvaluationError::TooFew {
            need: 2,
            got: draws.len(),
        });
    }
    check_each("draw", draws, f64::is_finite)?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let variance = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PosteriorSummary {
        mean,
        variance,
        q05: quantile_sorted(&sorted, 0.05),
        q50: quantile_sorted(&sorted, 0.5),
        q95: quantile_sorted(&sorted, 0.95),
        histogram: Histogram::new(draws, bins.max(1)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_group: Vec<f64>,
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Posterior-mean minus true value per group; `draws` holds one vector of
/// group effects per posterior draw.
pub fn random_effect_bias(draws: &[Vec<f64>], truth: &[f64]) -> Result<BiasReport, EvaluationError> {
    if draws.is_empty() {
        return Err(EvaluationError::TooFew { need: 1, got: 0 });
    }
    if let Some(bad) = draws.iter().position(|d| d.len() != truth.len()) {
        return Err(EvaluationError::Length(format!(
            "draw {bad} has {} groups, truth has {}",
            draws[bad].len(),
            truth.len()
        )));
    }
    let s = draws.len() as f64;
    let per_group: Vec<f64> = truth
        .iter()
        .enumerate()
        .map(|(g, t)| draws.iter().map(|d| d[g]).sum::<f64>() / s - t)
        .collect();
    let abs = per_group.iter().map(|b| b.abs());
    Ok(BiasReport {
        max_abs: abs.clone().fold(0.0, f64::max),
        mean_abs: abs.sum::<f64>() / per_group.len().max(1) as f64,
        per_group,
    })
}

impl LorenzCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("F_p,F_y\n");
        for (p, y) in &self.points {
            out.push_str(&format!("{p},{y}\n"));
        }
        out
    }
}

/// Writes `contents` to `path`, attaching the path to any error.
pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<(), EvaluationError> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(contents.as_bytes()))
        .map_err(|source| EvaluationError::Io {
            path: path.to_path_buf(),
            source,
        })
}
