//! Evaluation metrics for one-dimensional conditional samples.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

/// A nonempty sample with a cached sorted copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSample<S> {
    values: Vec<S>,
    sorted: Vec<S>,
}

impl<S: Real> EmpiricalSample<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empirical sample is empty"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("empirical sample contains NaN"));
        }
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
        Ok(Self { values, sorted })
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn sorted(&self) -> &[S] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> S {
        self.values.iter().copied().sum::<S>() / S::lit(self.len() as f64)
    }
}

/// Squared 2-Wasserstein distance between two empirical measures, computed
/// as the exact integral of the squared difference of their quantile
/// functions. Breakpoints `i/n` and `j/m` are merged on the integer grid
/// `1/(n m)`, so unequal sizes carry no discretization error.
pub fn w2_squared<S: Real>(a: &EmpiricalSample<S>, b: &EmpiricalSample<S>) -> S {
    let (xa, xb) = (a.sorted(), b.sorted());
    let (n, m) = (xa.len(), xb.len());
    if n == m {
        let total: S = xa
            .iter()
            .zip(xb)
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        return total / S::lit(n as f64);
    }
    let (n64, m64) = (n as u64, m as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0u64;
    let mut acc = S::zero();
    while i < n && j < m {
        let next_a = (i as u64 + 1) * m64;
        let next_b = (j as u64 + 1) * n64;
        let end = next_a.min(next_b);
        let d = xa[i] - xb[j];
        acc += S::lit((end - t) as f64) * d * d;
        t = end;
        if next_a == end {
            i += 1;
        }
        if next_b == end {
            j += 1;
        }
    }
    acc / S::lit((n64 * m64) as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_statistic<S: Real>(a: &EmpiricalSample<S>, b: &EmpiricalSample<S>) -> S {
    let (xa, xb) = (a.sorted(), b.sorted());
    let (n, m) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0u64;
    while i < n || j < m {
        let x = match (xa.get(i), xb.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < n && xa[i] <= x {
            i += 1;
        }
        while j < m && xb[j] <= x {
            j += 1;
        }
        best = best.max(ks_gap(i, n, j, m));
    }
    ks_ratio(best, n, m)
}

/// `|i/n - j/m|` scaled by `n m`.
pub(crate) fn ks_gap(i: usize, n: usize, j: usize, m: usize) -> u64 {
    (i as u64 * m as u64).abs_diff(j as u64 * n as u64)
}

pub(crate) fn ks_ratio<S: Real>(gap: u64, n: usize, m: usize) -> S {
    S::lit(gap as f64 / (n as f64 * m as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseR2 {
    pub mse: f64,
    /// `None` when fewer than two covariates are available or the
    /// reference means have zero variance.
    pub r2: Option<f64>,
}

/// MSE and R^2 of per-covariate generated means against reference means.
pub fn mse_r2(generated: &[f64], truth: &[f64]) -> Result<MseR2> {
    check_len("mse_r2", truth.len(), generated.len())?;
    if truth.is_empty() {
        return Err(Error::invalid("mse_r2 needs at least one covariate"));
    }
    let n = truth.len() as f64;
    let mse = generated
        .iter()
        .zip(truth)
        .map(|(g, t)| (g - t) * (g - t))
        .sum::<f64>()
        / n;
    let grand = truth.iter().sum::<f64>() / n;
    let var = truth.iter().map(|t| (t - grand) * (t - grand)).sum::<f64>() / n;
    let r2 = if truth.len() < 2 || var <= 0.0 {
        None
    } else {
        Some(1.0 - mse / var)
    };
    Ok(MseR2 { mse, r2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateMetrics {
    pub index: usize,
    pub x: Vec<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
    pub w2_squared: f64,
    pub w2: f64,
    pub ks: f64,
    pub generated_mean: f64,
    pub reference_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub w2_squared: MeanStd,
    pub w2: MeanStd,
    pub ks: MeanStd,
    pub mse: f64,
    pub r2: Option<f64>,
}

/// Per-covariate and aggregate evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_covariate: Vec<CovariateMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricReport {
    /// Compares generated and reference samples covariate by covariate.
    pub fn build(entries: &[(Vec<f64>, EmpiricalSample<f64>, EmpiricalSample<f64>)]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("metric report needs at least one covariate"));
        }
        let per_covariate: Vec<CovariateMetrics> = entries
            .iter()
            .enumerate()
            .map(|(index, (x, generated, reference))| {
                let w2sq = w2_squared(generated, reference);
                CovariateMetrics {
                    index,
                    x: x.clone(),
                    n_generated: generated.len(),
                    n_reference: reference.len(),
                    w2_squared: w2sq,
                    w2: w2sq.sqrt(),
                    ks: ks_statistic(generated, reference),
                    generated_mean: generated.mean(),
                    reference_mean: reference.mean(),
                }
            })
            .collect();
        Self::from_per_covariate(per_covariate)
    }

    pub fn from_per_covariate(per_covariate: Vec<CovariateMetrics>) -> Result<Self> {
        let col = |f: fn(&CovariateMetrics) -> f64| -> Vec<f64> {
            per_covariate.iter().map(f).collect()
        };
        let fit = mse_r2(&col(|c| c.generated_mean), &col(|c| c.reference_mean))?;
        let aggregate = AggregateMetrics {
            w2_squared: MeanStd::of(&col(|c| c.w2_squared)),
            w2: MeanStd::of(&col(|c| c.w2)),
            ks: MeanStd::of(&col(|c| c.ks)),
            mse: fit.mse,
            r2: fit.r2,
        };
        Ok(Self {
            per_covariate,
            aggregate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub i: usize,
    pub j: usize,
    pub covariate_distance: f64,
    pub w2_squared: f64,
    pub w2: f64,
}

/// Covariate distance versus empirical Wasserstein distance over all pairs
/// of groups that have more than `min_count` responses. Distances use the
/// dataset's standardized covariates.
pub fn lipschitz_scatter(dataset: &Dataset, min_count: usize) -> Result<Vec<ScatterPoint>> {
    let eligible: Vec<usize> = (0..dataset.groups.len())
        .filter(|&i| dataset.groups[i].count() > min_count)
        .collect();
    let xs: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&i| dataset.normalize_covariate(&dataset.groups[i].x))
        .collect::<Result<_>>()?;
    let samples: Vec<EmpiricalSample<f64>> = eligible
        .iter()
        .map(|&i| EmpiricalSample::new(dataset.groups[i].responses.clone()))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for a in 0..eligible.len() {
        for b in a + 1..eligible.len() {
            let dist = xs[a]
                .iter()
                .zip(&xs[b])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            let w2sq = w2_squared(&samples[a], &samples[b]);
            out.push(ScatterPoint {
                i: eligible[a],
                j: eligible[b],
                covariate_distance: dist,
                w2_squared: w2sq,
                w2: w2sq.sqrt(),
            });
        }
    }
    Ok(out)
}

/// Pearson correlation; `None` for fewer than two points or zero spread.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Fraction of adjacent pairs `(s[k], s[k+1])` with `s[k] <= s[k+1]`.
/// A single-element sequence counts as fully ordered.
pub fn sorted_fraction(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let ok = values.windows(2).filter(|w| w[0] <= w[1]).count();
    ok as f64 / (values.len() - 1) as f64
}

#[cfg(test)]
#[path = "../tests/support/oracles.rs"]
pub(crate) mod oracles;
