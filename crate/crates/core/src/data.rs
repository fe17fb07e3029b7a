//! Datasets of covariate groups: CSV ingestion, frequency split,
//! standardization and synthetic families with exact conditional laws.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

/// One distinct covariate vector with all of its observed responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateGroup {
    pub x: Vec<f64>,
    pub responses: Vec<f64>,
}

impl CovariateGroup {
    pub fn count(&self) -> usize {
        self.responses.len()
    }
}

/// Per-dimension z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Fits on the distinct covariate vectors (one weight per group).
    /// Population standard deviation; zero or undefined spread falls back to 1.
    pub fn fit(groups: &[CovariateGroup], d: usize) -> Self {
        if groups.is_empty() {
            return Self::identity(d);
        }
        let n = groups.len() as f64;
        let mut mean = vec![0.0; d];
        for g in groups {
            for (m, &v) in mean.iter_mut().zip(&g.x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for g in groups {
            for ((s, &v), &m) in var.iter_mut().zip(&g.x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("normalize_covariate", self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    pub fn apply_as<S: Real>(&self, x: &[f64]) -> Result<Vec<S>> {
        Ok(self.apply(x)?.into_iter().map(S::lit).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub groups: Vec<CovariateGroup>,
    pub d: usize,
    /// Column names of the covariates, in order.
    pub covariate_names: Vec<String>,
    pub response_name: String,
    pub normalizer: Normalizer,
}

impl Dataset {
    /// Builds a dataset from raw groups, merging groups with bitwise-equal
    /// covariates (first-appearance order) and fitting the normalizer.
    pub fn from_groups(
        groups: Vec<CovariateGroup>,
        covariate_names: Vec<String>,
        response_name: impl Into<String>,
    ) -> Result<Self> {
        let d = covariate_names.len();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut merged: Vec<CovariateGroup> = Vec::new();
        for g in groups {
            check_len("covariate group", d, g.x.len())?;
            if g.responses.is_empty() {
                return Err(Error::invalid("covariate group without responses"));
            }
            let key: Vec<u64> = g.x.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => merged[i].responses.extend(g.responses),
                None => {
                    index.insert(key, merged.len());
                    merged.push(g);
                }
            }
        }
        let normalizer = Normalizer::fit(&merged, d);
        Ok(Self {
            groups: merged,
            d,
            covariate_names,
            response_name: response_name.into(),
            normalizer,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn total_observations(&self) -> usize {
        self.groups.iter().map(CovariateGroup::count).sum()
    }

    pub fn normalize_covariate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.normalizer.apply(x)
    }

    /// Standardized covariates of every group, in group order.
    pub fn normalized_covariates<S: Real>(&self) -> Result<Vec<Vec<S>>> {
        self.groups
            .iter()
            .map(|g| self.normalizer.apply_as(&g.x))
            .collect()
    }

    fn with_groups(&self, groups: Vec<CovariateGroup>, normalizer: Normalizer) -> Self {
        Self {
            groups,
            d: self.d,
            covariate_names: self.covariate_names.clone(),
            response_name: self.response_name.clone(),
            normalizer,
        }
    }

    /// Partitions groups by response frequency; the normalizer of every part
    /// is refitted on the training part.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
        spec.validate()?;
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for g in &self.groups {
            match g.count() {
                n if n > spec.test_min_freq => test.push(g.clone()),
                n if n > spec.val_min_freq => val.push(g.clone()),
                _ => train.push(g.clone()),
            }
        }
        let normalizer = Normalizer::fit(&train, self.d);
        Ok((
            self.with_groups(train, normalizer.clone()),
            self.with_groups(val, normalizer.clone()),
            self.with_groups(test, normalizer),
        ))
    }

    /// Replaces the normalizer (e.g. with one fitted on another split).
    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Result<Self> {
        check_len("normalizer", self.d, normalizer.dim())?;
        self.normalizer = normalizer;
        Ok(self)
    }

    /// Loads a UTF-8 comma-separated file with a header row. Every column
    /// other than `response_column` is a numeric covariate.
    pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Self> {
        let path = path.as_ref();
        let load_err = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| load_err(e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| load_err(e.to_string()))?
            .clone();
        let response_idx = headers
            .iter()
            .position(|h| h == response_column)
            .ok_or_else(|| load_err(format!("no column named `{response_column}`")))?;
        let covariate_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != response_idx)
            .map(|(_, h)| h.to_string())
            .collect();

        let mut groups = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| load_err(e.to_string()))?;
            let line = row + 2;
            if record.len() != headers.len() {
                return Err(load_err(format!(
                    "line {line}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                )));
            }
            let mut x = Vec::with_capacity(covariate_names.len());
            let mut y = f64::NAN;
            for (i, cell) in record.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| {
                    load_err(format!(
                        "line {line}, column `{}`: non-numeric cell `{cell}`",
                        &headers[i]
                    ))
                })?;
                if i == response_idx {
                    y = v;
                } else {
                    x.push(v);
                }
            }
            groups.push(CovariateGroup {
                x,
                responses: vec![y],
            });
        }
        if groups.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{} has a header but no rows",
                path.display()
            )));
        }
        Self::from_groups(groups, covariate_names, response_column)
    }

    /// Writes one row per observation. Values use Rust's shortest
    /// round-trip formatting, so reloading reproduces them exactly.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.push(&self.response_name);
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for g in &self.groups {
            for y in &g.responses {
                line.clear();
                for v in &g.x {
                    line.push_str(&format_f64(*v));
                    line.push(',');
                }
                line.push_str(&format_f64(*y));
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_min_freq: usize,
    pub val_min_freq: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_min_freq: 30,
            val_min_freq: 20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.val_min_freq >= self.test_min_freq {
            return Err(Error::invalid(format!(
                "val_min_freq ({}) must be below test_min_freq ({})",
                self.val_min_freq, self.test_min_freq
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// `y = intercept + slope * sum(x) + noise * Z`.
    LocationScaleGaussian,
    /// Equal-weight mixture of `N(shift * x1 - sep/2, sd)` and
    /// `N(shift * x1 + sep/2, sd)`.
    TwoComponentMixture,
    /// `y = amplitude * sin(2 pi x1) + (noise_base + noise_slope * x1) * Z`.
    HeteroscedasticSine,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::LocationScaleGaussian => "location-scale-gaussian",
            FamilyKind::TwoComponentMixture => "two-component-mixture",
            FamilyKind::HeteroscedasticSine => "heteroscedastic-sine",
        }
    }

    fn default_params(self) -> Vec<(&'static str, f64)> {
        match self {
            FamilyKind::LocationScaleGaussian => {
                vec![("intercept", 0.0), ("slope", 2.0), ("noise", 0.5)]
            }
            FamilyKind::TwoComponentMixture => {
                vec![("shift", 1.0), ("separation", 2.0), ("sd", 0.3)]
            }
            FamilyKind::HeteroscedasticSine => vec![
                ("amplitude", 1.0),
                ("noise_base", 0.1),
                ("noise_slope", 0.3),
            ],
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            FamilyKind::LocationScaleGaussian,
            FamilyKind::TwoComponentMixture,
            FamilyKind::HeteroscedasticSine,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown synthetic family `{s}`")))
    }
}

/// A synthetic conditional law with exact sampling, CDF and mean. Covariates
/// are drawn uniformly from `[0, 1]^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamily {
    pub kind: FamilyKind,
    pub dim: usize,
    pub params: std::collections::BTreeMap<String, f64>,
    pub seed: u64,
}

/// How many responses each generated covariate receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CountsDistribution {
    Fixed { count: usize },
    /// Uniform on `low..=high`.
    Uniform { low: usize, high: usize },
}

impl CountsDistribution {
    fn draw<R: Rng>(&self, rng: &mut R) -> Result<usize> {
        match *self {
            CountsDistribution::Fixed { count } if count >= 1 => Ok(count),
            CountsDistribution::Uniform { low, high } if low >= 1 && low <= high => {
                Ok(rng.random_range(low..=high))
            }
            _ => Err(Error::invalid(format!("invalid response-count law {self:?}"))),
        }
    }
}

impl SyntheticFamily {
    pub fn new(kind: FamilyKind, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("synthetic covariate dimension must be positive"));
        }
        let params = kind
            .default_params()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Self {
            kind,
            dim,
            params,
            seed,
        })
    }

    pub fn by_name(name: &str, dim: usize, seed: u64) -> Result<Self> {
        Self::new(name.parse()?, dim, seed)
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Result<Self> {
        match self.params.get_mut(key) {
            Some(v) => {
                *v = value;
                Ok(self)
            }
            None => Err(Error::invalid(format!(
                "family {} has no parameter `{key}`",
                self.kind
            ))),
        }
    }

    fn p(&self, key: &str) -> f64 {
        self.params[key]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        check_len("synthetic covariate", self.dim, x.len())
    }

    /// Location/scale of each normal component with its weight.
    fn components(&self, x: &[f64]) -> Vec<(f64, f64, f64)> {
        match self.kind {
            FamilyKind::LocationScaleGaussian => {
                let mean = self.p("intercept") + self.p("slope") * x.iter().sum::<f64>();
                vec![(1.0, mean, self.p("noise"))]
            }
            FamilyKind::TwoComponentMixture => {
                let centre = self.p("shift") * x[0];
                let half = 0.5 * self.p("separation");
                let sd = self.p("sd");
                vec![(0.5, centre - half, sd), (0.5, centre + half, sd)]
            }
            FamilyKind::HeteroscedasticSine => {
                let mean = self.p("amplitude") * (2.0 * std::f64::consts::PI * x[0]).sin();
                let sd = self.p("noise_base") + self.p("noise_slope") * x[0];
                vec![(1.0, mean, sd)]
            }
        }
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.components(x).iter().map(|(w, m, _)| w * m).sum())
    }

    /// Exact conditional CDF. A zero scale is treated as a point mass.
    pub fn cdf(&self, x: &[f64], y: f64) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self
            .components(x)
            .iter()
            .map(|&(w, m, s)| {
                if s > 0.0 {
                    w * f64::std_normal_cdf((y - m) / s)
                } else if y >= m {
                    w
                } else {
                    0.0
                }
            })
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64> {
        self.check_dim(x)?;
        let comps = self.components(x);
        let pick = if comps.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            comps
                .iter()
                .position(|(w, _, _)| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(comps.len() - 1)
        };
        let (_, m, s) = comps[pick];
        let z: f64 = StandardNormal.sample(rng);
        Ok(m + s * z)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, x: &[f64], n: usize, rng: &mut R) -> Result<Vec<f64>> {
        (0..n).map(|_| self.sample(x, rng)).collect()
    }

    pub fn draw_covariate<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim).map(|_| rng.random::<f64>()).collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.dim).map(|i| format!("x{i}")).collect()
    }

    /// Draws `n_covariates` covariates and their responses. Reproducible for
    /// a fixed family seed and `stream` (distinct streams give independent
    /// datasets, e.g. train/val/test).
    pub fn generate(
        &self,
        n_covariates: usize,
        counts: CountsDistribution,
        stream: u64,
    ) -> Result<Dataset> {
        if n_covariates == 0 {
            return Err(Error::invalid("n_covariates must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut groups = Vec::with_capacity(n_covariates);
        for _ in 0..n_covariates {
            let x = self.draw_covariate(&mut rng);
            let n = counts.draw(&mut rng)?;
            let responses = self.sample_n(&x, n, &mut rng)?;
            groups.push(CovariateGroup { x, responses });
        }
        Dataset::from_groups(groups, self.covariate_names(), "y")
    }
}
