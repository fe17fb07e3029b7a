//! Gaussian-kernel smoothed conditional CDFs.
//!
//! The CDF is the exact integral of the Gaussian KDE, i.e. the equal-weight
//! mixture of normal CDFs centred on the responses:
//! `F(y) = mean_k Phi((y - y_k) / h)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: f64,
}

impl KdeConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self { bandwidth })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalCdf<S> {
    responses: Vec<S>,
    bandwidth: S,
}

impl<S: Real> ConditionalCdf<S> {
    pub fn new(responses: Vec<S>, bandwidth: S) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::invalid("conditional CDF needs at least one response"));
        }
        if !(bandwidth > S::zero() && bandwidth.is_finite()) {
            return Err(Error::invalid("bandwidth must be positive and finite"));
        }
        Ok(Self {
            responses,
            bandwidth,
        })
    }

    pub fn from_f64(responses: &[f64], config: KdeConfig) -> Result<Self> {
        Self::new(
            responses.iter().copied().map(S::lit).collect(),
            S::lit(config.bandwidth),
        )
    }

    pub fn responses(&self) -> &[S] {
        &self.responses
    }

    pub fn bandwidth(&self) -> S {
        self.bandwidth
    }

    fn count(&self) -> S {
        S::lit(self.responses.len() as f64)
    }

    pub fn eval(&self, y: S) -> S {
        let total: S = self
            .responses
            .iter()
            .map(|&yk| ((y - yk) / self.bandwidth).std_normal_cdf())
            .sum();
        total / self.count()
    }

    /// KDE density, the exact derivative of [`eval`](Self::eval).
    pub fn eval_derivative(&self, y: S) -> S {
        let total: S = self
            .responses
            .iter()
            .map(|&yk| ((y - yk) / self.bandwidth).std_normal_pdf())
            .sum();
        total / (self.count() * self.bandwidth)
    }

    /// `(eval(y), eval_derivative(y))` in one pass.
    pub fn eval_with_density(&self, y: S) -> (S, S) {
        let mut cdf = S::zero();
        let mut pdf = S::zero();
        for &yk in &self.responses {
            let z = (y - yk) / self.bandwidth;
            cdf += z.std_normal_cdf();
            pdf += z.std_normal_pdf();
        }
        let n = self.count();
        (cdf / n, pdf / (n * self.bandwidth))
    }

    /// Inverse of [`eval`](Self::eval) by bisection; `u` must lie in (0, 1).
    pub fn quantile(&self, u: S) -> Result<S> {
        if !(u > S::zero() && u < S::one()) {
            return Err(Error::invalid("quantile level must lie in (0, 1)"));
        }
        let (mut lo, mut hi) = self.responses.iter().fold(
            (S::infinity(), S::neg_infinity()),
            |(lo, hi), &y| (lo.min(y), hi.max(y)),
        );
        let pad = S::lit(40.0) * self.bandwidth;
        lo = lo - pad;
        hi = hi + pad;
        for _ in 0..200 {
            let mid = S::lit(0.5) * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.eval(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(S::lit(0.5) * (lo + hi))
    }
}

/// Candidate bandwidths for the validation grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BandwidthGrid {
    Explicit { values: Vec<f64> },
    Geometric { low: f64, high: f64, count: usize },
}

impl Default for BandwidthGrid {
    fn default() -> Self {
        BandwidthGrid::Explicit {
            values: vec![0.1, 0.2, 0.3, 0.5, 1.0],
        }
    }
}

impl BandwidthGrid {
    pub fn candidates(&self) -> Result<Vec<f64>> {
        let values = match self {
            BandwidthGrid::Explicit { values } => values.clone(),
            BandwidthGrid::Geometric { low, high, count } => {
                if *count == 0 {
                    return Err(Error::invalid("geometric grid needs at least one point"));
                }
                if !(*low > 0.0 && *high > 0.0) {
                    return Err(Error::invalid(format!(
                        "geometric grid endpoints must be positive, got {low}..{high}"
                    )));
                }
                if *count == 1 {
                    vec![*low]
                } else {
                    let (ll, lh) = (low.ln(), high.ln());
                    let steps = (*count - 1) as f64;
                    (0..*count)
                        .map(|i| match i {
                            0 => *low,
                            i if i + 1 == *count => *high,
                            i => (ll + (lh - ll) * i as f64 / steps).exp(),
                        })
                        .collect()
                }
            }
        };
        if values.is_empty() {
            return Err(Error::invalid("bandwidth grid is empty"));
        }
        if let Some(bad) = values.iter().find(|&&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid(format!("nonpositive bandwidth candidate {bad}")));
        }
        Ok(values)
    }
}
