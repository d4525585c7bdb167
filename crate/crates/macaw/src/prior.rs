//! Base distributions for flow latents.
//!
//! Non-source variables always carry a standard normal. Source variables keep
//! a prior resembling their data distribution; discrete sources are real-coded
//! and scored by log-mass, with no dequantization anywhere.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Tolerance used when matching a real-coded discrete value to its support.
const SUPPORT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    StandardNormal,
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Categorical { values: Vec<f64>, probs: Vec<f64> },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::StandardNormal => Ok(()),
            Prior::Normal { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || *std <= 0.0 {
                    return Err(Error::Config(format!(
                        "normal prior needs finite mean and positive std, got ({mean}, {std})"
                    )));
                }
                Ok(())
            }
            Prior::Uniform { low, high } => {
                if !low.is_finite() || !high.is_finite() || low >= high {
                    return Err(Error::Config(format!(
                        "uniform prior needs low < high, got [{low}, {high}]"
                    )));
                }
                Ok(())
            }
            Prior::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("bernoulli p = {p} outside [0, 1]")));
                }
                Ok(())
            }
            Prior::Categorical { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::Config(format!(
                        "categorical prior has {} values and {} probabilities",
                        values.len(),
                        probs.len()
                    )));
                }
                if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::Config("categorical probability outside [0, 1]".into()));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "categorical probabilities sum to {total}, expected 1"
                    )));
                }
                for (i, a) in values.iter().enumerate() {
                    for b in values.iter().skip(i + 1) {
                        if (a - b).abs() <= SUPPORT_TOL {
                            return Err(Error::Config(format!(
                                "categorical support values {a} and {b} are not distinct"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Prior::Bernoulli { .. } | Prior::Categorical { .. })
    }

    /// Log-density for continuous priors, log-mass for discrete ones.
    /// Values outside the support give `-inf`.
    pub fn log_density(&self, z: f64) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        match self {
            Prior::StandardNormal => -0.5 * z * z - HALF_LN_2PI,
            Prior::Normal { mean, std } => {
                let u = (z - mean) / std;
                -0.5 * u * u - HALF_LN_2PI - std.ln()
            }
            Prior::Uniform { low, high } => {
                if z >= *low && z <= *high {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Bernoulli { p } => {
                if (z - 1.0).abs() <= SUPPORT_TOL {
                    p.ln()
                } else if z.abs() <= SUPPORT_TOL {
                    (1.0 - p).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Categorical { values, probs } => {
                for (v, p) in values.iter().zip(probs) {
                    if (z - v).abs() <= SUPPORT_TOL {
                        return p.ln();
                    }
                }
                f64::NEG_INFINITY
            }
        }
    }

    pub fn in_support(&self, z: f64) -> bool {
        self.log_density(z) > f64::NEG_INFINITY
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Prior::StandardNormal => Normal::new(0.0, 1.0).unwrap().sample(rng),
            Prior::Normal { mean, std } => Normal::new(*mean, *std).unwrap().sample(rng),
            Prior::Uniform { low, high } => {
                let u: f64 = rng.random();
                low + u * (high - low)
            }
            Prior::Bernoulli { p } => {
                let u: f64 = rng.random();
                if u < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Prior::Categorical { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().unwrap()
            }
        }
    }

    /// Enumerated support for discrete priors, `None` for continuous ones.
    pub fn support(&self) -> Option<Vec<f64>> {
        match self {
            Prior::Bernoulli { .. } => Some(vec![0.0, 1.0]),
            Prior::Categorical { values, .. } => Some(values.clone()),
            _ => None,
        }
    }
}
