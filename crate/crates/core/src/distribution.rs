use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Tolerance for the sum-to-one invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over the class catalog.
///
/// A distribution can also be *empty*: all zeros with a flag set. That is
/// what the pseudo-label distribution of a domain looks like before any
/// label has been accepted, and threshold computation treats it as a cold
/// start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    empty: bool,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::UndefinedDistribution("no classes".into()));
        }
        if let Some((c, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::UndefinedDistribution(format!(
                "component {c} is {p}, expected a finite non-negative value"
            )));
        }
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::UndefinedDistribution(format!(
                "components sum to {total}, expected 1"
            )));
        }
        Ok(ClassDistribution {
            probs,
            empty: false,
        })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::UndefinedDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total = pairwise_sum(weights);
        if total <= 0.0 {
            return Err(Error::UndefinedDistribution("all weights are zero".into()));
        }
        Ok(ClassDistribution {
            probs: weights.iter().map(|w| w / total).collect(),
            empty: false,
        })
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::UndefinedDistribution("all counts are zero".into()));
        }
        Ok(ClassDistribution {
            probs: counts.iter().map(|&n| n as f64 / total as f64).collect(),
            empty: false,
        })
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::UndefinedDistribution("no classes".into()));
        }
        Ok(ClassDistribution {
            probs: vec![1.0 / classes as f64; classes],
            empty: false,
        })
    }

    /// The flagged all-zero distribution.
    pub fn empty(classes: usize) -> Self {
        ClassDistribution {
            probs: vec![0.0; classes],
            empty: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }
}

impl std::ops::Index<usize> for ClassDistribution {
    type Output = f64;

    fn index(&self, class: usize) -> &f64 {
        &self.probs[class]
    }
}
