//! Gradient-alignment rewards and their smoothed, importance-weighted form.
//!
//! A domain's alignment score is the inner product of its loss gradient with
//! the sum of all domains' gradients over the selected reward layers. Scores
//! are smoothed by an exponential moving average of importance-weighted
//! values: dividing by the previous sampling probability keeps the mixer from
//! overfocusing on domains it already samples heavily.

use crate::corpus::DomainWeights;
use crate::{Error, Result};

/// Floor for the importance denominator. The smoothing recursion divides by
/// the previous mixture weight, which may approach zero; the floor bounds the
/// variance of the estimate.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Per-domain gradient alignment scores W.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentScores {
    pub w: Vec<f64>,
}

impl AlignmentScores {
    pub fn total(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Computes alignment scores from per-domain gradient slices of equal length:
/// `w[i] = <g_i, sum_j g_j>`.
///
/// The sum of all scores equals the squared norm of the summed gradient by
/// construction.
pub fn alignment(grads: &[Vec<f64>]) -> Result<AlignmentScores> {
    if grads.is_empty() {
        return Err(Error::InvalidArgument("no gradient slices".into()));
    }
    let dim = grads[0].len();
    for (i, g) in grads.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "alignment",
                lhs: vec![dim],
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient slice for domain {i}"
            )));
        }
    }
    let mut g_sum = vec![0.0; dim];
    for g in grads {
        for (s, v) in g_sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let w = grads
        .iter()
        .map(|g| g.iter().zip(&g_sum).map(|(a, b)| a * b).sum())
        .collect();
    Ok(AlignmentScores { w })
}

/// Exponentially smoothed, importance-weighted reward state.
#[derive(Debug, Clone)]
pub struct SmoothedReward {
    pub r_hat: Vec<f64>,
    pub xi: f64,
}

impl SmoothedReward {
    /// Starts at zero, matching the algorithm's r^0 = 0 initialization.
    pub fn new(k: usize, xi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&xi) {
            return Err(Error::InvalidArgument(format!(
                "smoothing coefficient {xi} outside [0, 1)"
            )));
        }
        Ok(Self {
            r_hat: vec![0.0; k],
            xi,
        })
    }

    /// One smoothing step:
    /// `r_hat[i] = xi * r_hat[i] + (1 - xi) * w[i] / max(alpha_prev[i], ALPHA_FLOOR)`.
    pub fn update(&mut self, scores: &AlignmentScores, alpha_prev: &DomainWeights) -> Result<()> {
        if scores.w.len() != self.r_hat.len() || alpha_prev.len() != self.r_hat.len() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: r_hat {}, w {}, alpha {}",
                self.r_hat.len(),
                scores.w.len(),
                alpha_prev.len()
            )));
        }
        for i in 0..self.r_hat.len() {
            let denom = alpha_prev.as_slice()[i].max(ALPHA_FLOOR);
            self.r_hat[i] = self.xi * self.r_hat[i] + (1.0 - self.xi) * scores.w[i] / denom;
        }
        Ok(())
    }
}

/// Running mean/variance used to standardize rewards before they enter the
/// critic. Purely an agent-side transform; raw values are what gets logged.
#[derive(Debug, Clone, Default)]
pub struct RunningStat {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.m2 / (self.count - 1) as f64).sqrt()
    }

    /// Standardizes `x`; identity until two observations exist.
    pub fn standardize(&self, x: f64) -> f64 {
        if self.count < 2 {
            return x;
        }
        (x - self.mean) / (self.std() + 1e-8)
    }
}
