//! Comparison policies: fixed domain weights and an EXP3 multi-armed-bandit
//! mixer in the style of loss-reward online data mixing.
//!
//! EXP3 treats each domain as an arm. The reward for a sampled arm is its
//! (clipped) training loss, importance-weighted by the probability the arm
//! was played, so domains the model currently predicts badly gain mass.

use crate::corpus::DomainWeights;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A policy that never moves.
#[derive(Debug, Clone)]
pub struct StaticPolicy {
    weights: DomainWeights,
}

impl StaticPolicy {
    pub fn new(weights: DomainWeights) -> Self {
        Self { weights }
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            weights: DomainWeights::uniform(k),
        }
    }

    pub fn weights(&self) -> &DomainWeights {
        &self.weights
    }
}

/// EXP3 hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp3Config {
    /// Multiplicative-weights learning rate.
    pub eta: f64,
    /// Exploration floor: every arm keeps at least `gamma_floor / k` mass.
    pub gamma_floor: f64,
    /// Losses are clipped to [0, loss_clip] before importance weighting,
    /// since EXP3 assumes bounded rewards.
    pub loss_clip: f64,
}

impl Default for Exp3Config {
    fn default() -> Self {
        Self {
            eta: 0.01,
            gamma_floor: 0.1,
            loss_clip: 2.0 * 256f64.ln(),
        }
    }
}

/// Multiplicative-weights state of the bandit mixer.
#[derive(Debug, Clone)]
pub struct Exp3State {
    weights: Vec<f64>,
    eta: f64,
    gamma_floor: f64,
    loss_clip: f64,
    /// Smoothed importance-weighted reward per arm, kept for logging.
    avg_reward: Vec<f64>,
}

impl Exp3State {
    pub fn new(k: usize, cfg: Exp3Config) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.gamma_floor) {
            return Err(Error::Config(format!(
                "gamma_floor {} outside [0, 1]",
                cfg.gamma_floor
            )));
        }
        if cfg.eta < 0.0 || !cfg.eta.is_finite() {
            return Err(Error::Config(format!("eta {} must be >= 0", cfg.eta)));
        }
        if cfg.loss_clip <= 0.0 {
            return Err(Error::Config("loss_clip must be positive".into()));
        }
        Ok(Self {
            weights: vec![1.0; k],
            eta: cfg.eta,
            gamma_floor: cfg.gamma_floor,
            loss_clip: cfg.loss_clip,
            avg_reward: vec![0.0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn avg_reward(&self) -> &[f64] {
        &self.avg_reward
    }

    /// The mixture the bandit currently plays:
    /// `pi_i = (1 - gamma) * w_i / sum(w) + gamma / k`.
    pub fn policy(&self) -> DomainWeights {
        let k = self.weights.len();
        let sum: f64 = self.weights.iter().sum();
        let mix: Vec<f64> = self
            .weights
            .iter()
            .map(|w| (1.0 - self.gamma_floor) * w / sum + self.gamma_floor / k as f64)
            .collect();
        DomainWeights::new(mix).expect("mixture is on the simplex by construction")
    }

    /// Multiplicative-weights update from one step's per-domain losses.
    ///
    /// Arms with no samples this step (realized count zero) receive a zero
    /// reward estimate. Weights are renormalized afterwards to prevent
    /// overflow; the mixture only depends on weight ratios.
    pub fn update(
        &mut self,
        per_domain_losses: &[f64],
        realized_policy: &DomainWeights,
        realized_counts: &[usize],
    ) -> Result<()> {
        let k = self.weights.len();
        if per_domain_losses.len() != k
            || realized_policy.len() != k
            || realized_counts.len() != k
        {
            return Err(Error::InvalidArgument(format!(
                "expected {k} entries in losses/policy/counts"
            )));
        }
        if per_domain_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("non-finite loss".into()));
        }
        let pi = realized_policy.as_slice();
        for i in 0..k {
            if realized_counts[i] == 0 {
                continue;
            }
            if pi[i] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "arm {i} was sampled with zero policy mass"
                )));
            }
            let loss = per_domain_losses[i].clamp(0.0, self.loss_clip);
            let r_hat = loss / pi[i];
            self.avg_reward[i] = 0.9 * self.avg_reward[i] + 0.1 * r_hat;
            self.weights[i] *= (self.eta * r_hat).exp();
        }
        // renormalize so the largest weight is 1
        let max = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        if max > 0.0 && max.is_finite() {
            for w in &mut self.weights {
                *w /= max;
            }
        } else {
            return Err(Error::Divergence("EXP3 weights overflowed".into()));
        }
        Ok(())
    }
}
