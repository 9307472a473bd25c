//! Adaptive routing: exponential-moving statistics over uncertainty scores
//! drive two thresholds. The allocation threshold splits each batch into
//! reliable and unreliable samples; the trigger threshold decides whether
//! the batch warrants adaptation at all.
//!
//! Ordering matters and is part of the contract: allocation updates its
//! statistics with the current batch before thresholding, while triggering
//! compares against the previous batch's statistics and commits the current
//! batch only after adaptation has (or hasn't) run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaStats {
    pub mu: f64,
    pub var: f64,
    pub alpha: f64,
    pub seen_first: bool,
}

impl EmaStats {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("smoothing factor {alpha} outside (0, 1]")));
        }
        Ok(EmaStats { mu: 0.0, var: 0.0, alpha, seen_first: false })
    }

    /// First call adopts the batch statistics directly; later calls blend:
    /// `mu <- (1-a) mu + a batch_mean`, same for the variance.
    pub fn update(&mut self, batch_mean: f64, batch_var: f64) -> Result<()> {
        if !batch_mean.is_finite() || !batch_var.is_finite() {
            return Err(Error::NonFinite("batch statistics".into()));
        }
        if batch_var < 0.0 {
            return Err(Error::Invariant(format!("negative batch variance {batch_var}")));
        }
        if self.seen_first {
            self.mu = (1.0 - self.alpha) * self.mu + self.alpha * batch_mean;
            self.var = (1.0 - self.alpha) * self.var + self.alpha * batch_var;
        } else {
            self.mu = batch_mean;
            self.var = batch_var;
            self.seen_first = true;
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }
}

/// Population mean and variance of a score batch (variance divides by n, so
/// a singleton batch contributes variance 0).
pub fn batch_moments(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Invariant("empty score batch".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub alloc: EmaStats,
    pub trig: EmaStats,
    pub kappa_alloc: f64,
    pub kappa_trig: f64,
    pub last_alloc_threshold: f64,
}

/// Outcome of one trigger evaluation; `threshold` is NaN on the first batch,
/// where no previous statistics exist and triggering is unconditional.
#[derive(Clone, Copy, Debug)]
pub struct TriggerDecision {
    pub triggered: bool,
    pub threshold: f64,
    pub batch_mean: f64,
}

impl ArmState {
    pub fn new(alpha_alloc: f64, kappa_alloc: f64, alpha_trig: f64, kappa_trig: f64) -> Result<Self> {
        if !kappa_alloc.is_finite() || !kappa_trig.is_finite() {
            return Err(Error::Config("scaling coefficients must be finite".into()));
        }
        Ok(ArmState {
            alloc: EmaStats::new(alpha_alloc)?,
            trig: EmaStats::new(alpha_trig)?,
            kappa_alloc,
            kappa_trig,
            last_alloc_threshold: f64::NAN,
        })
    }

    /// Fold the current batch's score moments into the allocation statistics,
    /// then return `mu + kappa * sigma`.
    pub fn allocation_threshold(&mut self, batch_scores: &[f64]) -> Result<f64> {
        let (mean, var) = batch_moments(batch_scores)?;
        self.alloc.update(mean, var)?;
        let tau = self.alloc.mu + self.kappa_alloc * self.alloc.sigma();
        self.last_alloc_threshold = tau;
        Ok(tau)
    }

    /// Compare the batch mean against the threshold built from the PREVIOUS
    /// batches' statistics; strict inequality, and an unconditional trigger
    /// before any statistics exist. Does not update the statistics — call
    /// [`ArmState::commit_trigger_stats`] after the adaptation stage.
    pub fn trigger_decision(&self, batch_scores: &[f64]) -> Result<TriggerDecision> {
        let (mean, _) = batch_moments(batch_scores)?;
        if !self.trig.seen_first {
            return Ok(TriggerDecision { triggered: true, threshold: f64::NAN, batch_mean: mean });
        }
        let tau = self.trig.mu + self.kappa_trig * self.trig.sigma();
        Ok(TriggerDecision { triggered: mean > tau, threshold: tau, batch_mean: mean })
    }

    /// Fold the batch into the trigger statistics. Must run once per batch,
    /// after adaptation, whatever the decision was.
    pub fn commit_trigger_stats(&mut self, batch_scores: &[f64]) -> Result<()> {
        let (mean, var) = batch_moments(batch_scores)?;
        self.trig.update(mean, var)
    }
}

/// Split score indices by the allocation threshold: strictly below goes
/// reliable, at or above goes unreliable.
pub fn route(scores: &[f64], tau_alloc: f64) -> (Vec<usize>, Vec<usize>) {
    let mut reliable = Vec::new();
    let mut unreliable = Vec::new();
    for (i, &u) in scores.iter().enumerate() {
        if u < tau_alloc {
            reliable.push(i);
        } else {
            unreliable.push(i);
        }
    }
    (reliable, unreliable)
}

/// Replay a recorded sequence of per-batch score moments through the trigger
/// rule with a different scaling coefficient, returning how many batches
/// would have triggered. Used to audit sensitivity without rerunning models.
pub fn replay_trigger_count(
    moments: &[(f64, f64)],
    alpha_trig: f64,
    kappa_trig: f64,
) -> Result<usize> {
    let mut stats = EmaStats::new(alpha_trig)?;
    let mut count = 0usize;
    for &(mean, var) in moments {
        let triggered =
            if stats.seen_first { mean > stats.mu + kappa_trig * stats.sigma() } else { true };
        if triggered {
            count += 1;
        }
        stats.update(mean, var)?;
    }
    Ok(count)
}
