//! Training objectives and evaluation metrics for kernel generation.
//!
//! Scores `s` are average per-token log-likelihoods of an output given its
//! query. Correct outputs are weighted by a softmax over their speed rewards;
//! incorrect outputs are pushed down through a temperature-scaled
//! log-mean-exp; a squared hinge keeps the policy within a KL budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("execution times must be positive, got {0} and {1}")]
    NonpositiveTime(f64, f64),
    #[error("weights need at least one reward")]
    EmptySet,
    #[error("rollout group has no outputs")]
    EmptyGroup,
    #[error("advantages need at least two rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("{ratios} ratio lists for {advantages} advantages")]
    LengthMismatch { ratios: usize, advantages: usize },
    #[error("loss needs at least one sample")]
    EmptyBatch,
    #[error("metrics need at least one record")]
    EmptyRecords,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Shape of the speed reward applied to `t_torch / t_triton`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeedFn {
    Log,
    Power { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Temperature of the log-mean-exp over incorrect outputs.
    pub tau: f64,
    /// Temperature of the speed weights over correct outputs.
    pub lambda: f64,
    /// Scale of the KL hinge penalty.
    pub beta: f64,
    /// KL budget below which the penalty is zero.
    pub delta: f64,
    pub speed: SpeedFn,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { tau: 5.0, lambda: 0.1, beta: 100.0, delta: 0.001, speed: SpeedFn::Log }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [("tau", self.tau), ("lambda", self.lambda), ("beta", self.beta), ("delta", self.delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RewardError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if let SpeedFn::Power { alpha } = self.speed {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(RewardError::InvalidParams(format!("alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Average log-likelihood of the output.
    pub s: f64,
    pub correct: bool,
    pub t_torch: f64,
    pub t_triton: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    #[serde(default)]
    pub query: String,
    pub outputs: Vec<Rollout>,
}

pub fn speed_reward(t_torch: f64, t_triton: f64, f: SpeedFn) -> Result<f64, RewardError> {
    if !(t_torch > 0.0 && t_triton > 0.0) {
        return Err(RewardError::NonpositiveTime(t_torch, t_triton));
    }
    let ratio = t_torch / t_triton;
    Ok(match f {
        SpeedFn::Log => ratio.ln(),
        SpeedFn::Power { alpha } => ratio.powf(alpha),
    })
}

/// Softmax of `rewards / lambda`.
pub fn correct_weights(rewards: &[f64], lambda: f64) -> Result<Vec<f64>, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptySet);
    }
    Ok(softmax(&rewards.iter().map(|r| r / lambda).collect::<Vec<_>>()))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `tau * log(mean(exp(x / tau)))`.
pub fn log_mean_exp(x: &[f64], tau: f64) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| ((v - m) / tau).exp()).sum();
    m + tau * (sum / x.len() as f64).ln()
}

/// `beta * max(0, kl - delta)^2`.
pub fn kl_hinge(kl: f64, params: &RewardParams) -> f64 {
    let over = (kl - params.delta).max(0.0);
    params.beta * over * over
}

/// Speed weights of the group's correct outputs, in group order.
fn group_weights(group: &RolloutGroup, params: &RewardParams) -> Result<Vec<f64>, RewardError> {
    let rewards = group
        .outputs
        .iter()
        .filter(|o| o.correct)
        .map(|o| speed_reward(o.t_torch, o.t_triton, params.speed))
        .collect::<Result<Vec<_>, _>>()?;
    if rewards.is_empty() {
        return Ok(Vec::new());
    }
    correct_weights(&rewards, params.lambda)
}

/// Per-query part of the objective, without the KL hinge.
fn group_terms(group: &RolloutGroup, params: &RewardParams) -> Result<f64, RewardError> {
    if group.outputs.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let w = group_weights(group, params)?;
    let pos: f64 = group.outputs.iter().filter(|o| o.correct).zip(&w).map(|(o, w)| w * o.s).sum();
    let neg: Vec<f64> = group.outputs.iter().filter(|o| !o.correct).map(|o| o.s).collect();
    let neg_term = if neg.is_empty() { 0.0 } else { log_mean_exp(&neg, params.tau) };
    Ok(-pos + neg_term)
}

/// Objective for one query. Empty correct or incorrect sets drop their term.
pub fn drpo_loss(group: &RolloutGroup, kl: f64, params: &RewardParams) -> Result<f64, RewardError> {
    params.validate()?;
    Ok(group_terms(group, params)? + kl_hinge(kl, params))
}

/// Objective over a batch: per-query terms averaged, plus one KL hinge.
pub fn drpo_batch_loss(groups: &[RolloutGroup], kl: f64, params: &RewardParams) -> Result<f64, RewardError> {
    params.validate()?;
    if groups.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let mut sum = 0.0;
    for g in groups {
        sum += group_terms(g, params)?;
    }
    Ok(sum / groups.len() as f64 + kl_hinge(kl, params))
}

/// Gradient of [`drpo_loss`] with respect to each output's score, treating
/// the speed weights as constants.
pub fn drpo_grad_s(group: &RolloutGroup, params: &RewardParams) -> Result<Vec<f64>, RewardError> {
    params.validate()?;
    if group.outputs.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let mut w = group_weights(group, params)?.into_iter();
    let neg: Vec<f64> = group.outputs.iter().filter(|o| !o.correct).map(|o| o.s / params.tau).collect();
    let mut p = softmax(&neg).into_iter();
    Ok(group
        .outputs
        .iter()
        .map(|o| if o.correct { -w.next().expect("one weight per correct output") } else { p.next().expect("one share per incorrect output") })
        .collect())
}

pub fn grpo_reward(correct: bool, t_torch: f64, t_triton: f64, f: SpeedFn) -> Result<f64, RewardError> {
    let r = speed_reward(t_torch, t_triton, f)?;
    Ok(if correct { 1.0 + r } else { 0.0 })
}

/// `(r - mean) / std` with the population standard deviation; a constant
/// group gets all-zero advantages.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    // The computed mean of equal values can be off by an ulp, so test equality directly.
    if std == 0.0 || rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Clipped surrogate objective (to be maximized).
pub fn grpo_surrogate(ratios: &[Vec<f64>], advantages: &[f64], eps: f64, beta_kl: f64, kl: f64) -> Result<f64, RewardError> {
    if ratios.len() != advantages.len() {
        return Err(RewardError::LengthMismatch { ratios: ratios.len(), advantages: advantages.len() });
    }
    if ratios.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let mut total = 0.0;
    for (rs, &a) in ratios.iter().zip(advantages) {
        if rs.is_empty() {
            return Err(RewardError::EmptyBatch);
        }
        let per: f64 = rs.iter().map(|&r| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)).sum();
        total += per / rs.len() as f64;
    }
    Ok(total / ratios.len() as f64 - beta_kl * kl)
}

/// Negative mean of per-pair average log-likelihoods.
pub fn sft_loss(avg_logliks: &[f64]) -> Result<f64, RewardError> {
    if avg_logliks.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    Ok(-avg_logliks.iter().sum::<f64>() / avg_logliks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub correct: bool,
    /// `t_torch / t_triton`; only meaningful for correct records.
    #[serde(default)]
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Percentage of correct records.
    pub acc: f64,
    /// Percentage of all records that are correct and faster than the baseline.
    pub faster1: f64,
    /// Geometric mean speedup over correct records; absent when none are correct.
    pub geomean_speedup: Option<f64>,
}

pub fn eval_metrics(records: &[EvalRecord]) -> Result<EvalMetrics, RewardError> {
    if records.is_empty() {
        return Err(RewardError::EmptyRecords);
    }
    let n = records.len() as f64;
    let speedups: Vec<f64> = records.iter().filter(|r| r.correct).filter_map(|r| r.speedup).collect();
    for &s in &speedups {
        if s.is_nan() || s <= 0.0 {
            return Err(RewardError::NonpositiveTime(s, 1.0));
        }
    }
    let correct = records.iter().filter(|r| r.correct).count() as f64;
    let faster = speedups.iter().filter(|&&s| s > 1.0).count() as f64;
    let geomean = (!speedups.is_empty()).then(|| (speedups.iter().map(|s| s.ln()).sum::<f64>() / speedups.len() as f64).exp());
    Ok(EvalMetrics { acc: 100.0 * correct / n, faster1: 100.0 * faster / n, geomean_speedup: geomean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(s: f64, correct: bool, ratio: f64) -> Rollout {
        Rollout { s, correct, t_torch: ratio, t_triton: 1.0 }
    }

    #[test]
    fn single_correct_output() {
        let g = RolloutGroup { query: "q".into(), outputs: vec![out(-1.0, true, 1.3)] };
        let p = RewardParams::default();
        assert_eq!(drpo_loss(&g, 0.0, &p).unwrap(), 1.0);
        assert_eq!(drpo_grad_s(&g, &p).unwrap(), vec![-1.0]);
        assert_eq!(kl_hinge(p.delta, &p), 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let p = RewardParams::default();
        let g = RolloutGroup { query: String::new(), outputs: vec![] };
        assert_eq!(drpo_loss(&g, 0.0, &p), Err(RewardError::EmptyGroup));
        assert_eq!(correct_weights(&[], 1.0), Err(RewardError::EmptySet));
        assert_eq!(grpo_advantage(&[1.0]), Err(RewardError::GroupTooSmall(1)));
        assert_eq!(sft_loss(&[]), Err(RewardError::EmptyBatch));
        assert_eq!(eval_metrics(&[]), Err(RewardError::EmptyRecords));
        assert!(speed_reward(0.0, 1.0, SpeedFn::Log).is_err());
        assert!(RewardParams { tau: 0.0, ..RewardParams::default() }.validate().is_err());
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0], 0.01) - 1000.0).abs() < 1e-9);
        assert!((log_mean_exp(&[-2.0, -2.0], 5.0) + 2.0).abs() < 1e-12);
    }
}
