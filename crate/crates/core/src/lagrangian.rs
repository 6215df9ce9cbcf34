//! Dual multiplier on the cost constraint, driven by a moving window of
//! real per-step costs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeConfig {
    pub init: f64,
    pub alpha: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Per-episode cost budget `b`.
    pub budget: f64,
    pub window: usize,
    pub episode_length: usize,
    /// Use `lambda - alpha (C - b)` instead of dual ascent.
    pub paper_sign: bool,
}

impl Default for LagrangeConfig {
    fn default() -> Self {
        Self {
            init: 1.0,
            alpha: 0.02,
            lambda_min: 1e-3,
            lambda_max: 100.0,
            budget: 25.0,
            window: 50,
            episode_length: 500,
            paper_sign: false,
        }
    }
}

impl LagrangeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_min.is_finite() && self.lambda_max.is_finite()) || self.lambda_min < 0.0 || self.lambda_min > self.lambda_max {
            return bad("lagrange bounds must satisfy 0 <= min <= max");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("lagrange.alpha must be finite and >= 0");
        }
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return bad("budget must be finite and >= 0");
        }
        if self.window == 0 || self.episode_length == 0 {
            return bad("lagrange window and episode length must be positive");
        }
        if !self.init.is_finite() {
            return bad("lagrange.init must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub cfg: LagrangeConfig,
    pub lambda: f64,
    pub window: VecDeque<f64>,
}

impl LagrangeState {
    pub fn new(cfg: LagrangeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lambda: cfg.init.clamp(cfg.lambda_min, cfg.lambda_max),
            window: VecDeque::with_capacity(cfg.window),
            cfg,
        })
    }

    pub fn record_cost(&mut self, cost: f64) -> Result<()> {
        if cost.is_nan() || cost < 0.0 {
            return Err(Error::InvalidArgument(format!("per-step cost must be >= 0, got {cost}")));
        }
        if self.window.len() == self.cfg.window {
            self.window.pop_front();
        }
        self.window.push_back(cost);
        Ok(())
    }

    /// Window mean expressed in episode units: `mean * episode_length`,
    /// which is the window sum times `episode_length / l` once full.
    pub fn mean_cost(&self) -> Result<f64> {
        if self.window.is_empty() {
            return Err(Error::InsufficientData("cost window is empty".into()));
        }
        let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
        Ok(mean * self.cfg.episode_length as f64)
    }

    /// `Clip(lambda + alpha (C_k - b))`, or the minus sign with `paper_sign`.
    /// Returns `C_k`.
    pub fn update(&mut self) -> Result<f64> {
        let ck = self.mean_cost()?;
        let step = self.cfg.alpha * (ck - self.cfg.budget);
        let next = if self.cfg.paper_sign { self.lambda - step } else { self.lambda + step };
        // A NaN step would otherwise slip through clamp.
        let next = if next.is_nan() { self.lambda } else { next };
        self.lambda = next.clamp(self.cfg.lambda_min, self.cfg.lambda_max);
        Ok(ck)
    }
}
