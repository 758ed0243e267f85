//! Windowed layer sensitivity and adaptive step sizes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub window: usize,
    pub gain_k: f64,
    pub initial_step: f64,
    pub step_min: f64,
    pub step_max: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            window: 5,
            gain_k: 1.0,
            initial_step: 0.05,
            step_min: 0.005,
            step_max: 0.25,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("sensitivity window must be positive".into()));
        }
        if !(self.step_min > 0.0 && self.step_min <= self.step_max && self.step_max <= 1.0) {
            return Err(Error::Config(format!(
                "step bounds [{}, {}] must satisfy 0 < min <= max <= 1",
                self.step_min, self.step_max
            )));
        }
        if !(self.initial_step >= self.step_min && self.initial_step <= self.step_max) {
            return Err(Error::Config(format!(
                "initial step {} outside [{}, {}]",
                self.initial_step, self.step_min, self.step_max
            )));
        }
        if !self.gain_k.is_finite() || self.gain_k < 0.0 {
            return Err(Error::Config("gain_k must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Recent accuracy drops of one layer and its current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityState {
    pub layer_name: String,
    window: VecDeque<f64>,
    capacity: usize,
    sensitivity: f64,
    step: f64,
    gain_k: f64,
    step_min: f64,
    step_max: f64,
}

impl SensitivityState {
    pub fn new(layer_name: impl Into<String>, config: &SensitivityConfig) -> Self {
        Self {
            layer_name: layer_name.into(),
            window: VecDeque::with_capacity(config.window),
            capacity: config.window.max(1),
            sensitivity: 0.0,
            step: config.initial_step,
            gain_k: config.gain_k,
            step_min: config.step_min,
            step_max: config.step_max,
        }
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Push `baseline - pruned` and recompute the window mean.
    pub fn record_impact(&mut self, baseline_acc: f64, pruned_acc: f64) -> Result<()> {
        for (what, v) in [("baseline", baseline_acc), ("pruned", pruned_acc)] {
            if !v.is_finite() {
                return Err(Error::Contract(format!("{what} accuracy is not finite")));
            }
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Contract(format!("{what} accuracy {v} outside [0, 100]")));
            }
        }
        self.push_drop(baseline_acc - pruned_acc);
        Ok(())
    }

    fn push_drop(&mut self, drop: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(drop);
        self.sensitivity = self.window.iter().sum::<f64>() / self.window.len() as f64;
    }

    /// `step + k * step * (threshold - sensitivity)`, clamped to the bounds.
    pub fn update_step(&mut self, threshold: f64) -> f64 {
        let raw = self.step + self.gain_k * self.step * (threshold - self.sensitivity);
        self.step = raw.clamp(self.step_min, self.step_max);
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(window: usize) -> SensitivityState {
        SensitivityState::new(
            "l",
            &SensitivityConfig {
                window,
                ..SensitivityConfig::default()
            },
        )
    }

    #[test]
    fn window_mean() {
        let mut s = state(4);
        for d in [0.2, 0.4, 0.1, 0.3] {
            s.record_impact(90.0, 90.0 - d).unwrap();
        }
        assert!((s.sensitivity() - 0.25).abs() < 1e-9);
        s.record_impact(90.0, 89.0).unwrap();
        let expected = (0.4 + 0.1 + 0.3 + 1.0) / 4.0;
        assert!((s.sensitivity() - expected).abs() < 1e-9);
    }

    #[test]
    fn first_impact() {
        let mut s = state(5);
        s.record_impact(80.0, 79.5).unwrap();
        assert_eq!(s.sensitivity(), 0.5);
        assert!(s.record_impact(f64::NAN, 1.0).is_err());
        assert!(s.record_impact(101.0, 1.0).is_err());
    }

    #[test]
    fn step_examples() {
        let mut s = state(5);
        s.record_impact(80.0, 79.5).unwrap();
        assert!((s.update_step(1.0) - 0.075).abs() < 1e-12);

        let mut s = state(5);
        s.record_impact(80.0, 79.0).unwrap();
        assert_eq!(s.update_step(1.0), 0.05);

        let mut s = state(5);
        s.record_impact(80.0, 77.0).unwrap();
        assert_eq!(s.update_step(1.0), 0.005);
    }
}
