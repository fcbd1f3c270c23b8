//! Noise schedules and the per-step tables derived from them.
//!
//! Timesteps are 1-indexed at the interface (`t ∈ 1..=T`); storage is 0-indexed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// How the reverse-step standard deviation is derived from the forward tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `σ_t = sqrt(1 − ᾱ_t)`.
    #[default]
    Marginal,
    /// `σ_t² = β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    variance: VarianceMode,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    /// Original training timestep for each entry (identity unless respaced).
    timesteps: Vec<usize>,
    train_steps: usize,
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let timesteps: Vec<usize> = (1..=beta.len()).collect();
        let train_steps = beta.len();
        Self::assemble(kind, VarianceMode::Marginal, beta, timesteps, train_steps)
    }

    fn assemble(
        kind: ScheduleKind,
        variance: VarianceMode,
        beta: Vec<f64>,
        timesteps: Vec<usize>,
        train_steps: usize,
    ) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut s = Self {
            kind,
            variance,
            beta,
            alpha,
            alpha_bar,
            sigma: Vec::new(),
            timesteps,
            train_steps,
        };
        s.sigma = s.compute_sigma(variance);
        s
    }

    fn compute_sigma(&self, mode: VarianceMode) -> Vec<f64> {
        match mode {
            VarianceMode::Marginal => self.alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect(),
            VarianceMode::Posterior => (0..self.len())
                .map(|i| {
                    let prev = if i == 0 { 1.0 } else { self.alpha_bar[i - 1] };
                    (self.beta[i] * (1.0 - prev) / (1.0 - self.alpha_bar[i])).sqrt()
                })
                .collect(),
        }
    }

    /// Linearly interpolated betas from `beta_start` (t=1) to `beta_end` (t=T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        if steps == 1 && beta_start != beta_end {
            return Err(Error::InvalidRange(
                "a single-step linear schedule needs beta_start == beta_end".into(),
            ));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(ScheduleKind::Linear, beta))
    }

    /// Cosine-squared `ᾱ` curve with betas clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(Error::InvalidRange(format!(
                "cosine offset must lie in (0, 1), got {offset}"
            )));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, beta))
    }

    /// Default schedule of `kind` with `steps` entries. Linear endpoints are
    /// the defaults at `T = 1000` and scale by `1000/T` elsewhere (capped at
    /// [`MAX_BETA`]) so that `ᾱ_T` stays near zero for short chains.
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps.max(1) as f64;
                let start = (DEFAULT_BETA_START * scale).min(MAX_BETA);
                let end = (DEFAULT_BETA_END * scale).min(MAX_BETA);
                Self::linear(steps, if steps == 1 { end } else { start }, end)
            }
            ScheduleKind::Cosine => Self::cosine(steps, DEFAULT_COSINE_OFFSET),
        }
    }

    pub fn with_variance(mut self, mode: VarianceMode) -> Self {
        self.variance = mode;
        self.sigma = self.compute_sigma(mode);
        self
    }

    /// Keeps the evenly strided timesteps `t_j = ⌊j·T/S⌋`, `j = 1..=S`, and
    /// recomputes betas so `ᾱ` at every kept timestep is preserved.
    pub fn respace(&self, num_steps: usize) -> Result<Self> {
        let len = self.len();
        if num_steps == 0 || num_steps > len {
            return Err(Error::InvalidRange(format!(
                "respace needs 1 <= steps <= {len}, got {num_steps}"
            )));
        }
        if num_steps == len {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (1..=num_steps).map(|j| j * len / num_steps).collect();
        let mut beta = Vec::with_capacity(num_steps);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar[t - 1];
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let timesteps = kept.iter().map(|&t| self.timesteps[t - 1]).collect();
        let mut out = Self::assemble(self.kind, self.variance, beta, timesteps, self.train_steps);
        // Pin ᾱ to the source table so kept values are exact rather than re-accumulated.
        for (j, &t) in kept.iter().enumerate() {
            out.alpha_bar[j] = self.alpha_bar[t - 1];
        }
        out.sigma = out.compute_sigma(out.variance);
        Ok(out)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn variance(&self) -> VarianceMode {
        self.variance
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Length of the schedule the denoiser was trained against.
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }

    /// The training timestep the denoiser should be conditioned on at entry `t`.
    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        Ok(self.timesteps[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }
}
