//! Noise schedules and the closed-form forward / stepwise reverse diffusion
//! algebra.
//!
//! Step indices are 0-based: index `t` corresponds to the `(t + 1)`-th step
//! of the usual 1-based notation. All tables are kept in `f64`; images are
//! `f32` and are promoted for the arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable schedule parameters, as stored in run configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default = "default_cosine_offset")]
    pub cosine_offset: f64,
}

fn default_beta_start() -> f64 {
    1e-6
}

fn default_beta_end() -> f64 {
    0.01
}

fn default_cosine_offset() -> f64 {
    0.008
}

impl ScheduleConfig {
    /// Single-speaker column: linear, 2000 steps, 1e-6 .. 0.01.
    pub fn single_speaker() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_steps: 2000,
            beta_start: 1e-6,
            beta_end: 0.01,
            cosine_offset: default_cosine_offset(),
        }
    }

    /// Multi-speaker column: cosine, 1000 steps.
    pub fn multi_speaker() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            num_steps: 1000,
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            cosine_offset: default_cosine_offset(),
        }
    }

    /// Linear 1e-4 .. 0.02 over 1000 steps, rescaled to 200 steps.
    pub fn desk() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            cosine_offset: default_cosine_offset(),
        }
    }

    pub fn cosine(num_steps: usize) -> Self {
        Self {
            num_steps,
            ..Self::multi_speaker()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => make_linear_schedule(self.num_steps, self.beta_start, self.beta_end),
            ScheduleKind::Cosine => make_cosine_schedule(self.num_steps, self.cosine_offset),
        }
    }
}

/// Per-step β / α / ᾱ tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Indices into the training schedule this schedule was derived from
    /// (`0..T` for an un-respaced schedule).
    timesteps: Vec<usize>,
}

const MAX_COSINE_BETA: f64 = 0.999;

pub fn make_linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(invalid!("linear schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!(
            "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start} .. {beta_end}"
        ));
    }
    let betas = if num_steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        let last = (num_steps - 1) as f64;
        (0..num_steps)
            .map(|t| {
                if t == num_steps - 1 {
                    beta_end
                } else {
                    beta_start + span * (t as f64 / last)
                }
            })
            .collect()
    };
    Ok(NoiseSchedule::from_betas(ScheduleKind::Linear, betas))
}

fn cosine_f(u: f64, num_steps: usize, offset: f64) -> f64 {
    let arg = ((u / num_steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
    arg.cos().powi(2)
}

pub fn make_cosine_schedule(num_steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(invalid!("cosine schedule needs at least one step"));
    }
    if !(offset > 0.0 && offset < 1.0) {
        return Err(invalid!("cosine offset must lie in (0, 1), got {offset}"));
    }
    let f0 = cosine_f(0.0, num_steps, offset);
    let mut prev = 1.0;
    let mut betas = Vec::with_capacity(num_steps);
    for t in 0..num_steps {
        let ab = cosine_f((t + 1) as f64, num_steps, offset) / f0;
        let beta = (1.0 - ab / prev).clamp(f64::MIN_POSITIVE, MAX_COSINE_BETA);
        betas.push(beta);
        prev = ab;
    }
    Ok(NoiseSchedule::from_betas(ScheduleKind::Cosine, betas))
}

impl NoiseSchedule {
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let timesteps = (0..betas.len()).collect();
        Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            timesteps,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(invalid!("step {t} out of range for a {}-step schedule", self.num_steps()));
        }
        Ok(())
    }

    /// Closed-form forward noising: `sqrt(ᾱ_t)·y0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample(&self, y0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        self.check_step(t)?;
        if y0.len() != eps.len() {
            return Err(invalid!("q_sample: signal has {} values, noise has {}", y0.len(), eps.len()));
        }
        let (signal, noise) = self.q_coefficients(t);
        Ok(y0
            .iter()
            .zip(eps)
            .map(|(&y, &e)| (signal * y as f64 + noise * e as f64) as f32)
            .collect())
    }

    /// `(sqrt(ᾱ_t), sqrt(1 − ᾱ_t))`; `t` must be in range.
    pub fn q_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// One reverse step from `y_t` to `y_{t-1}` given the predicted noise.
    ///
    /// `noise` is the fresh Gaussian sample; pass `None` for the final
    /// (t = 0) step, which adds none.
    pub fn reverse_step(&self, y_t: &[f32], eps_hat: &[f32], t: usize, noise: Option<&[f32]>) -> Result<Vec<f32>> {
        self.check_step(t)?;
        if y_t.len() != eps_hat.len() {
            return Err(invalid!(
                "reverse_step: sample has {} values, prediction has {}",
                y_t.len(),
                eps_hat.len()
            ));
        }
        if let Some(n) = noise {
            if n.len() != y_t.len() {
                return Err(invalid!("reverse_step: noise has {} values, expected {}", n.len(), y_t.len()));
            }
        }
        let alpha = self.alphas[t];
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let eps_coef = (1.0 - alpha) / (1.0 - self.alpha_bars[t]).sqrt();
        let sigma = (1.0 - alpha).sqrt();
        let out = y_t
            .iter()
            .zip(eps_hat)
            .enumerate()
            .map(|(i, (&y, &e))| {
                let mean = inv_sqrt_alpha * (y as f64 - eps_coef * e as f64);
                let z = noise.map_or(0.0, |n| n[i] as f64);
                (mean + sigma * z) as f32
            })
            .collect();
        Ok(out)
    }

    /// Schedule over an evenly strided subsequence of this schedule's steps.
    ///
    /// The selected ᾱ values are copied unchanged and β is recomputed from
    /// consecutive ratios. Respacing to the full length returns an identical
    /// schedule.
    pub fn respace(&self, num_inference_steps: usize) -> Result<NoiseSchedule> {
        let total = self.num_steps();
        if num_inference_steps == 0 || num_inference_steps > total {
            return Err(invalid!(
                "cannot respace a {total}-step schedule to {num_inference_steps} steps"
            ));
        }
        if num_inference_steps == total {
            return Ok(self.clone());
        }
        let picks: Vec<usize> = (0..num_inference_steps)
            .map(|j| (j + 1) * total / num_inference_steps - 1)
            .collect();
        let alpha_bars: Vec<f64> = picks.iter().map(|&i| self.alpha_bars[i]).collect();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(picks.len());
        for &ab in &alpha_bars {
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        Ok(NoiseSchedule {
            kind: self.kind,
            betas,
            alphas,
            alpha_bars,
            timesteps: picks.iter().map(|&i| self.timesteps[i]).collect(),
        })
    }
}
