//! Noise schedule and the closed-form pieces of the diffusion refiner:
//! forward noising, uncertainty labels, deterministic DDIM updates and the
//! final additive refinement.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiffusionError {
    #[error("beta range must satisfy 0 < beta_min <= beta_max < 1, got [{0}, {1}]")]
    BetaRange(f64, f64),
    #[error("timestep {0} outside 1..={1}")]
    Timestep(usize, usize),
    #[error("DDIM needs between 1 and {1} evaluations, got {0}")]
    DdimSteps(usize, usize),
    #[error("{0} GRU iterations cannot split a conditioning width of {1}")]
    GruChunks(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Denoiser evaluations at inference.
    pub ddim_steps: usize,
    /// Residual scale `s` in meters.
    pub scale: f64,
    /// Absolute threshold for the uncertainty label, m.
    pub e1: f64,
    /// Relative threshold for the uncertainty label.
    pub e2: f64,
    /// GRU iterations over the conditioning chunks.
    pub gru_iters: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02, ddim_steps: 2, scale: 10.0, e1: 1.0, e2: 0.1, gru_iters: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    /// `alpha_bar[t - 1] = Π_{k ≤ t} (1 − β_k)`.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear β ramp over `steps` timesteps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) || steps == 0 {
            return Err(DiffusionError::BetaRange(beta_min, beta_max));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_min + f * (beta_max - beta_min)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self, DiffusionError> {
        Self::linear(cfg.steps, cfg.beta_min, cfg.beta_max)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_t` with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `evaluations` timesteps evenly spaced from `T` down, each followed by
    /// the next one (the last by 0). Two evaluations over 1000 steps give
    /// `[1000, 500]`.
    pub fn ddim_timesteps(&self, evaluations: usize) -> Result<Vec<usize>, DiffusionError> {
        let t = self.steps();
        if evaluations == 0 || evaluations > t {
            return Err(DiffusionError::DdimSteps(evaluations, t));
        }
        Ok((0..evaluations).map(|i| t - (i * t) / evaluations).collect())
    }
}

/// `ε_0 = (Δρ_GT − Δρ_init) / s`.
pub fn make_gt_residual(gt: f64, init: f64, scale: f64) -> f64 {
    (gt - init) / scale
}

/// `x_t = sqrt(ᾱ_t)·x_0 + sqrt(1 − ᾱ_t)·z`, applied to the residual and the
/// uncertainty alike.
pub fn forward_diffuse(x0: f64, z: f64, t: usize, schedule: &DiffusionSchedule) -> Result<f64, DiffusionError> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::Timestep(t, schedule.steps()));
    }
    let ab = schedule.alpha_bar_at(t);
    Ok(ab.sqrt() * x0 + (1.0 - ab).sqrt() * z)
}

/// 0 (reliable) when the coarse estimate is within `e1` meters and `e2`
/// relative of the truth, otherwise 1. With a zero truth only the absolute
/// test applies.
pub fn make_uncertainty_label(init: f64, gt: f64, e1: f64, e2: f64) -> f64 {
    let e_ab = (init - gt).abs();
    let reliable = if gt == 0.0 { e_ab < e1 } else { e_ab < e1 && e_ab / gt.abs() < e2 };
    if reliable {
        0.0
    } else {
        1.0
    }
}

/// One deterministic DDIM move from `t` to `t_next < t` given the clean-sample
/// prediction `x0_hat`.
pub fn ddim_update(x_t: f64, x0_hat: f64, t: usize, t_next: usize, schedule: &DiffusionSchedule) -> f64 {
    let ab = schedule.alpha_bar_at(t);
    let ab_next = schedule.alpha_bar_at(t_next);
    let noise = (x_t - ab.sqrt() * x0_hat) / (1.0 - ab).sqrt();
    ab_next.sqrt() * x0_hat + (1.0 - ab_next).sqrt() * noise
}

/// Runs the DDIM chain over `timesteps` for a vector state. `denoise(t, x)`
/// returns the clean-sample prediction for every coordinate; the output is the
/// last prediction.
pub fn ddim_chain<E>(
    mut x: Vec<f64>,
    timesteps: &[usize],
    schedule: &DiffusionSchedule,
    mut denoise: impl FnMut(usize, &[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<f64>, E> {
    let mut pred = x.clone();
    for (i, &t) in timesteps.iter().enumerate() {
        pred = denoise(t, &x)?;
        let t_next = timesteps.get(i + 1).copied().unwrap_or(0);
        x = x.iter().zip(&pred).map(|(&xt, &p)| ddim_update(xt, p, t, t_next, schedule)).collect();
    }
    Ok(pred)
}

/// `Δρ_fine = Δρ_init + s·ε̂_0`.
pub fn refine(init: f64, eps_hat: f64, scale: f64) -> f64 {
    init + scale * eps_hat
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        assert_eq!(s.alpha_bar[0], 1.0 - s.beta[0]);
        assert!(s.alpha_bar_at(1000) < 0.01);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn ddim_timesteps_two_evaluations() {
        assert_eq!(sched().ddim_timesteps(2).unwrap(), vec![1000, 500]);
        assert_eq!(sched().ddim_timesteps(1).unwrap(), vec![1000]);
        assert_eq!(sched().ddim_timesteps(500).unwrap().len(), 500);
    }

    #[test]
    fn residual_and_refine() {
        assert_eq!(make_gt_residual(5.0, 5.0, 10.0), 0.0);
        assert_eq!(make_gt_residual(12.0, 2.0, 10.0), 1.0);
        assert!(make_gt_residual(1.0, 3.0, 10.0) < 0.0);
        assert_eq!(refine(2.0, 1.0, 10.0), 12.0);
        assert_eq!(refine(2.0, 0.0, 10.0), 2.0);
    }

    #[test]
    fn noiseless_and_pure_noise_limits() {
        let s = sched();
        let ab = s.alpha_bar_at(300);
        assert_eq!(forward_diffuse(2.0, 0.0, 300, &s).unwrap(), ab.sqrt() * 2.0);
        assert_eq!(forward_diffuse(0.0, 1.5, 300, &s).unwrap(), (1.0 - ab).sqrt() * 1.5);
        assert_eq!(forward_diffuse(0.0, 1.0, 0, &s), Err(DiffusionError::Timestep(0, 1000)));
    }

    #[test]
    fn uncertainty_labels() {
        assert_eq!(make_uncertainty_label(7.0, 7.0, 1.0, 0.1), 0.0);
        assert_eq!(make_uncertainty_label(0.0, 1.5, 1.0, 0.1), 1.0);
        assert_eq!(make_uncertainty_label(19.5, 20.0, 1.0, 0.1), 0.0);
        assert_eq!(make_uncertainty_label(0.5, 0.0, 1.0, 0.1), 0.0);
    }
}
