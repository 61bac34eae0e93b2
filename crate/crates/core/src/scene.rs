//! Synthetic scenes with analytically known distributions.
//!
//! A scene is a Gaussian mixture over per-frame latent vectors whose means
//! may drift linearly with the frame index. The exact sampler doubles as
//! the teacher for the first chunk, and the closed-form noised log-density
//! is the oracle for the teacher score.

use adastate_tensor::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneMode {
    Stationary,
    Drifting,
}

/// One mixture component with a diagonal covariance.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub mode: SceneMode,
    pub frame_dim: usize,
    pub components: Vec<MixtureComponent>,
    /// Latent units of mean motion per frame; all zeros when stationary.
    pub drift: Vec<f64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(CoreError::contract("scene", "no mixture components"));
        }
        let wsum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(CoreError::contract(
                "scene",
                format!("mixture weights sum to {wsum}, expected 1"),
            ));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != self.frame_dim || c.var.len() != self.frame_dim {
                return Err(CoreError::contract(
                    "scene",
                    format!("component {k} dims do not match frame_dim {}", self.frame_dim),
                ));
            }
            if c.weight < 0.0 || c.var.iter().any(|v| *v <= 0.0) {
                return Err(CoreError::contract(
                    "scene",
                    format!("component {k} has a non-positive weight or variance"),
                ));
            }
        }
        if self.drift.len() != self.frame_dim {
            return Err(CoreError::contract("scene", "drift length != frame_dim"));
        }
        if self.mode == SceneMode::Stationary && self.drift.iter().any(|v| *v != 0.0) {
            return Err(CoreError::contract("scene", "stationary scene with nonzero drift"));
        }
        Ok(())
    }

    /// Component mean at frame `i`: `mu_k + i * drift`.
    pub fn mean_at(&self, component: usize, frame: usize) -> Vec<f64> {
        self.components[component]
            .mean
            .iter()
            .zip(&self.drift)
            .map(|(m, v)| m + frame as f64 * v)
            .collect()
    }

    /// Mixture mean at frame `i`.
    pub fn mixture_mean_at(&self, frame: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.frame_dim];
        for (k, c) in self.components.iter().enumerate() {
            let m = self.mean_at(k, frame);
            for (o, mj) in out.iter_mut().zip(&m) {
                *o += c.weight * mj;
            }
        }
        out
    }
}

/// Draws `n_frames` latent frame vectors, frame `i` from the mixture with
/// means `mu_k(i)`.
pub fn gen_scene_sequence(spec: &SceneSpec, n_frames: usize, rng: &mut SeededRng) -> Vec<Tensor> {
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        frames.push(sample_frame(spec, i, rng));
    }
    frames
}

pub fn sample_frame(spec: &SceneSpec, frame: usize, rng: &mut SeededRng) -> Tensor {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut pick = spec.components.len() - 1;
    for (k, c) in spec.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            pick = k;
            break;
        }
    }
    let mean = spec.mean_at(pick, frame);
    let comp = &spec.components[pick];
    let data: Vec<f64> = mean
        .iter()
        .zip(&comp.var)
        .map(|(m, v)| m + v.sqrt() * rng.normal())
        .collect();
    Tensor::from_vec(data)
}

/// Log-density of the `t`-noised mixture at `x` for frame index `i`.
///
/// Under `x_t = (1-t) x_0 + t eps` each component becomes
/// `N((1-t) mu_k(i), (1-t)^2 Sigma_k + t^2 I)`.
pub fn scene_log_density(spec: &SceneSpec, x: &[f64], frame: usize, t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(CoreError::contract(
            "scene_log_density",
            format!("t={t} outside [0,1)"),
        ));
    }
    let lse = component_log_densities(spec, x, frame, t)?;
    Ok(log_sum_exp(&lse))
}

/// Per-component `log pi_k + log N(x; (1-t) mu_k, (1-t)^2 Sigma_k + t^2 I)`.
pub(crate) fn component_log_densities(
    spec: &SceneSpec,
    x: &[f64],
    frame: usize,
    t: f64,
) -> Result<Vec<f64>> {
    if x.len() != spec.frame_dim {
        return Err(CoreError::contract("scene", "x length != frame_dim"));
    }
    let a = 1.0 - t;
    let mut out = Vec::with_capacity(spec.components.len());
    for (k, c) in spec.components.iter().enumerate() {
        let mean = spec.mean_at(k, frame);
        let mut logp = c.weight.ln();
        for j in 0..spec.frame_dim {
            let s = a * a * c.var[j] + t * t;
            if s <= 0.0 {
                return Err(CoreError::contract(
                    "scene",
                    format!("degenerate noised variance in component {k} dim {j}"),
                ));
            }
            let d = x[j] - a * mean[j];
            logp -= 0.5 * (d * d / s + s.ln() + LOG_2PI);
        }
        out.push(logp);
    }
    Ok(out)
}

pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_gaussian(d: usize) -> SceneSpec {
        SceneSpec {
            mode: SceneMode::Stationary,
            frame_dim: d,
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; d],
                var: vec![1.0; d],
            }],
            drift: vec![0.0; d],
        }
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let spec = single_gaussian(4);
        let got = scene_log_density(&spec, &[0.0; 4], 0, 0.0).unwrap();
        let want = -2.0 * LOG_2PI; // -d/2 * log(2pi)
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn sample_mean_approaches_mu() {
        let d = 3;
        let mut spec = single_gaussian(d);
        spec.components[0].mean = vec![1.5, -0.5, 2.0];
        let mut rng = SeededRng::with_stream(3, 1);
        let n = 10_000;
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let f = sample_frame(&spec, 0, &mut rng);
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / n as f64;
            }
        }
        // within 3 sigma / sqrt(n) per coordinate
        let bound = 3.0 / (n as f64).sqrt();
        for (m, mu) in mean.iter().zip(&spec.components[0].mean) {
            assert!((m - mu).abs() < bound, "{m} vs {mu}");
        }
    }

    #[test]
    fn zero_drift_is_frame_invariant() {
        let spec = single_gaussian(2);
        let a = scene_log_density(&spec, &[0.3, -0.7], 0, 0.2).unwrap();
        let b = scene_log_density(&spec, &[0.3, -0.7], 17, 0.2).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn drifting_mode_empirical_mean_follows_drift() {
        let d = 4;
        let spec = SceneSpec {
            mode: SceneMode::Drifting,
            frame_dim: d,
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; d],
                var: vec![0.04; d],
            }],
            drift: vec![0.25, 0.0, 0.0, 0.0],
        };
        let mut rng = SeededRng::with_stream(4, 2);
        let n = 4000;
        let frame = 10;
        let mut mean0 = 0.0;
        for _ in 0..n {
            mean0 += sample_frame(&spec, frame, &mut rng).data()[0] / n as f64;
        }
        assert!((mean0 - 2.5).abs() < 0.02, "{mean0}");
    }

    #[test]
    fn noised_density_integrates_to_one_monte_carlo() {
        // Importance sample with a wide Gaussian proposal in d=2.
        let spec = SceneSpec {
            mode: SceneMode::Stationary,
            frame_dim: 2,
            components: vec![
                MixtureComponent { weight: 0.4, mean: vec![1.0, 0.0], var: vec![0.5, 0.8] },
                MixtureComponent { weight: 0.6, mean: vec![-1.0, 0.5], var: vec![0.3, 0.4] },
            ],
            drift: vec![0.0, 0.0],
        };
        let t = 0.35;
        let proposal_sd = 3.0;
        let mut rng = SeededRng::with_stream(5, 3);
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let x = [proposal_sd * rng.normal(), proposal_sd * rng.normal()];
            let logp = scene_log_density(&spec, &x, 0, t).unwrap();
            let logq: f64 = x
                .iter()
                .map(|v| -0.5 * (v * v / (proposal_sd * proposal_sd) + (proposal_sd * proposal_sd).ln() + LOG_2PI))
                .sum();
            total += (logp - logq).exp();
        }
        let est = total / n as f64;
        assert!((est - 1.0).abs() < 0.01, "MC integral {est}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut spec = single_gaussian(2);
        spec.components[0].weight = 0.7;
        assert!(spec.validate().is_err());
    }
}
