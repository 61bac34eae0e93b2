//! Toy rollout metrics: frame-to-frame dynamics, template consistency,
//! drift-tracking error, and an energy-distance estimate between sample
//! sets. These are desk-scale analogues, not perceptual scores.

use adastate_tensor::Tensor;

use crate::scene::SceneSpec;
use crate::{CoreError, Result};

/// Mean frame-to-frame displacement, `mean_i ||f_{i+1} - f_i|| / sqrt(d)`.
pub fn dynamics_metric(frames: &[Tensor]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(CoreError::contract("dynamics_metric", "needs at least 2 frames"));
    }
    let d = frames[0].numel() as f64;
    let mut acc = 0.0;
    for w in frames.windows(2) {
        let diff: f64 = w[0]
            .data()
            .iter()
            .zip(w[1].data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        acc += diff.sqrt() / d.sqrt();
    }
    Ok(acc / (frames.len() - 1) as f64)
}

/// Mean Pearson correlation of each frame with a template vector.
pub fn consistency_metric(frames: &[Tensor], template: &Tensor) -> Result<f64> {
    if frames.len() < 2 {
        return Err(CoreError::contract("consistency_metric", "needs at least 2 frames"));
    }
    let mut acc = 0.0;
    for f in frames {
        acc += pearson(f.data(), template.data());
    }
    Ok(acc / frames.len() as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let denom = (va * vb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

/// Per-frame distance between the empirical frame mean (over a batch of
/// rollouts) and the scene's drifting mixture mean.
pub fn drift_tracking_error(batches: &[Vec<Tensor>], spec: &SceneSpec) -> Result<Vec<f64>> {
    let first = batches
        .first()
        .ok_or_else(|| CoreError::contract("drift_tracking_error", "empty batch"))?;
    let n_frames = first.len();
    if batches.iter().any(|b| b.len() != n_frames) {
        return Err(CoreError::contract("drift_tracking_error", "ragged batches"));
    }
    let d = spec.frame_dim;
    let mut errs = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let mut mean = vec![0.0; d];
        for b in batches {
            for (m, v) in mean.iter_mut().zip(b[i].data()) {
                *m += v / batches.len() as f64;
            }
        }
        let target = spec.mixture_mean_at(i);
        let err: f64 = mean
            .iter()
            .zip(&target)
            .map(|(m, t)| (m - t) * (m - t))
            .sum::<f64>()
            .sqrt();
        errs.push(err);
    }
    Ok(errs)
}

/// Energy distance between two sample sets:
/// `2 E||X-Y|| - E||X-X'|| - E||Y-Y'||`.
pub fn energy_distance(xs: &[Tensor], ys: &[Tensor]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(CoreError::contract("energy_distance", "empty sample set"));
    }
    let cross = mean_pairwise(xs, ys);
    let within_x = mean_pairwise(xs, xs);
    let within_y = mean_pairwise(ys, ys);
    Ok(2.0 * cross - within_x - within_y)
}

fn mean_pairwise(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        for y in b {
            let d: f64 = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            acc += d.sqrt();
        }
    }
    acc / (a.len() * b.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use adastate_tensor::SeededRng;

    #[test]
    fn identical_frames_zero_dynamics_full_consistency() {
        let mut rng = SeededRng::with_stream(11, 0);
        let f = rng.normal_tensor(vec![16]);
        let frames = vec![f.clone(), f.clone(), f.clone()];
        assert_eq!(dynamics_metric(&frames).unwrap(), 0.0);
        let c = consistency_metric(&frames, &f).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_frames_dynamics() {
        let d = 9;
        let u = Tensor::full(vec![d], 0.5);
        let neg = u.scaled(-1.0);
        let frames = vec![u.clone(), neg.clone(), u.clone(), neg];
        // ||2u|| / sqrt(d) = 2*0.5 = 1.0
        let got = dynamics_metric(&frames).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn white_noise_consistency_is_near_zero() {
        let d = 256;
        let mut rng = SeededRng::with_stream(12, 1);
        let template = rng.normal_tensor(vec![d]);
        let frames: Vec<Tensor> = (0..50).map(|_| rng.normal_tensor(vec![d])).collect();
        let c = consistency_metric(&frames, &template).unwrap();
        assert!(c.abs() < 3.0 / (d as f64).sqrt(), "{c}");
    }

    #[test]
    fn single_frame_errors() {
        let f = Tensor::full(vec![4], 1.0);
        assert!(dynamics_metric(&[f]).is_err());
    }

    #[test]
    fn energy_distance_zero_for_same_set() {
        let mut rng = SeededRng::with_stream(13, 2);
        let xs: Vec<Tensor> = (0..20).map(|_| rng.normal_tensor(vec![8])).collect();
        let d = energy_distance(&xs, &xs).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn energy_distance_detects_mean_shift() {
        let mut rng = SeededRng::with_stream(14, 3);
        let xs: Vec<Tensor> = (0..64).map(|_| rng.normal_tensor(vec![8])).collect();
        let ys: Vec<Tensor> = (0..64)
            .map(|_| {
                let mut t = rng.normal_tensor(vec![8]);
                for v in t.data_mut() {
                    *v += 3.0;
                }
                t
            })
            .collect();
        assert!(energy_distance(&xs, &ys).unwrap() > 1.0);
    }
}
