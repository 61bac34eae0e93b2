//! Distribution-matching pieces: horizon weights, the analytic teacher
//! score, critic score conversion, pseudo-targets, the weighted loss, and
//! the parameter-space machinery (AdamW, EMA).

use adastate_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cache::WindowView;
use crate::model::{forward_window, ForwardOptions, ModelParams};
use crate::scene::SceneSpec;
use crate::{CoreError, Result};

const LOG_2PI: f64 = 1.8378770664093453;

/// Per-frame loss weights `w_i = 1 + alpha * i / (N - 1)` over an N-frame
/// rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonWeights {
    pub n: usize,
    pub alpha: f64,
    pub weights: Vec<f64>,
}

pub fn horizon_weights(n: usize, alpha: f64) -> Result<HorizonWeights> {
    if n < 2 {
        return Err(CoreError::contract(
            "horizon_weights",
            format!("need at least 2 frames, got {n}"),
        ));
    }
    if alpha < 0.0 {
        return Err(CoreError::contract("horizon_weights", "alpha must be >= 0"));
    }
    let weights = (0..n)
        .map(|i| 1.0 + alpha * i as f64 / (n - 1) as f64)
        .collect();
    Ok(HorizonWeights { n, alpha, weights })
}

/// Closed-form score of the t-noised scene mixture,
/// `grad_x log p_t(x)` with components `N((1-t) mu_k, (1-t)^2 Sigma_k + t^2 I)`.
///
/// Computed directly from responsibilities and per-component Gaussian
/// scores; the log-density route in [`crate::scene`] stays an independent
/// oracle.
pub fn teacher_score(spec: &SceneSpec, x: &[f64], frame: usize, t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::contract(
            "teacher_score",
            format!("t={t} outside [0,1]"),
        ));
    }
    if x.len() != spec.frame_dim {
        return Err(CoreError::contract("teacher_score", "x length != frame_dim"));
    }
    let a = 1.0 - t;
    let n_comp = spec.components.len();
    let mut log_post = Vec::with_capacity(n_comp);
    let mut comp_scores = Vec::with_capacity(n_comp);
    for (k, c) in spec.components.iter().enumerate() {
        let mean = spec.mean_at(k, frame);
        let mut logp = c.weight.ln();
        let mut score = Vec::with_capacity(spec.frame_dim);
        for j in 0..spec.frame_dim {
            let s = a * a * c.var[j] + t * t;
            if s <= 0.0 {
                return Err(CoreError::contract(
                    "teacher_score",
                    format!("degenerate noised variance at t={t} in component {k}"),
                ));
            }
            let d = x[j] - a * mean[j];
            logp -= 0.5 * (d * d / s + s.ln() + LOG_2PI);
            score.push(-d / s);
        }
        log_post.push(logp);
        comp_scores.push(score);
    }
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = resp.iter().sum();
    for r in &mut resp {
        *r /= total;
    }
    let mut out = vec![0.0; spec.frame_dim];
    for (r, score) in resp.iter().zip(&comp_scores) {
        for (o, s) in out.iter_mut().zip(score) {
            *o += r * s;
        }
    }
    Ok(out)
}

/// Critic score at `(x_t, t)` from its clean prediction:
/// `((1 - t) x0_hat - x_t) / t^2`.
pub fn critic_score_from_x0(x0_hat: &[f64], x_t: &[f64], t: f64) -> Vec<f64> {
    let a = 1.0 - t;
    let tt = t * t;
    x0_hat
        .iter()
        .zip(x_t)
        .map(|(x0, x)| (a * x0 - x) / tt)
        .collect()
}

/// Critic forward over one chunk with per-frame noise levels; bidirectional
/// over the live chunk, no cache.
pub fn critic_x0(critic: &ModelParams, noised_chunk: &Tensor, frame_ts: &[f64]) -> Result<Tensor> {
    let l_frm = critic.config.tokens_per_frame();
    let tape = Tape::new();
    let vars = critic.lift(&tape, false);
    let window = WindowView::<Tensor>::live_only(frame_ts.len(), frame_ts[0], l_frm);
    let live = tape.constant(noised_chunk);
    let out = forward_window(&tape, &vars, &window, &live, frame_ts, ForwardOptions::default())?;
    Ok(out.prediction.value())
}

/// A `(noised chunk, per-frame t, clean chunk)` triple reused to update
/// the critic after the generator step.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub noised: Tensor,
    pub frame_ts: Vec<f64>,
    pub clean: Tensor,
}

/// Per-frame pseudo-targets for one chunk of clean predictions.
///
/// Every frame is noised at its own level with its own draw; the target is
/// `x_hat - (S_fake - S_real)/gamma`, returned as plain tensors so it
/// enters the loss graph behind a stop-gradient boundary.
#[allow(clippy::too_many_arguments)]
pub fn chunk_pseudo_targets(
    clean_chunk: &Tensor,
    global_frame_start: usize,
    frame_ts: &[f64],
    frame_eps: &[Tensor],
    scene: &SceneSpec,
    critic: &ModelParams,
    gamma: f64,
) -> Result<(Vec<Tensor>, CriticPair)> {
    if gamma <= 0.0 {
        return Err(CoreError::contract("dmd_pseudo_target", "gamma must be > 0"));
    }
    let l_frm = critic.config.tokens_per_frame();
    let c = critic.config.channels;
    let frames = frame_ts.len();
    debug_assert_eq!(clean_chunk.shape(), [frames * l_frm, c]);

    // Noise each frame independently: x_t = (1-t) x_hat + t eps.
    let mut noised_data = Vec::with_capacity(clean_chunk.numel());
    for f in 0..frames {
        let t = frame_ts[f];
        let rows = &clean_chunk.data()[f * l_frm * c..(f + 1) * l_frm * c];
        for (x, e) in rows.iter().zip(frame_eps[f].data()) {
            noised_data.push((1.0 - t) * x + t * e);
        }
    }
    let noised = Tensor::new(vec![frames * l_frm, c], noised_data)?;

    let x0_hat = critic_x0(critic, &noised, frame_ts)?;

    let mut targets = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = frame_ts[f];
        let span = f * l_frm * c..(f + 1) * l_frm * c;
        let x_t = &noised.data()[span.clone()];
        let s_fake = critic_score_from_x0(&x0_hat.data()[span.clone()], x_t, t);
        let s_real = teacher_score(scene, x_t, global_frame_start + f, t)?;
        let clean = &clean_chunk.data()[span];
        let target: Vec<f64> = clean
            .iter()
            .zip(s_fake.iter().zip(&s_real))
            .map(|(x, (sf, sr))| x - (sf - sr) / gamma)
            .collect();
        targets.push(Tensor::new(vec![l_frm, c], target)?);
    }

    let pair = CriticPair {
        noised,
        frame_ts: frame_ts.to_vec(),
        clean: clean_chunk.clone(),
    };
    Ok((targets, pair))
}

/// `1/2 sum_i w_i || x_hat_i - target_i ||^2` over per-frame predictions.
/// Targets are constants (the stop-gradient boundary), so the gradient
/// with respect to each prediction is exactly `w_i (x_hat_i - target_i)`.
///
/// Frames below `start_frame` (the teacher-sampled first chunk, when its
/// loss is excluded) are skipped but keep their global weight index.
pub fn weighted_dmd_loss(
    tape: &Tape,
    frame_preds: &[Var],
    targets: &[Tensor],
    weights: &HorizonWeights,
    start_frame: usize,
) -> Result<(Var, Vec<f64>)> {
    if frame_preds.len() != weights.n || targets.len() != weights.n {
        return Err(CoreError::contract(
            "weighted_dmd_loss",
            format!(
                "{} predictions, {} targets, {} weights",
                frame_preds.len(),
                targets.len(),
                weights.n
            ),
        ));
    }
    let mut total: Option<Var> = None;
    let mut per_frame = vec![0.0; weights.n];
    for i in start_frame..weights.n {
        let target = tape.constant(&targets[i]);
        let diff = frame_preds[i].sub(&target)?;
        let sq = diff.mul(&diff)?.sum_all();
        let term = sq.scale(0.5 * weights.weights[i]);
        per_frame[i] = term.scalar_value();
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let loss = total.ok_or_else(|| CoreError::contract("weighted_dmd_loss", "no frames in loss"))?;
    Ok((loss, per_frame))
}

// ── Optimizer and EMA ───────────────────────────────────────────────

/// Decoupled-weight-decay Adam over the parameter registry order.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One step; `grads` aligned with the registry order, `None` treated
    /// as a zero gradient.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
        let mut named = params.named_mut();
        if named.len() != grads.len() || named.len() != self.m.len() {
            return Err(CoreError::contract("adamw", "registry length mismatch"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, tensor)) in named.iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grads[idx].as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

/// Parameter EMA: a plain copy before the start iteration, then
/// `ema = decay * ema + (1 - decay) * live`.
pub fn ema_update(
    ema: &mut ModelParams,
    live: &ModelParams,
    decay: f64,
    iteration: usize,
    start_iteration: usize,
) -> Result<()> {
    let live_named = live.named();
    for (idx, (_, t)) in ema.named_mut().into_iter().enumerate() {
        let src = live_named[idx].1;
        if t.shape() != src.shape() {
            return Err(CoreError::contract("ema_update", "shape mismatch"));
        }
        if iteration < start_iteration {
            *t = src.clone();
            t.requires_grad = true;
        } else {
            let blended = t.lerp(src, decay, 1.0 - decay)?;
            let data = t.data_mut();
            data.copy_from_slice(blended.data());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{MixtureComponent, SceneMode};
    use adastate_tensor::{finite_diff_grad, SeededRng};

    #[test]
    fn horizon_weights_closed_form() {
        let w = horizon_weights(21, 2.0).unwrap();
        assert_eq!(w.weights[0], 1.0);
        assert_eq!(w.weights[10], 2.0);
        assert_eq!(w.weights[20], 3.0);
        let w4 = horizon_weights(21, 4.0).unwrap();
        assert_eq!(w4.weights[20], 5.0);
        let sum: f64 = w4.weights.iter().sum();
        assert!((sum - 21.0 * 3.0).abs() < 1e-12); // N (1 + alpha/2)
    }

    #[test]
    fn alpha_zero_recovers_uniform() {
        let w = horizon_weights(8, 0.0).unwrap();
        assert!(w.weights.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn horizon_weights_reject_single_frame() {
        assert!(horizon_weights(1, 2.0).is_err());
    }

    fn gaussian_scene(d: usize, mean: f64, var: f64) -> SceneSpec {
        SceneSpec {
            mode: SceneMode::Stationary,
            frame_dim: d,
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![mean; d],
                var: vec![var; d],
            }],
            drift: vec![0.0; d],
        }
    }

    #[test]
    fn standard_normal_score_at_pure_noise_limit() {
        let spec = gaussian_scene(4, 0.0, 1.0);
        let x = [0.5, -1.0, 2.0, 0.0];
        let s = teacher_score(&spec, &x, 0, 1.0).unwrap();
        for (sv, xv) in s.iter().zip(&x) {
            assert!((sv + xv).abs() < 1e-12, "score at t=1 must be -x");
        }
    }

    #[test]
    fn standard_normal_score_uses_noised_variance() {
        // var = (1-t)^2 + t^2 at t=0.5 is 0.5, so score = -2x.
        let spec = gaussian_scene(2, 0.0, 1.0);
        let s = teacher_score(&spec, &[1.0, -0.5], 0, 0.5).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_gaussian_score_at_pure_noise_limit() {
        let spec = gaussian_scene(3, 5.0, 0.25);
        let x = [0.3, -0.2, 1.0];
        let s = teacher_score(&spec, &x, 0, 1.0).unwrap();
        for (sv, xv) in s.iter().zip(&x) {
            assert!((sv + xv).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_score_matches_log_density_gradient() {
        let spec = SceneSpec {
            mode: SceneMode::Stationary,
            frame_dim: 3,
            components: vec![
                MixtureComponent { weight: 0.3, mean: vec![1.0, 0.0, -1.0], var: vec![0.5, 0.4, 0.8] },
                MixtureComponent { weight: 0.7, mean: vec![-1.0, 0.5, 0.0], var: vec![0.3, 0.6, 0.2] },
            ],
            drift: vec![0.0; 3],
        };
        let mut rng = SeededRng::with_stream(31, 0);
        for trial in 0..20 {
            let x = rng.normal_tensor(vec![3]);
            let t = rng.uniform_range(0.05, 0.95);
            let got = teacher_score(&spec, x.data(), 2, t).unwrap();
            let fd = finite_diff_grad(
                |p| crate::scene::scene_log_density(&spec, p.data(), 2, t).unwrap(),
                &x,
                1e-6,
            )
            .unwrap();
            for (g, f) in got.iter().zip(fd.data()) {
                assert!((g - f).abs() < 1e-5, "trial {trial}: {g} vs {f}");
            }
        }
    }

    #[test]
    fn pseudo_target_gradient_identity() {
        // grad of 1/2 ||x - target||^2 wrt x equals (S_fake - S_real)/gamma
        // evaluated at the noised point, because target = x - delta.
        let d = 4;
        let x = Tensor::from_vec(vec![0.25, -0.5, 1.0, 0.75]);
        let delta = Tensor::from_vec(vec![0.1, -0.2, 0.05, 0.0]);
        let target = x.lerp(&delta, 1.0, -1.0).unwrap();
        let fd = finite_diff_grad(
            |p| {
                0.5 * p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            },
            &x,
            1e-6,
        )
        .unwrap();
        for j in 0..d {
            assert!((fd.data()[j] - delta.data()[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn matched_scores_give_zero_loss_gradient() {
        // When S_fake == S_real pointwise the target is x_hat itself.
        let tape = Tape::new();
        let pred = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
        let pred2 = pred.reshape(vec![1, 2]).unwrap();
        let target = pred2.value();
        let weights = horizon_weights(2, 2.0).unwrap();
        let (loss, _) = weighted_dmd_loss(
            &tape,
            &[pred2.clone(), pred2.clone()],
            &[target.clone(), target],
            &weights,
            0,
        )
        .unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&pred).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn doubling_weights_doubles_loss_and_gradient() {
        let mut rng = SeededRng::with_stream(33, 0);
        let p = rng.normal_tensor(vec![1, 3]);
        let target = rng.normal_tensor(vec![1, 3]);
        let eval = |scale: f64| {
            let tape = Tape::new();
            let pred = tape.param(&p);
            let mut w = horizon_weights(2, 0.0).unwrap();
            for v in &mut w.weights {
                *v *= scale;
            }
            let (loss, _) =
                weighted_dmd_loss(&tape, &[pred.clone(), pred.clone()], &[target.clone(), target.clone()], &w, 0)
                    .unwrap();
            let grads = tape.backward(&loss).unwrap();
            (loss.scalar_value(), grads.wrt(&pred).unwrap())
        };
        let (l1, g1) = eval(1.0);
        let (l2, g2) = eval(2.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g2.data().iter().zip(g1.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        let spec = gaussian_scene(4, 0.0, 1.0);
        let cfg = crate::model::ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            spatial_h: 1,
            spatial_w: 2,
            channels: 2,
            time_features: 4,
            ffn_mult: 2,
            rope_base: 10_000.0,
        };
        let critic = ModelParams::zeros(&cfg);
        let chunk = Tensor::zeros(vec![2, 2]);
        let eps = vec![Tensor::zeros(vec![2, 2])];
        let res = chunk_pseudo_targets(&chunk, 0, &[0.5], &eps, &spec, &critic, 0.0);
        assert!(res.is_err());
    }

    #[test]
    fn adamw_zero_lr_leaves_params_unchanged() {
        let cfg = crate::model::ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            spatial_h: 1,
            spatial_w: 2,
            channels: 2,
            time_features: 4,
            ffn_mult: 2,
            rope_base: 10_000.0,
        };
        let mut rng = SeededRng::with_stream(34, 0);
        let mut params = ModelParams::init(&cfg, &mut rng);
        let before: Vec<Tensor> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
        let grads: Vec<Option<Tensor>> = params
            .named()
            .iter()
            .map(|(_, t)| Some(Tensor::full(t.shape().to_vec(), 1.0)))
            .collect();
        let mut opt = AdamW::new(0.0, 0.0, &params);
        opt.step(&mut params, &grads).unwrap();
        for ((_, after), b) in params.named().iter().zip(&before) {
            assert_eq!(after.data(), b.data());
        }
    }

    #[test]
    fn ema_schedule() {
        let cfg = crate::model::ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            spatial_h: 1,
            spatial_w: 2,
            channels: 2,
            time_features: 4,
            ffn_mult: 2,
            rope_base: 10_000.0,
        };
        let mut rng = SeededRng::with_stream(35, 0);
        let live = ModelParams::init(&cfg, &mut rng);
        let mut ema = ModelParams::zeros(&cfg);

        // before the start iteration: plain copy
        ema_update(&mut ema, &live, 0.99, 100, 200).unwrap();
        assert_eq!(ema.in_w.data(), live.in_w.data());

        // after: decay blend; ema=1, live=0 at decay .99 -> .99
        let mut ema1 = ModelParams::zeros(&cfg);
        for (_, t) in ema1.named_mut() {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        let zero = ModelParams::zeros(&cfg);
        ema_update(&mut ema1, &zero, 0.99, 300, 200).unwrap();
        assert!(ema1.in_w.data().iter().all(|v| (v - 0.99).abs() < 1e-12));

        // decay 0 -> ema == live always
        let mut ema2 = ModelParams::zeros(&cfg);
        ema_update(&mut ema2, &live, 0.0, 300, 200).unwrap();
        assert_eq!(ema2.in_w.data(), live.in_w.data());
    }
}
