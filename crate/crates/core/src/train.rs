//! Horizon-weighted distribution-matching training.
//!
//! One iteration performs a full autoregressive rollout on a single tape:
//! chunk 0 from the teacher sampler, then joint state+content denoising
//! per chunk with the clean KV rerun feeding the cache. Gradient flows
//! through cached content across chunks; the state recurrence is cut by
//! handing the rerun a detached state latent, so the projection parameters
//! stay live while `s_n` itself carries nothing backward. Pseudo-targets
//! are plain tensors, which is the stop-gradient boundary of the loss.

use std::time::Instant;

use adastate_tensor::{SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cache::{AnchorCache, KvValue, LayerKvSet, WindowView};
use crate::dmd::{
    chunk_pseudo_targets, horizon_weights, weighted_dmd_loss, AdamW, CriticPair, HorizonWeights,
};
use crate::model::{forward_window, ForwardOptions, ModelConfig, ModelParams, ParamVars};
use crate::rollout::{teacher_chunk, RolloutSettings};
use crate::scene::SceneSpec;
use crate::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub rollout: RolloutSettings,
    pub alpha: f64,
    /// Pseudo-target normalizer; resolve `auto` to the per-frame
    /// dimensionality before constructing.
    pub gamma: f64,
    pub include_first_chunk_loss: bool,
    /// Per-frame noise level draw `t ~ U(loss_t_min, loss_t_max)`. The
    /// score conversion divides by `t^2`, so the lower bound keeps
    /// pseudo-targets finite in practice.
    pub loss_t_min: f64,
    pub loss_t_max: f64,
    pub gen_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub batch_rollouts: usize,
    pub ema_decay: f64,
    pub ema_start: usize,
    pub seed: u64,
}

/// Instrumentation hooks for the gradient oracles; all off in training.
#[derive(Default, Clone)]
pub struct LossProbe {
    /// Inject these values at the rerun's state input instead of the live
    /// (or detached) prediction; freezes the recurrence boundary so
    /// central differences measure the same function backward computes.
    pub frozen_states: Option<Vec<Tensor>>,
    /// Skip teacher/critic evaluation and use these per-frame targets.
    pub frozen_targets: Option<Vec<Tensor>>,
    /// Zero all content-query -> live-state-key attention.
    pub mask_content_to_live_state: bool,
}

pub struct TrainGraph {
    pub tape: Tape,
    pub loss: Var,
    pub per_frame_loss: Vec<f64>,
    /// One prediction per content frame; the teacher chunk's frames enter
    /// as constants.
    pub frame_preds: Vec<Var>,
    /// State prediction per generated chunk (adaptive policy only).
    pub state_preds: Vec<Var>,
    /// Values of the state predictions, for freezing in oracles.
    pub state_values: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub weights: HorizonWeights,
    pub critic_pairs: Vec<CriticPair>,
    pub param_vars: ParamVars,
}

/// Builds the full training graph for one rollout.
pub fn build_training_rollout(
    generator: &ModelParams,
    critic: &ModelParams,
    scene: &SceneSpec,
    settings: &TrainSettings,
    rollout_rng: &mut SeededRng,
    loss_rng: &mut SeededRng,
    probe: &LossProbe,
) -> Result<TrainGraph> {
    let cfg = &generator.config;
    let l_frm = cfg.tokens_per_frame();
    let channels = cfg.channels;
    let rs = &settings.rollout;
    let f = rs.frames_per_chunk;
    let state_frames = rs.live_state_frames();
    let levels = rs.schedule.levels().to_vec();

    let tape = Tape::new();
    let gen_vars = generator.lift(&tape, true);
    let opts = ForwardOptions {
        collect_attention: false,
        mask_content_to_live_state: probe.mask_content_to_live_state,
    };

    // Chunk 0 from the teacher, then its clean-KV pass on this tape.
    let chunk0 = teacher_chunk(scene, 0, f, l_frm, channels, rollout_rng)?;
    let window0 = WindowView::<Var>::live_only(f, 0.0, l_frm);
    let live0 = tape.constant(&chunk0);
    let rerun0 = forward_window(&tape, &gen_vars, &window0, &live0, &vec![0.0; f], opts)?;
    let kv0 = LayerKvSet::new(rerun0.live_kv);

    let mut cache = AnchorCache::<Var>::init_from_first_chunk(
        rs.policy.clone(),
        rs.retain_static_sink,
        f,
        rs.state_frames,
        rs.window_frames,
        l_frm,
        &chunk0,
        &kv0,
    )?;

    let mut frame_preds: Vec<Var> = Vec::with_capacity(rs.chunks * f);
    for i in 0..f {
        let frame = KvValue::slice_rows(&chunk0, i * l_frm, l_frm)?;
        frame_preds.push(tape.constant(&frame));
    }
    let mut state_preds = Vec::new();
    let mut state_values = Vec::new();

    for n in 1..rs.chunks {
        let live_rows = (state_frames + f) * l_frm;
        let initial = rollout_rng.normal_tensor(vec![live_rows, channels]);
        let mut live = tape.constant(&initial);
        let mut pred = live.clone();
        for (k, &t) in levels.iter().enumerate() {
            let window = cache.visible_window(state_frames, f, t);
            let noise = vec![t; state_frames + f];
            let out = forward_window(&tape, &gen_vars, &window, &live, &noise, opts)?;
            pred = out.prediction;
            if k + 1 < levels.len() {
                let next_t = levels[k + 1];
                let eps = if rs.reuse_initial_noise {
                    initial.clone()
                } else {
                    rollout_rng.normal_tensor(vec![live_rows, channels])
                };
                live = pred
                    .scale(1.0 - next_t)
                    .add(&tape.constant(&eps).scale(next_t))?;
            }
        }

        let (state_pred, content_pred) = if state_frames > 0 {
            let s = pred.slice_rows(0, state_frames * l_frm)?;
            let c = pred.slice_rows(state_frames * l_frm, f * l_frm)?;
            (Some(s), c)
        } else {
            (None, pred)
        };

        // Clean-KV rerun. The state enters detached (or frozen for the
        // oracle); content stays live so gradient crosses chunk
        // boundaries through the sliding window.
        let rerun_live = if let Some(sp) = &state_pred {
            let state_in = if let Some(frozen) = &probe.frozen_states {
                tape.constant(&frozen[n - 1])
            } else if rs.detach_state {
                sp.stop_gradient()
            } else {
                sp.clone()
            };
            Var::concat_rows(&[state_in, content_pred.clone()])?
        } else {
            content_pred.clone()
        };
        let window = cache.visible_window(state_frames, f, 0.0);
        let rerun = forward_window(
            &tape,
            &gen_vars,
            &window,
            &rerun_live,
            &vec![0.0; state_frames + f],
            opts,
        )?;
        let kv = LayerKvSet::new(rerun.live_kv);

        let content_latent = content_pred.value();
        if let Some(sp) = &state_pred {
            let state_kv = kv.slice_frames(0, state_frames, l_frm)?;
            let content_kv = kv.slice_frames(state_frames, f, l_frm)?;
            let state_latent = if let Some(frozen) = &probe.frozen_states {
                frozen[n - 1].clone()
            } else {
                sp.value()
            };
            let evicted = cache.append_content(&content_latent, &content_kv)?;
            let _ = evicted;
            cache.write_state_anchor(state_latent, state_kv)?;
            state_values.push(sp.value());
            state_preds.push(sp.clone());
        } else {
            let evicted = cache.append_content(&content_latent, &kv)?;
            cache.apply_anchor_policy(&evicted, n)?;
        }

        for i in 0..f {
            frame_preds.push(content_pred.slice_rows(i * l_frm, l_frm)?);
        }
    }

    // Pseudo-targets per frame with global-index horizon weights.
    let n_frames = rs.chunks * f;
    let weights = horizon_weights(n_frames, settings.alpha)?;
    let mut targets = Vec::with_capacity(n_frames);
    let mut critic_pairs = Vec::new();
    if let Some(frozen) = &probe.frozen_targets {
        if frozen.len() != n_frames {
            return Err(CoreError::contract(
                "train",
                "frozen target count != frame count",
            ));
        }
        targets = frozen.clone();
    } else {
        for chunk in 0..rs.chunks {
            let mut chunk_data = Vec::with_capacity(f * l_frm * channels);
            for i in 0..f {
                chunk_data.extend_from_slice(frame_preds[chunk * f + i].value().data());
            }
            let clean_chunk = Tensor::new(vec![f * l_frm, channels], chunk_data)?;
            let mut ts = Vec::with_capacity(f);
            let mut eps = Vec::with_capacity(f);
            for _ in 0..f {
                ts.push(loss_rng.uniform_range(settings.loss_t_min, settings.loss_t_max));
                eps.push(loss_rng.normal_tensor(vec![l_frm, channels]));
            }
            let (chunk_targets, pair) = chunk_pseudo_targets(
                &clean_chunk,
                chunk * f,
                &ts,
                &eps,
                scene,
                critic,
                settings.gamma,
            )?;
            targets.extend(chunk_targets);
            critic_pairs.push(pair);
        }
    }

    let start_frame = if settings.include_first_chunk_loss { 0 } else { f };
    let (loss, per_frame_loss) =
        weighted_dmd_loss(&tape, &frame_preds, &targets, &weights, start_frame)?;

    Ok(TrainGraph {
        tape,
        loss,
        per_frame_loss,
        frame_preds,
        state_preds,
        state_values,
        targets,
        weights,
        critic_pairs,
        param_vars: gen_vars,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub loss: f64,
    pub per_frame_loss: Vec<f64>,
    pub critic_loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub struct TrainState {
    pub settings: TrainSettings,
    pub generator: ModelParams,
    pub critic: ModelParams,
    pub ema: ModelParams,
    pub gen_opt: AdamW,
    pub critic_opt: AdamW,
    pub iteration: usize,
}

const STREAM_GEN_INIT: u64 = 1;
const STREAM_CRITIC_INIT: u64 = 2;
const STREAM_ITER_BASE: u64 = 1024;

/// Stream for one (iteration, rollout, purpose) triple; purposes 0/1 are
/// the rollout noise and the loss noise.
pub fn iteration_stream(iteration: usize, batch_index: usize, purpose: u64) -> u64 {
    STREAM_ITER_BASE + (iteration as u64) * 256 + (batch_index as u64) * 2 + purpose
}

impl TrainState {
    pub fn new(config: &ModelConfig, settings: TrainSettings) -> Result<Self> {
        config.validate()?;
        settings.rollout.policy.validate()?;
        let mut gen_rng = SeededRng::with_stream(settings.seed, STREAM_GEN_INIT);
        let mut critic_rng = SeededRng::with_stream(settings.seed, STREAM_CRITIC_INIT);
        let generator = ModelParams::init(config, &mut gen_rng);
        let critic = ModelParams::init(config, &mut critic_rng);
        let ema = generator.clone();
        let gen_opt = AdamW::new(settings.gen_lr, settings.weight_decay, &generator);
        let critic_opt = AdamW::new(settings.critic_lr, settings.weight_decay, &critic);
        Ok(Self {
            settings,
            generator,
            critic,
            ema,
            gen_opt,
            critic_opt,
            iteration: 0,
        })
    }

    /// One optimization step: rollout batch, generator update, critic
    /// update on the same noised predictions, EMA update.
    pub fn train_iteration(&mut self, scene: &SceneSpec) -> Result<IterationMetrics> {
        let started = Instant::now();
        let it = self.iteration;
        let b = self.settings.batch_rollouts.max(1);
        let registry_len = self.generator.named().len();
        let mut grad_acc: Vec<Option<Tensor>> = vec![None; registry_len];
        let mut loss_acc = 0.0;
        let mut per_frame_acc: Vec<f64> = Vec::new();
        let mut pairs: Vec<CriticPair> = Vec::new();
        let probe = LossProbe::default();

        for bi in 0..b {
            let mut rollout_rng =
                SeededRng::with_stream(self.settings.seed, iteration_stream(it, bi, 0));
            let mut loss_rng =
                SeededRng::with_stream(self.settings.seed, iteration_stream(it, bi, 1));
            let graph = build_training_rollout(
                &self.generator,
                &self.critic,
                scene,
                &self.settings,
                &mut rollout_rng,
                &mut loss_rng,
                &probe,
            )?;
            let loss_value = graph.loss.scalar_value();
            if !loss_value.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    what: "generator loss",
                    iteration: it,
                    detail: format!(
                        "rollout {bi}: per-frame losses {:?}",
                        graph.per_frame_loss
                    ),
                });
            }
            loss_acc += loss_value / b as f64;
            if per_frame_acc.is_empty() {
                per_frame_acc = vec![0.0; graph.per_frame_loss.len()];
            }
            for (acc, v) in per_frame_acc.iter_mut().zip(&graph.per_frame_loss) {
                *acc += v / b as f64;
            }
            let grads = graph.tape.backward(&graph.loss)?;
            for (idx, leaf) in graph.param_vars.leaves().iter().enumerate() {
                if let Some(g) = grads.wrt(leaf) {
                    match &mut grad_acc[idx] {
                        Some(acc) => acc.axpy(1.0 / b as f64, &g)?,
                        slot => *slot = Some(g.scaled(1.0 / b as f64)),
                    }
                }
            }
            pairs.extend(graph.critic_pairs);
        }

        let grad_norm = grad_acc
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        self.gen_opt.step(&mut self.generator, &grad_acc)?;
        if !self.generator.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                what: "generator parameters",
                iteration: it,
                detail: "non-finite parameter after update".into(),
            });
        }

        let critic_loss = self.critic_update(&pairs)?;
        crate::dmd::ema_update(
            &mut self.ema,
            &self.generator,
            self.settings.ema_decay,
            it,
            self.settings.ema_start,
        )?;
        self.iteration += 1;

        Ok(IterationMetrics {
            iter: it,
            loss: loss_acc,
            per_frame_loss: per_frame_acc,
            critic_loss,
            grad_norm,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// One denoising-regression step on the generator's noised
    /// predictions: the critic predicts the clean sample, targets
    /// detached.
    fn critic_update(&mut self, pairs: &[CriticPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let tape = Tape::new();
        let critic_vars = self.critic.lift(&tape, true);
        let l_frm = self.critic.config.tokens_per_frame();
        let mut total: Option<Var> = None;
        let mut element_count = 0usize;
        for pair in pairs {
            let window = WindowView::<Var>::live_only(pair.frame_ts.len(), pair.frame_ts[0], l_frm);
            let live = tape.constant(&pair.noised);
            let out = forward_window(
                &tape,
                &critic_vars,
                &window,
                &live,
                &pair.frame_ts,
                ForwardOptions::default(),
            )?;
            let clean = tape.constant(&pair.clean);
            let diff = out.prediction.sub(&clean)?;
            let sq = diff.mul(&diff)?.sum_all();
            element_count += pair.clean.numel();
            total = Some(match total {
                Some(acc) => acc.add(&sq)?,
                None => sq,
            });
        }
        let loss = total
            .expect("non-empty pairs")
            .scale(1.0 / element_count as f64);
        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(CoreError::NonFiniteLoss {
                what: "critic loss",
                iteration: self.iteration,
                detail: "non-finite critic regression loss".into(),
            });
        }
        let grads = tape.backward(&loss)?;
        let grad_list: Vec<Option<Tensor>> = critic_vars
            .leaves()
            .iter()
            .map(|leaf| grads.wrt(leaf))
            .collect();
        self.critic_opt.step(&mut self.critic, &grad_list)?;
        Ok(loss_value)
    }
}
