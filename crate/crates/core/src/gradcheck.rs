//! End-to-end gradient oracles over the full training loss.
//!
//! Central differences measure the loss with its stop-gradient boundaries
//! frozen at base values (injected state constants, fixed pseudo-targets),
//! which is exactly the function the backward pass differentiates.

use adastate_tensor::{finite_diff_grad, SeededRng, Tensor};
use serde::Serialize;

use crate::dmd::teacher_score;
use crate::model::{ModelConfig, ModelParams};
use crate::rollout::{NoiseSchedule, RolloutSettings};
use crate::scene::{scene_log_density, MixtureComponent, SceneMode, SceneSpec};
use crate::train::{build_training_rollout, LossProbe, TrainSettings};
use crate::{cache::AnchorPolicy, Result};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    /// Negative control: run the detach comparison against a graph whose
    /// state recurrence was left attached; the check must then fail.
    pub break_detach: bool,
}

/// Model small enough for coordinate-wise finite differences over every
/// parameter.
pub fn verification_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        head_dim: 4,
        spatial_h: 1,
        spatial_w: 2,
        channels: 2,
        time_features: 4,
        ffn_mult: 2,
        rope_base: 10_000.0,
    }
}

pub fn verification_settings(seed: u64) -> TrainSettings {
    TrainSettings {
        rollout: RolloutSettings {
            policy: AnchorPolicy::AdaptiveState,
            retain_static_sink: false,
            frames_per_chunk: 2,
            state_frames: 1,
            window_frames: 2,
            chunks: 3,
            schedule: NoiseSchedule::linear(2).expect("valid schedule"),
            detach_state: true,
            reuse_initial_noise: false,
            chunk0_from_teacher: true,
            collect_snapshots: false,
            collect_attention: false,
        },
        alpha: 2.0,
        gamma: 4.0,
        include_first_chunk_loss: true,
        loss_t_min: 0.25,
        loss_t_max: 0.98,
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        weight_decay: 0.0,
        batch_rollouts: 1,
        ema_decay: 0.99,
        ema_start: 200,
        seed,
    }
}

pub fn verification_scene(frame_dim: usize) -> SceneSpec {
    SceneSpec {
        mode: SceneMode::Drifting,
        frame_dim,
        components: vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.2; frame_dim],
            var: vec![0.25; frame_dim],
        }],
        drift: {
            let mut d = vec![0.0; frame_dim];
            d[0] = 0.1;
            d
        },
    }
}

struct OracleSetup {
    generator: ModelParams,
    critic: ModelParams,
    scene: SceneSpec,
    settings: TrainSettings,
}

fn setup(seed: u64) -> OracleSetup {
    let config = verification_model();
    let settings = verification_settings(seed);
    let scene = verification_scene(config.frame_dim());
    let mut gen_rng = SeededRng::with_stream(seed, 1);
    let mut critic_rng = SeededRng::with_stream(seed, 2);
    OracleSetup {
        generator: ModelParams::init(&config, &mut gen_rng),
        critic: ModelParams::init(&config, &mut critic_rng),
        scene,
        settings,
    }
}

fn build(
    setup: &OracleSetup,
    generator: &ModelParams,
    probe: &LossProbe,
) -> Result<crate::train::TrainGraph> {
    let mut rollout_rng = SeededRng::with_stream(setup.settings.seed, 100);
    let mut loss_rng = SeededRng::with_stream(setup.settings.seed, 101);
    build_training_rollout(
        generator,
        &setup.critic,
        &setup.scene,
        &setup.settings,
        &mut rollout_rng,
        &mut loss_rng,
        probe,
    )
}

/// Backward of the full weighted loss vs central differences over every
/// generator parameter, with the stop-gradient boundaries frozen.
pub fn check_loss_gradient(seed: u64, rel_tol: f64, abs_floor: f64) -> Result<CheckResult> {
    let setup = setup(seed);
    let base = build(&setup, &setup.generator, &LossProbe::default())?;
    let grads = base.tape.backward(&base.loss)?;
    let frozen = LossProbe {
        frozen_states: Some(base.state_values.clone()),
        frozen_targets: Some(base.targets.clone()),
        mask_content_to_live_state: false,
    };

    let names = setup.generator.named();
    let leaves = base.param_vars.leaves();
    let mut max_err: f64 = 0.0;
    for (idx, (name, tensor)) in names.iter().enumerate() {
        let got = grads
            .wrt(&leaves[idx])
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let fd = finite_diff_grad(
            |probe_tensor| {
                let mut perturbed = setup.generator.clone();
                let slot = perturbed
                    .named_mut()
                    .into_iter()
                    .find(|(n, _)| n == name)
                    .expect("registry name")
                    .1;
                slot.data_mut().copy_from_slice(probe_tensor.data());
                build(&setup, &perturbed, &frozen)
                    .expect("frozen rebuild")
                    .loss
                    .scalar_value()
            },
            tensor,
            1e-5,
        )?;
        let err = adastate_tensor::max_rel_error(&got, &fd, abs_floor);
        max_err = max_err.max(err);
    }
    Ok(CheckResult {
        name: "dmd-loss-vs-finite-difference".into(),
        max_rel_err: max_err,
        tolerance: rel_tol,
        passed: max_err < rel_tol,
    })
}

/// Gradients with the state detached must equal gradients with the state
/// injected as a constant, to machine precision.
pub fn check_state_detach(seed: u64, opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut setup = setup(seed);
    if opts.break_detach {
        setup.settings.rollout.detach_state = false;
    }
    let live = build(&setup, &setup.generator, &LossProbe::default())?;
    let live_grads = live.tape.backward(&live.loss)?;

    let frozen_probe = LossProbe {
        frozen_states: Some(live.state_values.clone()),
        frozen_targets: Some(live.targets.clone()),
        mask_content_to_live_state: false,
    };
    let mut frozen_setup = setup;
    frozen_setup.settings.rollout.detach_state = true;
    // Rebuild against the same targets so both losses are literally the
    // same function of the parameters.
    let frozen = build(&frozen_setup, &frozen_setup.generator, &frozen_probe)?;
    let frozen_grads = frozen.tape.backward(&frozen.loss)?;

    let mut max_err: f64 = 0.0;
    for (idx, leaf) in live.param_vars.leaves().iter().enumerate() {
        let a = live_grads.wrt(leaf);
        let b = frozen_grads.wrt(&frozen.param_vars.leaves()[idx]);
        match (a, b) {
            (Some(a), Some(b)) => {
                max_err = max_err.max(adastate_tensor::max_rel_error(&a, &b, 1e-12));
            }
            (None, None) => {}
            _ => max_err = f64::INFINITY,
        }
    }
    // Live targets differ from frozen targets only through the state
    // boundary; identical at the base point unless detach was broken.
    Ok(CheckResult {
        name: "state-detach".into(),
        max_rel_err: max_err,
        tolerance: 1e-12,
        passed: max_err < 1e-12,
    })
}

/// Per-frame gradient norms must scale exactly by `w_i` against the
/// alpha=0 baseline.
pub fn check_weight_linearity(seed: u64) -> Result<CheckResult> {
    let setup0 = setup(seed);
    let mut max_err: f64 = 0.0;

    // Build once per alpha with identical streams and frozen targets from
    // the alpha-independent base (targets carry no alpha).
    let base = build(&setup0, &setup0.generator, &LossProbe::default())?;
    let frozen = LossProbe {
        frozen_states: Some(base.state_values.clone()),
        frozen_targets: Some(base.targets.clone()),
        mask_content_to_live_state: false,
    };
    let mut per_alpha = Vec::new();
    for alpha in [0.0, 2.0] {
        let mut s = setup(seed);
        s.settings.alpha = alpha;
        let graph = build(&s, &s.generator, &frozen)?;
        // per-frame gradient norms over all parameters
        let f = s.settings.rollout.frames_per_chunk;
        let mut norms = Vec::new();
        for i in f..graph.frame_preds.len() {
            let target = graph.tape.constant(&graph.targets[i]);
            let diff = graph.frame_preds[i].sub(&target)?;
            let term = diff.mul(&diff)?.sum_all().scale(0.5 * graph.weights.weights[i]);
            let grads = graph.tape.backward(&term)?;
            let norm: f64 = graph
                .param_vars
                .leaves()
                .iter()
                .filter_map(|leaf| grads.wrt(leaf))
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            norms.push((i, norm));
        }
        per_alpha.push((graph.weights.clone(), norms));
    }
    let (w0, n0) = &per_alpha[0];
    let (w2, n2) = &per_alpha[1];
    for ((i, a), (_, b)) in n0.iter().zip(n2.iter()) {
        if *a == 0.0 && *b == 0.0 {
            continue;
        }
        let want = w2.weights[*i] / w0.weights[*i];
        let got = b / a;
        max_err = max_err.max((got - want).abs() / want.abs());
    }
    Ok(CheckResult {
        name: "horizon-weight-linearity".into(),
        max_rel_err: max_err,
        tolerance: 1e-10,
        passed: max_err < 1e-10,
    })
}

/// Analytic mixture score vs numerical gradient of the noised log-density
/// on random points and noise levels.
pub fn check_teacher_score(seed: u64, trials: usize, tol: f64) -> Result<CheckResult> {
    let spec = SceneSpec {
        mode: SceneMode::Drifting,
        frame_dim: 4,
        components: vec![
            MixtureComponent { weight: 0.35, mean: vec![0.8, -0.2, 0.0, 0.4], var: vec![0.5, 0.3, 0.8, 0.4] },
            MixtureComponent { weight: 0.65, mean: vec![-0.5, 0.6, 0.2, -0.1], var: vec![0.2, 0.6, 0.4, 0.7] },
        ],
        drift: vec![0.05, -0.02, 0.0, 0.01],
    };
    let mut rng = SeededRng::with_stream(seed, 7);
    let mut max_err: f64 = 0.0;
    for trial in 0..trials {
        let x = rng.normal_tensor(vec![4]);
        let t = rng.uniform_range(0.02, 0.98);
        let frame = trial % 9;
        let got = teacher_score(&spec, x.data(), frame, t)?;
        let fd = finite_diff_grad(
            |p| scene_log_density(&spec, p.data(), frame, t).unwrap(),
            &x,
            1e-6,
        )?;
        for (g, f) in got.iter().zip(fd.data()) {
            max_err = max_err.max((g - f).abs());
        }
    }
    Ok(CheckResult {
        name: "teacher-score-oracle".into(),
        max_rel_err: max_err,
        tolerance: tol,
        passed: max_err < tol,
    })
}

/// Stop-gradient zeroes exactly the path through it and nothing else.
pub fn check_stop_gradient(seed: u64) -> Result<CheckResult> {
    use adastate_tensor::Tape;
    let mut rng = SeededRng::with_stream(seed, 8);
    let x = rng.normal_tensor(vec![3, 3]);
    let y = rng.normal_tensor(vec![3, 3]);
    let tape = Tape::new();
    let xv = tape.param(&x);
    let yv = tape.param(&y);
    let loss = xv
        .stop_gradient()
        .mul(&yv)?
        .add(&xv)?
        .sum_all();
    let grads = tape.backward(&loss)?;
    let gx = grads.wrt(&xv).expect("direct path");
    let gy = grads.wrt(&yv).expect("value path");
    let mut max_err: f64 = 0.0;
    for v in gx.data() {
        max_err = max_err.max((v - 1.0).abs());
    }
    for (g, want) in gy.data().iter().zip(x.data()) {
        max_err = max_err.max((g - want).abs());
    }
    Ok(CheckResult {
        name: "stop-gradient-zeroing".into(),
        max_rel_err: max_err,
        tolerance: 1e-15,
        passed: max_err < 1e-15,
    })
}

/// Runs the full oracle battery.
pub fn run_gradcheck(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let checks = vec![
        check_stop_gradient(seed)?,
        check_teacher_score(seed, 100, 1e-5)?,
        check_loss_gradient(seed, 1e-4, 1e-6)?,
        check_state_detach(seed, opts)?,
        check_weight_linearity(seed)?,
    ];
    Ok(GradcheckReport { checks })
}
