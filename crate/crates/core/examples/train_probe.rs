use adastate_core::cache::AnchorPolicy;
use adastate_core::metrics::energy_distance;
use adastate_core::model::{ModelConfig, ModelParams};
use adastate_core::rollout::{rollout, NoiseSchedule, RolloutSettings};
use adastate_core::scene::{gen_scene_sequence, MixtureComponent, SceneMode, SceneSpec};
use adastate_core::train::{TrainSettings, TrainState};
use adastate_tensor::SeededRng;

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 2, heads: 4, head_dim: 8,
        spatial_h: 2, spatial_w: 2, channels: 4,
        time_features: 8, ffn_mult: 2, rope_base: 10_000.0,
    }
}

fn stationary_scene(d: usize) -> SceneSpec {
    SceneSpec {
        mode: SceneMode::Stationary,
        frame_dim: d,
        components: vec![MixtureComponent { weight: 1.0, mean: vec![0.5; d], var: vec![0.25; d] }],
        drift: vec![0.0; d],
    }
}

fn gen_frames(params: &ModelParams, scene: &SceneSpec, n_frames: usize, seed: u64) -> Vec<adastate_tensor::Tensor> {
    let settings = RolloutSettings {
        policy: AnchorPolicy::AdaptiveState,
        retain_static_sink: false,
        frames_per_chunk: 3, state_frames: 1, window_frames: 3,
        chunks: 7,
        schedule: NoiseSchedule::linear(4).unwrap(),
        detach_state: true, reuse_initial_noise: false, chunk0_from_teacher: true,
        collect_snapshots: false, collect_attention: false,
    };
    let mut frames = Vec::new();
    let mut s = 0u64;
    while frames.len() < n_frames {
        let mut rng = SeededRng::with_stream(seed, 500 + s);
        s += 1;
        let r = rollout(scene, params, &settings, &mut rng).unwrap();
        // skip the teacher-provided chunk 0: measure the model's own frames
        frames.extend(r.frame_vectors().into_iter().skip(3));
    }
    frames.truncate(n_frames);
    frames
}

fn main() {
    let cfg = small_model();
    let scene = stationary_scene(cfg.frame_dim());
    let settings = TrainSettings {
        rollout: RolloutSettings {
            policy: AnchorPolicy::AdaptiveState,
            retain_static_sink: false,
            frames_per_chunk: 3, state_frames: 1, window_frames: 3,
            chunks: 7,
            schedule: NoiseSchedule::linear(4).unwrap(),
            detach_state: true, reuse_initial_noise: false, chunk0_from_teacher: true,
            collect_snapshots: false, collect_attention: false,
        },
        alpha: 2.0,
        gamma: cfg.frame_dim() as f64,
        include_first_chunk_loss: true,
        loss_t_min: 0.25,
        loss_t_max: 0.98,
        gen_lr: 2e-3, critic_lr: 4e-3, weight_decay: 0.01,
        batch_rollouts: 1,
        ema_decay: 0.99, ema_start: 200,
        seed: 7,
    };
    let mut state = TrainState::new(&cfg, settings).unwrap();

    let mut teacher_rng = SeededRng::with_stream(99, 0);
    let teacher: Vec<_> = gen_scene_sequence(&scene, 256, &mut teacher_rng);
    let init_frames = gen_frames(&state.generator, &scene, 256, 11);
    let ed_init = energy_distance(&init_frames, &teacher).unwrap();
    println!("energy distance at init: {ed_init:.4}");

    let started = std::time::Instant::now();
    let iters = 2000;
    for i in 0..iters {
        let m = state.train_iteration(&scene).unwrap();
        if i % 100 == 0 || i == iters - 1 {
            println!("iter {:>4} loss {:>10.4} critic {:>8.4} gnorm {:>8.3} {:.3}s", m.iter, m.loss, m.critic_loss, m.grad_norm, m.seconds);
        }
    }
    let per_iter = started.elapsed().as_secs_f64() / iters as f64;
    println!("seconds/iteration: {per_iter:.3}");

    let frames = gen_frames(&state.generator, &scene, 256, 12);
    let ed = energy_distance(&frames, &teacher).unwrap();
    println!("energy distance after {iters}: {ed:.4}  (reduction {:.1}%)", 100.0 * (1.0 - ed / ed_init));
}
