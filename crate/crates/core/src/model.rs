//! A small diffusion transformer that denoises latent frames conditioned
//! on the visible window.
//!
//! Keys are produced without positional phases; rotary phases derived from
//! window-relative frame indices are applied to queries and keys at read
//! time only, so the forward depends solely on window contents and never on
//! the absolute chunk index. Spatial position within a frame enters as a
//! fixed sinusoidal embedding; the noise level enters as a sinusoidal
//! feature projection added to every live token (cached tokens carried the
//! zero-noise embedding when their KV was produced).

use std::rc::Rc;

use adastate_tensor::{SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cache::{KvValue, WindowEntry, WindowView};
use crate::{CoreError, Result};

const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub spatial_h: usize,
    pub spatial_w: usize,
    pub channels: usize,
    pub time_features: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 16,
            spatial_h: 4,
            spatial_w: 4,
            channels: 4,
            time_features: 16,
            ffn_mult: 4,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.spatial_h * self.spatial_w
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn frame_dim(&self) -> usize {
        self.tokens_per_frame() * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.channels == 0 {
            return Err(CoreError::Config("model dims must be positive".into()));
        }
        if self.head_dim % 2 != 0 {
            return Err(CoreError::Config("head_dim must be even for rotary pairs".into()));
        }
        if self.width() % 4 != 0 {
            return Err(CoreError::Config("model width must be divisible by 4".into()));
        }
        if self.time_features % 2 != 0 {
            return Err(CoreError::Config("time_features must be even".into()));
        }
        if self.spatial_h == 0 || self.spatial_w == 0 {
            return Err(CoreError::Config("spatial grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Fixed per-token spatial embedding table, `[tokens_per_frame, width]`.
    pub fn spatial_table(&self) -> Tensor {
        let l = self.tokens_per_frame();
        let d = self.width();
        let half = d / 2;
        let mut data = vec![0.0; l * d];
        for i in 0..self.spatial_h {
            for j in 0..self.spatial_w {
                let tok = i * self.spatial_w + j;
                for m in 0..half / 2 {
                    let omega = 1.0 / 100f64.powf(2.0 * m as f64 / half as f64);
                    data[tok * d + 2 * m] = (i as f64 * omega).sin();
                    data[tok * d + 2 * m + 1] = (i as f64 * omega).cos();
                    data[tok * d + half + 2 * m] = (j as f64 * omega).sin();
                    data[tok * d + half + 2 * m + 1] = (j as f64 * omega).cos();
                }
            }
        }
        Tensor::new(vec![l, d], data).expect("spatial table shape")
    }

    /// Sinusoidal noise-level features for `t` in `[0, 1]`.
    pub fn time_features_of(&self, t: f64) -> Vec<f64> {
        let m = self.time_features / 2;
        let mut out = Vec::with_capacity(self.time_features);
        for k in 0..m {
            let omega = std::f64::consts::PI * 2f64.powi(k as i32);
            out.push((omega * t).sin());
            out.push((omega * t).cos());
        }
        out
    }
}

/// Rotary phase schedule for one relative frame index.
#[derive(Debug, Clone)]
pub struct RopePhase {
    pub relative_index: usize,
    pub angles: Vec<f64>,
}

/// Standard rotary schedule `theta_j = base^(-2j/head_dim)` scaled by the
/// relative index. Index 0 is the identity rotation.
pub fn rope_phase(relative_index: usize, head_dim: usize, base: f64) -> Result<RopePhase> {
    if head_dim % 2 != 0 {
        return Err(CoreError::contract(
            "rope_phase",
            format!("head_dim {head_dim} is odd; rotary pairs required"),
        ));
    }
    let angles = (0..head_dim / 2)
        .map(|j| relative_index as f64 * base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    Ok(RopePhase {
        relative_index,
        angles,
    })
}

// ── Parameters ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub norm1_g: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub wo_b: Tensor,
    pub norm2_g: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub out_norm_g: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub out_skip: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = config.width();
        let c = config.channels;
        let dff = d * config.ffn_mult;
        let m = config.time_features;
        let mut mat = |rows: usize, cols: usize, std: f64| {
            let mut t = rng.normal_tensor(vec![rows, cols]);
            for v in t.data_mut() {
                *v *= std;
            }
            t.with_grad()
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                norm1_g: Tensor::full(vec![d], 1.0).with_grad(),
                wq: mat(d, d, 1.0 / (d as f64).sqrt()),
                wk: mat(d, d, 1.0 / (d as f64).sqrt()),
                wv: mat(d, d, 1.0 / (d as f64).sqrt()),
                wo: mat(d, d, 1.0 / (d as f64).sqrt()),
                wo_b: Tensor::zeros(vec![d]).with_grad(),
                norm2_g: Tensor::full(vec![d], 1.0).with_grad(),
                ffn_w1: mat(d, dff, (2.0 / d as f64).sqrt()),
                ffn_b1: Tensor::zeros(vec![dff]).with_grad(),
                ffn_w2: mat(dff, d, (2.0 / dff as f64).sqrt()),
                ffn_b2: Tensor::zeros(vec![d]).with_grad(),
            })
            .collect();
        Self {
            config: config.clone(),
            in_w: mat(c, d, 0.5),
            in_b: Tensor::zeros(vec![d]).with_grad(),
            time_w: mat(m, d, 0.1),
            time_b: Tensor::zeros(vec![d]).with_grad(),
            layers,
            out_norm_g: Tensor::full(vec![d], 1.0).with_grad(),
            out_w: mat(d, c, 0.05),
            out_b: Tensor::zeros(vec![c]).with_grad(),
            out_skip: Tensor::full(vec![c], 1.0).with_grad(),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut rng = SeededRng::new(0);
        let mut p = Self::init(config, &mut rng);
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    /// Fixed-order registry of every parameter tensor.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in_proj.w".into(), &self.in_w),
            ("in_proj.b".into(), &self.in_b),
            ("time.w".into(), &self.time_w),
            ("time.b".into(), &self.time_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.norm1.g"), &layer.norm1_g));
            out.push((format!("layer{l}.attn.wq"), &layer.wq));
            out.push((format!("layer{l}.attn.wk"), &layer.wk));
            out.push((format!("layer{l}.attn.wv"), &layer.wv));
            out.push((format!("layer{l}.attn.wo"), &layer.wo));
            out.push((format!("layer{l}.attn.wo_b"), &layer.wo_b));
            out.push((format!("layer{l}.norm2.g"), &layer.norm2_g));
            out.push((format!("layer{l}.ffn.w1"), &layer.ffn_w1));
            out.push((format!("layer{l}.ffn.b1"), &layer.ffn_b1));
            out.push((format!("layer{l}.ffn.w2"), &layer.ffn_w2));
            out.push((format!("layer{l}.ffn.b2"), &layer.ffn_b2));
        }
        out.push(("out_norm.g".into(), &self.out_norm_g));
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out.push(("out.skip".into(), &self.out_skip));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("in_proj.w".into(), &mut self.in_w),
            ("in_proj.b".into(), &mut self.in_b),
            ("time.w".into(), &mut self.time_w),
            ("time.b".into(), &mut self.time_b),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.norm1.g"), &mut layer.norm1_g));
            out.push((format!("layer{l}.attn.wq"), &mut layer.wq));
            out.push((format!("layer{l}.attn.wk"), &mut layer.wk));
            out.push((format!("layer{l}.attn.wv"), &mut layer.wv));
            out.push((format!("layer{l}.attn.wo"), &mut layer.wo));
            out.push((format!("layer{l}.attn.wo_b"), &mut layer.wo_b));
            out.push((format!("layer{l}.norm2.g"), &mut layer.norm2_g));
            out.push((format!("layer{l}.ffn.w1"), &mut layer.ffn_w1));
            out.push((format!("layer{l}.ffn.b1"), &mut layer.ffn_b1));
            out.push((format!("layer{l}.ffn.w2"), &mut layer.ffn_w2));
            out.push((format!("layer{l}.ffn.b2"), &mut layer.ffn_b2));
        }
        out.push(("out_norm.g".into(), &mut self.out_norm_g));
        out.push(("out.w".into(), &mut self.out_w));
        out.push(("out.b".into(), &mut self.out_b));
        out.push(("out.skip".into(), &mut self.out_skip));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Lifts every parameter onto a tape; `trainable` decides whether the
    /// leaves require gradients.
    pub fn lift(&self, tape: &Tape, trainable: bool) -> ParamVars {
        let lift = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        ParamVars {
            in_w: lift(&self.in_w),
            in_b: lift(&self.in_b),
            time_w: lift(&self.time_w),
            time_b: lift(&self.time_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    norm1_g: lift(&l.norm1_g),
                    wq: lift(&l.wq),
                    wk: lift(&l.wk),
                    wv: lift(&l.wv),
                    wo: lift(&l.wo),
                    wo_b: lift(&l.wo_b),
                    norm2_g: lift(&l.norm2_g),
                    ffn_w1: lift(&l.ffn_w1),
                    ffn_b1: lift(&l.ffn_b1),
                    ffn_w2: lift(&l.ffn_w2),
                    ffn_b2: lift(&l.ffn_b2),
                })
                .collect(),
            out_norm_g: lift(&self.out_norm_g),
            out_w: lift(&self.out_w),
            out_b: lift(&self.out_b),
            out_skip: lift(&self.out_skip),
            spatial: tape.constant(&self.config.spatial_table()),
            config: self.config.clone(),
        }
    }
}

#[derive(Clone)]
pub struct LayerVars {
    pub norm1_g: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wo_b: Var,
    pub norm2_g: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

#[derive(Clone)]
pub struct ParamVars {
    pub config: ModelConfig,
    pub in_w: Var,
    pub in_b: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub layers: Vec<LayerVars>,
    pub out_norm_g: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub out_skip: Var,
    pub spatial: Var,
}

impl ParamVars {
    /// Leaves in the same order as [`ModelParams::named`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![
            self.in_w.clone(),
            self.in_b.clone(),
            self.time_w.clone(),
            self.time_b.clone(),
        ];
        for l in &self.layers {
            out.extend([
                l.norm1_g.clone(),
                l.wq.clone(),
                l.wk.clone(),
                l.wv.clone(),
                l.wo.clone(),
                l.wo_b.clone(),
                l.norm2_g.clone(),
                l.ffn_w1.clone(),
                l.ffn_b1.clone(),
                l.ffn_w2.clone(),
                l.ffn_b2.clone(),
            ]);
        }
        out.extend([
            self.out_norm_g.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
            self.out_skip.clone(),
        ]);
        out
    }
}

// ── Forward ─────────────────────────────────────────────────────────

/// Post-softmax attention weights captured for the probe.
pub struct AttentionCapture {
    pub layer: usize,
    /// Per-head `[queries, keys]` weight matrices.
    pub heads: Vec<Tensor>,
}

#[derive(Default, Clone, Copy)]
pub struct ForwardOptions {
    pub collect_attention: bool,
    /// Instrumentation: zero every content-query -> live-state-key
    /// attention weight (large negative logit bias). Used to verify that
    /// gradient reaches the state only through content attention.
    pub mask_content_to_live_state: bool,
}

pub struct ForwardOutput {
    /// Clean prediction for every live token, `[live_tokens, channels]`.
    pub prediction: Var,
    /// Per-layer live keys/values, stored without positional phases.
    pub live_kv: Vec<(Var, Var)>,
    pub attention: Vec<AttentionCapture>,
}

fn rmsnorm(x: &Var, gain: &Var) -> Result<Var> {
    let ms = x.mul(x)?.mean_rows()?.affine(1.0, RMS_EPS).rsqrt();
    Ok(x.mul(&ms)?.mul(gain)?)
}

/// Builds a phase buffer (`rows * width/2` angles) for tokens whose frame
/// relative indices are given per token row.
fn phase_buffer(cfg: &ModelConfig, rel_per_token: &[usize]) -> Result<Rc<Vec<f64>>> {
    let pairs_per_head = cfg.head_dim / 2;
    let mut cache: Vec<Option<Vec<f64>>> = Vec::new();
    let mut buf = Vec::with_capacity(rel_per_token.len() * cfg.width() / 2);
    for &rel in rel_per_token {
        if rel >= cache.len() {
            cache.resize(rel + 1, None);
        }
        if cache[rel].is_none() {
            cache[rel] = Some(rope_phase(rel, cfg.head_dim, cfg.rope_base)?.angles);
        }
        let angles = cache[rel].as_ref().unwrap();
        for _head in 0..cfg.heads {
            buf.extend_from_slice(&angles[..pairs_per_head]);
        }
    }
    Ok(Rc::new(buf))
}

/// Core transformer pass over a visible window.
///
/// `live_tokens` is `[live_frames * tokens_per_frame, channels]`,
/// concatenated in window order; `live_noise` gives the noise level per
/// live frame. Cached keys and values come from the window and are
/// re-phased at read time together with the live ones.
pub fn forward_window<V: KvValue>(
    tape: &Tape,
    params: &ParamVars,
    window: &WindowView<'_, V>,
    live_tokens: &Var,
    live_noise: &[f64],
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let l_frm = cfg.tokens_per_frame();
    let live_frames = window.live_frames();
    if live_noise.len() != live_frames {
        return Err(CoreError::contract(
            "forward_window",
            format!("{} live frames but {} noise levels", live_frames, live_noise.len()),
        ));
    }
    if live_tokens.shape() != [live_frames * l_frm, cfg.channels] {
        return Err(CoreError::contract(
            "forward_window",
            format!(
                "live tokens shape {:?}, expected [{}, {}]",
                live_tokens.shape(),
                live_frames * l_frm,
                cfg.channels
            ),
        ));
    }
    if window.total_frames() == 0 {
        return Err(CoreError::contract("forward_window", "empty window"));
    }

    let t_live = live_frames * l_frm;
    let d = cfg.width();

    // Token embedding: input projection + fixed spatial phase + noise level.
    let mut x = live_tokens.matmul(&params.in_w)?.add(&params.in_b)?;
    let spatial_tiled = {
        let mut rows = Vec::with_capacity(live_frames);
        for _ in 0..live_frames {
            rows.push(params.spatial.clone());
        }
        Var::concat_rows(&rows)?
    };
    x = x.add(&spatial_tiled)?;
    let mut phi = Vec::with_capacity(t_live * cfg.time_features);
    for &t in live_noise {
        let feats = cfg.time_features_of(t);
        for _ in 0..l_frm {
            phi.extend_from_slice(&feats);
        }
    }
    let phi = tape.constant(&Tensor::new(vec![t_live, cfg.time_features], phi)?);
    x = x.add(&phi.matmul(&params.time_w)?.add(&params.time_b)?)?;

    // Relative frame index per token, for keys (all window frames in
    // order) and queries (live frames only).
    let mut key_rels = Vec::with_capacity(window.total_frames() * l_frm);
    let mut query_rels = Vec::with_capacity(t_live);
    for entry in &window.entries {
        for f in 0..entry.frames() {
            let rel = entry.rel_start() + f;
            for _ in 0..l_frm {
                key_rels.push(rel);
                if entry.is_live() {
                    query_rels.push(rel);
                }
            }
        }
    }
    let key_phases = phase_buffer(cfg, &key_rels)?;
    let query_phases = phase_buffer(cfg, &query_rels)?;

    let logit_mask = if opts.mask_content_to_live_state {
        build_state_mask(tape, window, l_frm)
    } else {
        None
    };

    let mut attention = Vec::new();
    let mut live_kv = Vec::with_capacity(cfg.layers);

    for (li, layer) in params.layers.iter().enumerate() {
        let h = rmsnorm(&x, &layer.norm1_g)?;
        let q = h.matmul(&layer.wq)?;
        let k_live = h.matmul(&layer.wk)?;
        let v_live = h.matmul(&layer.wv)?;

        // Assemble keys/values in window order, live rows interleaved.
        let mut k_parts = Vec::with_capacity(window.entries.len());
        let mut v_parts = Vec::with_capacity(window.entries.len());
        let mut live_row = 0usize;
        for entry in &window.entries {
            match entry {
                WindowEntry::Cached { kv, frames, .. } => {
                    let (ck, cv) = &kv.per_layer[li];
                    let ckv = ck.lift(tape)?;
                    let cvv = cv.lift(tape)?;
                    debug_assert_eq!(ckv.shape(), [frames * l_frm, d]);
                    k_parts.push(ckv);
                    v_parts.push(cvv);
                }
                WindowEntry::Live { frames, .. } => {
                    let rows = frames * l_frm;
                    k_parts.push(k_live.slice_rows(live_row, rows)?);
                    v_parts.push(v_live.slice_rows(live_row, rows)?);
                    live_row += rows;
                }
            }
        }
        let k_full = Var::concat_rows(&k_parts)?;
        let v_full = Var::concat_rows(&v_parts)?;

        let (attn_out, capture) = attention_over_window(
            li,
            cfg,
            &q,
            &k_full,
            &v_full,
            &query_phases,
            &key_phases,
            logit_mask.as_ref(),
            opts.collect_attention,
        )?;
        if let Some(c) = capture {
            attention.push(c);
        }
        x = x.add(&attn_out.matmul(&layer.wo)?.add(&layer.wo_b)?)?;

        let h2 = rmsnorm(&x, &layer.norm2_g)?;
        let ffn = h2
            .matmul(&layer.ffn_w1)?
            .add(&layer.ffn_b1)?
            .silu()?
            .matmul(&layer.ffn_w2)?
            .add(&layer.ffn_b2)?;
        x = x.add(&ffn)?;

        live_kv.push((k_live, v_live));
    }

    let h_out = rmsnorm(&x, &params.out_norm_g)?;
    let prediction = h_out
        .matmul(&params.out_w)?
        .add(&params.out_b)?
        .add(&live_tokens.mul(&params.out_skip)?)?;

    Ok(ForwardOutput {
        prediction,
        live_kv,
        attention,
    })
}

/// A large negative bias at (content query, live-state key) positions;
/// softmax turns those weights into exact zeros.
fn build_state_mask<V: KvValue>(
    tape: &Tape,
    window: &WindowView<'_, V>,
    l_frm: usize,
) -> Option<Var> {
    let t_keys = window.total_frames() * l_frm;
    let t_live = window.live_frames() * l_frm;
    let mut state_key_cols = None;
    let mut content_query_rows = None;
    let mut live_row = 0usize;
    for entry in &window.entries {
        if entry.is_live() {
            let rows = entry.frames() * l_frm;
            match entry.kind() {
                crate::cache::SlotKind::LiveState => {
                    state_key_cols = Some((entry.rel_start() * l_frm, rows));
                }
                crate::cache::SlotKind::LiveContent => {
                    content_query_rows = Some((live_row, rows));
                }
                _ => {}
            }
            live_row += rows;
        }
    }
    let (kc, kn) = state_key_cols?;
    let (qr, qn) = content_query_rows?;
    let mut data = vec![0.0; t_live * t_keys];
    for r in qr..qr + qn {
        for c in kc..kc + kn {
            data[r * t_keys + c] = -1e30;
        }
    }
    Some(tape.constant(&Tensor::new(vec![t_live, t_keys], data).expect("mask shape")))
}

/// One multi-head attention read of live queries over the full window.
///
/// Rotary phases are applied to queries and the assembled keys here, never
/// to what gets stored. Post-softmax rows sum to one by construction; a
/// non-finite logit is reported with the offending layer.
#[allow(clippy::too_many_arguments)]
fn attention_over_window(
    layer: usize,
    cfg: &ModelConfig,
    q: &Var,
    k_full: &Var,
    v_full: &Var,
    query_phases: &Rc<Vec<f64>>,
    key_phases: &Rc<Vec<f64>>,
    logit_mask: Option<&Var>,
    capture: bool,
) -> Result<(Var, Option<AttentionCapture>)> {
    if k_full.shape()[0] == 0 {
        return Err(CoreError::contract("attention", "empty window: no keys visible"));
    }
    let q_rot = q.rope(query_phases.clone())?;
    let k_rot = k_full.rope(key_phases.clone())?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut head_weights = Vec::new();
    for hd in 0..cfg.heads {
        let start = hd * cfg.head_dim;
        let qh = q_rot.slice_cols(start, cfg.head_dim)?;
        let kh = k_rot.slice_cols(start, cfg.head_dim)?;
        let vh = v_full.slice_cols(start, cfg.head_dim)?;
        let mut logits = qh.matmul_nt(&kh)?.scale(scale);
        if let Some(mask) = logit_mask {
            logits = logits.add(mask)?;
        }
        let weights = logits.softmax_rows().map_err(|e| {
            CoreError::contract("attention", format!("layer {layer} head {hd}: {e}"))
        })?;
        if capture {
            head_weights.push(weights.value());
        }
        head_outputs.push(weights.matmul(&vh)?);
    }
    let out = Var::concat_cols(&head_outputs)?;
    let capture = capture.then_some(AttentionCapture {
        layer,
        heads: head_weights,
    });
    Ok((out, capture))
}

/// Plain-mode denoising: runs one forward on a private tape and returns
/// detached values. `t` is validated into `[0, 1]`; every live frame is
/// conditioned at that level.
pub fn model_denoise(
    params: &ModelParams,
    window: &WindowView<'_, Tensor>,
    live_tokens: &Tensor,
    t: f64,
    opts: ForwardOptions,
) -> Result<PlainDenoiseOutput> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::contract(
            "model_denoise",
            format!("noise level t={t} outside [0,1]"),
        ));
    }
    let tape = Tape::new();
    let vars = params.lift(&tape, false);
    let live = tape.constant(live_tokens);
    let noise = vec![t; window.live_frames()];
    let out = forward_window(&tape, &vars, window, &live, &noise, opts)?;
    Ok(PlainDenoiseOutput {
        prediction: out.prediction.value(),
        live_kv: out
            .live_kv
            .iter()
            .map(|(k, v)| (k.value(), v.value()))
            .collect(),
        attention: out.attention,
    })
}

pub struct PlainDenoiseOutput {
    pub prediction: Tensor,
    pub live_kv: Vec<(Tensor, Tensor)>,
    pub attention: Vec<AttentionCapture>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::WindowView;

    fn tiny_config() -> ModelConfig {
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

    #[test]
    fn rope_phase_zero_is_identity() {
        let p = rope_phase(0, 8, 10_000.0).unwrap();
        assert!(p.angles.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn rope_phase_rejects_odd_head_dim() {
        assert!(rope_phase(1, 7, 10_000.0).is_err());
    }

    #[test]
    fn rope_phase_scales_linearly_with_index() {
        let p1 = rope_phase(1, 8, 10_000.0).unwrap();
        let p3 = rope_phase(3, 8, 10_000.0).unwrap();
        for (a, b) in p1.angles.iter().zip(&p3.angles) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_produce_zero_output() {
        let cfg = tiny_config();
        let params = ModelParams::zeros(&cfg);
        let window = WindowView::<Tensor>::live_only(1, 0.5, cfg.tokens_per_frame());
        let mut rng = SeededRng::with_stream(1, 0);
        let live = rng.normal_tensor(vec![cfg.tokens_per_frame(), cfg.channels]);
        let out = model_denoise(&params, &window, &live, 0.5, ForwardOptions::default()).unwrap();
        assert!(out.prediction.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_matches_live_input() {
        let cfg = tiny_config();
        let mut rng = SeededRng::with_stream(2, 0);
        let params = ModelParams::init(&cfg, &mut rng);
        let window = WindowView::<Tensor>::live_only(2, 0.25, cfg.tokens_per_frame());
        let live = rng.normal_tensor(vec![2 * cfg.tokens_per_frame(), cfg.channels]);
        let out = model_denoise(&params, &window, &live, 0.25, ForwardOptions::default()).unwrap();
        assert_eq!(out.prediction.shape(), live.shape());
        assert_eq!(out.live_kv.len(), cfg.layers);
    }

    #[test]
    fn denoise_is_deterministic_across_runs() {
        let cfg = tiny_config();
        let mut rng = SeededRng::with_stream(3, 0);
        let params = ModelParams::init(&cfg, &mut rng);
        let live = rng.normal_tensor(vec![cfg.tokens_per_frame(), cfg.channels]);
        let run = || {
            let window = WindowView::<Tensor>::live_only(1, 0.75, cfg.tokens_per_frame());
            model_denoise(&params, &window, &live, 0.75, ForwardOptions::default())
                .unwrap()
                .prediction
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_out_of_range_noise_level() {
        let cfg = tiny_config();
        let params = ModelParams::zeros(&cfg);
        let window = WindowView::<Tensor>::live_only(1, 0.0, cfg.tokens_per_frame());
        let live = Tensor::zeros(vec![cfg.tokens_per_frame(), cfg.channels]);
        assert!(model_denoise(&params, &window, &live, 1.5, ForwardOptions::default()).is_err());
        assert!(model_denoise(&params, &window, &live, -0.1, ForwardOptions::default()).is_err());
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let cfg = tiny_config();
        let mut rng = SeededRng::with_stream(4, 0);
        let params = ModelParams::init(&cfg, &mut rng);
        let window = WindowView::<Tensor>::live_only(2, 0.5, cfg.tokens_per_frame());
        let live = rng.normal_tensor(vec![2 * cfg.tokens_per_frame(), cfg.channels]);
        let out = model_denoise(
            &params,
            &window,
            &live,
            0.5,
            ForwardOptions { collect_attention: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out.attention.len(), cfg.layers);
        for cap in &out.attention {
            for head in &cap.heads {
                let (rows, cols) = (head.shape()[0], head.shape()[1]);
                for r in 0..rows {
                    let row = &head.data()[r * cols..(r + 1) * cols];
                    assert!(row.iter().all(|w| *w >= 0.0));
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                }
            }
        }
    }
}
