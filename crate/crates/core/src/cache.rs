//! The visible-window manager: anchor slot, content sliding window, and
//! the anchor policies under comparison.
//!
//! Keys and values are stored without positional phases; the window view
//! assigns relative frame indices 0..total-1 in slot order, so the phases
//! applied at read time never depend on the absolute chunk counter.
//!
//! The cache is generic over the stored value: plain [`Tensor`]s during
//! generation (each chunk's graph is dropped after sampling) and tape
//! [`Var`]s during training, where gradient flows through cached content
//! into earlier chunks while the state recurrence is cut by feeding the
//! rerun a detached state latent.

use std::collections::VecDeque;

use adastate_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Storage backend for cached keys/values.
pub trait KvValue: Clone {
    fn lift(&self, tape: &Tape) -> Result<Var>;
    fn detach(&self) -> Self;
    /// `wa * self + wb * other`, elementwise over matching shapes.
    fn add_scaled(&self, other: &Self, wa: f64, wb: f64) -> Result<Self>;
    fn slice_rows(&self, start: usize, len: usize) -> Result<Self>;
    fn concat_rows(items: &[&Self]) -> Result<Self>;
    fn to_tensor(&self) -> Tensor;
    fn rows(&self) -> usize;
}

impl KvValue for Tensor {
    fn lift(&self, tape: &Tape) -> Result<Var> {
        Ok(tape.constant(self))
    }

    fn detach(&self) -> Self {
        self.clone()
    }

    fn add_scaled(&self, other: &Self, wa: f64, wb: f64) -> Result<Self> {
        Ok(self.lerp(other, wa, wb)?)
    }

    fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let cols = self.shape()[1];
        let data = self.data()[start * cols..(start + len) * cols].to_vec();
        Ok(Tensor::new(vec![len, cols], data)?)
    }

    fn concat_rows(items: &[&Self]) -> Result<Self> {
        let cols = items[0].shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for item in items {
            data.extend_from_slice(item.data());
            rows += item.shape()[0];
        }
        Ok(Tensor::new(vec![rows, cols], data)?)
    }

    fn to_tensor(&self) -> Tensor {
        self.clone()
    }

    fn rows(&self) -> usize {
        self.shape()[0]
    }
}

impl KvValue for Var {
    fn lift(&self, tape: &Tape) -> Result<Var> {
        if !self.tape().same_tape(tape) {
            return Err(CoreError::contract(
                "cache",
                "cached Var belongs to a different tape",
            ));
        }
        Ok(self.clone())
    }

    fn detach(&self) -> Self {
        self.stop_gradient()
    }

    fn add_scaled(&self, other: &Self, wa: f64, wb: f64) -> Result<Self> {
        Ok(self.scale(wa).add(&other.scale(wb))?)
    }

    fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Var::slice_rows(self, start, len)?)
    }

    fn concat_rows(items: &[&Self]) -> Result<Self> {
        let owned: Vec<Var> = items.iter().map(|v| (*v).clone()).collect();
        Ok(Var::concat_rows(&owned)?)
    }

    fn to_tensor(&self) -> Tensor {
        self.value()
    }

    fn rows(&self) -> usize {
        self.shape()[0]
    }
}

/// Per-layer key/value matrices for one block of frames,
/// `[frames * tokens_per_frame, width]` each.
#[derive(Debug, Clone)]
pub struct LayerKvSet<V: KvValue> {
    pub per_layer: Vec<(V, V)>,
}

impl<V: KvValue> LayerKvSet<V> {
    pub fn new(per_layer: Vec<(V, V)>) -> Self {
        Self { per_layer }
    }

    pub fn slice_frames(&self, start_frame: usize, frames: usize, l_frm: usize) -> Result<Self> {
        let per_layer = self
            .per_layer
            .iter()
            .map(|(k, v)| {
                Ok((
                    k.slice_rows(start_frame * l_frm, frames * l_frm)?,
                    v.slice_rows(start_frame * l_frm, frames * l_frm)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_layer })
    }

    pub fn concat(items: &[&Self]) -> Result<Self> {
        let layers = items[0].per_layer.len();
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let ks: Vec<&V> = items.iter().map(|s| &s.per_layer[l].0).collect();
            let vs: Vec<&V> = items.iter().map(|s| &s.per_layer[l].1).collect();
            per_layer.push((V::concat_rows(&ks)?, V::concat_rows(&vs)?));
        }
        Ok(Self { per_layer })
    }

    /// Read-only `(K, V)` of one layer restricted to one head's columns.
    pub fn head_kv(&self, layer: usize, head: usize, head_dim: usize) -> (Tensor, Tensor) {
        let slice = |t: Tensor| {
            let rows = t.shape()[0];
            let width = t.shape()[1];
            let mut data = Vec::with_capacity(rows * head_dim);
            for r in 0..rows {
                let base = r * width + head * head_dim;
                data.extend_from_slice(&t.data()[base..base + head_dim]);
            }
            Tensor::new(vec![rows, head_dim], data).expect("head slice shape")
        };
        let (k, v) = &self.per_layer[layer];
        (slice(k.to_tensor()), slice(v.to_tensor()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    StaticSink,
    CachedState,
    LiveState,
    CachedContent,
    LiveContent,
}

/// Anchor maintenance rule for the position-0 slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AnchorPolicy {
    /// Slot 0 is overwritten each chunk with the freshly denoised state.
    AdaptiveState,
    /// Slot 0 keeps the first frame's KV forever.
    StaticSink,
    /// Slot 0 is an exponential moving average over evicted frames.
    EmaSink { decay: f64 },
    /// Slot 0 is replaced by the newest cached content every `period` chunks.
    HeuristicReplace { period: usize },
    /// No anchor slot at all; pure sliding window.
    NoAnchor,
}

impl AnchorPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnchorPolicy::EmaSink { decay } => {
                if !(0.0 < *decay && *decay < 1.0) {
                    return Err(CoreError::Config(format!(
                        "ema decay {decay} outside (0, 1)"
                    )));
                }
            }
            AnchorPolicy::HeuristicReplace { period } => {
                if *period < 1 {
                    return Err(CoreError::Config("heuristic period must be >= 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Only the adaptive policy denoises live state frames.
    pub fn has_live_state(&self) -> bool {
        matches!(self, AnchorPolicy::AdaptiveState)
    }

    pub fn has_anchor(&self) -> bool {
        !matches!(self, AnchorPolicy::NoAnchor)
    }

    pub fn label(&self) -> &'static str {
        match self {
            AnchorPolicy::AdaptiveState => "adaptive-state",
            AnchorPolicy::StaticSink => "static-sink",
            AnchorPolicy::EmaSink { .. } => "ema-sink",
            AnchorPolicy::HeuristicReplace { .. } => "heuristic-replace",
            AnchorPolicy::NoAnchor => "no-anchor",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CacheSlot<V: KvValue> {
    pub kv: LayerKvSet<V>,
    /// Latent carried alongside the KV so slots can be rebuilt explicitly.
    pub latent: Tensor,
    pub frames: usize,
}

/// One visible-window entry; cached entries carry KV, live ones only
/// declare structure (their KV is produced by the current forward pass).
pub enum WindowEntry<'a, V: KvValue> {
    Cached {
        kind: SlotKind,
        frames: usize,
        rel_start: usize,
        noise: f64,
        kv: &'a LayerKvSet<V>,
        latent: &'a Tensor,
    },
    Live {
        kind: SlotKind,
        frames: usize,
        rel_start: usize,
        noise: f64,
    },
}

impl<V: KvValue> WindowEntry<'_, V> {
    pub fn kind(&self) -> SlotKind {
        match self {
            WindowEntry::Cached { kind, .. } | WindowEntry::Live { kind, .. } => *kind,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            WindowEntry::Cached { frames, .. } | WindowEntry::Live { frames, .. } => *frames,
        }
    }

    pub fn rel_start(&self) -> usize {
        match self {
            WindowEntry::Cached { rel_start, .. } | WindowEntry::Live { rel_start, .. } => {
                *rel_start
            }
        }
    }

    pub fn noise(&self) -> f64 {
        match self {
            WindowEntry::Cached { noise, .. } | WindowEntry::Live { noise, .. } => *noise,
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self, WindowEntry::Live { .. })
    }
}

pub struct WindowView<'a, V: KvValue> {
    pub entries: Vec<WindowEntry<'a, V>>,
    pub tokens_per_frame: usize,
}

impl<'a, V: KvValue> WindowView<'a, V> {
    /// A window of live content only (no cache): the critic's view and the
    /// very first chunk's view.
    pub fn live_only(frames: usize, noise: f64, tokens_per_frame: usize) -> Self {
        Self {
            entries: vec![WindowEntry::Live {
                kind: SlotKind::LiveContent,
                frames,
                rel_start: 0,
                noise,
            }],
            tokens_per_frame,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.frames()).sum()
    }

    pub fn live_frames(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.is_live())
            .map(|e| e.frames())
            .sum()
    }

    pub fn summary(&self) -> WindowSummary {
        WindowSummary {
            slots: self
                .entries
                .iter()
                .map(|e| SlotSummary {
                    kind: e.kind(),
                    frames: e.frames(),
                    rel_start: e.rel_start(),
                    noise: e.noise(),
                    live: e.is_live(),
                })
                .collect(),
        }
    }
}

/// Structural description of a window, for logs and assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub slots: Vec<SlotSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub kind: SlotKind,
    pub frames: usize,
    pub rel_start: usize,
    pub noise: f64,
    pub live: bool,
}

impl WindowSummary {
    pub fn total_frames(&self) -> usize {
        self.slots.iter().map(|s| s.frames).sum()
    }
}

/// Plain-tensor dump of a cache for probe replay.
#[derive(Debug, Clone)]
pub struct CacheSnapshot {
    pub chunk_counter: usize,
    pub slots: Vec<SnapshotSlot>,
}

#[derive(Debug, Clone)]
pub struct SnapshotSlot {
    pub kind: SlotKind,
    pub frames: usize,
    pub rel_start: usize,
    pub noise: f64,
    pub latent: Tensor,
    pub kv: Vec<(Tensor, Tensor)>,
}

pub struct AnchorCache<V: KvValue> {
    policy: AnchorPolicy,
    retain_static_sink: bool,
    frames_per_chunk: usize,
    state_frames: usize,
    window_frames: usize,
    tokens_per_frame: usize,
    sink: Option<CacheSlot<V>>,
    anchor: Option<CacheSlot<V>>,
    content: VecDeque<CacheSlot<V>>,
    chunk_counter: usize,
}

impl<V: KvValue> AnchorCache<V> {
    /// Seeds the cache from the first chunk: the first content frame's
    /// clean latent serves as the initial state, its KV copied bit-exactly
    /// into the anchor slot, and the whole chunk enters the content window.
    #[allow(clippy::too_many_arguments)]
    pub fn init_from_first_chunk(
        policy: AnchorPolicy,
        retain_static_sink: bool,
        frames_per_chunk: usize,
        state_frames: usize,
        window_frames: usize,
        tokens_per_frame: usize,
        first_chunk_latent: &Tensor,
        first_chunk_kv: &LayerKvSet<V>,
    ) -> Result<Self> {
        policy.validate()?;
        if retain_static_sink && !matches!(policy, AnchorPolicy::AdaptiveState) {
            return Err(CoreError::Config(
                "retain_static_sink applies to the adaptive-state policy only".into(),
            ));
        }
        if state_frames > frames_per_chunk {
            return Err(CoreError::Config(
                "state_frames cannot exceed frames_per_chunk".into(),
            ));
        }
        let expected_rows = frames_per_chunk * tokens_per_frame;
        if first_chunk_latent.shape()[0] != expected_rows {
            return Err(CoreError::contract(
                "init_from_first_chunk",
                format!(
                    "first chunk has {} token rows, expected {expected_rows} ({frames_per_chunk} frames)",
                    first_chunk_latent.shape()[0]
                ),
            ));
        }

        let anchor = if policy.has_anchor() {
            let kv = first_chunk_kv.slice_frames(0, state_frames, tokens_per_frame)?;
            let latent = KvValue::slice_rows(first_chunk_latent, 0, state_frames * tokens_per_frame)?;
            Some(CacheSlot { kv, latent, frames: state_frames })
        } else {
            None
        };
        let sink = if retain_static_sink {
            anchor.as_ref().map(|a| CacheSlot {
                kv: a.kv.clone(),
                latent: a.latent.clone(),
                frames: a.frames,
            })
        } else {
            None
        };

        let mut cache = Self {
            policy,
            retain_static_sink,
            frames_per_chunk,
            state_frames,
            window_frames,
            tokens_per_frame,
            sink,
            anchor,
            content: VecDeque::new(),
            chunk_counter: 0,
        };
        cache.push_content_frames(first_chunk_latent, first_chunk_kv)?;
        Ok(cache)
    }

    fn push_content_frames(
        &mut self,
        chunk_latent: &Tensor,
        chunk_kv: &LayerKvSet<V>,
    ) -> Result<Vec<CacheSlot<V>>> {
        let l_frm = self.tokens_per_frame;
        let frames = chunk_latent.shape()[0] / l_frm;
        for f in 0..frames {
            let kv = chunk_kv.slice_frames(f, 1, l_frm)?;
            let latent = KvValue::slice_rows(chunk_latent, f * l_frm, l_frm)?;
            self.content.push_back(CacheSlot { kv, latent, frames: 1 });
        }
        let mut evicted = Vec::new();
        while self.content.len() > self.window_frames {
            evicted.push(self.content.pop_front().expect("non-empty"));
        }
        Ok(evicted)
    }

    /// Slides the content window: appends a denoised chunk's clean KV and
    /// returns whatever whole frames fell out of the window.
    pub fn append_content(
        &mut self,
        chunk_latent: &Tensor,
        chunk_kv: &LayerKvSet<V>,
    ) -> Result<Vec<CacheSlot<V>>> {
        let evicted = self.push_content_frames(chunk_latent, chunk_kv)?;
        self.chunk_counter += 1;
        Ok(evicted)
    }

    /// Overwrites the anchor slot with the freshly denoised state KV.
    ///
    /// Callers must compute `state_kv` from the detached state latent so
    /// the recurrence carries no gradient across the chunk boundary; the
    /// projection parameters inside the KV remain live.
    pub fn write_state_anchor(&mut self, state_latent: Tensor, state_kv: LayerKvSet<V>) -> Result<()> {
        if !matches!(self.policy, AnchorPolicy::AdaptiveState) {
            return Err(CoreError::contract(
                "write_state_anchor",
                format!("policy {} does not take state writes", self.policy.label()),
            ));
        }
        let expected = self.state_frames * self.tokens_per_frame;
        if state_latent.shape()[0] != expected {
            return Err(CoreError::contract(
                "write_state_anchor",
                format!("state latent has {} rows, expected {expected}", state_latent.shape()[0]),
            ));
        }
        self.anchor = Some(CacheSlot {
            kv: state_kv,
            latent: state_latent,
            frames: self.state_frames,
        });
        Ok(())
    }

    /// Runs the per-chunk anchor maintenance for the non-adaptive policies.
    pub fn apply_anchor_policy(&mut self, evicted: &[CacheSlot<V>], chunk_index: usize) -> Result<()> {
        match self.policy.clone() {
            AnchorPolicy::AdaptiveState | AnchorPolicy::StaticSink | AnchorPolicy::NoAnchor => {}
            AnchorPolicy::EmaSink { decay } => {
                if evicted.is_empty() {
                    return Ok(());
                }
                let anchor = self.anchor.as_mut().expect("ema policy keeps an anchor");
                // Content-agnostic: average evicted frames per spatial
                // position, then blend into every anchor frame.
                let layers = anchor.kv.per_layer.len();
                let inv = 1.0 / evicted.len() as f64;
                let mut mean_kv = Vec::with_capacity(layers);
                for l in 0..layers {
                    let mut k_acc = evicted[0].kv.per_layer[l].0.clone();
                    let mut v_acc = evicted[0].kv.per_layer[l].1.clone();
                    for slot in &evicted[1..] {
                        k_acc = k_acc.add_scaled(&slot.kv.per_layer[l].0, 1.0, 1.0)?;
                        v_acc = v_acc.add_scaled(&slot.kv.per_layer[l].1, 1.0, 1.0)?;
                    }
                    k_acc = k_acc.add_scaled(&k_acc, inv, 0.0)?;
                    v_acc = v_acc.add_scaled(&v_acc, inv, 0.0)?;
                    mean_kv.push((k_acc, v_acc));
                }
                let mean_latents: Vec<&Tensor> = evicted.iter().map(|s| &s.latent).collect();
                let mean_latent = Tensor::mean_of(&mean_latents)?;

                for l in 0..layers {
                    let (ak, av) = &anchor.kv.per_layer[l];
                    let mut k_rows = Vec::new();
                    let mut v_rows = Vec::new();
                    for f in 0..anchor.frames {
                        let row = f * self.tokens_per_frame;
                        let kf = ak.slice_rows(row, self.tokens_per_frame)?;
                        let vf = av.slice_rows(row, self.tokens_per_frame)?;
                        k_rows.push(kf.add_scaled(&mean_kv[l].0, decay, 1.0 - decay)?);
                        v_rows.push(vf.add_scaled(&mean_kv[l].1, decay, 1.0 - decay)?);
                    }
                    let k_refs: Vec<&V> = k_rows.iter().collect();
                    let v_refs: Vec<&V> = v_rows.iter().collect();
                    anchor.kv.per_layer[l] = (V::concat_rows(&k_refs)?, V::concat_rows(&v_refs)?);
                }
                let mut latent_rows = Vec::new();
                for f in 0..anchor.frames {
                    let lf = KvValue::slice_rows(&anchor.latent, f * self.tokens_per_frame, self.tokens_per_frame)?;
                    latent_rows.push(lf.lerp(&mean_latent, decay, 1.0 - decay)?);
                }
                let refs: Vec<&Tensor> = latent_rows.iter().collect();
                anchor.latent = KvValue::concat_rows(&refs)?;
            }
            AnchorPolicy::HeuristicReplace { period } => {
                if chunk_index % period == 0 && self.content.len() >= self.state_frames {
                    let start = self.content.len() - self.state_frames;
                    let slots: Vec<&CacheSlot<V>> = self.content.range(start..).collect();
                    let kvs: Vec<&LayerKvSet<V>> = slots.iter().map(|s| &s.kv).collect();
                    let latents: Vec<&Tensor> = slots.iter().map(|s| &s.latent).collect();
                    self.anchor = Some(CacheSlot {
                        kv: LayerKvSet::concat(&kvs)?,
                        latent: KvValue::concat_rows(&latents)?,
                        frames: self.state_frames,
                    });
                }
            }
        }
        Ok(())
    }

    /// Assembles the ordered visible window for one denoising pass:
    /// `[static sink?; cached state?; live state?; cached content; live
    /// content]`, cached slots tagged noise 0, live slots tagged `t`,
    /// relative indices assigned 0..total-1 in order.
    pub fn visible_window(
        &self,
        live_state_frames: usize,
        live_content_frames: usize,
        t: f64,
    ) -> WindowView<'_, V> {
        let mut entries = Vec::new();
        let mut rel = 0usize;
        if let Some(sink) = &self.sink {
            entries.push(WindowEntry::Cached {
                kind: SlotKind::StaticSink,
                frames: sink.frames,
                rel_start: rel,
                noise: 0.0,
                kv: &sink.kv,
                latent: &sink.latent,
            });
            rel += sink.frames;
        }
        if let Some(anchor) = &self.anchor {
            entries.push(WindowEntry::Cached {
                kind: SlotKind::CachedState,
                frames: anchor.frames,
                rel_start: rel,
                noise: 0.0,
                kv: &anchor.kv,
                latent: &anchor.latent,
            });
            rel += anchor.frames;
        }
        if live_state_frames > 0 {
            entries.push(WindowEntry::Live {
                kind: SlotKind::LiveState,
                frames: live_state_frames,
                rel_start: rel,
                noise: t,
            });
            rel += live_state_frames;
        }
        for slot in &self.content {
            entries.push(WindowEntry::Cached {
                kind: SlotKind::CachedContent,
                frames: slot.frames,
                rel_start: rel,
                noise: 0.0,
                kv: &slot.kv,
                latent: &slot.latent,
            });
            rel += slot.frames;
        }
        if live_content_frames > 0 {
            entries.push(WindowEntry::Live {
                kind: SlotKind::LiveContent,
                frames: live_content_frames,
                rel_start: rel,
                noise: t,
            });
        }
        WindowView {
            entries,
            tokens_per_frame: self.tokens_per_frame,
        }
    }

    pub fn policy(&self) -> &AnchorPolicy {
        &self.policy
    }

    pub fn frames_per_chunk(&self) -> usize {
        self.frames_per_chunk
    }

    pub fn retains_static_sink(&self) -> bool {
        self.retain_static_sink
    }

    pub fn chunk_counter(&self) -> usize {
        self.chunk_counter
    }

    /// Total cached frames (anchor + sink + content window).
    pub fn cached_frames(&self) -> usize {
        self.sink.as_ref().map_or(0, |s| s.frames)
            + self.anchor.as_ref().map_or(0, |a| a.frames)
            + self.content.len()
    }

    pub fn content_frames(&self) -> usize {
        self.content.len()
    }

    pub fn anchor_latent(&self) -> Option<&Tensor> {
        self.anchor.as_ref().map(|a| &a.latent)
    }

    pub fn anchor_kv(&self) -> Option<&LayerKvSet<V>> {
        self.anchor.as_ref().map(|a| &a.kv)
    }

    /// Recomputes every cached slot's KV from its stored latent. Explicit
    /// by design; standalone per-slot semantics (the slot's tokens
    /// self-attending at noise 0).
    pub fn rebuild_kv(
        &mut self,
        mut rebuild: impl FnMut(&Tensor, usize) -> Result<LayerKvSet<V>>,
    ) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            sink.kv = rebuild(&sink.latent, sink.frames)?;
        }
        if let Some(anchor) = &mut self.anchor {
            anchor.kv = rebuild(&anchor.latent, anchor.frames)?;
        }
        for slot in &mut self.content {
            slot.kv = rebuild(&slot.latent, slot.frames)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let view = self.visible_window(0, 0, 0.0);
        let slots = view
            .entries
            .iter()
            .map(|e| match e {
                WindowEntry::Cached { kind, frames, rel_start, noise, kv, latent } => SnapshotSlot {
                    kind: *kind,
                    frames: *frames,
                    rel_start: *rel_start,
                    noise: *noise,
                    latent: (*latent).clone(),
                    kv: kv
                        .per_layer
                        .iter()
                        .map(|(k, v)| (k.to_tensor(), v.to_tensor()))
                        .collect(),
                },
                WindowEntry::Live { .. } => unreachable!("snapshot has no live slots"),
            })
            .collect();
        CacheSnapshot {
            chunk_counter: self.chunk_counter,
            slots,
        }
    }

    /// Test- and probe-only override of the chunk counter; the forward
    /// path must be invariant to it.
    pub fn set_chunk_counter(&mut self, n: usize) {
        self.chunk_counter = n;
    }
}
