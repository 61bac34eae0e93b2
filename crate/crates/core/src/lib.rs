//! Desk-scale streaming chunked diffusion engine.
//!
//! Frames are generated in chunks by a small diffusion transformer reading
//! a bounded visible window: an anchor slot, an optional live state, a
//! sliding content window, and the live chunk. The anchor policies under
//! comparison (adaptive state, static sink, EMA sink, heuristic
//! replacement, none) differ only in how the anchor slot is maintained.
//! Training is horizon-weighted distribution matching against an analytic
//! Gaussian-mixture teacher, with a learned critic updated on the
//! generator's own noised predictions. An attention probe measures
//! per-frame attention mass, off-diagonal shares, and anchor rank.

pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod dmd;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod rollout;
pub mod runner;
pub mod scene;
pub mod train;

pub use error::CoreError;

pub type Result<T> = std::result::Result<T, CoreError>;
