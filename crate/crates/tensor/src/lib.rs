//! Dense multi-dimensional arrays with reverse-mode differentiation, a
//! counter-based seeded RNG, a central-difference gradient oracle, and a
//! small binary dump format.
//!
//! Everything is 64-bit and CPU-only. Graphs are built eagerly on a [`Tape`];
//! values are always computed, gradients only for nodes reachable from a
//! tensor that requires them. Tapes are single-threaded; disjoint tapes may
//! run concurrently.

mod error;
mod io;
mod oracle;
mod rng;
mod tape;
mod tensor;

pub use error::TensorError;
pub use io::{read_tensor, write_tensor};
pub use oracle::{finite_diff_grad, max_rel_error};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};

pub type Result<T> = std::result::Result<T, TensorError>;
