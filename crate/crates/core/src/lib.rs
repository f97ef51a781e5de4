//! Norm-bounded low-rank adapters for frozen linear layers.
//!
//! The crate implements one dispatchable interface over ten adapter
//! formulations — the additive low-rank family (LoRA, DoRA and its
//! fixed-magnitude variant, DeLoRA with and without weights-norm scaling) and
//! the multiplicative reflection family (one-sided ETHER, one-sided ETHER+,
//! and its controllable-boundary, high-rank, and relaxed extensions) — with:
//!
//! * exact analytic gradients for every learnable factor, validated against a
//!   central finite-difference oracle ([`grads`]);
//! * merge-at-inference and bit-exact checkpointing ([`adapters`]);
//! * a deterministic desk-scale training harness with distance-to-pretrained
//!   telemetry and learning-rate robustness sweeps ([`trainkit`]);
//! * a small self-contained linear-algebra kernel, including singular values
//!   for rank verification ([`numkit`]).

pub mod adapters;
pub mod csvio;
pub mod error;
pub mod grads;
pub mod numkit;
pub mod trainkit;

pub use error::{Error, Result};
