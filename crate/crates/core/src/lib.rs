//! Toy decoder-only transformer runtime with a segmented KV cache and
//! attention-guided visual-token pruning.
//!
//! * [`numerics`]: matrices, softmax, rotary embeddings, nucleus sampling.
//! * [`model`]: weights, prefill and single-token forward steps.
//! * [`kvcache`]: role-tagged per-layer key/value storage and pruning.
//! * [`telemetry`]: per-step attention traces.
//! * [`policy`]: pruning policies and the attention intervention hook.
//! * [`decode`]: greedy, nucleus and beam-search loops.
//! * [`metrics`]: CHAIR scoring, FLOPs ledger, latency statistics.

pub mod decode;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod telemetry;

pub use error::{Error, Result};
