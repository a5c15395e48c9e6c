//! A miniature, self-contained transformer laboratory for learned KV-prefix
//! adaptation on frozen toy models.
//!
//! The crate compares four adaptation mechanisms under a shared reverse-mode
//! differentiation engine: prefix tuning (learned per-layer key/value slots),
//! prompt tuning (learned input embeddings), LoRA (low-rank weight updates),
//! and full fine-tuning. On top of the model stack it provides
//!
//! - numerical verification of the novelty-subspace expressivity caps and
//!   the three-way loss hierarchy separating the adapter families,
//! - representation-geometry probes (value-span effective dimension, prefix
//!   residual energy, last-layer effective rank),
//! - an analytic prefill/decode floating-point-operation cost model,
//! - a toy-scale training harness over synthetic algorithmic tasks.
//!
//! All numerics are dense `f64`; every experiment is deterministic given its
//! seed.

pub mod adapters;
pub mod checkpoint;
pub mod cost;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod probes;
pub mod tape;
pub mod theory;

pub use linalg::{Matrix, Subspace, SvdResult};
pub use tape::{Param, ParamSet, Tape, VarId};
