//! Desk-scale simulator of federated instruction tuning: a tiny byte-level
//! transformer with frozen base weights, trainable LoRA adapters, non-iid
//! client partitioning, a FedAvg-style server loop, and an evaluation
//! harness comparing federated, centralized and local-only training.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod lora;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
