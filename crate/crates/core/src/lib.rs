//! Simulator for a processing-in-memory LLM inference accelerator with
//! low-rank adapters: spatial mapping, mesh dataflow compilation,
//! cycle-level network simulation, pipelined adapter reprogramming with
//! power gating, and latency/throughput/power reporting.

pub mod analytical;
pub mod arith;
pub mod collectives;
pub mod config;
pub mod error;
pub mod golden;
pub mod isa;
pub mod mapper;
pub mod mesh;
pub mod metrics;
pub mod netsim;
pub mod pipeline;
pub mod srpg;
pub mod tensor;

pub use error::{Error, Result};
