//! Analytical and functional models for LLM inference split between a GPU
//! cluster and PIM-enhanced DIMM host memory.
//!
//! The crate is `no_std` (it only needs `alloc`). Everything that touches a
//! filesystem, a clock or a terminal lives in the `dimmpim-sim` companion
//! crate.
//!
//! Module map:
//!
//! * [`config`]: model/topology/timing types and derived constants.
//! * [`relayout`]: in-flight bit re-layout on the DIMM buffer chip.
//! * [`mapping`]: physical KV placement (rankset, channel, bank, row, column).
//! * [`pim`]: decode-attention latency and functional model on DIMM-PIM.
//! * [`gpu`]: roofline cost of prefill attention and batched FC layers.
//! * [`interconnect`]: PCIe critical/asynchronous transfers and audits.
//! * [`predictor`] and [`scheduler`]: two-sub-batch interleaving scheduler.
//! * [`trace`], [`sim`]: workloads, event loop, baselines and metrics.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod config;
pub mod error;
pub mod gpu;
pub mod interconnect;
pub mod mapping;
pub(crate) mod math;
pub mod pim;
pub mod predictor;
pub mod relayout;
pub mod scheduler;
pub mod sim;
pub mod timeline;
pub mod trace;

pub use config::{DdrTiming, HwTopology, LlmModel, SimConfig};
pub use error::{ConfigError, Error};
