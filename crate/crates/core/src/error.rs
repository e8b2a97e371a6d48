use alloc::string::String;

use thiserror::Error;

/// A configuration value that breaks one of the type invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {relation}")]
pub struct ConfigError {
    pub field: &'static str,
    pub relation: String,
}

impl ConfigError {
    pub(crate) fn new(field: &'static str, relation: impl Into<String>) -> Self {
        Self { field, relation: relation.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayoutError {
    #[error("element width {elem_bits} is not a multiple of chip I/O width {chip_io_bits}")]
    ElementWidth { elem_bits: u32, chip_io_bits: u32 },
    #[error("element/chip width ratio {0} is unsupported (1..=4)")]
    Ratio(u32),
    #[error("beat width mismatch: expected {expected} bits, got {got}")]
    BeatWidth { expected: u32, got: u32 },
    #[error("expected {expected} beats per re-layout group, got {got}")]
    BeatCount { expected: usize, got: usize },
    #[error("re-layout offset of {relayout} cycles cannot be absorbed by tWL={wl}")]
    SpoofUnderflow { relayout: u32, wl: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("token {token} exceeds region capacity of {capacity} tokens")]
    CapacityExceeded { token: u64, capacity: u64 },
    #[error("head dimension of {bytes} bytes per chip is not a whole number of bursts")]
    BurstAlignment { bytes: u64 },
    #[error("v_spread {0} must be a power of two no larger than the banks per rank")]
    VSpread(u32),
    #[error("no free rows left on rankset {rankset}, channel {channel}")]
    OutOfRows { rankset: u32, channel: u32 },
    #[error("request {0} has no placement")]
    MissingRequest(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PimError {
    #[error("{tokens} tokens exceed the rank buffer ({capacity}) and repeated fetch is disabled")]
    BufferOverflow { tokens: u64, capacity: u64 },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("chunk size must be at least 1")]
    ZeroChunk,
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GpuError {
    #[error("chunk list has {chunks} entries but finished list has {finished}")]
    LengthMismatch { chunks: usize, finished: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredictError {
    #[error("observation {index} is not positive")]
    NonPositive { index: usize },
    #[error("observed and predicted lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("requested {requested} samples but trace has {available} records")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid synthetic trace parameter: {0}")]
    Parameter(&'static str),
}

/// Crate-wide error.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Relayout(#[from] RelayoutError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Pim(#[from] PimError),
    #[error(transparent)]
    Gpu(#[from] GpuError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("audit failed in iteration {iteration}: {detail}")]
    Audit { iteration: u64, detail: String },
}
