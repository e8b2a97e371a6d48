//! Model, hardware and timing configuration plus the constants derived from
//! them (KV footprint, weight bytes, aggregate bandwidths).
//!
//! All types are immutable once validated and can be shared freely between
//! concurrent simulation runs.
// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Bytes a bank row buffer hands to its bank PU per RD command (64 bits).
pub const BANK_READ_BYTES: u64 = 8;

pub const KIB: u64 = 1 << 10;
pub const GIB: u64 = 1 << 30;
pub const TIB: u64 = 1 << 40;

/// Transformer dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmModel {
    #[serde(default)]
    pub name: String,
    pub layers: u32,
    pub heads: u32,
    pub embedding: u32,
    /// Bytes per element (2 for FP16).
    pub precision_bytes: u32,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: u32,
    #[serde(default = "one")]
    pub tensor_parallel: u32,
    #[serde(default = "one")]
    pub data_parallel: u32,
}

fn default_ffn_expansion() -> u32 {
    4
}

fn one() -> u32 {
    1
}

impl LlmModel {
    fn preset(name: &str, layers: u32, heads: u32, embedding: u32, tp: u32, dp: u32) -> Self {
        Self {
            name: name.to_string(),
            layers,
            heads,
            embedding,
            precision_bytes: 2,
            ffn_expansion: 4,
            tensor_parallel: tp,
            data_parallel: dp,
        }
    }

    pub fn opt_66b() -> Self {
        Self::preset("opt-66b", 64, 72, 9216, 2, 4)
    }

    pub fn gpt_89b() -> Self {
        Self::preset("gpt-89b", 48, 96, 12288, 4, 2)
    }

    pub fn gpt_175b() -> Self {
        Self::preset("gpt-175b", 96, 96, 12288, 8, 1)
    }

    /// Per-head dimension `D_e / N_h`.
    pub fn head_dim(&self) -> u32 {
        self.embedding / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.embedding", self.embedding),
            ("model.ffn_expansion", self.ffn_expansion),
            ("model.tensor_parallel", self.tensor_parallel),
            ("model.data_parallel", self.data_parallel),
        ] {
            if v == 0 {
                return Err(ConfigError::new(field, "must be >= 1"));
            }
        }
        if !self.embedding.is_multiple_of(self.heads) {
            return Err(ConfigError::new(
                "model.embedding",
                format!(
                    "D_h × N_h ≠ D_e ({} is not divisible by {} heads)",
                    self.embedding, self.heads
                ),
            ));
        }
        if !matches!(self.precision_bytes, 1 | 2 | 4) {
            return Err(ConfigError::new("model.precision_bytes", "must be one of 1, 2, 4"));
        }
        Ok(())
    }

    /// Parameters of one layer: QKV (3), projection (1) and two FFN matrices.
    pub fn params_per_layer(&self) -> u64 {
        let d = self.embedding as u64;
        (4 + 2 * self.ffn_expansion as u64) * d * d
    }

    pub fn weight_bytes(&self) -> u64 {
        self.params_per_layer() * self.layers as u64 * self.precision_bytes as u64
    }

    /// Weight bytes resident across the cluster (one copy per data-parallel replica).
    pub fn resident_weight_bytes(&self) -> u64 {
        self.weight_bytes() * self.data_parallel as u64
    }
}

/// `2 · N_l · D_e · N_pre`: K and V for every layer of one token.
pub fn kv_bytes_per_token(m: &LlmModel) -> u64 {
    2 * m.layers as u64 * m.embedding as u64 * m.precision_bytes as u64
}

/// K+V bytes of one token for a single (layer, head).
pub fn kv_bytes_per_token_head(m: &LlmModel) -> u64 {
    2 * m.head_dim() as u64 * m.precision_bytes as u64
}

/// K+V bytes of one token for one layer (all heads).
pub fn kv_bytes_per_token_layer(m: &LlmModel) -> u64 {
    2 * m.embedding as u64 * m.precision_bytes as u64
}

/// Device geometry of the GPU side and the DIMM host memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwTopology {
    pub channels: u32,
    pub dimms_per_channel: u32,
    pub ranks_per_dimm: u32,
    pub chips_per_rank: u32,
    pub bank_groups: u32,
    pub banks_per_group: u32,
    pub chip_io_bits: u32,
    pub bus_bits: u32,
    #[serde(default = "default_row_bytes")]
    pub row_bytes_per_chip: u32,
    #[serde(default = "default_rows")]
    pub rows_per_bank: u32,
    pub gpu_count: u32,
    /// Aggregate over all GPUs, in TFLOP/s.
    #[serde(default = "default_tflops")]
    pub gpu_tflops_fp16: f64,
    /// Aggregate GPU memory bandwidth, bytes/s.
    pub gpu_hbm_bw: f64,
    /// Aggregate in-HBM PIM bandwidth used by the HBM-PIM baseline, bytes/s.
    pub hbm_pim_bw: f64,
    /// Bytes/s per direction.
    #[serde(default = "default_pcie_bw")]
    pub pcie_bw: f64,
    /// Fixed cost of one PCIe transaction, ns.
    #[serde(default = "default_pcie_latency")]
    pub pcie_latency_ns: f64,
    #[serde(default = "default_nvlink_bw")]
    pub nvlink_bw: f64,
    pub host_capacity: u64,
    pub gpu_capacity: u64,
}

fn default_row_bytes() -> u32 {
    1024
}
fn default_rows() -> u32 {
    262_144
}
fn default_tflops() -> f64 {
    156.0
}
fn default_pcie_bw() -> f64 {
    32e9
}
fn default_pcie_latency() -> f64 {
    5_000.0
}
fn default_nvlink_bw() -> f64 {
    600e9
}

impl HwTopology {
    /// 8×A100 with 16 channels × 2 DIMMs × 2 ranks of DDR4-3200 (2 TiB).
    pub fn dgx_a100() -> Self {
        Self {
            channels: 16,
            dimms_per_channel: 2,
            ranks_per_dimm: 2,
            chips_per_rank: 8,
            bank_groups: 4,
            banks_per_group: 4,
            chip_io_bits: 8,
            bus_bits: 64,
            row_bytes_per_chip: default_row_bytes(),
            rows_per_bank: default_rows(),
            gpu_count: 8,
            gpu_tflops_fp16: default_tflops(),
            gpu_hbm_bw: 16.3e12,
            hbm_pim_bw: 260.8e12,
            pcie_bw: default_pcie_bw(),
            pcie_latency_ns: default_pcie_latency(),
            nvlink_bw: default_nvlink_bw(),
            host_capacity: 2 * TIB,
            gpu_capacity: 640 * GIB,
        }
    }

    /// Number of ranksets: one rank from every channel forms a rankset.
    pub fn ranksets(&self) -> u32 {
        self.dimms_per_channel * self.ranks_per_dimm
    }

    pub fn banks_per_rank(&self) -> u32 {
        self.bank_groups * self.banks_per_group
    }

    /// Bytes addressable through the bank/row geometry.
    pub fn physical_capacity(&self) -> u64 {
        self.channels as u64
            * self.ranksets() as u64
            * self.chips_per_rank as u64
            * self.banks_per_rank() as u64
            * self.rows_per_bank as u64
            * self.row_bytes_per_chip as u64
    }

    /// Returns a copy with `ranksets` ranks per channel (ranks_per_dimm is
    /// held at 2 where possible) and per-rank capacity preserved.
    pub fn with_ranksets(&self, ranksets: u32) -> Self {
        let mut t = self.clone();
        let per_rank = self.host_capacity / self.ranksets().max(1) as u64;
        if ranksets.is_multiple_of(2) {
            t.ranks_per_dimm = 2;
            t.dimms_per_channel = ranksets / 2;
        } else {
            t.ranks_per_dimm = 1;
            t.dimms_per_channel = ranksets;
        }
        t.host_capacity = per_rank * ranksets as u64;
        t
    }

    /// Returns a copy with `bytes` of host memory, growing rows per bank
    /// (denser chips) when the geometry is too small.
    pub fn with_capacity(&self, bytes: u64) -> Self {
        let mut t = self.clone();
        t.host_capacity = bytes;
        while t.physical_capacity() < bytes {
            t.rows_per_bank *= 2;
        }
        t
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("topology.channels", self.channels),
            ("topology.dimms_per_channel", self.dimms_per_channel),
            ("topology.ranks_per_dimm", self.ranks_per_dimm),
            ("topology.chips_per_rank", self.chips_per_rank),
            ("topology.bank_groups", self.bank_groups),
            ("topology.banks_per_group", self.banks_per_group),
            ("topology.chip_io_bits", self.chip_io_bits),
            ("topology.bus_bits", self.bus_bits),
            ("topology.row_bytes_per_chip", self.row_bytes_per_chip),
            ("topology.rows_per_bank", self.rows_per_bank),
            ("topology.gpu_count", self.gpu_count),
        ] {
            if v == 0 {
                return Err(ConfigError::new(field, "must be >= 1"));
            }
        }
        if self.chips_per_rank * self.chip_io_bits != self.bus_bits {
            return Err(ConfigError::new(
                "topology.bus_bits",
                format!(
                    "chips_per_rank × chip_io_bits ({} × {}) must equal bus_bits ({})",
                    self.chips_per_rank, self.chip_io_bits, self.bus_bits
                ),
            ));
        }
        if !(self.row_bytes_per_chip as u64).is_multiple_of(BANK_READ_BYTES) {
            return Err(ConfigError::new("topology.row_bytes_per_chip", "must be a multiple of 8"));
        }
        for (field, v) in [
            ("topology.gpu_tflops_fp16", self.gpu_tflops_fp16),
            ("topology.gpu_hbm_bw", self.gpu_hbm_bw),
            ("topology.hbm_pim_bw", self.hbm_pim_bw),
            ("topology.pcie_bw", self.pcie_bw),
            ("topology.nvlink_bw", self.nvlink_bw),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::new(field, "must be a positive finite number"));
            }
        }
        if !(self.pcie_latency_ns >= 0.0) {
            return Err(ConfigError::new("topology.pcie_latency_ns", "must be >= 0"));
        }
        if self.host_capacity == 0 {
            return Err(ConfigError::new("topology.host_capacity", "must be > 0"));
        }
        if self.host_capacity > self.physical_capacity() {
            return Err(ConfigError::new(
                "topology.host_capacity",
                format!("exceeds the {} bytes the DRAM geometry provides", self.physical_capacity()),
            ));
        }
        if self.gpu_capacity == 0 {
            return Err(ConfigError::new("topology.gpu_capacity", "must be > 0"));
        }
        Ok(())
    }
}

/// DDR timing parameters. Cycle counts are in units of `tck_ns`.
///
/// `RRD=4/8` and `CDLR=4/12` style pairs are kept as short (different bank
/// group) and long (same bank group) variants. The PIM kernels only issue
/// all-bank RD/ACT/PRE, so they are paced by `ccdl`, `rcd`, `rtp`, `ras`,
/// `rp` and `rc`; the RRD/CDLR pairs only matter to host-side traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdrTiming {
    pub tck_ns: f64,
    /// Burst duration on the bus, cycles.
    pub bl: u32,
    pub ccd: u32,
    pub rrd_s: u32,
    pub rrd_l: u32,
    pub rcd: u32,
    pub ras: u32,
    pub rp: u32,
    pub rc: u32,
    pub cl: u32,
    pub wl: u32,
    pub cdlr_s: u32,
    pub cdlr_l: u32,
    pub wr: u32,
    pub ccdl: u32,
    pub rtp: u32,
    #[serde(default = "default_trefi")]
    pub trefi_ns: f64,
    #[serde(default = "default_trfc")]
    pub trfc_ns: f64,
}

fn default_trefi() -> f64 {
    7_800.0
}
fn default_trfc() -> f64 {
    350.0
}

impl DdrTiming {
    /// DDR4-3200 timings of the evaluated DIMMs.
    pub fn ddr4_3200() -> Self {
        Self {
            tck_ns: 0.625,
            bl: 4,
            ccd: 4,
            rrd_s: 4,
            rrd_l: 8,
            rcd: 22,
            ras: 52,
            rp: 22,
            rc: 74,
            cl: 22,
            wl: 16,
            cdlr_s: 4,
            cdlr_l: 12,
            wr: 24,
            ccdl: 8,
            rtp: 12,
            trefi_ns: default_trefi(),
            trfc_ns: default_trfc(),
        }
    }

    pub fn cycles_to_ns(&self, cycles: u64) -> f64 {
        cycles as f64 * self.tck_ns
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tck_ns > 0.0 && self.tck_ns.is_finite()) {
            return Err(ConfigError::new("timing.tck_ns", "must be > 0"));
        }
        for (field, v) in [
            ("timing.bl", self.bl),
            ("timing.ccd", self.ccd),
            ("timing.rrd_s", self.rrd_s),
            ("timing.rrd_l", self.rrd_l),
            ("timing.rcd", self.rcd),
            ("timing.ras", self.ras),
            ("timing.rp", self.rp),
            ("timing.rc", self.rc),
            ("timing.cl", self.cl),
            ("timing.wl", self.wl),
            ("timing.cdlr_s", self.cdlr_s),
            ("timing.cdlr_l", self.cdlr_l),
            ("timing.wr", self.wr),
            ("timing.ccdl", self.ccdl),
            ("timing.rtp", self.rtp),
        ] {
            if v == 0 {
                return Err(ConfigError::new(field, "must be > 0"));
            }
        }
        if self.rc < self.ras + self.rp {
            return Err(ConfigError::new(
                "timing.rc",
                format!("RC ({}) must be >= RAS + RP ({})", self.rc, self.ras + self.rp),
            ));
        }
        if !(self.trefi_ns > 0.0) || !(self.trfc_ns > 0.0) || self.trfc_ns >= self.trefi_ns {
            return Err(ConfigError::new("timing.trefi_ns", "need 0 < tRFC < tREFI"));
        }
        Ok(())
    }
}

/// Aggregate all-bank PIM bandwidth: every bank of every chip of every rank
/// delivers one 64-bit read per `tCCD_L`.
pub fn pim_aggregate_bw(t: &HwTopology, d: &DdrTiming) -> f64 {
    let banks = t.channels as u64
        * t.ranksets() as u64
        * t.chips_per_rank as u64
        * t.banks_per_rank() as u64;
    (banks * BANK_READ_BYTES) as f64 / (d.ccdl as f64 * d.tck_ns * 1e-9)
}

/// External (host-visible) DDR bandwidth of one channel: two transfers per clock.
pub fn channel_bw(t: &HwTopology, d: &DdrTiming) -> f64 {
    (t.bus_bits as f64 / 8.0) * 2.0 / (d.tck_ns * 1e-9)
}

/// External bandwidth summed over all channels.
pub fn channel_aggregate_bw(t: &HwTopology, d: &DdrTiming) -> f64 {
    channel_bw(t, d) * t.channels as f64
}

/// Parameters of the rank-level and bank-level processing units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PimParams {
    /// Rank PU score buffer.
    pub buffer_bytes: u64,
    /// FP16 adder lanes in the rank PU adder unit.
    pub adder_lanes: u32,
    /// Exponential lanes of the softmax unit.
    pub softmax_lanes: u32,
    /// Fixed pipeline depth of the softmax unit, cycles.
    pub softmax_depth_cycles: u32,
    /// Scores per softmax chunk; equals the number of logic banks per rank.
    pub softmax_chunk: u32,
    /// Banks a V vector is spread over at burst granularity.
    pub v_spread: u32,
    /// Extra cycles added by the re-layout unit (absorbed by spoofed SPD).
    pub relayout_cycles: u32,
    /// Fused score/softmax/context pipelining.
    pub fused: bool,
    /// Process heads longer than the buffer in buffer-sized tiles.
    pub repeated_fetch: bool,
}

impl Default for PimParams {
    fn default() -> Self {
        Self {
            buffer_bytes: 256 * KIB,
            adder_lanes: 8,
            softmax_lanes: 8,
            softmax_depth_cycles: 8,
            softmax_chunk: 16,
            v_spread: 4,
            relayout_cycles: 1,
            fused: true,
            repeated_fetch: true,
        }
    }
}

impl PimParams {
    pub fn validate(&self, t: &HwTopology) -> Result<(), ConfigError> {
        if self.buffer_bytes == 0 {
            return Err(ConfigError::new("pim.buffer_bytes", "must be > 0"));
        }
        if self.adder_lanes == 0 || self.softmax_lanes == 0 {
            return Err(ConfigError::new("pim.adder_lanes", "lane counts must be > 0"));
        }
        if self.softmax_chunk != t.banks_per_rank() {
            return Err(ConfigError::new(
                "pim.softmax_chunk",
                format!("must equal logic banks per rank ({})", t.banks_per_rank()),
            ));
        }
        if !self.v_spread.is_power_of_two() || self.v_spread > t.banks_per_rank() {
            return Err(ConfigError::new(
                "pim.v_spread",
                "must be a power of two no larger than banks per rank",
            ));
        }
        Ok(())
    }
}

/// GPU roofline calibration. None of these come from measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpuCalibration {
    /// Fraction of peak FLOP/s and bandwidth that kernels achieve.
    pub efficiency: f64,
    /// Fixed cost per fused kernel group, ns.
    pub launch_overhead_ns: f64,
}

impl Default for GpuCalibration {
    fn default() -> Self {
        Self { efficiency: 0.6, launch_overhead_ns: 5_000.0 }
    }
}

impl GpuCalibration {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(ConfigError::new("gpu.efficiency", "must be in (0, 1]"));
        }
        if !(self.launch_overhead_ns >= 0.0) {
            return Err(ConfigError::new("gpu.launch_overhead_ns", "must be >= 0"));
        }
        Ok(())
    }
}

/// Sub-batch construction policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerPolicy {
    /// Two interleaved sub-batches with predictor-aligned chunked prefill.
    L3,
    /// Waiting prefills run first; decode resumes when none fit.
    PrefillPriority,
    /// One batch per iteration, GPU and attention device run back to back.
    SingleBatch,
}

impl SchedulerPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l3" => Some(Self::L3),
            "prefill-priority" => Some(Self::PrefillPriority),
            "single-batch" => Some(Self::SingleBatch),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::L3 => "l3",
            Self::PrefillPriority => "prefill-priority",
            Self::SingleBatch => "single-batch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerParams {
    pub policy: SchedulerPolicy,
    /// Chunk granularity for partial prefill chunks.
    pub chunk_granularity: u32,
    /// Chunk admitted while predictors are still bootstrapping.
    pub bootstrap_chunk: u32,
    /// Samples required before predictors leave bootstrap mode.
    pub min_samples: usize,
    pub window: usize,
    pub retrain_stride: usize,
    pub trees: usize,
    pub tree_depth: usize,
    /// Keep prefill KV transfers off the critical path and use rankset overlap.
    pub comm_overlap: bool,
    /// Use the engines directly instead of learned predictors.
    pub oracle_predictors: bool,
    /// Prefill token budget per iteration for the non-L3 policies.
    pub prefill_token_budget: u32,
    pub seed: u64,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            policy: SchedulerPolicy::L3,
            chunk_granularity: 16,
            bootstrap_chunk: 512,
            min_samples: 8,
            window: 512,
            retrain_stride: 128,
            trees: 32,
            tree_depth: 8,
            comm_overlap: true,
            oracle_predictors: false,
            prefill_token_budget: 2048,
            seed: 7,
        }
    }
}

impl SchedulerParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_granularity == 0 {
            return Err(ConfigError::new("scheduler.chunk_granularity", "must be > 0"));
        }
        if self.bootstrap_chunk == 0 || !self.bootstrap_chunk.is_multiple_of(self.chunk_granularity) {
            return Err(ConfigError::new(
                "scheduler.bootstrap_chunk",
                "must be a positive multiple of chunk_granularity",
            ));
        }
        if self.window == 0 || self.retrain_stride == 0 || self.trees == 0 || self.tree_depth == 0
        {
            return Err(ConfigError::new("scheduler.window", "window, stride, trees, depth must be > 0"));
        }
        if self.min_samples > self.window {
            return Err(ConfigError::new("scheduler.min_samples", "must not exceed window"));
        }
        if self.prefill_token_budget == 0 {
            return Err(ConfigError::new("scheduler.prefill_token_budget", "must be > 0"));
        }
        Ok(())
    }
}

/// Constants for the analytical baseline systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineParams {
    /// Host CPU memory bandwidth used for CPU-side attention, bytes/s.
    pub cpu_bw: f64,
    /// Rank-level PIM bandwidth as a multiple of `cpu_bw`.
    pub rank_pim_multiplier: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self { cpu_bw: 406e9, rank_pim_multiplier: 4.0 }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.cpu_bw > 0.0) {
            return Err(ConfigError::new("baseline.cpu_bw", "must be > 0"));
        }
        if !(self.rank_pim_multiplier > 0.0) {
            return Err(ConfigError::new("baseline.rank_pim_multiplier", "must be > 0"));
        }
        Ok(())
    }

    pub fn rank_pim_bw(&self) -> f64 {
        self.cpu_bw * self.rank_pim_multiplier
    }
}

/// Everything a simulation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub version: u32,
    pub model: LlmModel,
    pub topology: HwTopology,
    pub timing: DdrTiming,
    #[serde(default)]
    pub pim: PimParams,
    #[serde(default)]
    pub gpu: GpuCalibration,
    #[serde(default)]
    pub scheduler: SchedulerParams,
    #[serde(default)]
    pub baseline: BaselineParams,
}

pub const CONFIG_VERSION: u32 = 1;

impl SimConfig {
    pub fn new(model: LlmModel, topology: HwTopology, timing: DdrTiming) -> Self {
        Self {
            version: CONFIG_VERSION,
            model,
            topology,
            timing,
            pim: PimParams::default(),
            gpu: GpuCalibration::default(),
            scheduler: SchedulerParams::default(),
            baseline: BaselineParams::default(),
        }
    }

    /// GPT-175B on the DGX-A100 + DDR4-3200 DIMM-PIM system.
    pub fn dgx_gpt175b() -> Self {
        Self::new(LlmModel::gpt_175b(), HwTopology::dgx_a100(), DdrTiming::ddr4_3200())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::new(
                "version",
                format!("unsupported version {} (expected {})", self.version, CONFIG_VERSION),
            ));
        }
        self.model.validate()?;
        self.topology.validate()?;
        self.timing.validate()?;
        self.pim.validate(&self.topology)?;
        self.gpu.validate()?;
        self.scheduler.validate()?;
        self.baseline.validate()?;
        if self.model.tensor_parallel * self.model.data_parallel != self.topology.gpu_count {
            return Err(ConfigError::new(
                "model.tensor_parallel",
                format!(
                    "tensor_parallel × data_parallel ({} × {}) must equal gpu_count ({})",
                    self.model.tensor_parallel, self.model.data_parallel, self.topology.gpu_count
                ),
            ));
        }
        let per_chip = self.model.head_dim() as u64 * self.model.precision_bytes as u64;
        if !per_chip.is_multiple_of(self.topology.chips_per_rank as u64 * BANK_READ_BYTES) {
            return Err(ConfigError::new(
                "model.heads",
                "head vector must split into whole 64-bit bursts on every chip",
            ));
        }
        Ok(())
    }

    /// GPU memory left for KV after weights.
    pub fn gpu_free_bytes(&self) -> u64 {
        self.topology.gpu_capacity.saturating_sub(self.model.resident_weight_bytes())
    }
}
