//! Roofline costs of GPU-side work.
//!
//! The cluster is treated as one device with the aggregate peak FLOP/s and
//! HBM bandwidth; tensor parallelism adds an all-reduce over NVLink and data
//! parallelism multiplies weight traffic (every replica streams its copy).

use crate::config::{GpuCalibration, HwTopology, LlmModel, SimConfig};
use crate::error::GpuError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpuOpCost {
    pub flops: f64,
    pub bytes_moved: f64,
    pub latency_ns: f64,
    pub bound: Bound,
    /// HBM bandwidth left idle over the op's duration, bytes/s.
    pub spare_hbm_bw: f64,
}

impl GpuOpCost {
    pub const ZERO: Self = Self { flops: 0.0, bytes_moved: 0.0, latency_ns: 0.0, bound: Bound::Memory, spare_hbm_bw: 0.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpuModel {
    pub peak_flops: f64,
    pub hbm_bw: f64,
    pub nvlink_bw: f64,
    pub efficiency: f64,
    pub launch_ns: f64,
    pub tensor_parallel: u32,
    pub data_parallel: u32,
    pub layers: f64,
    pub heads: f64,
    pub embedding: f64,
    pub head_dim: f64,
    pub precision: f64,
    pub fc_flops_per_token: f64,
    pub weight_bytes: f64,
}

impl GpuModel {
    pub fn new(m: &LlmModel, t: &HwTopology, cal: &GpuCalibration) -> Self {
        Self {
            peak_flops: t.gpu_tflops_fp16 * 1e12,
            hbm_bw: t.gpu_hbm_bw,
            nvlink_bw: t.nvlink_bw,
            efficiency: cal.efficiency,
            launch_ns: cal.launch_overhead_ns,
            tensor_parallel: m.tensor_parallel,
            data_parallel: m.data_parallel,
            layers: m.layers as f64,
            heads: m.heads as f64,
            embedding: m.embedding as f64,
            head_dim: m.head_dim() as f64,
            precision: m.precision_bytes as f64,
            fc_flops_per_token: 2.0 * m.params_per_layer() as f64 * m.layers as f64,
            weight_bytes: m.weight_bytes() as f64,
        }
    }

    pub fn from_config(c: &SimConfig) -> Self {
        Self::new(&c.model, &c.topology, &c.gpu)
    }

    /// FLOP per byte at which compute and memory time are equal.
    pub fn machine_balance(&self) -> f64 {
        self.peak_flops / self.hbm_bw
    }

    /// `max(flops/peak, bytes/bw) / efficiency + launch`, in ns.
    pub fn roofline(&self, flops: f64, bytes: f64, extra_ns: f64) -> GpuOpCost {
        let tc = flops / self.peak_flops;
        let tm = bytes / self.hbm_bw;
        let bound = if tc >= tm { Bound::Compute } else { Bound::Memory };
        let latency_ns = tc.max(tm) / self.efficiency * 1e9 + self.launch_ns + extra_ns;
        let window = latency_ns * 1e-9;
        let spare = if window > 0.0 { (self.hbm_bw - bytes / window).max(0.0) } else { self.hbm_bw };
        GpuOpCost { flops, bytes_moved: bytes, latency_ns, bound, spare_hbm_bw: spare }
    }

    /// Prefill attention of chunks `c` on top of `f` finished tokens.
    /// Requests run back to back.
    pub fn prefill_mha(&self, c: &[u64], f: &[u64]) -> Result<GpuOpCost, GpuError> {
        if c.len() != f.len() {
            return Err(GpuError::LengthMismatch { chunks: c.len(), finished: f.len() });
        }
        let mut total = GpuOpCost::ZERO;
        for (&ci, &fi) in c.iter().zip(f) {
            if ci == 0 {
                continue;
            }
            let (ci, fi) = (ci as f64, fi as f64);
            let flops = 2.0 * self.layers * self.heads * (2.0 * ci * (fi + ci) * self.head_dim);
            // K/V of the whole context plus Q and output of the chunk
            let bytes = self.layers * self.embedding * self.precision * (2.0 * (fi + ci) + 2.0 * ci);
            let cost = self.roofline(flops, bytes, 0.0);
            total.flops += cost.flops;
            total.bytes_moved += cost.bytes_moved;
            total.latency_ns += cost.latency_ns;
            if cost.bound == Bound::Compute {
                total.bound = Bound::Compute;
            }
        }
        if total.latency_ns > 0.0 {
            total.spare_hbm_bw = (self.hbm_bw - total.bytes_moved / (total.latency_ns * 1e-9)).max(0.0);
        }
        Ok(total)
    }

    pub fn prefill_mha_ns(&self, c: &[u64], f: &[u64]) -> Result<f64, GpuError> {
        Ok(self.prefill_mha(c, f)?.latency_ns)
    }

    /// Batched FC layers (QKV, projection, FFN) over `tokens` tokens.
    pub fn fc_batch(&self, tokens: u64) -> GpuOpCost {
        let t = tokens as f64;
        let flops = t * self.fc_flops_per_token;
        let activations = t * 16.0 * self.embedding * self.precision * self.layers;
        let bytes = self.weight_bytes * self.data_parallel as f64 + activations;
        let allreduce = if self.tensor_parallel > 1 && tokens > 0 {
            let per_replica = t / self.data_parallel as f64;
            2.0 * per_replica * self.embedding * self.precision * self.layers / self.nvlink_bw * 1e9
        } else {
            0.0
        };
        if tokens == 0 {
            return GpuOpCost { latency_ns: self.launch_ns, spare_hbm_bw: self.hbm_bw, ..GpuOpCost::ZERO };
        }
        self.roofline(flops, bytes, allreduce)
    }

    pub fn fc_batch_ns(&self, tokens: u64) -> f64 {
        self.fc_batch(tokens).latency_ns
    }

    /// Decode attention read from a memory of bandwidth `bw` (baselines).
    /// `tokens` is the total context over the batch.
    pub fn decode_attention_ns(&self, tokens: u64, requests: u64, bw: f64, efficiency: f64) -> f64 {
        if requests == 0 {
            return 0.0;
        }
        let bytes = tokens as f64 * 2.0 * self.layers * self.embedding * self.precision;
        bytes / bw / efficiency * 1e9
    }
}

/// Whether an asynchronous transfer of `async_bytes` hides under an FC op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Headroom {
    pub hidden: bool,
    pub residual_ns: f64,
    /// Transfer time relative to the FC latency.
    pub ratio: f64,
}

pub fn overlap_headroom(fc: &GpuOpCost, async_bytes: f64, topo: &HwTopology) -> Headroom {
    if async_bytes <= 0.0 {
        return Headroom { hidden: true, residual_ns: 0.0, ratio: 0.0 };
    }
    let transfer_ns = if topo.pcie_bw > 0.0 { async_bytes / topo.pcie_bw * 1e9 } else { f64::INFINITY };
    let hbm_fits = async_bytes <= fc.spare_hbm_bw * fc.latency_ns * 1e-9;
    let hidden = transfer_ns <= fc.latency_ns && hbm_fits;
    let residual_ns = if hidden {
        0.0
    } else if hbm_fits {
        transfer_ns - fc.latency_ns
    } else {
        transfer_ns.max(async_bytes / topo.gpu_hbm_bw * 1e9)
    };
    Headroom { hidden, residual_ns: residual_ns.max(0.0), ratio: transfer_ns / fc.latency_ns }
}
