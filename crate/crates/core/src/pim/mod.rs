//! Decode-attention on DIMM-PIM: latency model, command stream, functional
//! kernels and refresh handling.
//!
//! One head kernel on one rank runs three stages:
//!
//! 1. score: all-bank RDs stream K; each bank PU emits per-chip partial dot
//!    products for one token, so one chunk of `banks` tokens completes every
//!    `bursts_per_token` RDs;
//! 2. softmax: the rank PU fetches a chunk's partials, reduces them across
//!    chips and runs the chunk through the exp unit, keeping running max/sum;
//! 3. context: after the last chunk, buffered scores are rescaled and
//!    broadcast chunk by chunk to the bank PUs, which accumulate `p·V` while V
//!    streams; the rank PU finally reduces the bank accumulators.
//!
//! Bank result and score registers are double-buffered, so a stage only
//! stalls the banks when the rank side needs more cycles per chunk than the
//! banks do. [`PimModel::head_cycles`] is the closed form for the stall-free
//! case; [`stream::simulate_head`] walks the command-level state machine and
//! is exact in all cases.

pub mod engine;
pub mod functional;
pub mod refresh;
pub mod stream;

use alloc::vec;
use alloc::vec::Vec;

use crate::config::{DdrTiming, HwTopology, LlmModel, PimParams, SimConfig, BANK_READ_BYTES};
use crate::error::{MappingError, PimError};
use crate::mapping::MappingGeometry;

pub use engine::PimEngine;
pub use functional::{fused_attention, reference_attention, softmax_chunks, Precision};
pub use refresh::RefreshManager;

/// Command counts of a kernel (energy proxy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommandCounts {
    pub act: u64,
    pub rd: u64,
    pub pre: u64,
    pub refresh: u64,
}

impl core::ops::AddAssign for CommandCounts {
    fn add_assign(&mut self, o: Self) {
        self.act += o.act;
        self.rd += o.rd;
        self.pre += o.pre;
        self.refresh += o.refresh;
    }
}

impl CommandCounts {
    pub fn scaled(self, k: u64) -> Self {
        Self { act: self.act * k, rd: self.rd * k, pre: self.pre * k, refresh: self.refresh * k }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PimKernelResult {
    pub latency_ns: f64,
    pub latency_cycles: u64,
    pub commands: CommandCounts,
    /// Steady-state bank idle time caused by the rank PU, ns.
    pub bubble_ns: f64,
    /// Functional output (only from the functional entry points).
    pub output: Option<Vec<f64>>,
}

/// Cycle-level constants of one rank's PUs, derived from the configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PimModel {
    pub tck_ns: f64,
    pub ccdl: u64,
    pub rcd: u64,
    pub rp: u64,
    pub rtp: u64,
    pub ras: u64,
    pub rc: u64,
    pub banks: u64,
    pub chips: u64,
    /// Scores per softmax chunk (= logic banks).
    pub chunk: u64,
    /// K reads per token group (bursts per chip per token).
    pub k_reads_per_group: u64,
    /// Tokens covered by one V read across all banks.
    pub v_sets: u64,
    pub v_reads_per_slot: u64,
    /// RDs that fit in one open row.
    pub reads_per_row: u64,
    /// Rank PU: fetch of one chunk's per-chip partials.
    pub fetch_cycles: u64,
    /// Exp unit occupancy per chunk.
    pub softmax_cycles: u64,
    pub softmax_lanes: u64,
    pub softmax_depth: u64,
    /// Scaling of one chunk by the global normalizer before broadcast.
    pub rescale_cycles: u64,
    /// Writing one chunk of scores into all bank PUs.
    pub bcast_cycles: u64,
    /// Reduction of bank accumulators into the output vector.
    pub agg_cycles: u64,
    /// Merge of two tile outputs under repeated fetch.
    pub merge_cycles: u64,
    pub buffer_tokens: u64,
    pub repeated_fetch: bool,
    pub fused: bool,
    pub head_dim: u64,
    pub ranksets: u32,
    pub channels: u32,
    pub layers: u32,
    pub heads: u32,
}

impl PimModel {
    pub fn new(m: &LlmModel, t: &HwTopology, d: &DdrTiming, p: &PimParams) -> Result<Self, MappingError> {
        let g = MappingGeometry::new(t, m, p.v_spread)?;
        let beats_per_cycle = 2u64;
        let lane = t.chip_io_bits as u64;
        let bits = |bytes: u64| bytes * 8;
        let chip_transfer = |bytes: u64| bits(bytes).div_ceil(lane * beats_per_cycle);
        let elem = m.precision_bytes as u64;
        let chunk = p.softmax_chunk as u64;
        Ok(Self {
            tck_ns: d.tck_ns,
            ccdl: d.ccdl as u64,
            rcd: d.rcd as u64,
            rp: d.rp as u64,
            rtp: d.rtp as u64,
            ras: d.ras as u64,
            rc: d.rc as u64,
            banks: g.banks as u64,
            chips: g.chips as u64,
            chunk,
            k_reads_per_group: g.bursts_per_token as u64,
            v_sets: g.v_sets() as u64,
            v_reads_per_slot: g.v_bursts_per_bank() as u64,
            reads_per_row: g.row_bursts as u64,
            fetch_cycles: chip_transfer(chunk * elem),
            softmax_cycles: chunk.div_ceil(p.softmax_lanes as u64),
            softmax_lanes: p.softmax_lanes as u64,
            softmax_depth: p.softmax_depth_cycles as u64,
            rescale_cycles: chunk.div_ceil(p.adder_lanes as u64),
            bcast_cycles: chip_transfer(chunk * elem),
            agg_cycles: chip_transfer(g.banks as u64 * g.v_bursts_per_bank() as u64 * BANK_READ_BYTES),
            merge_cycles: (3 * m.head_dim() as u64).div_ceil(p.adder_lanes as u64),
            buffer_tokens: p.buffer_bytes / elem,
            repeated_fetch: p.repeated_fetch,
            fused: p.fused,
            head_dim: m.head_dim() as u64,
            ranksets: t.ranksets(),
            channels: t.channels,
            layers: m.layers,
            heads: m.heads,
        })
    }

    pub fn from_config(c: &SimConfig) -> Result<Self, MappingError> {
        Self::new(&c.model, &c.topology, &c.timing, &c.pim)
    }

    pub fn ns(&self, cycles: u64) -> f64 {
        cycles as f64 * self.tck_ns
    }

    pub fn k_reads(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.banks) * self.k_reads_per_group
    }

    pub fn v_reads(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.v_sets) * self.v_reads_per_slot
    }

    /// V reads needed by chunk `j` of an `n`-token head.
    pub fn v_reads_in_chunk(&self, n: u64, j: u64) -> u64 {
        let c = (n - j * self.chunk).min(self.chunk);
        self.v_reads(c)
    }

    pub fn rows_for(&self, reads: u64) -> u64 {
        reads.div_ceil(self.reads_per_row)
    }

    /// Rank PU occupancy per score chunk.
    pub fn score_service(&self) -> u64 {
        self.fetch_cycles + self.softmax_cycles
    }

    /// Rank PU occupancy per context chunk.
    pub fn context_service(&self) -> u64 {
        self.rescale_cycles + self.bcast_cycles
    }

    /// RD-to-RD distance across a row switch after a full row, when RAS and
    /// RC are already satisfied.
    pub fn row_gap(&self) -> u64 {
        self.rtp + self.rp + self.rcd
    }

    /// Whether the stall-free closed form applies.
    pub fn regular(&self) -> bool {
        let row_open = self.rcd + (self.reads_per_row - 1) * self.ccdl + self.rtp;
        self.score_service() <= self.k_reads_per_group * self.ccdl
            && self.context_service() <= self.chunk.div_ceil(self.v_sets) * self.v_reads_per_slot * self.ccdl
            && self.ras <= row_open
            && self.rc <= row_open + self.rp
    }

    /// First RD to last RD of a phase of `reads` RDs over full rows.
    fn span(&self, reads: u64) -> u64 {
        (reads - 1) * self.ccdl + (self.rows_for(reads) - 1) * (self.row_gap() - self.ccdl)
    }

    /// Offset of the last row's first RD from the phase's first RD.
    fn last_row_start(&self, reads: u64) -> u64 {
        (self.rows_for(reads) - 1) * ((self.reads_per_row - 1) * self.ccdl + self.row_gap())
    }

    /// Score stream alone: ACT to the last K read's data (`RCD + span + CCDL`).
    pub fn score_stream_cycles(&self, tokens: u64) -> u64 {
        if tokens == 0 {
            return 0;
        }
        self.rcd + self.span(self.k_reads(tokens)) + self.ccdl
    }

    /// Context stream alone, scores assumed ready.
    pub fn context_stream_cycles(&self, tokens: u64) -> u64 {
        if tokens == 0 {
            return 0;
        }
        self.rcd + self.span(self.v_reads(tokens)) + self.ccdl
    }

    /// Closed-form fused head latency for `tokens ≤ buffer_tokens`: from the
    /// first ACT until the rank can open the next head's rows.
    pub fn head_cycles_single(&self, n: u64) -> u64 {
        if n == 0 {
            return 0;
        }
        let nk = self.k_reads(n);
        let chunks = n.div_ceil(self.chunk);
        let x_k = self.rcd + self.span(nk);
        let act_k_last = self.last_row_start(nk);
        let z = if self.fused {
            x_k + self.ccdl + self.score_service() + self.softmax_depth + self.softmax_depth
        } else {
            x_k + self.ccdl + chunks * self.score_service() + self.softmax_depth + self.softmax_depth
        };
        let pre_k = (act_k_last + self.ras).max(x_k + self.rtp);
        let a_v = (pre_k + self.rp).max(act_k_last + self.rc);
        let nv = self.v_reads(n);
        let y0 = if self.fused {
            (a_v + self.rcd).max(z + self.context_service())
        } else {
            (a_v + self.rcd).max(z + chunks * self.context_service())
        };
        let y_last = y0 + self.span(nv);
        let act_v_last = if self.rows_for(nv) == 1 { a_v } else { y0 + self.last_row_start(nv) - self.rcd };
        let pre_v = (act_v_last + self.ras).max(y_last + self.rtp);
        (y_last + self.ccdl + self.agg_cycles).max(pre_v + self.rp)
    }

    /// Token counts of the buffer-sized tiles of an `n`-token head.
    pub fn tiles(&self, n: u64) -> impl Iterator<Item = u64> + '_ {
        let cap = self.buffer_tokens;
        (0..n.div_ceil(cap)).map(move |i| (n - i * cap).min(cap))
    }

    /// Fused head latency in cycles, including repeated fetch.
    pub fn head_cycles(&self, n: u64) -> Result<u64, PimError> {
        if n <= self.buffer_tokens {
            return Ok(if self.regular() { self.head_cycles_single(n) } else { stream::simulate_head(self, n).done });
        }
        if !self.repeated_fetch {
            return Err(PimError::BufferOverflow { tokens: n, capacity: self.buffer_tokens });
        }
        let mut total = 0;
        let mut tiles = 0;
        for t in self.tiles(n) {
            total += if self.regular() { self.head_cycles_single(t) } else { stream::simulate_head(self, t).done };
            tiles += 1;
        }
        Ok(total + (tiles - 1) * self.merge_cycles)
    }

    pub fn head_ns(&self, n: u64) -> Result<f64, PimError> {
        Ok(self.ns(self.head_cycles(n)?))
    }

    pub fn head_commands(&self, n: u64) -> CommandCounts {
        let mut c = CommandCounts::default();
        let tiles: Vec<u64> = if n <= self.buffer_tokens { vec![n] } else { self.tiles(n).collect() };
        for t in tiles {
            if t == 0 {
                continue;
            }
            let rows = self.rows_for(self.k_reads(t)) + self.rows_for(self.v_reads(t));
            c.act += rows;
            c.pre += rows;
            c.rd += self.k_reads(t) + self.v_reads(t);
        }
        c
    }

    /// Score phase on its own.
    pub fn score_phase(&self, tokens: u64) -> Result<PimKernelResult, PimError> {
        if tokens > self.buffer_tokens && !self.repeated_fetch {
            return Err(PimError::BufferOverflow { tokens, capacity: self.buffer_tokens });
        }
        let cycles = self.score_stream_cycles(tokens);
        let reads = self.k_reads(tokens);
        let rows = self.rows_for(reads);
        Ok(PimKernelResult {
            latency_ns: self.ns(cycles),
            latency_cycles: cycles,
            commands: CommandCounts { act: rows, rd: reads, pre: rows, refresh: 0 },
            bubble_ns: 0.0,
            output: None,
        })
    }

    /// Context phase on its own, scores already in the bank PUs.
    pub fn context_phase(&self, tokens: u64) -> Result<PimKernelResult, PimError> {
        if tokens > self.buffer_tokens && !self.repeated_fetch {
            return Err(PimError::BufferOverflow { tokens, capacity: self.buffer_tokens });
        }
        let cycles = self.context_stream_cycles(tokens);
        let reads = self.v_reads(tokens);
        let rows = self.rows_for(reads);
        Ok(PimKernelResult {
            latency_ns: self.ns(cycles),
            latency_cycles: cycles,
            commands: CommandCounts { act: rows, rd: reads, pre: rows, refresh: 0 },
            bubble_ns: 0.0,
            output: None,
        })
    }

    /// Full fused head kernel (latency and bubbles from the state machine
    /// when the closed form does not apply).
    pub fn head_kernel(&self, n: u64) -> Result<PimKernelResult, PimError> {
        let cycles = self.head_cycles(n)?;
        let bubble = if self.regular() && self.fused {
            0
        } else {
            let tiles: Vec<u64> = if n <= self.buffer_tokens { vec![n] } else { self.tiles(n).collect() };
            tiles.into_iter().map(|t| stream::simulate_head(self, t).bubble_cycles).sum()
        };
        Ok(PimKernelResult {
            latency_ns: self.ns(cycles),
            latency_cycles: cycles,
            commands: self.head_commands(n),
            bubble_ns: self.ns(bubble),
            output: None,
        })
    }
}

/// One decode request as seen by the PIM side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeItem {
    pub request: u64,
    /// Stored context tokens attended over.
    pub tokens: u64,
}

/// Per-rank breakdown of one decode-attention pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeMhaReport {
    pub t_d_ns: f64,
    /// Busy time of rank (rankset, channel), index `rankset·channels + channel`.
    pub rank_ns: Vec<f64>,
    pub rankset_ns: Vec<f64>,
    pub head_kernels: u64,
    pub commands: CommandCounts,
    pub bubble_ns: f64,
}

impl PimModel {
    /// Layers of `request` stored on `rankset`.
    pub fn layers_on(&self, request: u64, rankset: u32) -> u32 {
        let r = self.ranksets;
        let first = (rankset + r - (request % r as u64) as u32) % r;
        if first >= self.layers {
            0
        } else {
            (self.layers - first).div_ceil(r)
        }
    }

    pub fn heads_on(&self, channel: u32) -> u32 {
        if channel >= self.heads {
            0
        } else {
            (self.heads - channel).div_ceil(self.channels)
        }
    }

    /// Decode attention over all layers for `batch`; refresh is not applied.
    /// Heads on one rank run back to back; ranks run in parallel; a rankset
    /// finishes with its slowest channel.
    pub fn decode_mha(&self, batch: &[DecodeItem]) -> Result<DecodeMhaReport, PimError> {
        let (rs, ch) = (self.ranksets as usize, self.channels as usize);
        let mut rep = DecodeMhaReport { rank_ns: vec![0.0; rs * ch], rankset_ns: vec![0.0; rs], ..Default::default() };
        // every channel of a rankset sees the same layers, scaled by its heads
        let mut layer_cycles = vec![0u64; rs];
        let per_request = self.layers as u64 * self.heads as u64;
        for item in batch {
            let k = self.head_kernel(item.tokens)?;
            for (s, w) in layer_cycles.iter_mut().enumerate() {
                *w += self.layers_on(item.request, s as u32) as u64 * k.latency_cycles;
            }
            rep.head_kernels += per_request;
            rep.commands += k.commands.scaled(per_request);
            rep.bubble_ns += per_request as f64 * k.bubble_ns;
        }
        for i in 0..rs * ch {
            let c = layer_cycles[i / ch] * self.heads_on((i % ch) as u32) as u64;
            rep.rank_ns[i] = self.ns(c);
            let s = i / ch;
            rep.rankset_ns[s] = rep.rankset_ns[s].max(rep.rank_ns[i]);
        }
        rep.t_d_ns = rep.rankset_ns.iter().copied().fold(0.0, f64::max);
        Ok(rep)
    }

    /// Head-kernel latencies grouped per rank: `(latency_ns, count)` lists,
    /// used to replay a pass through the refresh manager.
    pub fn rank_workloads(&self, batch: &[DecodeItem]) -> Result<Vec<Vec<(f64, u64)>>, PimError> {
        let (rs, ch) = (self.ranksets as usize, self.channels as usize);
        let mut out = vec![Vec::new(); rs * ch];
        for item in batch {
            let l = self.head_ns(item.tokens)?;
            for s in 0..self.ranksets {
                let layers = self.layers_on(item.request, s) as u64;
                for c in 0..self.channels {
                    let kernels = layers * self.heads_on(c) as u64;
                    if kernels > 0 && l > 0.0 {
                        out[s as usize * ch + c as usize].push((l, kernels));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PimModel {
        let c = SimConfig::dgx_gpt175b();
        PimModel::from_config(&c).unwrap()
    }

    #[test]
    fn derived_constants() {
        let p = model();
        assert_eq!(p.k_reads_per_group, 4);
        assert_eq!(p.v_sets, 4);
        assert_eq!(p.reads_per_row, 128);
        assert_eq!(p.fetch_cycles, 16);
        assert_eq!(p.bcast_cycles, 16);
        assert_eq!(p.agg_cycles, 64);
        assert_eq!(p.buffer_tokens, 131_072);
        assert!(p.regular());
    }

    #[test]
    fn score_sixteen_tokens() {
        let p = model();
        let r = p.score_phase(16).unwrap();
        assert_eq!(r.latency_cycles, 54);
        assert!((r.latency_ns - 33.75).abs() < 1e-12);
        assert_eq!(p.score_phase(0).unwrap().latency_ns, 0.0);
    }

    #[test]
    fn context_matches_score_volume() {
        let p = model();
        for n in [16, 1024, 4992] {
            assert_eq!(p.context_phase(n).unwrap().latency_cycles, p.score_phase(n).unwrap().latency_cycles);
        }
        // a partial K group still costs a full group of reads
        assert!(p.context_phase(100).unwrap().latency_cycles < p.score_phase(100).unwrap().latency_cycles);
    }

    #[test]
    fn score_1024_tokens() {
        let p = model();
        // 256 RDs over two rows, one row switch
        assert_eq!(p.score_phase(1024).unwrap().latency_cycles, 22 + 255 * 8 + 48 + 8);
    }

    #[test]
    fn repeated_fetch_costs_more() {
        let p = model();
        let cap = p.buffer_tokens;
        let single = p.head_cycles_single(cap + 16);
        let tiled = p.head_cycles(cap + 16).unwrap();
        assert!(tiled > single);
        let mut strict = p.clone();
        strict.repeated_fetch = false;
        assert!(matches!(strict.head_cycles(cap + 1), Err(PimError::BufferOverflow { .. })));
        assert!(strict.head_cycles(cap).is_ok());
    }

    #[test]
    fn decode_empty_is_zero() {
        let p = model();
        let r = p.decode_mha(&[]).unwrap();
        assert_eq!(r.t_d_ns, 0.0);
    }

    #[test]
    fn decode_single_request_kernel_count() {
        let p = model();
        let r = p.decode_mha(&[DecodeItem { request: 0, tokens: 1000 }]).unwrap();
        assert_eq!(r.head_kernels, 96 * 96);
        let per_rank = 24.0 * 6.0 * p.head_ns(1000).unwrap();
        assert!((r.t_d_ns - per_rank).abs() < 1e-6);
    }
}
