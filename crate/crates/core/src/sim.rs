//! Iteration-level simulation of a trace on L3 or a baseline system.
//!
//! Every iteration the scheduler produces a plan; the GPU roofline, the PIM
//! engine and the interconnect turn it into phases on a timeline; audits
//! check the timeline; requests advance and metrics accumulate.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{kv_bytes_per_token, kv_bytes_per_token_layer, SchedulerPolicy, SimConfig};
use crate::error::Error;
use crate::gpu::GpuModel;
use crate::interconnect::{critical_transfer, overlap_audit, plan_pim_phase, receive_rate, record_phase, CriticalComm, PimPhase};
use crate::math::weighted_percentile;
use crate::pim::{DecodeItem, PimEngine, PimModel};
use crate::predictor::{batch_features, pim_features, prefill_features, PredictorState, Target};
use crate::scheduler::{DecodeSlot, FillStop, IterationPlan, LatencyPredictor, Phase, Request, Scheduler, SubBatch};
use crate::timeline::{Activity, Device, Interval, Timeline};
use crate::trace::Trace;

/// System under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// GPU + bank-level DIMM-PIM with the interleaving scheduler.
    L3,
    /// Everything on the GPU, KV limited to spare HBM.
    GpuOnly,
    /// Decode attention in HBM-PIM, KV limited to spare HBM.
    HbmPim,
    /// Rank-level DIMM-PIM at a multiple of the CPU bandwidth.
    RankPim,
    /// Decode attention on the host CPU.
    CpuOffload,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::L3, Policy::GpuOnly, Policy::HbmPim, Policy::RankPim, Policy::CpuOffload];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s.replace('-', "_"))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::L3 => "l3",
            Policy::GpuOnly => "gpu_only",
            Policy::HbmPim => "hbm_pim",
            Policy::RankPim => "rank_pim",
            Policy::CpuOffload => "cpu_offload",
        }
    }

    /// Scheduling discipline used by the system.
    pub fn scheduler(&self, configured: SchedulerPolicy) -> SchedulerPolicy {
        match self {
            Policy::L3 => configured,
            Policy::CpuOffload => SchedulerPolicy::L3,
            Policy::HbmPim => SchedulerPolicy::PrefillPriority,
            Policy::GpuOnly | Policy::RankPim => SchedulerPolicy::SingleBatch,
        }
    }

    /// KV capacity in bytes.
    pub fn kv_capacity(&self, cfg: &SimConfig) -> u64 {
        match self {
            Policy::GpuOnly | Policy::HbmPim => cfg.gpu_free_bytes(),
            _ => cfg.topology.host_capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Attn {
    Pim(PimModel),
    /// Streaming attention at `bw` bytes/s.
    Stream { bw: f64, eff: f64, on_gpu: bool },
}

/// Stateless cost model of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct Costs {
    pub gpu: GpuModel,
    attn: Attn,
    /// KV lives in host memory and crosses PCIe.
    pcie: bool,
    overlap: bool,
    rate: f64,
    cfg: SimConfig,
}

/// GPU side of a phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GpuPhase {
    pub t_p: f64,
    pub t_batch: f64,
    /// Prefill attention of each request.
    pub per_request: Vec<f64>,
}

impl GpuPhase {
    pub fn total(&self) -> f64 {
        self.t_p + self.t_batch
    }
}

impl Costs {
    pub fn new(cfg: &SimConfig, policy: Policy) -> Result<Self, Error> {
        cfg.validate()?;
        let gpu = GpuModel::from_config(cfg);
        let attn = match policy {
            Policy::L3 => Attn::Pim(PimModel::from_config(cfg)?),
            Policy::GpuOnly => Attn::Stream { bw: cfg.topology.gpu_hbm_bw, eff: cfg.gpu.efficiency, on_gpu: true },
            Policy::HbmPim => Attn::Stream { bw: cfg.topology.hbm_pim_bw, eff: 1.0, on_gpu: false },
            Policy::RankPim => Attn::Stream { bw: cfg.baseline.rank_pim_bw(), eff: 1.0, on_gpu: false },
            Policy::CpuOffload => Attn::Stream { bw: cfg.baseline.cpu_bw, eff: 1.0, on_gpu: false },
        };
        let pcie = matches!(policy, Policy::L3 | Policy::RankPim | Policy::CpuOffload);
        let overlap = policy != Policy::L3 || cfg.scheduler.comm_overlap;
        Ok(Self { gpu, attn, pcie, overlap, rate: receive_rate(&cfg.topology, &cfg.timing), cfg: cfg.clone() })
    }

    pub fn pim_model(&self) -> Option<&PimModel> {
        match &self.attn {
            Attn::Pim(p) => Some(p),
            Attn::Stream { .. } => None,
        }
    }

    /// Attention devices (ranksets, or one streaming device).
    pub fn devices(&self) -> usize {
        match &self.attn {
            Attn::Pim(p) => p.ranksets as usize,
            Attn::Stream { .. } => 1,
        }
    }

    pub fn attention_on_gpu(&self) -> bool {
        matches!(self.attn, Attn::Stream { on_gpu: true, .. })
    }

    pub fn gpu_phase(&self, own: &SubBatch, other: &SubBatch) -> Result<GpuPhase, Error> {
        let mut per_request = Vec::with_capacity(own.prefill.len());
        for p in &own.prefill {
            per_request.push(self.gpu.prefill_mha(&[p.chunk], &[p.finished])?.latency_ns);
        }
        // No tokens, no FC launch.
        let tokens = own.prefill_tokens() + other.decode.len() as u64;
        let t_batch = if tokens == 0 { 0.0 } else { self.gpu.fc_batch(tokens).latency_ns };
        Ok(GpuPhase { t_p: per_request.iter().sum(), t_batch, per_request })
    }

    pub fn comm(&self, requests: usize) -> CriticalComm {
        if self.pcie {
            critical_transfer(requests as u64, &self.cfg.model, &self.cfg.topology)
        } else {
            CriticalComm::default()
        }
    }

    /// Prefill KV each attention device must absorb for `sb`'s chunks.
    pub fn recv_bytes(&self, sb: &SubBatch) -> Vec<f64> {
        let mut out = vec![0.0; self.devices()];
        if !self.pcie {
            return out;
        }
        let per_layer = kv_bytes_per_token_layer(&self.cfg.model) as f64;
        for p in &sb.prefill {
            match &self.attn {
                Attn::Pim(m) => {
                    for (s, o) in out.iter_mut().enumerate() {
                        *o += p.chunk as f64 * per_layer * m.layers_on(p.id, s as u32) as f64;
                    }
                }
                Attn::Stream { .. } => out[0] += p.chunk as f64 * per_layer * self.cfg.model.layers as f64,
            }
        }
        out
    }

    fn items(sb: &SubBatch) -> Vec<DecodeItem> {
        sb.decode.iter().map(|d| DecodeItem { request: d.id, tokens: d.tokens }).collect()
    }

    /// Refresh-free decode attention time per device.
    pub fn ideal_busy(&self, sb: &SubBatch) -> Result<Vec<f64>, Error> {
        Ok(match &self.attn {
            Attn::Pim(m) => m.decode_mha(&Self::items(sb))?.rankset_ns,
            Attn::Stream { bw, eff, .. } => {
                vec![self.gpu.decode_attention_ns(sb.decode_tokens(), sb.decode.len() as u64, *bw, *eff)]
            }
        })
    }

    /// Decode attention latency of `sb` alone.
    pub fn attention_ns(&self, sb: &SubBatch) -> Result<f64, Error> {
        Ok(self.ideal_busy(sb)?.into_iter().fold(0.0, f64::max))
    }

    pub fn pim_phase(&self, start: f64, own: &SubBatch, other: &SubBatch, busy: &[f64]) -> PimPhase {
        plan_pim_phase(start, self.comm(own.decode.len()), busy, &self.recv_bytes(other), self.rate, self.overlap)
    }

    pub fn oracle(&self) -> Oracle {
        Oracle { costs: self.clone() }
    }
}

/// Predictor that asks the cost models directly (refresh excluded).
#[derive(Debug, Clone)]
pub struct Oracle {
    costs: Costs,
}

impl LatencyPredictor for Oracle {
    fn bootstrap(&self) -> bool {
        false
    }

    fn t_gpu(&self, own: &SubBatch, other: &SubBatch) -> f64 {
        self.costs.gpu_phase(own, other).map_or(f64::INFINITY, |g| g.total())
    }

    fn t_pim(&self, own: &SubBatch, other: &SubBatch) -> f64 {
        match self.costs.ideal_busy(own) {
            Ok(b) => self.costs.pim_phase(0.0, own, other, &b).duration(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// One GPU ∥ PIM phase of an iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseReport {
    /// Sub-batch whose prefill runs on the GPU.
    pub gpu_sub_batch: u8,
    /// Sub-batch whose decode attention runs on the PIM side.
    pub pim_sub_batch: u8,
    pub start_ns: f64,
    pub end_ns: f64,
    pub t_p: f64,
    pub t_batch: f64,
    pub t_gpu: f64,
    pub t_d: f64,
    pub t_comm: f64,
    pub t_overlap: f64,
    pub t_pim: f64,
    pub pred_gpu: f64,
    pub pred_pim: f64,
    /// Filling the GPU sub-batch stopped because its predicted latency
    /// reached the PIM prediction.
    pub aligned: bool,
    /// Predicted GPU latency of one more chunk-granularity step.
    pub step_delta: f64,
    pub refresh_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Interleaved,
    Serial,
    Prefill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub iteration: u64,
    pub kind: PlanKind,
    pub start_ns: f64,
    pub end_ns: f64,
    pub decode_requests: u64,
    pub decode_tokens: u64,
    pub prefill_tokens: u64,
    pub chunked: u32,
    pub phases: Vec<PhaseReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: String,
    pub trace: String,
    pub requests: u64,
    pub completed: u64,
    pub rejected: u64,
    pub output_tokens: u64,
    pub makespan_ns: f64,
    pub throughput_tps: f64,
    pub iterations: u64,
    pub tbt_mean_ns: f64,
    pub tbt_p50_ns: f64,
    pub tbt_p90_ns: f64,
    pub tbt_p99_ns: f64,
    pub ttft_p50_ns: f64,
    pub ttft_p99_ns: f64,
    pub gpu_busy_ns: f64,
    /// Mean over attention devices.
    pub attn_busy_ns: f64,
    pub pcie_busy_ns: f64,
    pub gpu_busy_frac: f64,
    pub attn_busy_frac: f64,
    pub gpu_bubble_ns: f64,
    pub attn_bubble_ns: f64,
    pub bytes_critical: f64,
    pub bytes_async: f64,
    pub refresh_ns: f64,
    pub max_decode_batch: u64,
    pub mean_decode_batch: f64,
    /// Most partial chunkings any request went through.
    pub max_chunkings: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<LatencyReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub record_timeline: bool,
    pub keep_reports: bool,
    pub refresh: bool,
    pub max_iterations: u64,
    /// Replace learned predictors with the cost models.
    pub oracle: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_timeline: false, keep_reports: true, refresh: true, max_iterations: u64::MAX, oracle: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub timeline: Timeline,
    pub predictor: Option<PredictorState>,
}

/// Stateful side of a run: costs plus per-rank refresh.
struct Executor {
    costs: Costs,
    engine: Option<PimEngine>,
}

/// What one phase did.
struct PhaseOut {
    gpu: GpuPhase,
    pim: PimPhase,
    t_d: f64,
    refresh: f64,
    end: f64,
}

impl Executor {
    fn new(costs: Costs, refresh: bool) -> Self {
        let engine = costs.pim_model().map(|m| PimEngine::new(m.clone(), &costs.cfg.timing, refresh));
        Self { costs, engine }
    }

    fn pim_side(&mut self, start: f64, own: &SubBatch, other: &SubBatch) -> Result<(PimPhase, f64, f64), Error> {
        let comm = self.costs.comm(own.decode.len());
        let (busy, refresh) = match &mut self.engine {
            Some(e) => {
                let starts = vec![start + comm.down_ns; self.costs.devices()];
                let pass = e.execute(&Costs::items(own), &starts)?;
                (pass.rankset_busy_ns, pass.refresh_ns)
            }
            None => (self.costs.ideal_busy(own)?, 0.0),
        };
        let t_d = busy.iter().copied().fold(0.0, f64::max);
        Ok((self.costs.pim_phase(start, own, other, &busy), t_d, refresh))
    }

    /// GPU(`g`) ∥ PIM(`p`) from `start`.
    fn parallel(&mut self, start: f64, g: (&SubBatch, &SubBatch), p: (&SubBatch, &SubBatch)) -> Result<PhaseOut, Error> {
        let gpu = self.costs.gpu_phase(g.0, g.1)?;
        let (pim, t_d, refresh) = self.pim_side(start, p.0, p.1)?;
        let end = pim.end_ns.max(start + gpu.total());
        Ok(PhaseOut { gpu, pim, t_d, refresh, end })
    }

    /// GPU work, then decode attention.
    fn serial(&mut self, start: f64, sb: &SubBatch) -> Result<PhaseOut, Error> {
        let gpu = self.costs.gpu_phase(sb, sb)?;
        let (pim, t_d, refresh) = self.pim_side(start + gpu.total(), sb, &SubBatch::default())?;
        let end = pim.end_ns.max(start + gpu.total());
        Ok(PhaseOut { gpu, pim, t_d, refresh, end })
    }
}

fn phase_report(out: &PhaseOut, start: f64, gpu_sb: u8, pim_sb: u8, fill: Option<(&SubBatch, &SubBatch)>) -> PhaseReport {
    let (g, p) = fill.unzip();
    PhaseReport {
        gpu_sub_batch: gpu_sb,
        pim_sub_batch: pim_sb,
        start_ns: start,
        end_ns: out.end,
        t_p: out.gpu.t_p,
        t_batch: out.gpu.t_batch,
        t_gpu: out.gpu.total(),
        t_d: out.t_d,
        t_comm: out.pim.comm.total_ns(),
        t_overlap: out.pim.t_overlap_ns,
        t_pim: out.pim.duration(),
        pred_gpu: g.map_or(0.0, |g| g.t_gpu_pred),
        pred_pim: p.map_or(0.0, |p| p.t_pim_pred),
        aligned: g.is_some_and(|g| g.stop == FillStop::Aligned),
        step_delta: g.map_or(0.0, |g| g.step_delta),
        refresh_ns: out.refresh,
    }
}

/// Records a phase on `tl`.
fn record(tl: &mut Timeline, costs: &Costs, out: &PhaseOut, gpu_start: f64, it: u64, gpu_sb: u8, pim_sb: u8) {
    let gpu = Interval {
        iteration: it,
        sub_batch: gpu_sb,
        device: Device::Gpu,
        activity: Activity::PrefillMha,
        start_ns: gpu_start,
        end_ns: gpu_start + out.gpu.t_p,
        bytes: 0.0,
    };
    tl.push(gpu);
    tl.push(Interval {
        activity: Activity::Fc,
        start_ns: gpu.end_ns,
        end_ns: gpu.end_ns + out.gpu.t_batch,
        ..gpu
    });
    if costs.attention_on_gpu() {
        let s = out.pim.qkv_done_ns;
        tl.push(Interval {
            sub_batch: pim_sb,
            activity: Activity::DecodeAttention,
            start_ns: s,
            end_ns: s + out.t_d,
            ..gpu
        });
    } else {
        record_phase(tl, &out.pim, it, pim_sb);
    }
}

/// Accumulates token gaps as weighted samples.
#[derive(Default)]
struct Gaps {
    samples: Vec<(f64, u64)>,
}

impl Gaps {
    fn add_group(&mut self, gaps: &mut Vec<f64>) {
        gaps.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < gaps.len() {
            let mut j = i;
            while j < gaps.len() && gaps[j] == gaps[i] {
                j += 1;
            }
            self.samples.push((gaps[i], (j - i) as u64));
            i = j;
        }
        gaps.clear();
    }
}

struct Run<'a> {
    cfg: &'a SimConfig,
    policy: Policy,
    opts: RunOptions,
    exec: Executor,
    sched: Scheduler,
    reqs: Vec<Request>,
    learned: Option<PredictorState>,
    oracle: Option<Oracle>,
    timeline: Timeline,
    m: RunMetrics,
    tbt: Gaps,
    ttft: Vec<(f64, u64)>,
    attn_busy: Vec<f64>,
    decode_batches: u64,
    now: f64,
    it: u64,
}

impl<'a> Run<'a> {
    fn audit(&self, ok: bool, detail: impl FnOnce() -> String) -> Result<(), Error> {
        if ok {
            Ok(())
        } else {
            Err(Error::Audit { iteration: self.it, detail: detail() })
        }
    }

    fn check_plan(&self, plan: &IterationPlan) -> Result<(), Error> {
        let g = self.cfg.scheduler.chunk_granularity.max(1) as u64;
        let sbs: Vec<&SubBatch> = match plan {
            IterationPlan::Interleaved(s) => vec![&s[0], &s[1]],
            IterationPlan::Serial(s) | IterationPlan::Prefill(s) => vec![s],
            IterationPlan::Idle => vec![],
        };
        for sb in &sbs {
            let mut partial = 0;
            for p in &sb.prefill {
                let rem = self.reqs[p.req].remaining_prefill();
                self.audit(p.chunk > 0 && p.chunk <= rem, || format!("chunk {} of request {} exceeds remainder {rem}", p.chunk, p.id))?;
                if p.chunk < rem {
                    partial += 1;
                    self.audit(p.chunk % g == 0, || format!("partial chunk {} is not a multiple of {g}", p.chunk))?;
                }
            }
            self.audit(partial <= 1, || format!("{partial} partially chunked requests in one sub-batch"))?;
        }
        if self.sched.policy == SchedulerPolicy::L3 {
            let mut want: Vec<usize> = self.sched.decoding().to_vec();
            let mut got: Vec<usize> = sbs.iter().flat_map(|s| s.decode.iter().map(|d| d.req)).collect();
            want.sort_unstable();
            got.sort_unstable();
            self.audit(want == got, || "a decoding request was left out of the iteration".to_string())?;
        }
        self.audit(self.sched.used_bytes() <= self.sched.capacity_bytes(), || "KV capacity exceeded".to_string())
    }

    fn learn(&mut self, own_gpu: &SubBatch, other_gpu: &SubBatch, out: &PhaseOut, own_pim: &SubBatch, other_pim: &SubBatch) -> Result<(), Error> {
        let Some(l) = &mut self.learned else { return Ok(()) };
        l.record(
            Target::Pim,
            pim_features(own_pim.decode_tokens(), own_pim.decode.len(), other_pim.prefill_tokens()),
            out.pim.duration(),
        )?;
        l.record(Target::Batch, batch_features(own_gpu.prefill_tokens(), other_gpu.decode.len()), out.gpu.t_batch)?;
        for (p, &ns) in own_gpu.prefill.iter().zip(&out.gpu.per_request) {
            l.record(Target::Prefill, prefill_features(p.chunk, p.finished), ns)?;
        }
        Ok(())
    }

    fn finish_prefill(&mut self, sb: &SubBatch, t: f64) -> u64 {
        let mut tokens = 0;
        for p in &sb.prefill {
            let r = &mut self.reqs[p.req];
            if r.complete_chunk(p.chunk, t) {
                tokens += 1;
                self.ttft.push((t - r.arrival_ns, 1));
            }
        }
        tokens
    }

    fn finish_decode(&mut self, sb: &SubBatch, t: f64) -> u64 {
        let mut gaps = Vec::with_capacity(sb.decode.len());
        for d in &sb.decode {
            gaps.push(self.reqs[d.req].complete_decode(t));
        }
        self.tbt.add_group(&mut gaps);
        sb.decode.len() as u64
    }

    fn account(&mut self, out: &PhaseOut, phase_len: f64, tl: &Timeline) {
        self.m.gpu_busy_ns += out.gpu.total();
        self.m.gpu_bubble_ns += (phase_len - out.gpu.total()).max(0.0);
        if !self.exec.costs.attention_on_gpu() {
            let mut mean_busy = 0.0;
            for (s, p) in out.pim.ranksets.iter().enumerate() {
                let busy = p.compute.iter().map(|(a, b)| b - a).sum::<f64>() + p.receive.map_or(0.0, |(a, b)| b - a);
                self.attn_busy[s] += busy;
                mean_busy += busy / out.pim.ranksets.len() as f64;
            }
            self.m.attn_bubble_ns += (phase_len - mean_busy).max(0.0);
        }
        self.m.pcie_busy_ns += tl
            .intervals
            .iter()
            .filter(|i| i.device == Device::PcieDown || i.device == Device::PcieUp)
            .map(|i| i.len())
            .sum::<f64>();
        self.m.bytes_critical += out.pim.comm.bytes_down + out.pim.comm.bytes_up;
        self.m.bytes_async += out.pim.ranksets.iter().map(|r| r.receive_bytes).sum::<f64>();
        self.m.refresh_ns += out.refresh;
    }

    fn step(&mut self, plan: IterationPlan) -> Result<(), Error> {
        self.check_plan(&plan)?;
        let start = self.now;
        let mut tl = Timeline::default();
        let mut phases = Vec::new();
        let mut decode_reqs = 0;
        let (kind, decode_tokens, prefill_tokens, chunked) = match &plan {
            IterationPlan::Interleaved(sb) => (
                PlanKind::Interleaved,
                sb[0].decode_tokens() + sb[1].decode_tokens(),
                sb[0].prefill_tokens() + sb[1].prefill_tokens(),
                sb.iter().filter(|s| s.chunked.is_some()).count() as u32,
            ),
            IterationPlan::Serial(s) | IterationPlan::Prefill(s) => (
                if matches!(plan, IterationPlan::Serial(_)) { PlanKind::Serial } else { PlanKind::Prefill },
                s.decode_tokens(),
                s.prefill_tokens(),
                s.chunked.is_some() as u32,
            ),
            IterationPlan::Idle => return Ok(()),
        };
        let end = match &plan {
            IterationPlan::Interleaved(sb) => {
                let a = self.exec.parallel(start, (&sb[1], &sb[0]), (&sb[0], &sb[1]))?;
                record(&mut tl, &self.exec.costs, &a, start, self.it, 1, 0);
                let ta = tl.clone();
                let mid = a.end;
                let b = self.exec.parallel(mid, (&sb[0], &sb[1]), (&sb[1], &sb[0]))?;
                let mut tb = Timeline::default();
                record(&mut tb, &self.exec.costs, &b, mid, self.it, 0, 1);
                tl.extend(tb.clone());
                phases.push(phase_report(&a, start, 1, 0, Some((&sb[1], &sb[0]))));
                phases.push(phase_report(&b, mid, 0, 1, Some((&sb[0], &sb[1]))));
                decode_reqs += self.finish_decode(&sb[0], mid);
                self.finish_prefill(&sb[1], mid);
                decode_reqs += self.finish_decode(&sb[1], b.end);
                self.finish_prefill(&sb[0], b.end);
                if self.sched.policy == SchedulerPolicy::L3 {
                    self.learn(&sb[1], &sb[0], &a, &sb[0], &sb[1])?;
                    self.learn(&sb[0], &sb[1], &b, &sb[1], &sb[0])?;
                }
                self.account(&a, mid - start, &ta);
                self.account(&b, b.end - mid, &tb);
                b.end
            }
            IterationPlan::Serial(sb) => {
                let o = self.exec.serial(start, sb)?;
                record(&mut tl, &self.exec.costs, &o, start, self.it, 0, 0);
                phases.push(phase_report(&o, start, 0, 0, Some((sb, sb))));
                decode_reqs += self.finish_decode(sb, o.end);
                self.finish_prefill(sb, o.end);
                let t = tl.clone();
                self.account(&o, o.end - start, &t);
                o.end
            }
            IterationPlan::Prefill(sb) => {
                let o = self.exec.parallel(start, (sb, &SubBatch::default()), (&SubBatch::default(), sb))?;
                record(&mut tl, &self.exec.costs, &o, start, self.it, 0, 0);
                phases.push(phase_report(&o, start, 0, 0, None));
                self.finish_prefill(sb, o.end);
                let t = tl.clone();
                self.account(&o, o.end - start, &t);
                o.end
            }
            IterationPlan::Idle => unreachable!(),
        };
        let v = overlap_audit(&tl);
        self.audit(v.is_empty(), || format!("overlap violations: {v:?}"))?;
        if self.exec.costs.pcie {
            let kv = kv_bytes_per_token(&self.cfg.model) as f64;
            let moved: f64 = tl.intervals.iter().filter(|i| i.activity == Activity::AsyncKv).map(|i| i.bytes).sum();
            let want = prefill_tokens as f64 * kv;
            self.audit((moved - want).abs() <= 1e-6 * want.max(1.0), || format!("prefill KV moved {moved} B, expected {want} B"))?;
        }
        self.sched.retire(&self.reqs, &plan);
        self.decode_batches += decode_reqs;
        self.m.max_decode_batch = self.m.max_decode_batch.max(decode_reqs);
        if self.opts.keep_reports {
            self.m.reports.push(LatencyReport {
                iteration: self.it,
                kind,
                start_ns: start,
                end_ns: end,
                decode_requests: decode_reqs,
                decode_tokens,
                prefill_tokens,
                chunked,
                phases,
            });
        }
        if self.opts.record_timeline {
            self.timeline.extend(tl);
        }
        self.now = end;
        self.it += 1;
        Ok(())
    }
}

/// Runs `trace` to completion on `policy`.
pub fn run_simulation(trace: &Trace, cfg: &SimConfig, policy: Policy, opts: RunOptions) -> Result<RunOutput, Error> {
    let costs = Costs::new(cfg, policy)?;
    let sched_policy = policy.scheduler(cfg.scheduler.policy);
    let oracle = (opts.oracle || cfg.scheduler.oracle_predictors).then(|| costs.oracle());
    let learned = if oracle.is_none() { Some(PredictorState::new(&cfg.scheduler)) } else { None };
    let devices = costs.devices();
    let mut run = Run {
        cfg,
        policy,
        opts,
        exec: Executor::new(costs, opts.refresh),
        sched: Scheduler::new(sched_policy, cfg.scheduler.clone(), kv_bytes_per_token(&cfg.model), policy.kv_capacity(cfg)),
        reqs: trace.records.iter().map(Request::new).collect(),
        learned,
        oracle,
        timeline: Timeline::default(),
        m: RunMetrics { policy: policy.as_str().into(), trace: trace.provenance.clone(), ..Default::default() },
        tbt: Gaps::default(),
        ttft: Vec::new(),
        attn_busy: vec![0.0; devices],
        decode_batches: 0,
        now: 0.0,
        it: 0,
    };
    let mut order: Vec<usize> = (0..run.reqs.len()).collect();
    order.sort_by(|&a, &b| run.reqs[a].arrival_ns.total_cmp(&run.reqs[b].arrival_ns).then(a.cmp(&b)));
    let mut next = 0;
    loop {
        while next < order.len() && run.reqs[order[next]].arrival_ns <= run.now {
            run.sched.enqueue(order[next]);
            next += 1;
        }
        if !run.sched.has_work() {
            if next < order.len() {
                run.now = run.reqs[order[next]].arrival_ns;
                continue;
            }
            break;
        }
        if run.it >= run.opts.max_iterations {
            break;
        }
        let mut reqs = core::mem::take(&mut run.reqs);
        let pred: &dyn LatencyPredictor = match (&run.oracle, &run.learned) {
            (Some(o), _) => o,
            (None, Some(l)) => l,
            (None, None) => unreachable!(),
        };
        let plan = run.sched.plan(&mut reqs, pred);
        run.reqs = reqs;
        if plan == IterationPlan::Idle {
            if next < order.len() {
                run.now = run.reqs[order[next]].arrival_ns;
                continue;
            }
            if !run.sched.has_work() {
                break;
            }
            return Err(Error::Audit { iteration: run.it, detail: "work pending but nothing schedulable".into() });
        }
        run.step(plan)?;
    }
    finish(run)
}

fn finish(mut run: Run<'_>) -> Result<RunOutput, Error> {
    let rejected: Vec<usize> = run.sched.rejected.clone();
    let capped = run.it >= run.opts.max_iterations;
    let mut admitted_out = 0;
    let mut produced = 0;
    for (i, r) in run.reqs.iter().enumerate() {
        if rejected.contains(&i) {
            continue;
        }
        produced += r.generated;
        if r.phase == Phase::Done {
            run.m.completed += 1;
            admitted_out += r.output_len;
        }
        run.m.max_chunkings = run.m.max_chunkings.max(r.chunkings);
    }
    if !capped {
        let it = run.it;
        run.audit(produced == admitted_out, || format!("token conservation: produced {produced}, expected {admitted_out} (iteration {it})"))?;
    }
    let m = &mut run.m;
    m.requests = run.reqs.len() as u64;
    m.rejected = rejected.len() as u64;
    m.output_tokens = produced;
    m.iterations = run.it;
    m.makespan_ns = run.now;
    m.throughput_tps = if run.now > 0.0 { produced as f64 / (run.now * 1e-9) } else { 0.0 };
    let total: u64 = run.tbt.samples.iter().map(|s| s.1).sum();
    if total > 0 {
        m.tbt_mean_ns = run.tbt.samples.iter().map(|s| s.0 * s.1 as f64).sum::<f64>() / total as f64;
    }
    m.tbt_p50_ns = weighted_percentile(&mut run.tbt.samples, 0.50);
    m.tbt_p90_ns = weighted_percentile(&mut run.tbt.samples, 0.90);
    m.tbt_p99_ns = weighted_percentile(&mut run.tbt.samples, 0.99);
    m.ttft_p50_ns = weighted_percentile(&mut run.ttft, 0.50);
    m.ttft_p99_ns = weighted_percentile(&mut run.ttft, 0.99);
    m.attn_busy_ns = run.attn_busy.iter().sum::<f64>() / run.attn_busy.len().max(1) as f64;
    if run.now > 0.0 {
        m.gpu_busy_frac = m.gpu_busy_ns / run.now;
        m.attn_busy_frac = m.attn_busy_ns / run.now;
    }
    if run.it > 0 {
        m.mean_decode_batch = run.decode_batches as f64 / run.it as f64;
    }
    let _ = run.policy;
    Ok(RunOutput { metrics: run.m, timeline: run.timeline, predictor: run.learned })
}

/// Steady-state iteration time (= TBT) of a fixed decode batch with the given
/// context lengths; capacity limits are ignored.
pub fn decode_iteration_ns(cfg: &SimConfig, policy: Policy, contexts: &[u64], refresh: bool) -> Result<f64, Error> {
    let costs = Costs::new(cfg, policy)?;
    let slots: Vec<DecodeSlot> = contexts.iter().enumerate().map(|(i, &t)| DecodeSlot { req: i, id: i as u64, tokens: t }).collect();
    let mut exec = Executor::new(costs, refresh);
    let serial = policy.scheduler(cfg.scheduler.policy) == SchedulerPolicy::SingleBatch;
    if serial {
        let sb = SubBatch { decode: slots, ..Default::default() };
        Ok(exec.serial(0.0, &sb)?.end)
    } else {
        let (a, b) = crate::scheduler::split_decode(&slots);
        let sb = [SubBatch { decode: a, ..Default::default() }, SubBatch { decode: b, ..Default::default() }];
        let pa = exec.parallel(0.0, (&sb[1], &sb[0]), (&sb[0], &sb[1]))?;
        let pb = exec.parallel(pa.end, (&sb[0], &sb[1]), (&sb[1], &sb[0]))?;
        Ok(pb.end)
    }
}

/// Decode-attention latency alone for a batch of contexts.
pub fn decode_attention_ns(cfg: &SimConfig, policy: Policy, contexts: &[u64]) -> Result<f64, Error> {
    let costs = Costs::new(cfg, policy)?;
    let sb = SubBatch {
        decode: contexts.iter().enumerate().map(|(i, &t)| DecodeSlot { req: i, id: i as u64, tokens: t }).collect(),
        ..Default::default()
    };
    costs.attention_ns(&sb)
}
