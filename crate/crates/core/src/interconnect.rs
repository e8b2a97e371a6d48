//! PCIe transfers and on-DIMM receive/compute concurrency.
//!
//! PCIe is one full-duplex pipe. Decode QKV vectors go down and attention
//! outputs come up once per layer per iteration (one transaction each).
//! Prefill KV is pushed asynchronously, one rankset at a time; a rankset
//! that receives does not compute, the others carry on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{channel_bw, DdrTiming, HwTopology, LlmModel};
use crate::timeline::{Activity, Device, Interval, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    CriticalQkv,
    CriticalAttnOut,
    AsyncPrefillKv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferTask {
    pub bytes: f64,
    pub kind: TransferKind,
    pub rankset: Option<u32>,
    pub issue_ns: f64,
    pub complete_ns: f64,
}

/// Critical-path traffic of one decode sub-batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CriticalComm {
    pub bytes_down: f64,
    pub bytes_up: f64,
    pub down_ns: f64,
    pub up_ns: f64,
}

impl CriticalComm {
    pub fn total_ns(&self) -> f64 {
        self.down_ns + self.up_ns
    }
}

/// QKV down and attention output up for `requests` decode requests.
/// Independent of context lengths.
pub fn critical_transfer(requests: u64, m: &LlmModel, topo: &HwTopology) -> CriticalComm {
    if requests == 0 {
        return CriticalComm::default();
    }
    let vec_bytes = (requests * m.embedding as u64 * m.precision_bytes as u64) as f64;
    let layers = m.layers as f64;
    let bytes_down = 3.0 * vec_bytes * layers;
    let bytes_up = vec_bytes * layers;
    let fixed = layers * topo.pcie_latency_ns;
    CriticalComm {
        bytes_down,
        bytes_up,
        down_ns: bytes_down / topo.pcie_bw * 1e9 + fixed,
        up_ns: bytes_up / topo.pcie_bw * 1e9 + fixed,
    }
}

pub fn critical_transfer_latency(requests: u64, m: &LlmModel, topo: &HwTopology) -> f64 {
    critical_transfer(requests, m, topo).total_ns()
}

/// Bytes/s a receiving rankset absorbs: the PCIe rate capped by the DDR
/// channels of the rankset.
pub fn receive_rate(topo: &HwTopology, timing: &DdrTiming) -> f64 {
    topo.pcie_bw.min(channel_bw(topo, timing) * topo.channels as f64)
}

/// One rankset's part of a PIM phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RanksetPlan {
    /// Compute pieces `(start, end)`.
    pub compute: Vec<(f64, f64)>,
    pub receive: Option<(f64, f64)>,
    pub receive_bytes: f64,
    pub finish_ns: f64,
}

/// Timing of one sub-batch on the DIMM side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PimPhase {
    pub start_ns: f64,
    pub qkv_done_ns: f64,
    pub ranksets: Vec<RanksetPlan>,
    pub up_start_ns: f64,
    pub end_ns: f64,
    pub comm: CriticalComm,
    /// Time the phase is longer than without prefill KV traffic.
    pub t_overlap_ns: f64,
}

impl PimPhase {
    pub fn duration(&self) -> f64 {
        self.end_ns - self.start_ns
    }
}

fn place(t1: f64, busy: &[f64], recv: &[f64], order: &[usize]) -> (Vec<RanksetPlan>, f64) {
    let mut plans = vec![RanksetPlan::default(); busy.len()];
    let mut cursor = t1;
    for &s in order {
        if recv[s] <= 0.0 {
            continue;
        }
        plans[s].receive = Some((cursor, cursor + recv[s]));
        cursor += recv[s];
    }
    let mut worst = t1;
    for (s, p) in plans.iter_mut().enumerate() {
        let end_plain = t1 + busy[s];
        match p.receive {
            Some((rs, re)) if rs < end_plain && busy[s] > 0.0 => {
                let before = (rs - t1).max(0.0);
                if before > 0.0 {
                    p.compute.push((t1, rs));
                }
                p.compute.push((re, re + busy[s] - before));
                p.finish_ns = re + busy[s] - before;
            }
            Some((_, re)) => {
                if busy[s] > 0.0 {
                    p.compute.push((t1, end_plain));
                }
                p.finish_ns = end_plain.max(re);
            }
            None => {
                if busy[s] > 0.0 {
                    p.compute.push((t1, end_plain));
                }
                p.finish_ns = end_plain;
            }
        }
        worst = worst.max(p.finish_ns);
    }
    (plans, worst)
}

/// Plans one PIM phase starting at `start`.
///
/// `busy[s]` is rankset `s`'s decode-attention time, `recv_bytes[s]` the
/// prefill KV it must absorb. Receives are serialized; the order among the
/// natural, shortest-busy-first and longest-busy-first candidates that
/// finishes earliest is kept. With `overlap == false` every rankset waits
/// for all receives before computing.
pub fn plan_pim_phase(
    start: f64,
    comm: CriticalComm,
    busy: &[f64],
    recv_bytes: &[f64],
    rate: f64,
    overlap: bool,
) -> PimPhase {
    let t1 = start + comm.down_ns;
    let recv: Vec<f64> = recv_bytes.iter().map(|b| b / rate * 1e9).collect();
    let n = busy.len();
    let (plans, worst) = if overlap {
        let natural: Vec<usize> = (0..n).collect();
        let mut asc = natural.clone();
        asc.sort_by(|&a, &b| busy[a].total_cmp(&busy[b]).then(a.cmp(&b)));
        let mut desc = natural.clone();
        desc.sort_by(|&a, &b| busy[b].total_cmp(&busy[a]).then(a.cmp(&b)));
        let mut best: Option<(Vec<RanksetPlan>, f64)> = None;
        for order in [natural, asc, desc] {
            let cand = place(t1, busy, &recv, &order);
            if best.as_ref().is_none_or(|b| cand.1 < b.1) {
                best = Some(cand);
            }
        }
        best.unwrap()
    } else {
        let mut plans = vec![RanksetPlan::default(); n];
        let mut cursor = t1;
        for s in 0..n {
            if recv[s] > 0.0 {
                plans[s].receive = Some((cursor, cursor + recv[s]));
                cursor += recv[s];
            }
        }
        let mut worst = cursor;
        for (s, p) in plans.iter_mut().enumerate() {
            if busy[s] > 0.0 {
                p.compute.push((cursor, cursor + busy[s]));
            }
            p.finish_ns = cursor + busy[s];
            worst = worst.max(p.finish_ns);
        }
        (plans, worst)
    };
    let mut plans = plans;
    for (p, &b) in plans.iter_mut().zip(recv_bytes) {
        p.receive_bytes = b;
    }
    let compute_end = if busy.iter().any(|&b| b > 0.0) || recv.iter().any(|&r| r > 0.0) { worst } else { t1 };
    let plain = t1 + busy.iter().copied().fold(0.0, f64::max);
    PimPhase {
        start_ns: start,
        qkv_done_ns: t1,
        ranksets: plans,
        up_start_ns: compute_end,
        end_ns: compute_end + comm.up_ns,
        comm,
        t_overlap_ns: (compute_end - plain).max(0.0),
    }
}

/// Appends the phase's intervals to `tl`.
pub fn record_phase(tl: &mut Timeline, phase: &PimPhase, iteration: u64, sub_batch: u8) {
    let base = Interval {
        iteration,
        sub_batch,
        device: Device::PcieDown,
        activity: Activity::QkvDown,
        start_ns: phase.start_ns,
        end_ns: phase.qkv_done_ns,
        bytes: phase.comm.bytes_down,
    };
    if phase.comm.bytes_down > 0.0 {
        tl.push(base);
    }
    for (s, p) in phase.ranksets.iter().enumerate() {
        for &(a, b) in &p.compute {
            tl.push(Interval { device: Device::Rankset(s as u32), activity: Activity::DecodeMha, start_ns: a, end_ns: b, bytes: 0.0, ..base });
        }
        if let Some((a, b)) = p.receive {
            tl.push(Interval { device: Device::Rankset(s as u32), activity: Activity::Receive, start_ns: a, end_ns: b, bytes: p.receive_bytes, ..base });
            tl.push(Interval { device: Device::PcieDown, activity: Activity::AsyncKv, start_ns: a, end_ns: b, bytes: p.receive_bytes, ..base });
        }
    }
    if phase.comm.bytes_up > 0.0 {
        tl.push(Interval {
            device: Device::PcieUp,
            activity: Activity::AttnOutUp,
            start_ns: phase.up_start_ns,
            end_ns: phase.end_ns,
            bytes: phase.comm.bytes_up,
            ..base
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// (a) a rankset computes while receiving.
    ComputeDuringReceive { rankset: u32, iteration: u64 },
    /// (b) two ranksets receive at once.
    ConcurrentReceive { ranksets: (u32, u32), iteration: u64 },
    /// (c) decode attention starts before its QKV arrived or outputs leave
    /// before it finished.
    Dependency { iteration: u64, sub_batch: u8, detail: String },
}

/// Checks receive exclusivity and critical-transfer ordering.
pub fn overlap_audit(tl: &Timeline) -> Vec<Violation> {
    const EPS: f64 = 1e-6;
    let mut out = Vec::new();
    let recv: Vec<&Interval> = tl.intervals.iter().filter(|i| i.activity == Activity::Receive && !i.is_empty()).collect();
    let comp: Vec<&Interval> = tl.intervals.iter().filter(|i| i.activity == Activity::DecodeMha && !i.is_empty()).collect();
    for r in &recv {
        for c in &comp {
            if r.device == c.device && r.start_ns < c.end_ns - EPS && c.start_ns < r.end_ns - EPS {
                if let Device::Rankset(s) = r.device {
                    out.push(Violation::ComputeDuringReceive { rankset: s, iteration: r.iteration });
                }
            }
        }
    }
    for (i, a) in recv.iter().enumerate() {
        for b in &recv[i + 1..] {
            if a.device != b.device && a.start_ns < b.end_ns - EPS && b.start_ns < a.end_ns - EPS {
                if let (Device::Rankset(x), Device::Rankset(y)) = (a.device, b.device) {
                    out.push(Violation::ConcurrentReceive { ranksets: (x, y), iteration: a.iteration });
                }
            }
        }
    }
    let mut keys: Vec<(u64, u8)> = comp.iter().map(|c| (c.iteration, c.sub_batch)).collect();
    keys.sort_unstable();
    keys.dedup();
    for (it, sb) in keys {
        let mine = |a: Activity| tl.intervals.iter().filter(move |i| i.iteration == it && i.sub_batch == sb && i.activity == a);
        let first = mine(Activity::DecodeMha).map(|i| i.start_ns).fold(f64::INFINITY, f64::min);
        let last = mine(Activity::DecodeMha).map(|i| i.end_ns).fold(0.0, f64::max);
        if let Some(q) = mine(Activity::QkvDown).next() {
            if q.end_ns > first + EPS {
                out.push(Violation::Dependency {
                    iteration: it,
                    sub_batch: sb,
                    detail: format!("QKV arrives at {} after attention starts at {}", q.end_ns, first),
                });
            }
        }
        if let Some(u) = mine(Activity::AttnOutUp).next() {
            if u.start_ns + EPS < last {
                out.push(Violation::Dependency {
                    iteration: it,
                    sub_batch: sb,
                    detail: format!("output leaves at {} before attention ends at {}", u.start_ns, last),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    #[test]
    fn comm_basics() {
        let c = SimConfig::dgx_gpt175b();
        assert_eq!(critical_transfer_latency(0, &c.model, &c.topology), 0.0);
        let t = critical_transfer(64, &c.model, &c.topology);
        assert_eq!(t.bytes_down / 96.0, (64 * 3 * 12288 * 2) as f64);
        assert_eq!(t.bytes_down / 96.0 / (1 << 20) as f64, 4.5);
        let t2 = critical_transfer(64, &c.model, &c.topology);
        assert_eq!(t.total_ns(), t2.total_ns());
    }

    #[test]
    fn balanced_receive_keeps_three_quarters() {
        let busy = [1e6; 4];
        let recv = [32e9 * 1e-4; 4]; // 100 µs each at 32 GB/s
        let p = plan_pim_phase(0.0, CriticalComm::default(), &busy, &recv, 32e9, true);
        let mut tl = Timeline::default();
        record_phase(&mut tl, &p, 0, 0);
        assert!(overlap_audit(&tl).is_empty());
        // at any instant during receives exactly one rankset is receiving
        for s in 0..4 {
            let (a, b) = p.ranksets[s].receive.unwrap();
            assert!((b - a - 1e5).abs() < 1e-6);
        }
        assert!(p.t_overlap_ns <= 1e5 + 1e-6);
    }

    #[test]
    fn single_rankset_stalls() {
        let p = plan_pim_phase(0.0, CriticalComm::default(), &[1000.0], &[32e9 * 1e-6], 32e9, true);
        assert!((p.end_ns - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn no_prefill_no_overlap_cost() {
        let p = plan_pim_phase(10.0, CriticalComm::default(), &[5.0, 7.0], &[0.0, 0.0], 32e9, true);
        assert_eq!(p.t_overlap_ns, 0.0);
        assert_eq!(p.end_ns, 17.0);
    }

    #[test]
    fn audit_flags_constructed_faults() {
        let mk = |d, a, s, e| Interval { iteration: 1, sub_batch: 0, device: d, activity: a, start_ns: s, end_ns: e, bytes: 1.0 };
        let mut tl = Timeline::default();
        tl.push(mk(Device::Rankset(0), Activity::Receive, 0.0, 10.0));
        tl.push(mk(Device::Rankset(1), Activity::Receive, 5.0, 15.0));
        assert!(overlap_audit(&tl).iter().any(|v| matches!(v, Violation::ConcurrentReceive { .. })));
        let mut tl = Timeline::default();
        tl.push(mk(Device::PcieDown, Activity::QkvDown, 0.0, 10.0));
        tl.push(mk(Device::Rankset(0), Activity::DecodeMha, 5.0, 15.0));
        assert!(overlap_audit(&tl).iter().any(|v| matches!(v, Violation::Dependency { .. })));
        let mut tl = Timeline::default();
        tl.push(mk(Device::Rankset(0), Activity::Receive, 0.0, 10.0));
        tl.push(mk(Device::Rankset(0), Activity::DecodeMha, 5.0, 15.0));
        assert!(overlap_audit(&tl).iter().any(|v| matches!(v, Violation::ComputeDuringReceive { .. })));
    }
}
