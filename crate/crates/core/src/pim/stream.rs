//! Command-level state machine of one fused head kernel on one rank.
//!
//! Every command is all-bank. K occupies rows `0..k_rows`, V the rows after
//! it. RDs are issued as early as the DDR constraints and the PU data
//! dependencies allow; stalls caused by the rank PU after a phase's first
//! chunk are reported as bubbles.

use alloc::vec::Vec;

use super::PimModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmd {
    Act,
    Rd,
    Pre,
}

impl Cmd {
    pub fn as_str(&self) -> &'static str {
        match self {
            Cmd::Act => "ACT",
            Cmd::Rd => "RD",
            Cmd::Pre => "PRE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Command {
    pub cycle: u64,
    pub cmd: Cmd,
    pub row: u32,
    /// Burst column (RD only).
    pub col: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankOp {
    /// Partial-sum fetch and cross-chip reduction of one chunk.
    Fetch,
    Softmax,
    Normalize,
    /// Rescale and write one chunk of scores into the bank PUs.
    Broadcast,
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankEvent {
    pub start: u64,
    pub end: u64,
    pub op: RankOp,
    pub chunk: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HeadTrace {
    pub commands: Vec<Command>,
    pub rank_events: Vec<RankEvent>,
    /// Cycle at which the rank can start the next head.
    pub done: u64,
    /// Output vector ready.
    pub output_ready: u64,
    pub bubble_cycles: u64,
}

struct Banks<'a> {
    p: &'a PimModel,
    open: Option<u32>,
    last_act: Option<u64>,
    last_pre: Option<u64>,
    last_rd: Option<u64>,
    out: Vec<Command>,
}

impl Banks<'_> {
    fn precharge(&mut self) {
        if self.open.take().is_some() {
            let act = self.last_act.unwrap_or(0);
            let mut pre = act + self.p.ras;
            if let Some(rd) = self.last_rd {
                pre = pre.max(rd + self.p.rtp);
            }
            self.last_pre = Some(pre);
            self.out.push(Command { cycle: pre, cmd: Cmd::Pre, row: 0, col: 0 });
        }
    }

    fn activate(&mut self, row: u32) {
        let mut act = 0;
        if let Some(pre) = self.last_pre {
            act = act.max(pre + self.p.rp);
        }
        if let Some(a) = self.last_act {
            act = act.max(a + self.p.rc);
        }
        self.last_act = Some(act);
        self.open = Some(row);
        self.out.push(Command { cycle: act, cmd: Cmd::Act, row, col: 0 });
    }

    /// Issues a RD; returns (issue cycle, stall caused by `gate`).
    fn read(&mut self, row: u32, col: u32, gate: u64) -> (u64, u64) {
        if self.open != Some(row) {
            self.precharge();
            self.activate(row);
        }
        let mut earliest = self.last_act.unwrap_or(0) + self.p.rcd;
        if let Some(rd) = self.last_rd {
            earliest = earliest.max(rd + self.p.ccdl);
        }
        let at = earliest.max(gate);
        self.last_rd = Some(at);
        self.out.push(Command { cycle: at, cmd: Cmd::Rd, row, col });
        (at, at - earliest)
    }
}

/// Walks one head over `n ≤ buffer_tokens` tokens.
pub fn simulate_head(p: &PimModel, n: u64) -> HeadTrace {
    let mut tr = HeadTrace::default();
    if n == 0 {
        return tr;
    }
    let mut banks = Banks { p, open: None, last_act: None, last_pre: None, last_rd: None, out: Vec::new() };
    let r = p.reads_per_row;
    let chunks = n.div_ceil(p.chunk);
    let nk = p.k_reads(n);
    let k_rows = p.rows_for(nk) as u32;

    // score
    let mut rank_start: Vec<u64> = Vec::with_capacity(chunks as usize);
    let mut rank_free = 0u64;
    let mut done_k = Vec::with_capacity(chunks as usize);
    let mut i = 0u64;
    for j in 0..chunks {
        let gate = if p.fused && j >= 2 { rank_start[(j - 2) as usize] } else { 0 };
        let end = ((j + 1) * p.k_reads_per_group).min(nk);
        let mut last = 0;
        while i < end {
            let (at, stall) = banks.read((i / r) as u32, (i % r) as u32, gate);
            if j > 0 {
                tr.bubble_cycles += stall;
            }
            last = at;
            i += 1;
        }
        let d = last + p.ccdl;
        done_k.push(d);
        if p.fused {
            let s = d.max(rank_free);
            rank_start.push(s);
            rank_free = s + p.score_service();
        }
    }
    if !p.fused {
        let d_last = *done_k.last().unwrap();
        rank_free = d_last;
        for _ in 0..chunks {
            rank_start.push(rank_free);
            rank_free += p.score_service();
        }
    }
    for (j, &s) in rank_start.iter().enumerate() {
        tr.rank_events.push(RankEvent { start: s, end: s + p.fetch_cycles, op: RankOp::Fetch, chunk: j as u64 });
        tr.rank_events.push(RankEvent {
            start: s + p.fetch_cycles,
            end: s + p.score_service(),
            op: RankOp::Softmax,
            chunk: j as u64,
        });
    }
    let e_last = rank_free + p.softmax_depth;
    let z = e_last + p.softmax_depth;
    tr.rank_events.push(RankEvent { start: e_last, end: z, op: RankOp::Normalize, chunk: chunks - 1 });

    // context
    let nv = p.v_reads(n);
    let mut bc_end: Vec<u64> = Vec::with_capacity(chunks as usize);
    let mut last_rd_of: Vec<u64> = Vec::with_capacity(chunks as usize);
    let mut i = 0u64;
    if !p.fused {
        let mut t = z;
        for j in 0..chunks {
            tr.rank_events.push(RankEvent { start: t, end: t + p.context_service(), op: RankOp::Broadcast, chunk: j });
            t += p.context_service();
            bc_end.push(t);
        }
    }
    for j in 0..chunks {
        let gate = if p.fused {
            let mut start = if j == 0 { z } else { bc_end[(j - 1) as usize] };
            if j >= 2 {
                start = start.max(last_rd_of[(j - 2) as usize]);
            }
            let end = start + p.context_service();
            tr.rank_events.push(RankEvent { start, end, op: RankOp::Broadcast, chunk: j });
            bc_end.push(end);
            end
        } else {
            *bc_end.last().unwrap()
        };
        let end = i + p.v_reads_in_chunk(n, j);
        let mut last = 0;
        while i < end {
            let (at, stall) = banks.read(k_rows + (i / r) as u32, (i % r) as u32, gate);
            if j > 0 {
                tr.bubble_cycles += stall;
            }
            last = at;
            i += 1;
        }
        last_rd_of.push(last);
    }
    debug_assert_eq!(i, nv);
    let d_ctx = banks.last_rd.unwrap() + p.ccdl;
    tr.rank_events.push(RankEvent { start: d_ctx, end: d_ctx + p.agg_cycles, op: RankOp::Aggregate, chunk: chunks - 1 });
    tr.output_ready = d_ctx + p.agg_cycles;
    banks.precharge();
    tr.done = tr.output_ready.max(banks.last_pre.unwrap() + p.rp);
    tr.commands = banks.out;
    tr
}
