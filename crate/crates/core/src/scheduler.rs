//! Iteration planning: two interleaved sub-batches whose GPU phases are
//! sized, through prefill chunking, to match the other sub-batch's PIM phase.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::config::{SchedulerParams, SchedulerPolicy};
use crate::predictor::PredictorState;
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Queued,
    Prefilling,
    Decoding,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival_ns: f64,
    pub input_len: u64,
    pub output_len: u64,
    /// Prompt tokens already prefilled.
    pub prefilled: u64,
    /// Output tokens produced.
    pub generated: u64,
    pub phase: Phase,
    /// Iterations in which the request was prefilled only partially.
    pub chunkings: u32,
    pub first_token_ns: Option<f64>,
    pub last_token_ns: f64,
}

impl Request {
    pub fn new(r: &TraceRecord) -> Self {
        Self {
            id: r.id,
            arrival_ns: r.arrival * 1e9,
            input_len: r.input_len,
            output_len: r.output_len,
            prefilled: 0,
            generated: 0,
            phase: Phase::Queued,
            chunkings: 0,
            first_token_ns: None,
            last_token_ns: 0.0,
        }
    }

    /// Tokens whose KV exist (the context a decode step attends over).
    pub fn finished(&self) -> u64 {
        self.prefilled + self.generated
    }

    pub fn remaining_prefill(&self) -> u64 {
        self.input_len - self.prefilled
    }

    /// KV tokens reserved for the request's whole lifetime.
    pub fn budget_tokens(&self) -> u64 {
        self.input_len + self.output_len
    }

    fn advance(&mut self, to: Phase) {
        debug_assert!(to >= self.phase, "phase regression");
        self.phase = to;
    }

    /// Applies a finished prefill chunk at `now`; returns true if it produced
    /// the first token.
    pub fn complete_chunk(&mut self, chunk: u64, now: f64) -> bool {
        self.prefilled += chunk;
        if self.prefilled < self.input_len {
            self.chunkings += 1;
            return false;
        }
        self.generated = 1;
        self.first_token_ns = Some(now);
        self.last_token_ns = now;
        self.advance(if self.generated >= self.output_len { Phase::Done } else { Phase::Decoding });
        true
    }

    /// Applies one decode step at `now`; returns the time since the previous
    /// token.
    pub fn complete_decode(&mut self, now: f64) -> f64 {
        let gap = now - self.last_token_ns;
        self.generated += 1;
        self.last_token_ns = now;
        if self.generated >= self.output_len {
            self.advance(Phase::Done);
        }
        gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefillSlot {
    /// Index into the request table.
    pub req: usize,
    pub id: u64,
    pub chunk: u64,
    pub finished: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeSlot {
    pub req: usize,
    pub id: u64,
    pub tokens: u64,
}

/// Why filling a sub-batch stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillStop {
    /// GPU latency reached the other sub-batch's PIM latency.
    Aligned,
    /// GPU latency already exceeded it; at most one minimal chunk was added.
    GpuBound,
    QueueEmpty,
    MemoryFull,
    /// Fixed-size fill (bootstrap or no decode work).
    Budget,
    NotFilled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBatch {
    pub prefill: Vec<PrefillSlot>,
    pub decode: Vec<DecodeSlot>,
    pub t_gpu_pred: f64,
    pub t_pim_pred: f64,
    /// Request left partially prefilled by this sub-batch.
    pub chunked: Option<usize>,
    pub stop: FillStop,
    /// Predicted GPU latency of one more chunk-granularity step.
    pub step_delta: f64,
}

impl Default for SubBatch {
    fn default() -> Self {
        Self {
            prefill: Vec::new(),
            decode: Vec::new(),
            t_gpu_pred: 0.0,
            t_pim_pred: 0.0,
            chunked: None,
            stop: FillStop::NotFilled,
            step_delta: 0.0,
        }
    }
}

impl SubBatch {
    pub fn c_p(&self) -> Vec<u64> {
        self.prefill.iter().map(|p| p.chunk).collect()
    }

    pub fn f_p(&self) -> Vec<u64> {
        self.prefill.iter().map(|p| p.finished).collect()
    }

    pub fn f_d(&self) -> Vec<u64> {
        self.decode.iter().map(|d| d.tokens).collect()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill.iter().map(|p| p.chunk).sum()
    }

    pub fn decode_tokens(&self) -> u64 {
        self.decode.iter().map(|d| d.tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty() && self.decode.is_empty()
    }
}

/// Latency model the scheduler plans with.
pub trait LatencyPredictor {
    fn bootstrap(&self) -> bool;
    /// GPU phase: `own`'s prefill chunks plus FC over them and `other`'s
    /// decode tokens.
    fn t_gpu(&self, own: &SubBatch, other: &SubBatch) -> f64;
    /// PIM phase: `own`'s decode attention plus critical transfers, while
    /// absorbing `other`'s prefill KV.
    fn t_pim(&self, own: &SubBatch, other: &SubBatch) -> f64;
}

impl LatencyPredictor for PredictorState {
    fn bootstrap(&self) -> bool {
        PredictorState::bootstrap(self)
    }

    fn t_gpu(&self, own: &SubBatch, other: &SubBatch) -> f64 {
        self.predict_gpu(&own.c_p(), &own.f_p(), other.decode.len())
    }

    fn t_pim(&self, own: &SubBatch, other: &SubBatch) -> f64 {
        self.predict_pim(own.decode_tokens(), own.decode.len(), other.prefill_tokens())
    }
}

/// Greedy longest-first split of decode requests into two sub-batches with
/// near-equal token totals. Ties go to sub-batch 0 and are broken by id.
pub fn split_decode(items: &[DecodeSlot]) -> (Vec<DecodeSlot>, Vec<DecodeSlot>) {
    let mut order: Vec<&DecodeSlot> = items.iter().collect();
    order.sort_by(|a, b| b.tokens.cmp(&a.tokens).then(a.id.cmp(&b.id)));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let (mut ta, mut tb) = (0u64, 0u64);
    for d in order {
        if ta <= tb {
            ta += d.tokens;
            a.push(*d);
        } else {
            tb += d.tokens;
            b.push(*d);
        }
    }
    (a, b)
}

/// Work for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum IterationPlan {
    /// Phase A runs GPU(1) ∥ PIM(0), phase B runs GPU(0) ∥ PIM(1).
    Interleaved([SubBatch; 2]),
    /// GPU work followed by decode attention, no overlap.
    Serial(SubBatch),
    /// Prompt processing only; decode waits.
    Prefill(SubBatch),
    Idle,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pub policy: SchedulerPolicy,
    pub params: SchedulerParams,
    kv_bytes_per_token: u64,
    capacity: u64,
    used: u64,
    /// Requests waiting for (more) prefill, by table index.
    queue: VecDeque<usize>,
    /// Requests in the decode phase, by table index.
    decoding: Vec<usize>,
    /// Requests whose KV can never fit.
    pub rejected: Vec<usize>,
}

impl Scheduler {
    pub fn new(policy: SchedulerPolicy, params: SchedulerParams, kv_bytes_per_token: u64, capacity: u64) -> Self {
        Self {
            policy,
            params,
            kv_bytes_per_token,
            capacity,
            used: 0,
            queue: VecDeque::new(),
            decoding: Vec::new(),
            rejected: Vec::new(),
        }
    }

    pub fn enqueue(&mut self, req: usize) {
        self.queue.push_back(req);
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn decoding(&self) -> &[usize] {
        &self.decoding
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity
    }

    pub fn has_work(&self) -> bool {
        !self.queue.is_empty() || !self.decoding.is_empty()
    }

    fn need(&self, r: &Request) -> u64 {
        r.budget_tokens() * self.kv_bytes_per_token
    }

    /// Reserves KV space for the queue head if it is new. Returns false when
    /// memory is full.
    fn fits(&self, r: &Request) -> bool {
        r.phase != Phase::Queued || self.used + self.need(r) <= self.capacity
    }

    fn admit(&mut self, reqs: &mut [Request], i: usize) -> bool {
        if reqs[i].phase != Phase::Queued {
            return true;
        }
        if !self.fits(&reqs[i]) {
            return false;
        }
        self.used += self.need(&reqs[i]);
        reqs[i].advance(Phase::Prefilling);
        true
    }

    /// Drops queue-head requests that can never fit.
    fn reject_oversized(&mut self, reqs: &mut [Request]) {
        while let Some(&i) = self.queue.front() {
            if reqs[i].phase == Phase::Queued && self.need(&reqs[i]) > self.capacity {
                self.queue.pop_front();
                reqs[i].advance(Phase::Done);
                self.rejected.push(i);
            } else {
                break;
            }
        }
    }

    fn decode_slots(&self, reqs: &[Request]) -> Vec<DecodeSlot> {
        self.decoding.iter().map(|&i| DecodeSlot { req: i, id: reqs[i].id, tokens: reqs[i].finished() }).collect()
    }

    fn slot(reqs: &[Request], i: usize, chunk: u64) -> PrefillSlot {
        PrefillSlot { req: i, id: reqs[i].id, chunk, finished: reqs[i].prefilled }
    }

    /// Chunk for a partial prefill: a positive multiple of the granularity,
    /// or the whole remainder.
    fn round_chunk(&self, want: u64, remaining: u64) -> u64 {
        let g = self.params.chunk_granularity.max(1) as u64;
        if want >= remaining {
            remaining
        } else {
            (want / g * g).max(g).min(remaining)
        }
    }

    /// Fills `sb` with up to `budget` prefill tokens from the queue.
    fn fill_budget(&mut self, reqs: &mut [Request], sb: &mut SubBatch, budget: u64) {
        let mut left = budget;
        sb.stop = FillStop::Budget;
        while left > 0 {
            self.reject_oversized(reqs);
            let Some(&i) = self.queue.front() else {
                sb.stop = FillStop::QueueEmpty;
                break;
            };
            if !self.admit(reqs, i) {
                sb.stop = FillStop::MemoryFull;
                break;
            }
            let rem = reqs[i].remaining_prefill();
            let c = self.round_chunk(left, rem);
            self.queue.pop_front();
            sb.prefill.push(Self::slot(reqs, i, c));
            if c < rem {
                sb.chunked = Some(i);
                break;
            }
            left = left.saturating_sub(c);
        }
    }

    /// Adds prefill to `sb[i]` until its GPU latency passes the PIM latency
    /// of the other sub-batch, chunking the last request to the multiple of
    /// the granularity that best matches the two.
    fn fill_aligned(&mut self, reqs: &mut [Request], sb: &mut [SubBatch; 2], i: usize, pred: &dyn LatencyPredictor) {
        let o = 1 - i;
        let g = self.params.chunk_granularity.max(1) as u64;
        let eval = |sb: &[SubBatch; 2]| (pred.t_gpu(&sb[i], &sb[o]), pred.t_pim(&sb[o], &sb[i]));
        let (g0, p0) = eval(sb);
        if g0 > p0 {
            // Already GPU-bound: admit one minimal chunk so the queue
            // cannot starve behind a long decode phase.
            sb[i].stop = FillStop::GpuBound;
            self.reject_oversized(reqs);
            if let Some(&r) = self.queue.front() {
                if self.admit(reqs, r) {
                    self.queue.pop_front();
                    let rem = reqs[r].remaining_prefill();
                    sb[i].prefill.push(Self::slot(reqs, r, g.min(rem)));
                    if g < rem {
                        sb[i].chunked = Some(r);
                    }
                    let g1 = pred.t_gpu(&sb[i], &sb[o]);
                    sb[i].step_delta = g1 - g0;
                }
            }
            return;
        }
        loop {
            self.reject_oversized(reqs);
            let Some(&r) = self.queue.front() else {
                sb[i].stop = FillStop::QueueEmpty;
                return;
            };
            if !self.fits(&reqs[r]) {
                sb[i].stop = FillStop::MemoryFull;
                return;
            }
            let rem = reqs[r].remaining_prefill();
            let t_without = pred.t_gpu(&sb[i], &sb[o]);
            sb[i].prefill.push(Self::slot(reqs, r, rem));
            let (gf, pf) = eval(sb);
            if gf <= pf {
                self.admit(reqs, r);
                self.queue.pop_front();
                continue;
            }
            // Walk chunk sizes 0, g, 2g, … to the first one whose GPU latency
            // crosses the PIM latency, then keep whichever side is closer.
            let last = sb[i].prefill.len() - 1;
            let (_, p_without) = {
                let slot = sb[i].prefill.pop().unwrap();
                let e = eval(sb);
                sb[i].prefill.push(slot);
                e
            };
            let mut lo = (0u64, p_without - t_without, t_without);
            let mut c = g;
            let hi = loop {
                let c_try = c.min(rem);
                sb[i].prefill[last].chunk = c_try;
                let (gc, pc) = eval(sb);
                if gc > pc || c_try == rem {
                    break (c_try, (gc - pc).abs(), gc);
                }
                lo = (c_try, pc - gc, gc);
                c += g;
            };
            sb[i].step_delta = hi.2 - lo.2;
            sb[i].stop = FillStop::Aligned;
            let chunk = if lo.1 <= hi.1 { lo.0 } else { hi.0 };
            if chunk == 0 {
                sb[i].prefill.pop();
                return;
            }
            self.admit(reqs, r);
            self.queue.pop_front();
            sb[i].prefill[last].chunk = chunk;
            if chunk < rem {
                sb[i].chunked = Some(r);
            }
            return;
        }
    }

    /// Builds the next iteration.
    pub fn plan(&mut self, reqs: &mut [Request], pred: &dyn LatencyPredictor) -> IterationPlan {
        self.reject_oversized(reqs);
        let decode = self.decode_slots(reqs);
        match self.policy {
            SchedulerPolicy::L3 => self.plan_l3(reqs, decode, pred),
            SchedulerPolicy::PrefillPriority | SchedulerPolicy::SingleBatch => {
                let mut sb = SubBatch::default();
                self.fill_budget(reqs, &mut sb, self.params.prefill_token_budget as u64);
                if !sb.prefill.is_empty() {
                    return IterationPlan::Prefill(sb);
                }
                if decode.is_empty() {
                    return IterationPlan::Idle;
                }
                if self.policy == SchedulerPolicy::SingleBatch {
                    return IterationPlan::Serial(SubBatch { decode, ..Default::default() });
                }
                let (a, b) = split_decode(&decode);
                IterationPlan::Interleaved([
                    SubBatch { decode: a, ..Default::default() },
                    SubBatch { decode: b, ..Default::default() },
                ])
            }
        }
    }

    fn plan_l3(&mut self, reqs: &mut [Request], decode: Vec<DecodeSlot>, pred: &dyn LatencyPredictor) -> IterationPlan {
        let (a, b) = split_decode(&decode);
        let mut sb = [SubBatch { decode: a, ..Default::default() }, SubBatch { decode: b, ..Default::default() }];
        if decode.is_empty() {
            let budget = self.params.prefill_token_budget as u64;
            self.fill_budget(reqs, &mut sb[1], budget);
            self.fill_budget(reqs, &mut sb[0], budget);
        } else if pred.bootstrap() {
            let budget = self.params.bootstrap_chunk as u64;
            self.fill_budget(reqs, &mut sb[1], budget);
            self.fill_budget(reqs, &mut sb[0], budget);
        } else {
            self.fill_aligned(reqs, &mut sb, 1, pred);
            self.fill_aligned(reqs, &mut sb, 0, pred);
        }
        if sb[0].is_empty() && sb[1].is_empty() {
            return IterationPlan::Idle;
        }
        for k in 0..2 {
            let o = 1 - k;
            sb[k].t_gpu_pred = pred.t_gpu(&sb[k], &sb[o]);
            sb[k].t_pim_pred = pred.t_pim(&sb[k], &sb[o]);
        }
        IterationPlan::Interleaved(sb)
    }

    /// Applies a finished iteration: partial requests return to the queue
    /// head (sub-batch 1's first), finished prefills join decoding, finished
    /// requests free their memory.
    pub fn retire(&mut self, reqs: &[Request], plan: &IterationPlan) {
        let sbs: Vec<&SubBatch> = match plan {
            IterationPlan::Interleaved(s) => vec_of(&s[0], &s[1]),
            IterationPlan::Serial(s) | IterationPlan::Prefill(s) => vec_of(s, s),
            IterationPlan::Idle => Vec::new(),
        };
        let mut partial: Vec<usize> = Vec::new();
        for sb in sbs.iter().rev() {
            for p in &sb.prefill {
                let r = &reqs[p.req];
                match r.phase {
                    Phase::Prefilling if !partial.contains(&p.req) => partial.push(p.req),
                    Phase::Decoding if !self.decoding.contains(&p.req) => self.decoding.push(p.req),
                    _ => {}
                }
            }
        }
        for &i in partial.iter().rev() {
            self.queue.push_front(i);
        }
        let kvpt = self.kv_bytes_per_token;
        let mut freed = 0;
        let touched = sbs.iter().flat_map(|s| s.prefill.iter().map(|p| p.req)).chain(self.decoding.iter().copied());
        let mut done: Vec<usize> = touched.filter(|&i| reqs[i].phase == Phase::Done).collect();
        done.sort_unstable();
        done.dedup();
        for &i in &done {
            freed += reqs[i].budget_tokens() * kvpt;
        }
        self.used -= freed;
        self.decoding.retain(|&i| reqs[i].phase == Phase::Decoding);
    }
}

fn vec_of<'a>(a: &'a SubBatch, b: &'a SubBatch) -> Vec<&'a SubBatch> {
    if core::ptr::eq(a, b) {
        alloc::vec![a]
    } else {
        alloc::vec![a, b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn d(id: u64, t: u64) -> DecodeSlot {
        DecodeSlot { req: id as usize, id, tokens: t }
    }

    #[test]
    fn split_example() {
        let (a, b) = split_decode(&[d(0, 2000), d(1, 3000), d(2, 4000), d(3, 5000)]);
        let mut ta: Vec<u64> = a.iter().map(|x| x.tokens).collect();
        let mut tb: Vec<u64> = b.iter().map(|x| x.tokens).collect();
        ta.sort();
        tb.sort();
        assert_eq!(ta, vec![2000, 5000]);
        assert_eq!(tb, vec![3000, 4000]);
    }

    #[test]
    fn split_edge_cases() {
        let (a, b) = split_decode(&[d(0, 9)]);
        assert_eq!((a.len(), b.len()), (1, 0));
        let (a, b) = split_decode(&(0..5).map(|i| d(i, 1)).collect::<Vec<_>>());
        assert_eq!((a.len(), b.len()), (3, 2));
        let (a, b) = split_decode(&[]);
        assert!(a.is_empty() && b.is_empty());
    }

    /// Linear stand-in: GPU = 1 µs per prefill token + 0.5 µs per decode,
    /// PIM = 2 ns per context token.
    struct Frozen;
    impl LatencyPredictor for Frozen {
        fn bootstrap(&self) -> bool {
            false
        }
        fn t_gpu(&self, own: &SubBatch, other: &SubBatch) -> f64 {
            1000.0 * own.prefill_tokens() as f64 + 500.0 * other.decode.len() as f64
        }
        fn t_pim(&self, own: &SubBatch, _other: &SubBatch) -> f64 {
            2.0 * own.decode_tokens() as f64
        }
    }

    fn rec(id: u64, input: u64, out: u64) -> TraceRecord {
        TraceRecord { id, arrival: 0.0, input_len: input, output_len: out }
    }

    fn setup(recs: &[TraceRecord], decoding: &[usize]) -> (Scheduler, Vec<Request>) {
        let mut reqs: Vec<Request> = recs.iter().map(Request::new).collect();
        let mut s = Scheduler::new(SchedulerPolicy::L3, SchedulerParams::default(), 1, u64::MAX / 4);
        for (i, r) in reqs.iter_mut().enumerate() {
            if decoding.contains(&i) {
                r.phase = Phase::Decoding;
                r.prefilled = r.input_len;
                r.generated = 1;
                s.used += r.budget_tokens();
                s.decoding.push(i);
            } else {
                s.enqueue(i);
            }
        }
        (s, reqs)
    }

    #[test]
    fn long_prefill_is_chunked_and_requeued() {
        // decode side: 2 × 128k context → PIM ≈ 256 µs each side
        let recs = [rec(0, 128_000, 100), rec(1, 128_000, 100), rec(2, 8192, 10)];
        let (mut s, mut reqs) = setup(&recs, &[0, 1]);
        let plan = s.plan(&mut reqs, &Frozen);
        let IterationPlan::Interleaved(sb) = &plan else { panic!() };
        // GPU(1) = 1 µs·c + 0.5 µs → c ≈ 255.5 → 256
        assert_eq!(sb[1].c_p(), vec![256]);
        assert_eq!(sb[1].chunked, Some(2));
        assert!(sb[0].prefill.is_empty());
        assert_eq!(s.queue_len(), 0);
        reqs[2].complete_chunk(256, 1.0);
        s.retire(&reqs, &plan);
        assert_eq!(s.queue.front(), Some(&2));
        assert_eq!(reqs[2].remaining_prefill(), 8192 - 256);
    }

    #[test]
    fn empty_queue_gives_decode_only() {
        let recs = [rec(0, 100, 5), rec(1, 100, 5)];
        let (mut s, mut reqs) = setup(&recs, &[0, 1]);
        let IterationPlan::Interleaved(sb) = s.plan(&mut reqs, &Frozen) else { panic!() };
        assert!(sb.iter().all(|b| b.prefill.is_empty() && b.stop != FillStop::Aligned));
    }

    #[test]
    fn bootstrap_uses_fixed_chunk() {
        struct Cold;
        impl LatencyPredictor for Cold {
            fn bootstrap(&self) -> bool {
                true
            }
            fn t_gpu(&self, _: &SubBatch, _: &SubBatch) -> f64 {
                0.0
            }
            fn t_pim(&self, _: &SubBatch, _: &SubBatch) -> f64 {
                0.0
            }
        }
        let recs = [rec(0, 100, 5), rec(1, 8192, 5)];
        let (mut s, mut reqs) = setup(&recs, &[0]);
        let IterationPlan::Interleaved(sb) = s.plan(&mut reqs, &Cold) else { panic!() };
        assert_eq!(sb[1].c_p(), vec![512]);
        assert_eq!(sb[1].stop, FillStop::Budget);
    }

    #[test]
    fn memory_full_blocks_admission() {
        let recs = [rec(0, 100, 5), rec(1, 100, 5)];
        let mut reqs: Vec<Request> = recs.iter().map(Request::new).collect();
        let mut s = Scheduler::new(SchedulerPolicy::L3, SchedulerParams::default(), 1, 150);
        s.enqueue(0);
        s.enqueue(1);
        let IterationPlan::Interleaved(sb) = s.plan(&mut reqs, &Frozen) else { panic!() };
        assert_eq!(sb[1].c_p(), vec![100]);
        assert_eq!(sb[0].stop, FillStop::MemoryFull);
        assert_eq!(reqs[1].phase, Phase::Queued);
    }

    #[test]
    fn lifecycle_is_monotone() {
        let mut r = Request::new(&rec(0, 20, 3));
        r.phase = Phase::Prefilling;
        assert!(!r.complete_chunk(16, 1.0));
        assert!(r.complete_chunk(4, 2.0));
        assert_eq!(r.phase, Phase::Decoding);
        assert_eq!(r.complete_decode(5.0), 3.0);
        r.complete_decode(6.0);
        assert_eq!(r.phase, Phase::Done);
        assert_eq!(r.finished(), 23);
    }
}
