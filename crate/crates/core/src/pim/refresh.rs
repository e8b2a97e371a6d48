//! Per-rank refresh deferral.
//!
//! One REF becomes due every tREFI. Due REFs may be postponed, but never more
//! than [`MAX_DEFERRED`] at once. Pending REFs are issued in a batch whenever
//! a head kernel completes; if a kernel (or an idle stretch) would push the
//! backlog past the limit, one REF is forced at the moment it would overflow.

use crate::math::floor;

pub const MAX_DEFERRED: u64 = 8;

/// Heads shorter than this many tREFI are replayed in aggregate; longer ones
/// may force REFs mid-kernel and are replayed one by one.
pub(crate) const AGGREGATE_BELOW: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RefreshManager {
    pub trefi_ns: f64,
    pub trfc_ns: f64,
    issued: u64,
    /// Busy time spent refreshing, ns.
    pub charged_ns: f64,
    pub forced: u64,
    pub max_backlog: u64,
}

impl RefreshManager {
    pub fn new(trefi_ns: f64, trfc_ns: f64) -> Self {
        Self { trefi_ns, trfc_ns, issued: 0, charged_ns: 0.0, forced: 0, max_backlog: 0 }
    }

    /// REFs that have come due by `now`.
    pub fn due(&self, now: f64) -> u64 {
        floor(now / self.trefi_ns).max(0.0) as u64
    }

    /// REFs due but not yet issued.
    pub fn backlog(&self, now: f64) -> u64 {
        self.due(now).saturating_sub(self.issued)
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    fn note(&mut self, now: f64) {
        self.max_backlog = self.max_backlog.max(self.backlog(now));
        assert!(self.max_backlog <= MAX_DEFERRED, "refresh backlog exceeded");
    }

    /// Time at which the backlog would exceed the limit.
    fn overflow_at(&self) -> f64 {
        (self.issued + MAX_DEFERRED + 1) as f64 * self.trefi_ns
    }

    /// Forced REFs while the rank idles until `now`; they cost no busy time.
    pub fn idle_until(&mut self, now: f64) {
        let k = self.due(now).saturating_sub(MAX_DEFERRED).saturating_sub(self.issued);
        self.issued += k;
        self.forced += k;
        self.max_backlog = self.max_backlog.max(self.backlog(now).min(MAX_DEFERRED));
    }

    /// Runs `work` ns of kernel time starting at `start`, forcing REFs that
    /// cannot wait. Returns the end time.
    pub fn run_busy(&mut self, start: f64, work: f64) -> f64 {
        self.idle_until(start);
        let mut t = start;
        let mut left = work;
        loop {
            let limit = self.overflow_at();
            if t + left < limit {
                t += left;
                break;
            }
            left -= (limit - t).max(0.0);
            t = limit.max(t) + self.trfc_ns;
            self.issued += 1;
            self.forced += 1;
            self.charged_ns += self.trfc_ns;
        }
        self.note(t);
        t
    }

    /// Head boundary: issue the whole backlog. Returns the new time.
    pub fn head_boundary(&mut self, now: f64) -> f64 {
        let k = self.backlog(now);
        self.note(now);
        self.issued += k;
        self.charged_ns += k as f64 * self.trfc_ns;
        now + k as f64 * self.trfc_ns
    }

    /// Runs `count` heads of `latency` ns each from `start`, refreshing at
    /// head boundaries. Short heads are replayed in closed form: the window
    /// `T` solves `T = count·latency + tRFC·(due(start+T) − issued)`, which
    /// matches the head-by-head replay up to the REFs straddling the last
    /// boundary.
    pub fn run_heads(&mut self, start: f64, latency: f64, count: u64) -> f64 {
        if count == 0 || latency <= 0.0 {
            return start;
        }
        if latency >= AGGREGATE_BELOW * self.trefi_ns || count <= 64 {
            let mut t = start;
            for _ in 0..count {
                t = self.run_busy(t, latency);
                t = self.head_boundary(t);
            }
            return t;
        }
        self.idle_until(start);
        let work = latency * count as f64;
        let base = self.issued;
        let mut span = work;
        for _ in 0..64 {
            let refs = self.due(start + span).saturating_sub(base);
            let next = work + refs as f64 * self.trfc_ns;
            if next == span {
                break;
            }
            span = next;
        }
        let refs = self.due(start + span).saturating_sub(base);
        self.issued = base + refs;
        self.charged_ns += refs as f64 * self.trfc_ns;
        start + work + refs as f64 * self.trfc_ns
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mgr() -> RefreshManager {
        RefreshManager::new(7800.0, 350.0)
    }

    #[test]
    fn idle_rank_defers_eight() {
        let mut r = mgr();
        r.idle_until(8.0 * 7800.0 + 1.0);
        assert_eq!(r.backlog(8.0 * 7800.0 + 1.0), 8);
        assert_eq!(r.forced, 0);
        r.idle_until(9.0 * 7800.0 + 1.0);
        assert_eq!(r.forced, 1);
        assert_eq!(r.backlog(9.0 * 7800.0 + 1.0), 8);
    }

    #[test]
    fn short_heads_refresh_individually() {
        let mut r = mgr();
        let mut t = 0.0;
        let mut last = 0;
        for _ in 0..200 {
            t = r.run_busy(t, 500.0);
            let before = r.issued();
            t = r.head_boundary(t);
            assert!(r.issued() - before <= 1);
            last = r.backlog(t);
        }
        assert_eq!(last, 0);
        assert_eq!(r.forced, 0);
    }

    #[test]
    fn three_refi_head_batches_three() {
        let mut r = mgr();
        let t = r.run_busy(0.0, 3.0 * 7800.0 + 10.0);
        assert_eq!(r.backlog(t), 3);
        let t2 = r.head_boundary(t);
        assert!((t2 - t - 3.0 * 350.0).abs() < 1e-9);
        assert!((r.charged_ns - 1050.0).abs() < 1e-9);
    }

    #[test]
    fn long_head_is_interrupted() {
        let mut r = mgr();
        let end = r.run_busy(0.0, 20.0 * 7800.0);
        assert!(r.forced > 0);
        assert!(r.max_backlog <= MAX_DEFERRED);
        assert!(r.backlog(end) <= MAX_DEFERRED);
    }

    #[test]
    fn aggregate_close_to_replay() {
        for lat in [300.0, 1200.0, 1900.0, 9000.0, 30_000.0, 45_000.0] {
            let mut a = mgr();
            let mut b = mgr();
            let ta = a.run_heads(1000.0, lat, 5000);
            let mut tb = 1000.0;
            for _ in 0..5000 {
                tb = b.run_busy(tb, lat);
                tb = b.head_boundary(tb);
            }
            assert!((ta - tb).abs() <= 2.0 * 350.0 + 1e-6, "{lat}: {ta} vs {tb}");
        }
    }
}
