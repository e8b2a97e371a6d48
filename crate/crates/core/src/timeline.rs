//! Device intervals of a simulated run.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Gpu,
    Rankset(u32),
    PcieDown,
    PcieUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    /// Batched FC layers.
    Fc,
    PrefillMha,
    /// Decode attention executed on the GPU or a baseline accelerator.
    DecodeAttention,
    /// Decode attention on a rankset.
    DecodeMha,
    /// A rankset absorbing prefill KV.
    Receive,
    QkvDown,
    AttnOutUp,
    AsyncKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub iteration: u64,
    pub sub_batch: u8,
    pub device: Device,
    pub activity: Activity,
    pub start_ns: f64,
    pub end_ns: f64,
    #[serde(default)]
    pub bytes: f64,
}

impl Interval {
    pub fn len(&self) -> f64 {
        self.end_ns - self.start_ns
    }

    pub fn is_empty(&self) -> bool {
        self.end_ns <= self.start_ns
    }

    pub fn overlaps(&self, o: &Interval) -> bool {
        self.start_ns < o.end_ns && o.start_ns < self.end_ns
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
}

impl Timeline {
    pub fn push(&mut self, iv: Interval) {
        if iv.end_ns > iv.start_ns || iv.bytes > 0.0 {
            self.intervals.push(iv);
        }
    }

    pub fn extend(&mut self, other: Timeline) {
        self.intervals.extend(other.intervals);
    }

    pub fn on(&self, device: Device) -> impl Iterator<Item = &Interval> {
        self.intervals.iter().filter(move |i| i.device == device)
    }

    /// Union length of the intervals on `device` (overlaps counted once).
    pub fn busy_ns(&self, device: Device) -> f64 {
        let mut v: Vec<(f64, f64)> = self.on(device).map(|i| (i.start_ns, i.end_ns)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut total = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (s, e) in v {
            match cur {
                Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    total += ce - cs;
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some((cs, ce)) = cur {
            total += ce - cs;
        }
        total
    }

    pub fn end_ns(&self) -> f64 {
        self.intervals.iter().map(|i| i.end_ns).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: f64, e: f64) -> Interval {
        Interval { iteration: 0, sub_batch: 0, device: Device::Gpu, activity: Activity::Fc, start_ns: s, end_ns: e, bytes: 0.0 }
    }

    #[test]
    fn busy_merges_overlaps() {
        let mut t = Timeline::default();
        t.push(iv(0.0, 10.0));
        t.push(iv(5.0, 12.0));
        t.push(iv(20.0, 25.0));
        assert_eq!(t.busy_ns(Device::Gpu), 17.0);
        assert_eq!(t.end_ns(), 25.0);
    }
}
