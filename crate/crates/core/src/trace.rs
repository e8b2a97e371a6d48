//! Request traces and the synthetic generator.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::math::{exp, ln, sqrt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    /// Arrival time in seconds.
    #[serde(default)]
    pub arrival: f64,
    pub input_len: u64,
    pub output_len: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub provenance: String,
}

impl Trace {
    pub fn new(mut records: Vec<TraceRecord>, provenance: impl Into<String>) -> Result<Self, TraceError> {
        for (line, r) in records.iter().enumerate() {
            if r.input_len == 0 || r.output_len == 0 {
                return Err(TraceError::Malformed { line: line + 1, reason: "lengths must be at least 1".into() });
            }
            if !(r.arrival >= 0.0 && r.arrival.is_finite()) {
                return Err(TraceError::Malformed { line: line + 1, reason: "arrival must be finite and non-negative".into() });
            }
        }
        records.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
        Ok(Self { records, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_output(&self) -> u64 {
        self.records.iter().map(|r| r.output_len).sum()
    }

    /// `n` records drawn without replacement under `seed`, arrival-ordered.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self, TraceError> {
        if n > self.records.len() {
            return Err(TraceError::SampleTooLarge { requested: n, available: self.records.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all: Vec<usize> = (0..self.records.len()).collect();
        let (picked, _) = all.partial_shuffle(&mut rng, n);
        picked.sort_unstable();
        Self::new(picked.iter().map(|&i| self.records[i]).collect(), self.provenance.clone())
    }

    /// Input and output length moments `(mean_in, std_in, mean_out, std_out)`.
    pub fn moments(&self) -> (f64, f64, f64, f64) {
        let (mi, si) = mean_std(self.records.iter().map(|r| r.input_len as f64));
        let (mo, so) = mean_std(self.records.iter().map(|r| r.output_len as f64));
        (mi, si, mo, so)
    }
}

fn mean_std(it: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = it.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let m = it.clone().sum::<f64>() / n;
    let v = it.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, sqrt(v))
}

/// Length statistics of a public trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceShape {
    pub name: &'static str,
    pub in_mean: f64,
    pub in_std: f64,
    pub out_mean: f64,
    pub out_std: f64,
}

pub const OPENR1: TraceShape = TraceShape { name: "openr1", in_mean: 96.0, in_std: 75.1, out_mean: 12684.1, out_std: 8464.6 };
pub const DOLPHIN: TraceShape = TraceShape { name: "dolphin", in_mean: 201.9, in_std: 563.0, out_mean: 3926.2, out_std: 4216.0 };
pub const OPENTHOUGHTS: TraceShape =
    TraceShape { name: "openthoughts", in_mean: 89.4, in_std: 66.7, out_mean: 6366.7, out_std: 4662.9 };
pub const LONGBENCH: TraceShape = TraceShape { name: "longbench", in_mean: 7703.9, in_std: 4285.5, out_mean: 89.8, out_std: 213.7 };

pub const SHAPES: [TraceShape; 4] = [OPENR1, DOLPHIN, OPENTHOUGHTS, LONGBENCH];

pub fn shape(name: &str) -> Option<TraceShape> {
    SHAPES.iter().copied().find(|s| s.name.eq_ignore_ascii_case(name))
}

/// Lognormal `(μ, σ)` whose distribution has the given mean and std.
pub fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let s2 = ln(1.0 + (std / mean) * (std / mean));
    (ln(mean) - 0.5 * s2, sqrt(s2))
}

fn draw(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> u64 {
    if std == 0.0 {
        return (mean + 0.5).max(1.0) as u64;
    }
    let (mu, sigma) = lognormal_params(mean, std);
    let z: f64 = rng.sample(StandardNormal);
    (exp(mu + sigma * z) + 0.5).max(1.0) as u64
}

/// `n` requests with lognormal lengths matched to the given moments, all
/// arriving at time 0.
pub fn synth_trace(n: usize, s: &TraceShape, seed: u64) -> Result<Trace, TraceError> {
    if !(s.in_mean > 0.0 && s.out_mean > 0.0) {
        return Err(TraceError::Parameter("means must be positive"));
    }
    if !(s.in_std >= 0.0 && s.out_std >= 0.0) {
        return Err(TraceError::Parameter("standard deviations must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n as u64)
        .map(|id| {
            let input_len = draw(&mut rng, s.in_mean, s.in_std);
            let output_len = draw(&mut rng, s.out_mean, s.out_std);
            TraceRecord { id, arrival: 0.0, input_len, output_len }
        })
        .collect();
    Trace::new(records, s.name)
}

/// Poisson arrivals at `rate` requests/s applied to an existing trace.
pub fn with_poisson_arrivals(t: &Trace, rate: f64, seed: u64) -> Result<Trace, TraceError> {
    if !(rate > 0.0) {
        return Err(TraceError::Parameter("arrival rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut now = 0.0;
    let records = t
        .records
        .iter()
        .map(|r| {
            let u: f64 = rng.random();
            now += -ln(1.0 - u) / rate;
            TraceRecord { arrival: now, ..*r }
        })
        .collect();
    Trace::new(records, t.provenance.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b
    }

    #[test]
    fn openr1_moments() {
        let t = synth_trace(1000, &OPENR1, 42).unwrap();
        let (mi, si, mo, so) = t.moments();
        assert!(close(mi, 96.0, 0.1), "{mi}");
        assert!(close(si, 75.1, 0.1), "{si}");
        assert!(close(mo, 12684.1, 0.1), "{mo}");
        assert!(close(so, 8464.6, 0.1), "{so}");
    }

    #[test]
    fn zero_std_is_constant() {
        let s = TraceShape { name: "c", in_mean: 100.0, in_std: 0.0, out_mean: 7.0, out_std: 0.0 };
        let t = synth_trace(50, &s, 1).unwrap();
        assert!(t.records.iter().all(|r| r.input_len == 100 && r.output_len == 7));
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = synth_trace(100, &LONGBENCH, 3).unwrap();
        assert_eq!(t.sample(40, 9).unwrap(), t.sample(40, 9).unwrap());
        assert_eq!(t.sample(100, 9).unwrap().len(), 100);
        assert!(t.sample(101, 9).is_err());
    }

    #[test]
    fn rejects_zero_output() {
        let r = TraceRecord { id: 0, arrival: 0.0, input_len: 5, output_len: 0 };
        assert!(matches!(Trace::new(alloc::vec![r], "x"), Err(TraceError::Malformed { line: 1, .. })));
    }
}
