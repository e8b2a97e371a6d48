//! Rankset × host-capacity grids. Each point is an independent run; points
//! run on scoped worker threads and are collected in grid order.

use std::thread;

use dimmpim_core::sim::{run_simulation, Policy, RunMetrics, RunOptions};
use dimmpim_core::trace::Trace;
use dimmpim_core::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPoint {
    pub ranksets: u32,
    /// Host DIMM capacity in bytes; `None` keeps the configured geometry.
    pub capacity: Option<u64>,
    pub policy: Policy,
}

impl GridPoint {
    pub fn label(&self) -> String {
        match self.capacity {
            Some(c) => format!("rs{}-cap{}G", self.ranksets, c >> 30),
            None => format!("rs{}", self.ranksets),
        }
    }

    pub fn config(&self, base: &SimConfig) -> SimConfig {
        let mut c = base.clone();
        c.topology = c.topology.with_ranksets(self.ranksets);
        if let Some(bytes) = self.capacity {
            c.topology = c.topology.with_capacity(bytes);
        }
        c
    }
}

pub fn grid(ranksets: &[u32], capacities: &[Option<u64>], policies: &[Policy]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &r in ranksets {
        for &c in capacities {
            for &p in policies {
                out.push(GridPoint { ranksets: r, capacity: c, policy: p });
            }
        }
    }
    out
}

/// Runs every grid point with at most `workers` concurrent runs. The trace
/// label of each result is suffixed with the point label so normalization
/// compares policies within a point.
pub fn sweep(
    trace: &Trace,
    base: &SimConfig,
    points: &[GridPoint],
    opts: RunOptions,
    workers: usize,
) -> Vec<(GridPoint, Result<RunMetrics, dimmpim_core::Error>)> {
    let workers = workers.max(1);
    let mut results = Vec::with_capacity(points.len());
    for chunk in points.chunks(workers) {
        let done: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|pt| {
                    s.spawn(move || {
                        let cfg = pt.config(base);
                        log::info!("sweep point {} {}", pt.label(), pt.policy.as_str());
                        run_simulation(trace, &cfg, pt.policy, opts).map(|o| {
                            let mut m = o.metrics;
                            m.trace = format!("{}@{}", m.trace, pt.label());
                            m
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        results.extend(chunk.iter().copied().zip(done));
    }
    results
}
