//! Stateful PIM side: one refresh manager per rank on top of [`PimModel`].

use alloc::vec;
use alloc::vec::Vec;

use super::refresh::AGGREGATE_BELOW;
use super::{DecodeItem, DecodeMhaReport, PimModel, RefreshManager};
use crate::config::DdrTiming;
use crate::error::PimError;

#[derive(Debug, Clone)]
pub struct PimEngine {
    pub model: PimModel,
    ranks: Vec<RefreshManager>,
    refresh: bool,
}

/// Result of one decode-attention pass with refresh applied.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnginePass {
    /// Refresh-free breakdown.
    pub ideal: DecodeMhaReport,
    /// Busy duration of each rank including refresh, ns.
    pub rank_busy_ns: Vec<f64>,
    /// Slowest rank of each rankset.
    pub rankset_busy_ns: Vec<f64>,
    pub refresh_ns: f64,
}

impl PimEngine {
    pub fn new(model: PimModel, timing: &DdrTiming, refresh: bool) -> Self {
        let n = (model.ranksets * model.channels) as usize;
        let ranks = (0..n).map(|_| RefreshManager::new(timing.trefi_ns, timing.trfc_ns)).collect();
        Self { model, ranks, refresh }
    }

    pub fn rank(&self, rankset: u32, channel: u32) -> &RefreshManager {
        &self.ranks[(rankset * self.model.channels + channel) as usize]
    }

    /// Executes `batch` with every rank of rankset `s` starting at `start[s]`.
    pub fn execute(&mut self, batch: &[DecodeItem], start: &[f64]) -> Result<EnginePass, PimError> {
        let ideal = self.model.decode_mha(batch)?;
        let ch = self.model.channels as usize;
        let mut pass = EnginePass {
            rank_busy_ns: ideal.rank_ns.clone(),
            rankset_busy_ns: ideal.rankset_ns.clone(),
            ideal,
            refresh_ns: 0.0,
        };
        if !self.refresh {
            return Ok(pass);
        }
        let lat: Vec<f64> = batch.iter().map(|b| self.model.head_ns(b.tokens)).collect::<Result<_, _>>()?;
        // short heads only refresh at boundaries, so the closed form needs
        // nothing but the total work and kernel count of a rank
        let short = lat.iter().all(|&l| l < AGGREGATE_BELOW * self.ranks[0].trefi_ns);
        let mut layers = vec![0u64; self.model.ranksets as usize];
        for item in batch {
            for (s, l) in layers.iter_mut().enumerate() {
                *l += self.model.layers_on(item.request, s as u32) as u64;
            }
        }
        // channels holding the same number of heads see identical work for
        // ever: replay one per class and copy its state to the rest
        let heads = |i: usize| self.model.heads_on((i % ch) as u32);
        for i in 0..self.ranks.len() {
            if let Some(j) = (i - i % ch..i).find(|&j| heads(j) == heads(i)) {
                let before = self.ranks[i].charged_ns;
                self.ranks[i] = self.ranks[j].clone();
                pass.rank_busy_ns[i] = pass.rank_busy_ns[j];
                pass.refresh_ns += self.ranks[i].charged_ns - before;
                continue;
            }
            let (s, h) = ((i / ch) as u32, heads(i) as u64);
            let n = layers[s as usize] * h;
            let t0 = start[s as usize];
            let r = &mut self.ranks[i];
            let before = r.charged_ns;
            let mut t = t0;
            if short && n > 64 {
                t = r.run_heads(t, pass.rank_busy_ns[i] / n as f64, n);
            } else if n > 0 {
                for (item, &l) in batch.iter().zip(&lat) {
                    t = r.run_heads(t, l, self.model.layers_on(item.request, s) as u64 * h);
                }
            }
            pass.rank_busy_ns[i] = t - t0;
            pass.refresh_ns += r.charged_ns - before;
        }
        for (s, v) in pass.rankset_busy_ns.iter_mut().enumerate() {
            *v = pass.rank_busy_ns[s * ch..(s + 1) * ch].iter().copied().fold(0.0, f64::max);
        }
        Ok(pass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    #[test]
    fn refresh_adds_a_few_percent() {
        let c = SimConfig::dgx_gpt175b();
        let m = PimModel::from_config(&c).unwrap();
        let mut e = PimEngine::new(m, &c.timing, true);
        let batch: Vec<_> = (0..32).map(|r| DecodeItem { request: r, tokens: 4096 }).collect();
        let p = e.execute(&batch, &[0.0; 4]).unwrap();
        let ideal = p.ideal.t_d_ns;
        let real = p.rankset_busy_ns.iter().copied().fold(0.0, f64::max);
        let overhead = real / ideal - 1.0;
        let expected = 350.0 / (7800.0 - 350.0);
        assert!(overhead > 0.5 * expected && overhead < 1.5 * expected, "{overhead}");
        for s in 0..4 {
            for c in 0..16 {
                assert!(e.rank(s, c).max_backlog <= super::super::refresh::MAX_DEFERRED);
            }
        }
    }
}
