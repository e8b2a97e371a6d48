//! Latency predictors: a linear model for the PIM side and two bagged
//! regression-tree ensembles for the GPU side, refit on a sliding window of
//! observed iterations.

mod forest;
mod linear;

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

pub use forest::{Forest, ForestParams, Tree};
pub use linear::LinearModel;

use crate::config::SchedulerParams;
use crate::error::PredictError;

/// Mean of `|Y − Ŷ| / Y`.
pub fn relative_error(y: &[f64], yhat: &[f64]) -> Result<f64, PredictError> {
    if y.len() != yhat.len() {
        return Err(PredictError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(PredictError::Empty);
    }
    let mut s = 0.0;
    for (index, (&a, &b)) in y.iter().zip(yhat).enumerate() {
        if a <= 0.0 || !a.is_finite() {
            return Err(PredictError::NonPositive { index });
        }
        s += (a - b).abs() / a;
    }
    Ok(s / y.len() as f64)
}

/// Features of the PIM-side model: `(Σf_d, len(f_d), Σc_p of the other sub-batch)`.
pub fn pim_features(sum_fd: u64, len_fd: usize, sum_cp_other: u64) -> Vec<f64> {
    vec![sum_fd as f64, len_fd as f64, sum_cp_other as f64]
}

/// Per-request prefill-attention features: chunk, finished tokens and the
/// attention area `c·(c+f)`.
pub fn prefill_features(c: u64, f: u64) -> Vec<f64> {
    vec![c as f64, f as f64, (c * (c + f)) as f64]
}

/// FC batch features: prefill tokens, decode requests and their sum.
pub fn batch_features(sum_cp: u64, len_fd: usize) -> Vec<f64> {
    vec![sum_cp as f64, len_fd as f64, (sum_cp + len_fd as u64) as f64]
}

/// The batch forest learns latency per FC token, which levels off at the
/// compute-bound rate and so extrapolates to batches larger than any seen.
fn batch_tokens(x: &[f64]) -> f64 {
    x[2].max(1.0)
}

/// Sliding window of `(features, observed ns)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Window {
    samples: VecDeque<(Vec<f64>, f64)>,
    cap: usize,
    fresh: usize,
}

impl Window {
    pub fn new(cap: usize) -> Self {
        Self { samples: VecDeque::with_capacity(cap), cap, fresh: 0 }
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        if self.samples.len() == self.cap {
            self.samples.pop_front();
        }
        self.samples.push_back((x, y));
        self.fresh = (self.fresh + 1).min(self.cap);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Vec<f64>, f64)> {
        self.samples.iter()
    }

    fn split(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.samples.iter().cloned().unzip()
    }

    /// Keeps only the samples added since the last fit.
    fn forget_stale(&mut self) {
        let drop = self.samples.len() - self.fresh;
        self.samples.drain(..drop);
    }
}

/// Which model a sample trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Pim,
    Prefill,
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub window: usize,
    pub stride: usize,
    pub min_samples: usize,
    /// Relative error on fresh samples above which older samples are dropped.
    pub drift_threshold: f64,
    forest: ForestParams,
    pim: Window,
    prefill: Window,
    batch: Window,
    pub linear: Option<LinearModel>,
    pub rfr_p: Option<Forest>,
    pub rfr_batch: Option<Forest>,
    pub fits: u64,
}

impl PredictorState {
    pub fn new(p: &SchedulerParams) -> Self {
        Self {
            window: p.window,
            stride: p.retrain_stride,
            min_samples: p.min_samples,
            drift_threshold: 0.10,
            forest: ForestParams { trees: p.trees, depth: p.tree_depth, min_leaf: 1, seed: p.seed },
            pim: Window::new(p.window),
            prefill: Window::new(p.window),
            batch: Window::new(p.window),
            linear: None,
            rfr_p: None,
            rfr_batch: None,
            fits: 0,
        }
    }

    /// True until every model has been fit once.
    pub fn bootstrap(&self) -> bool {
        self.linear.is_none() || self.rfr_p.is_none() || self.rfr_batch.is_none()
    }

    pub fn samples(&self, t: Target) -> &Window {
        match t {
            Target::Pim => &self.pim,
            Target::Prefill => &self.prefill,
            Target::Batch => &self.batch,
        }
    }

    pub fn predict_pim(&self, sum_fd: u64, len_fd: usize, sum_cp_other: u64) -> f64 {
        if len_fd == 0 && sum_cp_other == 0 {
            return 0.0;
        }
        self.linear.as_ref().map_or(0.0, |m| m.predict(&pim_features(sum_fd, len_fd, sum_cp_other)))
    }

    pub fn predict_prefill(&self, c: u64, f: u64) -> f64 {
        if c == 0 {
            return 0.0;
        }
        self.rfr_p.as_ref().map_or(0.0, |m| m.predict(&prefill_features(c, f)))
    }

    pub fn predict_batch(&self, sum_cp: u64, len_fd: usize) -> f64 {
        if sum_cp == 0 && len_fd == 0 {
            return 0.0;
        }
        self.predict_raw(Target::Batch, &batch_features(sum_cp, len_fd)).unwrap_or(0.0)
    }

    /// `Σ RFR_p(c, f) + RFR_batch(Σc, len)`.
    pub fn predict_gpu(&self, c_p: &[u64], f_p: &[u64], len_fd: usize) -> f64 {
        let p: f64 = c_p.iter().zip(f_p).map(|(&c, &f)| self.predict_prefill(c, f)).sum();
        p + self.predict_batch(c_p.iter().sum(), len_fd)
    }

    fn predict_raw(&self, t: Target, x: &[f64]) -> Option<f64> {
        match t {
            Target::Pim => self.linear.as_ref().map(|m| m.predict(x)),
            Target::Prefill => self.rfr_p.as_ref().map(|m| m.predict(x)),
            Target::Batch => self.rfr_batch.as_ref().map(|m| m.predict(x) * batch_tokens(x)),
        }
    }

    /// Appends an observation and refits the model when due. Returns true if
    /// a refit happened.
    pub fn record(&mut self, t: Target, x: Vec<f64>, observed_ns: f64) -> Result<bool, PredictError> {
        if !observed_ns.is_finite() || observed_ns <= 0.0 {
            return Ok(false);
        }
        let fitted = self.predict_raw(t, &x).is_some();
        let stride = self.stride;
        let min = self.min_samples;
        let w = match t {
            Target::Pim => &mut self.pim,
            Target::Prefill => &mut self.prefill,
            Target::Batch => &mut self.batch,
        };
        w.push(x, observed_ns);
        let due = if fitted { w.fresh >= stride } else { w.len() >= min };
        if !due {
            return Ok(false);
        }
        if fitted {
            let fresh: Vec<(Vec<f64>, f64)> = self.samples(t).iter().skip(self.samples(t).len() - self.samples(t).fresh).cloned().collect();
            let (y, yhat): (Vec<f64>, Vec<f64>) = fresh.iter().map(|(x, y)| (*y, self.predict_raw(t, x).unwrap_or(0.0))).unzip();
            if relative_error(&y, &yhat)? > self.drift_threshold {
                match t {
                    Target::Pim => self.pim.forget_stale(),
                    Target::Prefill => self.prefill.forget_stale(),
                    Target::Batch => self.batch.forget_stale(),
                }
            }
        }
        self.refit(t)?;
        Ok(true)
    }

    fn refit(&mut self, t: Target) -> Result<(), PredictError> {
        self.fits += 1;
        let mut fp = self.forest;
        fp.seed = fp.seed.wrapping_add(self.fits);
        match t {
            Target::Pim => {
                let (x, y) = self.pim.split();
                self.linear = Some(LinearModel::fit(&x, &y)?);
                self.pim.fresh = 0;
            }
            Target::Prefill => {
                let (x, y) = self.prefill.split();
                self.rfr_p = Some(Forest::fit(&x, &y, &fp)?);
                self.prefill.fresh = 0;
            }
            Target::Batch => {
                let (x, mut y) = self.batch.split();
                for (y, x) in y.iter_mut().zip(&x) {
                    *y /= batch_tokens(x);
                }
                self.rfr_batch = Some(Forest::fit(&x, &y, &fp)?);
                self.batch.fresh = 0;
            }
        }
        Ok(())
    }
}
