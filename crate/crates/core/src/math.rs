// Float helpers that are inherent methods under std but not in core.

#[inline]
pub(crate) fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Weighted percentile over `(value, weight)` pairs; `q` in `[0, 1]`.
pub(crate) fn weighted_percentile(samples: &mut [(f64, u64)], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: u64 = samples.iter().map(|s| s.1).sum();
    if total == 0 {
        return 0.0;
    }
    let target = ceil(q * total as f64).max(1.0) as u64;
    let mut acc = 0;
    for &(v, w) in samples.iter() {
        acc += w;
        if acc >= target {
            return v;
        }
    }
    samples[samples.len() - 1].0
}
