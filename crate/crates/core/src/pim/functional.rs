//! Functional model of the fused kernel.
//!
//! Arithmetic order (fixed so results are reproducible):
//! * bank PU: products accumulated left to right over the chip's slice;
//! * rank PU: per-chip partials reduced in pairwise tree order;
//! * softmax unit: exp and running sums in f32 (f64 in FP64 mode), scores
//!   stored at the working precision;
//! * context: each bank accumulates its V segment left to right over its
//!   tokens, the rank reduces the `v_sets` partial outputs in tree order.

use alloc::vec;
use alloc::vec::Vec;

use half::f16;

use super::PimModel;
use crate::error::PimError;
use crate::math::exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp16,
    Fp64,
}

/// Working-precision scalar.
trait Num: Copy {
    fn of(x: f64) -> Self;
    fn get(self) -> f64;
    fn add(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    /// Precision of the softmax unit's internal arithmetic.
    fn wide(x: f64) -> f64;
}

impl Num for f16 {
    fn of(x: f64) -> Self {
        f16::from_f64(x)
    }
    fn get(self) -> f64 {
        self.to_f64()
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn wide(x: f64) -> f64 {
        x as f32 as f64
    }
}

impl Num for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn get(self) -> f64 {
        self
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn wide(x: f64) -> f64 {
        x
    }
}

fn tree_sum<T: Num>(mut v: Vec<T>) -> T {
    if v.is_empty() {
        return T::of(0.0);
    }
    while v.len() > 1 {
        let mut next = Vec::with_capacity(v.len().div_ceil(2));
        for pair in v.chunks(2) {
            next.push(if pair.len() == 2 { pair[0].add(pair[1]) } else { pair[0] });
        }
        v = next;
    }
    v[0]
}

/// Lane layout the functional kernel follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub chips: usize,
    pub v_sets: usize,
    pub v_spread: usize,
    pub chunk: usize,
}

impl Layout {
    pub fn of(p: &PimModel) -> Self {
        Self {
            chips: p.chips as usize,
            v_sets: p.v_sets as usize,
            v_spread: (p.banks / p.v_sets) as usize,
            chunk: p.chunk as usize,
        }
    }
}

/// Online chunked softmax state.
#[derive(Debug, Clone, Copy)]
struct Running {
    max: f64,
    sum: f64,
}

/// Chunk softmax: per-chunk max/exp/sum with a running rescale, followed by a
/// final normalization. Returns the probabilities and the pipeline latency in
/// ns (`2·depth + ceil(n/chunk)·ceil(chunk/lanes)` cycles).
pub fn softmax_chunks(scores: &[f64], chunk: usize, p: &PimModel) -> Result<(Vec<f64>, f64), PimError> {
    if chunk == 0 {
        return Err(PimError::ZeroChunk);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(PimError::NonFinite(i));
    }
    let (e, chunk_max, run) = chunk_exps::<f64>(scores, chunk);
    let out = normalize(&e, &chunk_max, chunk, run);
    let n = scores.len() as u64;
    let cycles = if n == 0 {
        0
    } else {
        2 * p.softmax_depth + n.div_ceil(chunk as u64) * (chunk as u64).div_ceil(p.softmax_lanes)
    };
    Ok((out, p.ns(cycles)))
}

fn chunk_exps<T: Num>(scores: &[f64], chunk: usize) -> (Vec<T>, Vec<f64>, Running) {
    let mut e = Vec::with_capacity(scores.len());
    let mut maxes = Vec::with_capacity(scores.len().div_ceil(chunk));
    let mut run = Running { max: f64::NEG_INFINITY, sum: 0.0 };
    for c in scores.chunks(chunk) {
        let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut l = 0.0;
        for &s in c {
            let x = T::wide(exp(s - m));
            e.push(T::of(x));
            l = T::wide(l + x);
        }
        maxes.push(m);
        let new_max = run.max.max(m);
        run.sum = T::wide(run.sum * exp(run.max - new_max) + l * exp(m - new_max));
        run.max = new_max;
    }
    (e, maxes, run)
}

fn normalize<T: Num>(e: &[T], maxes: &[f64], chunk: usize, run: Running) -> Vec<T> {
    e.iter()
        .enumerate()
        .map(|(t, x)| {
            let scale = T::wide(exp(maxes[t / chunk] - run.max) / run.sum);
            T::of(T::wide(x.get() * scale))
        })
        .collect()
}

/// Dense reference `softmax(q·Kᵀ)·V` in f64 with max subtraction.
/// `k` and `v` are row-major `n × d`.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>, PimError> {
    let d = q.len();
    if d == 0 || !k.len().is_multiple_of(d) || v.len() != k.len() {
        return Err(PimError::Shape("k and v must be n × len(q)"));
    }
    let n = k.len() / d;
    let s: Vec<f64> = (0..n).map(|t| (0..d).map(|i| q[i] * k[t * d + i]).sum()).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| exp(x - m)).collect();
    let z: f64 = e.iter().sum();
    let mut o = vec![0.0; d];
    for t in 0..n {
        let p = e[t] / z;
        for i in 0..d {
            o[i] += p * v[t * d + i];
        }
    }
    Ok(o)
}

fn run<T: Num>(q: &[f64], k: &[f64], v: &[f64], lay: Layout) -> Result<Vec<f64>, PimError> {
    let d = q.len();
    if d == 0 || !k.len().is_multiple_of(d) || v.len() != k.len() {
        return Err(PimError::Shape("k and v must be n × len(q)"));
    }
    if !d.is_multiple_of(lay.chips) || !(d / lay.chips).is_multiple_of(lay.v_spread) {
        return Err(PimError::Shape("head dimension must split evenly over chips and V banks"));
    }
    let n = k.len() / d;
    let per_chip = d / lay.chips;
    let qh: Vec<T> = q.iter().map(|&x| T::of(x)).collect();

    // score: bank PU per chip, then tree across chips
    let mut scores = Vec::with_capacity(n);
    for t in 0..n {
        let partials: Vec<T> = (0..lay.chips)
            .map(|c| {
                let mut acc = T::of(0.0);
                for i in c * per_chip..(c + 1) * per_chip {
                    acc = acc.add(qh[i].mul(T::of(k[t * d + i])));
                }
                acc
            })
            .collect();
        let s = tree_sum(partials).get();
        if !s.is_finite() {
            return Err(PimError::NonFinite(t));
        }
        scores.push(s);
    }

    let (e, maxes, running) = chunk_exps::<T>(&scores, lay.chunk);
    let p = normalize(&e, &maxes, lay.chunk, running);

    // context: bank (set, segment) accumulates its slice of V over its tokens
    let seg = per_chip / lay.v_spread;
    let mut acc = vec![vec![T::of(0.0); d]; lay.v_sets];
    for t in 0..n {
        let set = t % lay.v_sets;
        for c in 0..lay.chips {
            for s in 0..lay.v_spread {
                for i in c * per_chip + s * seg..c * per_chip + (s + 1) * seg {
                    acc[set][i] = acc[set][i].add(p[t].mul(T::of(v[t * d + i])));
                }
            }
        }
    }
    Ok((0..d).map(|i| tree_sum(acc.iter().map(|a| a[i]).collect()).get()).collect())
}

/// Fused PIM attention for one head.
pub fn fused_attention(q: &[f64], k: &[f64], v: &[f64], lay: Layout, prec: Precision) -> Result<Vec<f64>, PimError> {
    match prec {
        Precision::Fp16 => run::<f16>(q, k, v, lay),
        Precision::Fp64 => run::<f64>(q, k, v, lay),
    }
}

/// Fused attention over buffer-sized tiles, merged with max/sum rescaling.
pub fn tiled_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lay: Layout,
    tile: usize,
) -> Result<Vec<f64>, PimError> {
    let d = q.len();
    if d == 0 || tile == 0 {
        return Err(PimError::Shape("empty head or tile"));
    }
    let n = k.len() / d;
    let mut out = vec![0.0; d];
    let mut merged = Running { max: f64::NEG_INFINITY, sum: 0.0 };
    for start in (0..n).step_by(tile) {
        let end = (start + tile).min(n);
        let ks = &k[start * d..end * d];
        let o = run::<f64>(q, ks, &v[start * d..end * d], lay)?;
        let s: Vec<f64> = (0..end - start).map(|t| (0..d).map(|i| q[i] * ks[t * d + i]).sum()).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l: f64 = s.iter().map(|x| exp(x - m)).sum();
        let new_max = merged.max.max(m);
        let a = merged.sum * exp(merged.max - new_max);
        let b = l * exp(m - new_max);
        for i in 0..d {
            out[i] = (out[i] * a + o[i] * b) / (a + b);
        }
        merged = Running { max: new_max, sum: a + b };
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / ‖b‖`.
pub fn relative_norm_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    crate::math::sqrt(num) / crate::math::sqrt(den).max(f64::MIN_POSITIVE)
}
