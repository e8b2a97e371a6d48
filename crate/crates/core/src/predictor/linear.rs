//! Ordinary least squares with an intercept.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::PredictError;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Feature weights followed by the intercept.
    pub coef: Vec<f64>,
}

impl LinearModel {
    /// Fits `y ≈ x·w + b`. Columns are rescaled before solving the normal
    /// equations; a tiny ridge keeps rank-deficient windows solvable.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self, PredictError> {
        if x.is_empty() {
            return Err(PredictError::Empty);
        }
        if x.len() != y.len() {
            return Err(PredictError::LengthMismatch(x.len(), y.len()));
        }
        let d = x[0].len() + 1;
        let row = |r: &Vec<f64>, j: usize| if j + 1 == d { 1.0 } else { r[j] };
        let mut scale = vec![0.0f64; d];
        for r in x {
            for (j, s) in scale.iter_mut().enumerate() {
                *s = s.max(row(r, j).abs());
            }
        }
        for s in scale.iter_mut() {
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        let mut a = vec![vec![0.0; d + 1]; d];
        for (r, &t) in x.iter().zip(y) {
            for i in 0..d {
                let xi = row(r, i) / scale[i];
                for j in 0..d {
                    a[i][j] += xi * row(r, j) / scale[j];
                }
                a[i][d] += xi * t;
            }
        }
        let trace: f64 = (0..d).map(|i| a[i][i]).sum();
        for (i, r) in a.iter_mut().enumerate() {
            r[i] += 1e-12 * trace.max(1.0);
        }
        let w = solve(a);
        Ok(Self { coef: w.iter().zip(&scale).map(|(w, s)| w / s).collect() })
    }

    /// Raw model output.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.coef.len() - 1;
        x.iter().zip(&self.coef[..d]).map(|(a, b)| a * b).sum::<f64>() + self.coef[d]
    }

    /// Model output clamped to be a latency.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let v = self.eval(x);
        if v.is_finite() { v.max(0.0) } else { 0.0 }
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        let piv = a[col][col];
        if piv.abs() < 1e-300 {
            continue;
        }
        for r in col + 1..n {
            let f = a[r][col] / piv;
            if f != 0.0 {
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * w[j]).sum();
        w[i] = if a[i][i].abs() < 1e-300 { 0.0 } else { (a[i][n] - s) / a[i][i] };
    }
    w
}
