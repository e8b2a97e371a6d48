//! Bagged regression trees (CART, squared-error splits).

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::PredictError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn fit(x: &[Vec<f64>], y: &[f64], idx: Vec<usize>, p: &ForestParams) -> Self {
        let mut t = Tree { nodes: Vec::new() };
        let sorted = (0..x[0].len())
            .map(|f| {
                let mut v = idx.clone();
                v.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
                v
            })
            .collect();
        t.grow(x, y, sorted, 0, p);
        t
    }

    /// `sorted[f]` holds the node's samples ordered by feature `f`.
    fn grow(&mut self, x: &[Vec<f64>], y: &[f64], sorted: Vec<Vec<usize>>, depth: usize, p: &ForestParams) -> usize {
        let idx = &sorted[0];
        let n = idx.len() as f64;
        let total: f64 = idx.iter().map(|&i| y[i]).sum();
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(total / n));
        if depth >= p.depth || idx.len() < 2 * p.min_leaf.max(1) {
            return me;
        }
        let parent = idx.iter().map(|&i| y[i] * y[i]).sum::<f64>() - total * total / n;
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let v = y[order[k]];
                ls += v;
                lq += v * v;
                let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
                if a == b || k + 1 < p.min_leaf || order.len() - k - 1 < p.min_leaf {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let rs = total - ls;
                let rq = parent + total * total / n - lq;
                let sse = (lq - ls * ls / nl) + (rq - rs * rs / nr);
                if best.is_none_or(|(s, _, _)| sse < s) {
                    best = Some((sse, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((sse, feature, threshold)) = best else { return me };
        if sse >= parent * (1.0 - 1e-12) {
            return me;
        }
        let mut l = Vec::with_capacity(sorted.len());
        let mut r = Vec::with_capacity(sorted.len());
        for order in sorted {
            let (a, b): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| x[i][feature] <= threshold);
            l.push(a);
            r.push(b);
        }
        let left = self.grow(x, y, l, depth + 1, p);
        let right = self.grow(x, y, r, depth + 1, p);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], p: &ForestParams) -> Result<Self, PredictError> {
        if x.is_empty() {
            return Err(PredictError::Empty);
        }
        if x.len() != y.len() {
            return Err(PredictError::LengthMismatch(x.len(), y.len()));
        }
        let n = x.len();
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let trees = (0..p.trees.max(1))
            .map(|_| {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                Tree::fit(x, y, idx, p)
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f64).max(0.0)
    }
}
