//! Bagged regression trees.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub mtry: usize,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Grows a tree on the rows `rows` of `x`.
    pub fn grow(x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>, params: TreeParams, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.build(x, y, rows, 0, params, rng);
        tree
    }

    fn build(&mut self, x: &DMatrix<f64>, y: &[f64], rows: Vec<usize>, depth: usize, params: TreeParams, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });
        if depth >= params.max_depth || rows.len() < 2 * params.min_leaf {
            return at;
        }
        let Some((feature, threshold)) = best_split(x, y, &rows, params, rng) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[(i, feature)] <= threshold);
        let left = self.build(x, y, l, depth + 1, params, rng);
        let right = self.build(x, y, r, depth + 1, params, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Split with the largest reduction in squared error among `mtry` random
/// features; `None` when no split leaves `min_leaf` rows on both sides or
/// improves the fit.
fn best_split(x: &DMatrix<f64>, y: &[f64], rows: &[usize], params: TreeParams, rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
    let p = x.ncols();
    let mut features = sample(rng, p, params.mtry.clamp(1, p)).into_vec();
    features.sort_unstable();
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let base = total * total / n as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = rows.to_vec();
    for &f in &features {
        order.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += y[order[i]];
            let nl = i + 1;
            let (xv, xn) = (x[(order[i], f)], x[(order[i + 1], f)]);
            if nl < params.min_leaf || n - nl < params.min_leaf || xv == xn {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64 - base;
            if gain > 1e-12 * base.abs().max(1e-300) && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, xv + (xn - xv) / 2.0));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

/// Bootstrap sample of `n` row indices.
pub fn bootstrap(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}
