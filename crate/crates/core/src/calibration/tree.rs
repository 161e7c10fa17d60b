//! CART regression trees and bagged forests.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NFEAT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Features considered at each split; `NFEAT` or more means all of them.
    pub mtry: usize,
}

impl Tree {
    pub fn predict_one(&self, x: &[f64; NFEAT]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Copy)]
struct Entry {
    x: f64,
    y: f64,
    row: u32,
}

struct Builder {
    params: TreeParams,
    nodes: Vec<Node>,
    /// Per feature, the sample ordered by (feature value, target). Every
    /// node owns the same index range in all of them.
    orders: Vec<Vec<Entry>>,
    goes_left: Vec<bool>,
    scratch: Vec<Entry>,
}

/// Grow a tree on the rows listed in `rows` (repeats allowed, as in a
/// bootstrap sample). `rng` is only consulted when `mtry < NFEAT`.
pub fn grow_tree(x: &[[f64; NFEAT]], y: &[f64], rows: &[usize], params: TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    // Ordering ties by target makes the partial sums independent of how rows
    // are numbered, so a tree grown on a copied bootstrap sample matches one
    // grown on indices into the original data. Stable partitioning keeps
    // every order sorted down the tree.
    let orders: Vec<Vec<Entry>> = (0..NFEAT)
        .map(|f| {
            let mut r: Vec<Entry> = rows.iter().map(|&i| Entry { x: x[i][f], y: y[i], row: i as u32 }).collect();
            r.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
            r
        })
        .collect();
    grow_sorted(x.len(), orders, params, rng)
}

fn grow_sorted(n_rows: usize, orders: Vec<Vec<Entry>>, params: TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    let n = orders[0].len();
    let mut b = Builder { params, nodes: Vec::new(), orders, goes_left: vec![false; n_rows], scratch: Vec::with_capacity(n) };
    b.grow(0, n, 0, rng);
    Tree { nodes: b.nodes }
}

impl Builder {
    fn grow(&mut self, lo: usize, hi: usize, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let rows = &self.orders[0][lo..hi];
        let n = rows.len() as f64;
        let sum: f64 = rows.iter().map(|e| e.y).sum();
        let mean = sum / n;
        self.nodes.push(Node::Leaf { value: mean });

        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * self.params.min_leaf.max(1) {
            return id;
        }
        let sse: f64 = rows.iter().map(|e| (e.y - mean).powi(2)).sum();
        if sse <= 1e-12 * (1.0 + mean * mean) * n {
            return id;
        }

        let features: Vec<usize> = if self.params.mtry >= NFEAT {
            (0..NFEAT).collect()
        } else {
            let mut f = sample(rng, NFEAT, self.params.mtry.max(1)).into_vec();
            f.sort_unstable();
            f
        };

        let Some((feature, threshold, n_left)) = self.best_split(lo, hi, &features, sum) else {
            return id;
        };
        let mid = lo + n_left;
        for e in &self.orders[feature][lo..mid] {
            self.goes_left[e.row as usize] = true;
        }
        for f in 0..NFEAT {
            if f != feature {
                self.partition(f, lo, hi);
            }
        }
        for e in &self.orders[feature][lo..mid] {
            self.goes_left[e.row as usize] = false;
        }
        let l = self.grow(lo, mid, depth + 1, rng);
        let r = self.grow(mid, hi, depth + 1, rng);
        self.nodes[id] = Node::Split { feature, threshold, left: l, right: r };
        id
    }

    /// Stable partition of `orders[f][lo..hi]` by `goes_left`.
    fn partition(&mut self, f: usize, lo: usize, hi: usize) {
        let order = &mut self.orders[f];
        self.scratch.clear();
        let mut w = lo;
        for i in lo..hi {
            let e = order[i];
            if self.goes_left[e.row as usize] {
                order[w] = e;
                w += 1;
            } else {
                self.scratch.push(e);
            }
        }
        order[w..hi].copy_from_slice(&self.scratch);
    }

    /// Split maximizing the reduction in squared error, i.e. maximizing
    /// `S_L²/n_L + S_R²/n_R`. Ties keep the first feature and lowest threshold.
    fn best_split(&self, lo: usize, hi: usize, features: &[usize], total: f64) -> Option<(usize, f64, usize)> {
        let n = hi - lo;
        let min_leaf = self.params.min_leaf.max(1);
        let base = total * total / n as f64;
        let mut best: Option<(f64, usize, f64, usize)> = None;
        for &f in features {
            let rows = &self.orders[f][lo..hi];
            let mut left_sum = 0.0;
            for (i, w) in rows.windows(2).enumerate() {
                left_sum += w[0].y;
                let nl = i + 1;
                let (v, next) = (w[0].x, w[1].x);
                if nl < min_leaf || n - nl < min_leaf || v == next {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64;
                if score - base <= 1e-12 * base.abs().max(1.0) {
                    continue;
                }
                if best.is_none_or(|(s, ..)| score > s) {
                    best = Some((score, f, v + (next - v) / 2.0, nl));
                }
            }
        }
        best.map(|(_, f, t, nl)| (f, t, nl))
    }
}

/// Deterministic per-tree seed.
pub fn tree_seed(seed: u64, tree: usize) -> u64 {
    let mut z = seed ^ (tree as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The bootstrap sample for tree `tree` and the generator left positioned
/// for that tree's feature draws.
pub fn bootstrap(n: usize, seed: u64, tree: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, tree));
    let rows = (0..n).map(|_| rng.random_range(0..n)).collect();
    (rows, rng)
}

pub fn grow_forest(x: &[[f64; NFEAT]], y: &[f64], n_trees: usize, params: TreeParams, seed: u64) -> Vec<Tree> {
    // Sort once; each bootstrap order is the full order with every row
    // repeated as often as it was drawn.
    let sorted: Vec<Vec<u32>> = (0..NFEAT)
        .map(|f| {
            let mut r: Vec<u32> = (0..x.len() as u32).collect();
            r.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]).then(y[a as usize].total_cmp(&y[b as usize])));
            r
        })
        .collect();
    let mut counts = vec![0u32; x.len()];
    (0..n_trees)
        .map(|t| {
            let (rows, mut rng) = bootstrap(x.len(), seed, t);
            counts.fill(0);
            for &r in &rows {
                counts[r] += 1;
            }
            let orders = sorted
                .iter()
                .enumerate()
                .map(|(f, order)| {
                    let mut out = Vec::with_capacity(rows.len());
                    for &r in order {
                        let e = Entry { x: x[r as usize][f], y: y[r as usize], row: r };
                        out.extend(std::iter::repeat_n(e, counts[r as usize] as usize));
                    }
                    out
                })
                .collect();
            grow_sorted(x.len(), orders, params, &mut rng)
        })
        .collect()
}
