//! Item-level user-feedback features from the interaction matrix.
//!
//! User and item embeddings are smoothed over the normalized bipartite graph
//! (LightGCN-style propagation) and trained with a pairwise ranking loss.
//! Only the item rows are exported; downstream models treat them as frozen
//! inputs.

use std::path::Path;

use log::debug;

use crate::corpus::{load_features, save_features, InteractionMatrix};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, AdamState, ParamTable, Scalar, SplitMix64, Tensor};

pub const FEEDBACK_FILE: &str = "feedback.bndf";

/// Symmetrically normalized adjacency over `n_users + n_items` nodes in CSR
/// form. Users occupy rows `0..n_users`, items the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl BipartiteGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Stored `(column, value)` entries of one node row.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[node]..self.row_ptr[node + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Dense value at `(r, c)`; zero off the interaction pattern.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, v)| v)
    }

    /// `out = A x` for an `n_nodes x d` matrix `x`.
    fn apply<S: Scalar>(&self, x: &[S], out: &mut [S], d: usize) {
        for r in 0..self.n_nodes() {
            let orow = &mut out[r * d..(r + 1) * d];
            orow.iter_mut().for_each(|v| *v = S::zero());
            for (c, w) in self.row(r) {
                let w = S::of(w);
                for (o, &v) in orow.iter_mut().zip(&x[c * d..(c + 1) * d]) {
                    *o = *o + w * v;
                }
            }
        }
    }
}

/// Builds `D^-1/2 A D^-1/2` for the bipartite graph of `d`.
pub fn build_graph(d: &InteractionMatrix) -> BipartiteGraph {
    let (m, n) = (d.n_users(), d.n_items());
    let user_deg: Vec<f64> = (0..m).map(|u| d.items_of(u).len() as f64).collect();
    let item_deg: Vec<f64> = d.item_counts().iter().map(|&c| c as f64).collect();
    let mut item_users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (u, i) in d.pairs() {
        item_users[i].push(u);
    }
    let mut row_ptr = vec![0];
    let mut cols = Vec::with_capacity(2 * d.nnz());
    let mut vals = Vec::with_capacity(2 * d.nnz());
    for u in 0..m {
        for &i in d.items_of(u) {
            cols.push(m + i);
            vals.push(1.0 / (user_deg[u] * item_deg[i]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    for (i, users) in item_users.iter().enumerate() {
        for &u in users {
            cols.push(u);
            vals.push(1.0 / (user_deg[u] * item_deg[i]).sqrt());
        }
        row_ptr.push(cols.len());
    }
    BipartiteGraph {
        n_users: m,
        n_items: n,
        row_ptr,
        cols,
        vals,
    }
}

/// Mean of `E0, A E0, ..., A^K E0`.
pub fn propagate<S: Scalar>(e0: &Tensor<S>, graph: &BipartiteGraph, layers: usize) -> Result<Tensor<S>> {
    if e0.rows() != graph.n_nodes() {
        return Err(Error::shape("propagate", e0.shape(), (graph.n_nodes(), e0.cols())));
    }
    let d = e0.cols();
    let mut acc = e0.data().to_vec();
    let mut cur = e0.data().to_vec();
    let mut next = vec![S::zero(); cur.len()];
    for _ in 0..layers {
        graph.apply(&cur, &mut next, d);
        for (a, &v) in acc.iter_mut().zip(&next) {
            *a = *a + v;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let inv = S::one() / S::of_usize(layers + 1);
    acc.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(e0.rows(), d, acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub neg_per_pos: usize,
    pub batch_size: usize,
    /// Squared-L2 weight on the initial embeddings of each batch's nodes.
    pub l2: f64,
    pub seed: u64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            epochs: 30,
            lr: 1e-2,
            neg_per_pos: 1,
            batch_size: 2048,
            l2: 1e-4,
            seed: 3,
        }
    }
}

/// Frozen `n x d` item feedback features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackTable {
    table: Tensor<f32>,
}

impl FeedbackTable {
    pub fn new(mut table: Tensor<f32>) -> Self {
        table.requires_grad = false;
        table.grad = None;
        Self { table }
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn n_items(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_features(path, &self.table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(load_features(path)?))
    }

    /// Spearman correlation between row norms and interaction counts.
    pub fn popularity_correlation(&self, counts: &[usize]) -> f64 {
        let norms: Vec<f64> = (0..self.n_items())
            .map(|i| self.table.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect();
        let counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        pearson(&average_ranks(&norms), &average_ranks(&counts))
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Trains propagated embeddings with BPR over `(user, positive, negative)`
/// triples, negatives drawn uniformly from the user's non-interacted items,
/// and exports the item rows.
pub fn train_feedback(d: &InteractionMatrix, cfg: &FeedbackConfig) -> Result<FeedbackTable> {
    if d.nnz() == 0 {
        return Err(Error::Empty("interaction matrix"));
    }
    if cfg.dim == 0 || cfg.batch_size == 0 || cfg.neg_per_pos == 0 {
        return Err(Error::Config("feedback dim, batch_size and neg_per_pos must be >= 1".into()));
    }
    let graph = build_graph(d);
    let (m, n, dim) = (d.n_users(), d.n_items(), cfg.dim);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut params = ParamTable::<f32>::new();
    params.insert("embedding", xavier_uniform(m + n, dim, &mut rng)?)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut positives: Vec<(usize, usize)> = d.pairs().collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut positives);
        let mut epoch_loss = 0.0;
        for batch in positives.chunks(cfg.batch_size) {
            let e0 = params.get("embedding")?;
            let e = propagate(e0, &graph, cfg.layers)?;
            let mut g = vec![0f32; e.len()];
            let mut g0 = vec![0f32; e.len()];
            let count = (batch.len() * cfg.neg_per_pos) as f32;
            for &(u, i) in batch {
                for _ in 0..cfg.neg_per_pos {
                    let j = sample_negative(d, u, &mut rng);
                    let (ur, ir, jr) = (u, m + i, m + j);
                    let x: f32 = (0..dim)
                        .map(|c| e.get(ur, c) * (e.get(ir, c) - e.get(jr, c)))
                        .sum();
                    // d/dx of -ln sigmoid(x)
                    let s = -1.0 / (1.0 + x.exp());
                    epoch_loss += softplus(-x) as f64;
                    let w = s / count;
                    for c in 0..dim {
                        let (eu, ei, ej) = (e.get(ur, c), e.get(ir, c), e.get(jr, c));
                        g[ur * dim + c] += w * (ei - ej);
                        g[ir * dim + c] += w * eu;
                        g[jr * dim + c] -= w * eu;
                    }
                    let l2 = (2.0 * cfg.l2) as f32 / count;
                    for r in [ur, ir, jr] {
                        for c in 0..dim {
                            g0[r * dim + c] += l2 * e0.get(r, c);
                        }
                    }
                }
            }
            // The propagation operator is symmetric, so its adjoint is itself.
            let back = propagate(&Tensor::new(m + n, dim, g)?, &graph, cfg.layers)?;
            let grad: Vec<f32> = back.data().iter().zip(&g0).map(|(a, b)| a + b).collect();
            params.get_mut("embedding")?.grad = Some(grad);
            adam.step(&mut params)?;
        }
        debug!(
            "feedback epoch {epoch}: bpr {:.5}",
            epoch_loss / (positives.len() * cfg.neg_per_pos) as f64
        );
    }
    let e = propagate(params.get("embedding")?, &graph, cfg.layers)?;
    let items: Vec<usize> = (m..m + n).collect();
    Ok(FeedbackTable::new(e.select_rows(&items)))
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sample_negative(d: &InteractionMatrix, u: usize, rng: &mut SplitMix64) -> usize {
    let n = d.n_items();
    if d.items_of(u).len() >= n {
        return rng.below(n);
    }
    loop {
        let j = rng.below(n);
        if !d.contains(u, j) {
            return j;
        }
    }
}
