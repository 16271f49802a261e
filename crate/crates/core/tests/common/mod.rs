//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's numeric code: message passing is
//! recomputed with dense adjacency matrices and plain loops, gradients with
//! central finite differences.

#![allow(dead_code)]

pub mod checks;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcgrl::model::{EncoderParams, MpLayerParams, ParamSet};
use rcgrl::{AttributedGraph, Split};

pub type Mat = Array2<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random graph with `n` nodes, `d` features and roughly `density * n^2`
/// directed edges (self-loops and duplicates allowed).
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, d: usize, density: f64, num_classes: usize) -> AttributedGraph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if rng.gen::<f64>() < density {
                edges.push([a, b]);
            }
        }
    }
    let m = edges.len();
    AttributedGraph {
        id: format!("r{}", rng.gen::<u32>()),
        num_nodes: n,
        node_feat: Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)),
        edge_index: edges,
        label: rng.gen_range(0..num_classes),
        causal_edge_mask: Some((0..m).map(|_| rng.gen()).collect()),
        split: Split::Train,
    }
}

/// Naive `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Mat::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Dense weighted adjacency: `adj[dst][src]` sums the scales of all
/// `src -> dst` edges.
pub fn dense_adjacency(n: usize, edges: &[[usize; 2]], scale: Option<&[f64]>) -> Mat {
    let mut adj = Mat::zeros((n, n));
    for (e, &[s, t]) in edges.iter().enumerate() {
        adj[[t, s]] += scale.map_or(1.0, |sc| sc[e]);
    }
    adj
}

/// One layer as `tanh(H Ws + 1 bs + A H Wa + (A 1) ba)`.
pub fn dense_layer(h: &Mat, adj: &Mat, p: &MpLayerParams) -> Mat {
    let n = h.nrows();
    let own = matmul(h, &p.w_self);
    let agg = matmul(&matmul(adj, h), &p.w_agg);
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let d_out = p.w_self.ncols();
    Mat::from_shape_fn((n, d_out), |(i, j)| {
        (own[[i, j]] + p.b_self[[0, j]] + agg[[i, j]] + deg[i] * p.b_agg[[0, j]]).tanh()
    })
}

/// Whole-encoder oracle for one graph: `u` full layers, the rest on the
/// scaled adjacency, then mean pooling and the linear head.
pub fn dense_encode(theta: &EncoderParams, g: &AttributedGraph, scale: Option<&[f64]>, u: usize) -> (Vec<f64>, Vec<f64>) {
    let full = dense_adjacency(g.num_nodes, &g.edge_index, None);
    let masked = dense_adjacency(g.num_nodes, &g.edge_index, scale);
    let mut h = g.node_feat.clone();
    for (k, layer) in theta.layers.iter().enumerate() {
        let adj = if k < u || scale.is_none() { &full } else { &masked };
        h = dense_layer(&h, adj, layer);
    }
    let width = h.ncols();
    let mut pooled = Mat::zeros((1, width));
    if g.num_nodes > 0 {
        for i in 0..g.num_nodes {
            for j in 0..width {
                pooled[[0, j]] += h[[i, j]];
            }
        }
        pooled.mapv_inplace(|x| x / g.num_nodes as f64);
    }
    let logits = matmul(&pooled, &theta.head_w);
    let logits: Vec<f64> = (0..logits.ncols()).map(|j| logits[[0, j]] + theta.head_b[[0, j]]).collect();
    (pooled.row(0).to_vec(), logits)
}

/// Central finite-difference gradient of `f` for every scalar in `params`.
pub fn numeric_grad<P: ParamSet + Clone>(params: &P, eps: f64, mut f: impl FnMut(&P) -> f64) -> Vec<Mat> {
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.dim()).collect();
    let mut out = Vec::new();
    for (ti, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Mat::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][[i, j]] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][[i, j]] -= eps;
                g[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * eps);
            }
        }
        out.push(g);
    }
    out
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|, floor)` in the
/// Euclidean norm.
pub fn max_rel_error(analytic: &[Mat], numeric: &[Mat], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).mapv(|x| x * x).sum().sqrt();
            let na = a.mapv(|x| x * x).sum().sqrt();
            let nn = n.mapv(|x| x * x).sum().sqrt();
            diff / na.max(nn).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Whether `pattern` occurs as an induced subgraph of the undirected graph
/// given by `adj` (brute-force backtracking).
pub fn has_induced(adj: &[Vec<bool>], pattern_n: usize, pattern: &[[usize; 2]]) -> bool {
    let mut padj = vec![vec![false; pattern_n]; pattern_n];
    for &[a, b] in pattern {
        padj[a][b] = true;
        padj[b][a] = true;
    }
    let mut map = Vec::with_capacity(pattern_n);
    let mut used = vec![false; adj.len()];
    fn rec(adj: &[Vec<bool>], padj: &[Vec<bool>], map: &mut Vec<usize>, used: &mut [bool]) -> bool {
        let k = map.len();
        if k == padj.len() {
            return true;
        }
        for v in 0..adj.len() {
            if used[v] {
                continue;
            }
            if (0..k).all(|i| adj[map[i]][v] == padj[i][k]) {
                used[v] = true;
                map.push(v);
                if rec(adj, padj, map, used) {
                    return true;
                }
                map.pop();
                used[v] = false;
            }
        }
        false
    }
    rec(adj, &padj, &mut map, &mut used)
}

pub fn undirected_adjacency(g: &AttributedGraph) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; g.num_nodes]; g.num_nodes];
    for &[a, b] in &g.edge_index {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    adj
}
