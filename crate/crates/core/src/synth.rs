//! Spurious-Motif style synthetic datasets.
//!
//! Each graph is a random base tree, one class motif (which fixes the
//! label) and one confounder motif, each motif hung off the base by a
//! single attachment edge. In the train split the confounder type equals
//! the type paired with the label with probability `bias` and is uniform
//! over the remaining types otherwise; val and test are always uniform.
//!
//! Graph `i` draws all of its randomness from ChaCha8 seeded with `seed`
//! on stream `i`. The first draw is the uniform `f64` that selects the
//! confounder type, so the split/label/confounder assignment can be
//! reproduced independently of the rest of the construction.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, Dataset, Split};

pub const GENERATOR: &str = "rcgrl-spurious-motif";
pub const GENERATOR_VERSION: u32 = 1;

/// Node feature rule for the nodes of a motif (or of the base graph).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureRule {
    Constant,
    DegreeOneHot,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub name: String,
    pub node_count: usize,
    pub edges: Vec<[usize; 2]>,
    pub node_feature_generator: FeatureRule,
}

impl MotifSpec {
    pub fn new(name: &str, node_count: usize, edges: &[[usize; 2]]) -> Self {
        MotifSpec {
            name: name.into(),
            node_count,
            edges: edges.to_vec(),
            node_feature_generator: FeatureRule::Noise,
        }
    }

    pub fn cycle5() -> Self {
        Self::new("cycle5", 5, &[[0, 1], [1, 2], [2, 3], [3, 4], [4, 0]])
    }

    /// Square with a roof.
    pub fn house() -> Self {
        Self::new("house", 5, &[[0, 1], [1, 2], [2, 3], [3, 0], [0, 4], [1, 4]])
    }

    /// Diamond (4-cycle with a chord) plus a tail.
    pub fn crane() -> Self {
        Self::new("crane", 5, &[[0, 1], [1, 2], [2, 3], [3, 0], [0, 2], [2, 4]])
    }

    pub fn triangle() -> Self {
        Self::new("triangle", 3, &[[0, 1], [1, 2], [2, 0]])
    }

    pub fn star4() -> Self {
        Self::new("star4", 4, &[[0, 1], [0, 2], [0, 3]])
    }

    pub fn path4() -> Self {
        Self::new("path4", 4, &[[0, 1], [1, 2], [2, 3]])
    }

    pub fn clique(n: usize) -> Self {
        let edges: Vec<[usize; 2]> = (0..n).flat_map(|a| (a + 1..n).map(move |b| [a, b])).collect();
        Self::new(&format!("clique{n}"), n, &edges)
    }

    /// Hub 0 joined to every node of the rim cycle `1..n`.
    pub fn wheel(n: usize) -> Self {
        let rim = n - 1;
        let mut edges: Vec<[usize; 2]> = (1..n).map(|v| [0, v]).collect();
        edges.extend((0..rim).map(|i| [1 + i, 1 + (i + 1) % rim]));
        Self::new(&format!("wheel{n}"), n, &edges)
    }

    /// Two paths of `rungs` nodes joined rung by rung.
    pub fn ladder(rungs: usize) -> Self {
        let mut edges: Vec<[usize; 2]> = (0..rungs).map(|i| [i, rungs + i]).collect();
        for i in 0..rungs.saturating_sub(1) {
            edges.push([i, i + 1]);
            edges.push([rungs + i, rungs + i + 1]);
        }
        Self::new(&format!("ladder{rungs}"), 2 * rungs, &edges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::Config(format!("motif `{}` has no nodes", self.name)));
        }
        if let Some(e) = self.edges.iter().find(|e| e[0] >= self.node_count || e[1] >= self.node_count || e[0] == e[1]) {
            return Err(Error::Config(format!("motif `{}` has invalid edge {e:?}", self.name)));
        }
        // connectivity
        let adj = adjacency(self.node_count, &self.edges);
        if bfs_dist(&adj, 0).iter().any(|&d| d == usize::MAX) {
            return Err(Error::Config(format!("motif `{}` is not connected", self.name)));
        }
        Ok(())
    }
}

/// Train-split bias: a probability in `[1/k, 1]`, or `"balanced"` (= `1/k`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bias {
    Value(f64),
    Named(BiasName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasName {
    Balanced,
}

impl Bias {
    pub fn probability(self, num_types: usize) -> f64 {
        match self {
            Bias::Value(b) => b,
            Bias::Named(BiasName::Balanced) => 1.0 / num_types as f64,
        }
    }
}

impl std::str::FromStr for Bias {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("balanced") {
            return Ok(Bias::Named(BiasName::Balanced));
        }
        s.parse::<f64>()
            .map(Bias::Value)
            .map_err(|_| Error::Config(format!("bias must be a number or `balanced`, got `{s}`")))
    }
}

impl std::fmt::Display for Bias {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bias::Value(b) => write!(f, "{b}"),
            Bias::Named(BiasName::Balanced) => f.write_str("balanced"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_graphs: usize,
    pub bias: Bias,
    pub seed: u64,
    /// Inclusive node-count range of the base tree.
    pub base_graph_size_range: (usize, usize),
    pub class_motifs: Vec<MotifSpec>,
    pub confounder_motifs: Vec<MotifSpec>,
    pub feature_dim: usize,
    pub base_feature_rule: FeatureRule,
    /// Fractions of graphs assigned to train and val; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Extra base edges attempted per base node; an attempt is kept only if
    /// it closes a cycle of length at least 7.
    pub noise_edge_rate: f64,
    pub large_subgraphs: bool,
    /// Base-size multiplier applied when `large_subgraphs` is on.
    pub large_multiplier: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_graphs: 5000,
            bias: Bias::Value(0.9),
            seed: 0,
            base_graph_size_range: (10, 20),
            class_motifs: vec![MotifSpec::cycle5(), MotifSpec::house(), MotifSpec::crane()],
            confounder_motifs: vec![MotifSpec::triangle(), MotifSpec::star4(), MotifSpec::path4()],
            feature_dim: 4,
            base_feature_rule: FeatureRule::Noise,
            train_fraction: 0.6,
            val_fraction: 0.2,
            noise_edge_rate: 0.1,
            large_subgraphs: false,
            large_multiplier: 3,
        }
    }
}

/// Shortest distance (in hops) of closed cycles allowed by noise edges, minus one.
const MIN_NOISE_DISTANCE: usize = 6;

impl GenConfig {
    pub fn num_classes(&self) -> usize {
        self.class_motifs.len()
    }

    pub fn bias_probability(&self) -> f64 {
        self.bias.probability(self.confounder_motifs.len())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_graphs;
        let train = ((n as f64) * self.train_fraction).round() as usize;
        let val = (((n as f64) * self.val_fraction).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }

    pub fn split_of(&self, index: usize) -> Split {
        let (train, val, _) = self.split_sizes();
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_graphs == 0 {
            return bad("n_graphs must be > 0".into());
        }
        let k = self.class_motifs.len();
        if k < 2 || self.confounder_motifs.len() != k {
            return bad(format!(
                "need matching class/confounder motif counts >= 2, got {} and {}",
                k,
                self.confounder_motifs.len()
            ));
        }
        let b = self.bias_probability();
        let lo = 1.0 / k as f64;
        if !(b >= lo - 1e-12 && b <= 1.0) {
            return bad(format!("bias {b} outside [{lo:.4}, 1]"));
        }
        let (lo_n, hi_n) = self.base_graph_size_range;
        if lo_n == 0 || lo_n > hi_n {
            return bad(format!("invalid base graph size range ({lo_n}, {hi_n})"));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0 + 1e-12
        {
            return bad("split fractions must lie in [0, 1] and sum to at most 1".into());
        }
        if !(self.noise_edge_rate >= 0.0) {
            return bad("noise_edge_rate must be >= 0".into());
        }
        if self.large_multiplier == 0 {
            return bad("large_multiplier must be >= 1".into());
        }
        for m in self.class_motifs.iter().chain(&self.confounder_motifs) {
            m.validate()?;
        }
        Ok(())
    }
}

/// Label and confounder type of graph `index`, from the first draw of its stream.
pub fn assign(cfg: &GenConfig, index: usize, rng: &mut ChaCha8Rng) -> (Split, usize, usize) {
    let k = cfg.num_classes();
    let split = cfg.split_of(index);
    let label = index % k;
    let bias = if split == Split::Train {
        cfg.bias_probability()
    } else {
        1.0 / k as f64
    };
    let u: f64 = rng.gen();
    let conf = if u < bias || k == 1 {
        label
    } else {
        // uniform over the k - 1 other types
        let v = (u - bias) / (1.0 - bias);
        let step = 1 + ((v * (k - 1) as f64) as usize).min(k - 2);
        (label + step) % k
    };
    (split, label, conf)
}

pub fn graph_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn adjacency(n: usize, edges: &[[usize; 2]]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &[a, b] in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn bfs_dist(adj: &[Vec<usize>], start: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut q = VecDeque::new();
    dist[start] = 0;
    q.push_back(start);
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                q.push_back(w);
            }
        }
    }
    dist
}

fn features<R: Rng>(rng: &mut R, rule: FeatureRule, degree: usize, dim: usize) -> Vec<f64> {
    match rule {
        FeatureRule::Constant => vec![1.0; dim],
        FeatureRule::DegreeOneHot => {
            let mut f = vec![0.0; dim];
            f[degree.min(dim - 1)] = 1.0;
            f
        }
        FeatureRule::Noise => (0..dim).map(|_| rng.gen::<f64>()).collect(),
    }
}

/// Builds graph `index` of the dataset described by `cfg`.
pub fn generate_graph(cfg: &GenConfig, index: usize) -> (AttributedGraph, usize) {
    let mut rng = graph_rng(cfg.seed, index);
    let (split, label, conf) = assign(cfg, index, &mut rng);
    let (lo, hi) = cfg.base_graph_size_range;
    let mult = if cfg.large_subgraphs { cfg.large_multiplier } else { 1 };
    let nb = rng.gen_range(lo..=hi) * mult;

    // undirected edges as (a, b, causal)
    let mut edges: Vec<(usize, usize, bool)> = Vec::new();
    for i in 1..nb {
        edges.push((rng.gen_range(0..i), i, false));
    }
    let attempts = (cfg.noise_edge_rate * nb as f64).round() as usize;
    for _ in 0..attempts {
        let a = rng.gen_range(0..nb);
        let b = rng.gen_range(0..nb);
        if a == b {
            continue;
        }
        let base: Vec<[usize; 2]> = edges.iter().map(|&(x, y, _)| [x, y]).collect();
        let dist = bfs_dist(&adjacency(nb, &base), a);
        if dist[b] >= MIN_NOISE_DISTANCE {
            edges.push((a, b, false));
        }
    }

    let class = &cfg.class_motifs[label];
    let confounder = &cfg.confounder_motifs[conf];
    let class_off = nb;
    let conf_off = nb + class.node_count;
    let n = conf_off + confounder.node_count;
    for &[a, b] in &class.edges {
        edges.push((a + class_off, b + class_off, true));
    }
    for &[a, b] in &confounder.edges {
        edges.push((a + conf_off, b + conf_off, false));
    }
    edges.push((rng.gen_range(0..nb), class_off + rng.gen_range(0..class.node_count), false));
    edges.push((rng.gen_range(0..nb), conf_off + rng.gen_range(0..confounder.node_count), false));

    // features, by construction position
    let motif_degree = |m: &MotifSpec, v: usize| m.edges.iter().filter(|e| e[0] == v || e[1] == v).count();
    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(n);
    let base_adj = adjacency(nb, &edges.iter().filter(|e| e.0 < nb && e.1 < nb).map(|e| [e.0, e.1]).collect::<Vec<_>>());
    for v in 0..nb {
        feats.push(features(&mut rng, cfg.base_feature_rule, base_adj[v].len(), cfg.feature_dim));
    }
    for v in 0..class.node_count {
        feats.push(features(&mut rng, class.node_feature_generator, motif_degree(class, v), cfg.feature_dim));
    }
    for v in 0..confounder.node_count {
        feats.push(features(
            &mut rng,
            confounder.node_feature_generator,
            motif_degree(confounder, v),
            cfg.feature_dim,
        ));
    }

    // hide construction order: relabel nodes and shuffle edge order
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    edges.shuffle(&mut rng);
    let mut node_feat = Array2::zeros((n, cfg.feature_dim));
    for (old, f) in feats.into_iter().enumerate() {
        for (j, x) in f.into_iter().enumerate() {
            node_feat[[perm[old], j]] = x;
        }
    }
    let mut edge_index = Vec::with_capacity(edges.len() * 2);
    let mut mask = Vec::with_capacity(edges.len() * 2);
    for (a, b, causal) in edges {
        let (a, b) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
        edge_index.push([perm[a], perm[b]]);
        edge_index.push([perm[b], perm[a]]);
        mask.push(causal);
        mask.push(causal);
    }

    let graph = AttributedGraph {
        id: format!("g{index:06}"),
        num_nodes: n,
        node_feat,
        edge_index,
        label,
        causal_edge_mask: Some(mask),
        split,
    };
    (graph, conf)
}

/// Generates a full dataset; deterministic in `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::new(cfg.num_classes(), cfg.feature_dim);
    let mut conf_types = serde_json::Map::new();
    for i in 0..cfg.n_graphs {
        let (g, conf) = generate_graph(cfg, i);
        conf_types.insert(g.id.clone(), json!(conf));
        ds.graphs.push(g);
    }
    ds.metadata.insert("generator".into(), json!(GENERATOR));
    ds.metadata.insert("generator_version".into(), json!(GENERATOR_VERSION));
    ds.metadata.insert("bias".into(), json!(cfg.bias_probability()));
    ds.metadata.insert("seed".into(), json!(cfg.seed));
    ds.metadata.insert(
        "gen_config".into(),
        serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
    );
    ds.metadata.insert("confounder_types".into(), Value::Object(conf_types));
    Ok(ds)
}

/// Counts of `(split, class, confounder type)` cells.
pub type BiasTable = BTreeMap<(Split, usize, usize), usize>;

/// Tabulates the class/confounder co-occurrence per split.
pub fn bias_report(ds: &Dataset) -> Result<BiasTable> {
    let types = ds
        .metadata
        .get("confounder_types")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Data("dataset has no generator metadata (`confounder_types`)".into()))?;
    let k = ds.num_classes;
    let mut table = BiasTable::new();
    for split in Split::ALL {
        for c in 0..k {
            for t in 0..k {
                table.insert((split, c, t), 0);
            }
        }
    }
    for g in &ds.graphs {
        let t = types
            .get(&g.id)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Data(format!("no confounder type recorded for `{}`", g.id)))?
            as usize;
        if t >= k {
            return Err(Error::Data(format!("confounder type {t} of `{}` out of range", g.id)));
        }
        *table.entry((g.split, g.label, t)).or_default() += 1;
    }
    Ok(table)
}

/// Pearson chi-square statistic of independence between class and
/// confounder type within one split.
pub fn chi_square_independence(table: &BiasTable, split: Split, k: usize) -> f64 {
    let cell = |c: usize, t: usize| *table.get(&(split, c, t)).unwrap_or(&0) as f64;
    let total: f64 = (0..k).flat_map(|c| (0..k).map(move |t| (c, t))).map(|(c, t)| cell(c, t)).sum();
    if total == 0.0 {
        return 0.0;
    }
    let row: Vec<f64> = (0..k).map(|c| (0..k).map(|t| cell(c, t)).sum()).collect();
    let col: Vec<f64> = (0..k).map(|t| (0..k).map(|c| cell(c, t)).sum()).collect();
    let mut chi = 0.0;
    for c in 0..k {
        for t in 0..k {
            let e = row[c] * col[t] / total;
            if e > 0.0 {
                chi += (cell(c, t) - e).powi(2) / e;
            }
        }
    }
    chi
}
