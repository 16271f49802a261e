//! Evaluation metrics and diagnostics: accuracy / ROC-AUC, confounder
//! ratios against ground-truth masks, greedy Granger-style pruning, the
//! removal-position sweep, and multi-seed comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{make_batch, AttributedGraph, Dataset, Split};
use crate::losses::cross_entropy;
use crate::model::{argmax_rows, compute_iv, encode, forward, remove_confounders, EncoderParams, IvGenParams, ModelParams, Pipeline};
use crate::tape::Mat;
use crate::trainer::{train, Mode, TrainConfig};

/// Graphs per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean cross-entropy of the evaluated pipeline.
    pub loss: f64,
    /// Only for two-class tasks with both classes present.
    pub roc_auc: Option<f64>,
    /// Fraction of non-causal edges surviving removal, when masks exist.
    pub confounder_ratio: Option<f64>,
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Logits of `params` under `pipeline` for every graph, in order.
pub fn logits(params: &ModelParams, pipeline: &Pipeline, graphs: &[&AttributedGraph]) -> Result<Mat> {
    let k = params.theta.num_classes();
    let mut out = Mat::zeros((graphs.len(), k));
    for (c, chunk) in graphs.chunks(EVAL_CHUNK).enumerate() {
        let batch = make_batch(chunk)?;
        let res = forward(params, pipeline, &batch)?;
        out.slice_mut(ndarray::s![c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len(), ..])
            .assign(&res.logits);
    }
    Ok(out)
}

/// Accuracy, loss and (binary) ROC-AUC of the pipeline on `graphs`.
pub fn evaluate(
    params: &ModelParams,
    pipeline: &Pipeline,
    graphs: &[&AttributedGraph],
    num_classes: usize,
) -> Result<MetricsRecord> {
    if graphs.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let lg = logits(params, pipeline, graphs)?;
    let preds = argmax_rows(&lg);
    let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    let loss = lg
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(row, &y)| cross_entropy(row.as_slice().unwrap_or(&row.to_vec()), y))
        .sum::<f64>()
        / graphs.len() as f64;
    let roc_auc = if num_classes == 2 {
        let scores: Vec<f64> = lg.rows().into_iter().map(|r| softmax_row(&r.to_vec())[1]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        roc_auc(&scores, &positive)
    } else {
        None
    };
    let confounder_ratio = if pipeline.use_removal && graphs.iter().all(|g| g.causal_edge_mask.is_some()) {
        Some(confounder_ratio(&params.phi, graphs, pipeline.drop_fraction)?.kept_confounder_fraction)
    } else {
        None
    };
    Ok(MetricsRecord {
        total: graphs.len(),
        correct,
        accuracy: correct as f64 / graphs.len() as f64,
        loss,
        roc_auc,
        confounder_ratio,
    })
}

/// ROC-AUC as the Mann-Whitney rank statistic; each tied positive/negative
/// pair counts one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Twice the number of correctly ordered pairs, counted in integers.
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u64, 0u64);
        for &k in &idx[i..j] {
            if positive[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Some(twice as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfounderRatio {
    pub kept_confounder_fraction: f64,
    pub causal_recall: f64,
    pub removal_precision: f64,
    pub causal_edges: usize,
    pub causal_kept: usize,
    pub noncausal_edges: usize,
    pub noncausal_kept: usize,
}

impl ConfounderRatio {
    /// Ratios from raw counts; empty denominators give NaN.
    pub fn from_counts(causal_edges: usize, causal_kept: usize, noncausal_edges: usize, noncausal_kept: usize) -> Self {
        let dropped = (causal_edges - causal_kept) + (noncausal_edges - noncausal_kept);
        let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
        ConfounderRatio {
            kept_confounder_fraction: ratio(noncausal_kept, noncausal_edges),
            causal_recall: ratio(causal_kept, causal_edges),
            removal_precision: ratio(noncausal_edges - noncausal_kept, dropped),
            causal_edges,
            causal_kept,
            noncausal_edges,
            noncausal_kept,
        }
    }

    /// Fraction of all edges that are non-causal.
    pub fn noncausal_prior(&self) -> f64 {
        self.noncausal_edges as f64 / (self.noncausal_edges + self.causal_edges) as f64
    }
}

/// Counts how the removal step treats causal and non-causal edges given
/// ground-truth masks.
pub fn confounder_ratio(phi: &IvGenParams, graphs: &[&AttributedGraph], drop_fraction: f64) -> Result<ConfounderRatio> {
    if graphs.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let (mut ce, mut ck, mut ne, mut nk) = (0, 0, 0, 0);
    for chunk in graphs.chunks(EVAL_CHUNK) {
        let batch = make_batch(chunk)?;
        let mask = batch.causal_mask().ok_or_else(|| {
            Error::Data("confounder ratios need a causal_edge_mask on every graph".to_string())
        })?;
        let z = compute_iv(phi, &batch)?;
        let removal = remove_confounders(&batch, &z, drop_fraction)?;
        for (&causal, &kept) in mask.iter().zip(&removal.kept_edge_mask) {
            match (causal, kept) {
                (true, true) => {
                    ce += 1;
                    ck += 1;
                }
                (true, false) => ce += 1,
                (false, true) => {
                    ne += 1;
                    nk += 1;
                }
                (false, false) => ne += 1,
            }
        }
    }
    Ok(ConfounderRatio::from_counts(ce, ck, ne, nk))
}

/// Edge indices grouped into undirected pairs, in order of first occurrence.
pub fn undirected_groups(edges: &[[usize; 2]]) -> Vec<Vec<usize>> {
    let mut slot: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (e, &[a, b]) in edges.iter().enumerate() {
        let key = (a.min(b), a.max(b));
        match slot.get(&key) {
            Some(&g) => groups[g].push(e),
            None => {
                slot.insert(key, groups.len());
                groups.push(vec![e]);
            }
        }
    }
    groups
}

/// Copy of `g` without the edges listed in `removed` (indices into
/// `g.edge_index`).
pub fn without_edges(g: &AttributedGraph, removed: &[usize]) -> AttributedGraph {
    let mut keep = vec![true; g.num_edges()];
    for &e in removed {
        keep[e] = false;
    }
    let edge_index = g.edge_index.iter().zip(&keep).filter(|(_, &k)| k).map(|(e, _)| *e).collect();
    let causal_edge_mask = g
        .causal_edge_mask
        .as_ref()
        .map(|m| m.iter().zip(&keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect());
    AttributedGraph {
        edge_index,
        causal_edge_mask,
        ..g.clone()
    }
}

fn true_label_ce(theta: &EncoderParams, graphs: &[AttributedGraph]) -> Result<(Vec<f64>, Vec<usize>)> {
    let batch = make_batch(graphs)?;
    let lg = encode(theta, &batch, None, 0)?.logits;
    let preds = argmax_rows(&lg);
    let ce = lg
        .rows()
        .into_iter()
        .zip(graphs)
        .map(|(r, g)| cross_entropy(&r.to_vec(), g.label))
        .collect();
    Ok((ce, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub id: String,
    pub label: usize,
    pub complete_pred: usize,
    pub pruned_pred: usize,
    pub complete_ce: f64,
    pub pruned_ce: f64,
    /// Undirected edges removed.
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub complete_accuracy: f64,
    pub pruned_accuracy: f64,
    pub rows: Vec<PruneRow>,
}

/// Greedy pruning of one graph: repeatedly removes the undirected edge
/// whose deletion lowers the true-label cross-entropy the most, stopping
/// when no deletion helps or `budget` edges are gone. Returns the removed
/// edge indices and the CE trajectory (starting with the complete graph).
pub fn granger_prune_graph(
    theta: &EncoderParams,
    g: &AttributedGraph,
    budget: usize,
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let groups = undirected_groups(&g.edge_index);
    let mut removed_groups: Vec<usize> = Vec::new();
    let (ce0, pred0) = true_label_ce(theta, std::slice::from_ref(g))?;
    let mut trajectory = vec![ce0[0]];
    let mut pred = pred0[0];
    while removed_groups.len() < budget {
        let candidates: Vec<usize> = (0..groups.len()).filter(|i| !removed_groups.contains(i)).collect();
        if candidates.is_empty() {
            break;
        }
        let variants: Vec<AttributedGraph> = candidates
            .iter()
            .map(|&c| {
                let mut edges: Vec<usize> = removed_groups.iter().flat_map(|&r| groups[r].clone()).collect();
                edges.extend(&groups[c]);
                without_edges(g, &edges)
            })
            .collect();
        let (ces, preds) = true_label_ce(theta, &variants)?;
        let (best, &best_ce) = ces
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one candidate");
        if !(best_ce < *trajectory.last().unwrap()) {
            break;
        }
        removed_groups.push(candidates[best]);
        trajectory.push(best_ce);
        pred = preds[best];
    }
    let edges = removed_groups.iter().flat_map(|&r| groups[r].clone()).collect();
    Ok((edges, trajectory, pred))
}

/// Complete-graph versus greedily pruned accuracy of a plain encoder.
/// The search uses true labels and is a diagnostic only.
pub fn granger_prune(theta: &EncoderParams, graphs: &[&AttributedGraph], budget: usize) -> Result<PruneReport> {
    if budget == 0 {
        return Err(Error::Config("granger search budget must be > 0".to_string()));
    }
    if graphs.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let mut rows = Vec::with_capacity(graphs.len());
    for g in graphs {
        let (edges, traj, pruned_pred) = granger_prune_graph(theta, g, budget)?;
        let (_, p0) = true_label_ce(theta, std::slice::from_ref(*g))?;
        let groups = undirected_groups(&g.edge_index);
        let removed = groups.iter().filter(|grp| grp.iter().all(|e| edges.contains(e))).count();
        rows.push(PruneRow {
            id: g.id.clone(),
            label: g.label,
            complete_pred: p0[0],
            pruned_pred,
            complete_ce: traj[0],
            pruned_ce: *traj.last().unwrap(),
            removed,
        });
    }
    let n = rows.len() as f64;
    Ok(PruneReport {
        complete_accuracy: rows.iter().filter(|r| r.complete_pred == r.label).count() as f64 / n,
        pruned_accuracy: rows.iter().filter(|r| r.pruned_pred == r.label).count() as f64 / n,
        rows,
    })
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub u: usize,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
    pub kept_confounder_fraction: Option<f64>,
    pub best_epoch: usize,
}

/// Trains one model per removal position with a shared seed and reports
/// test metrics of the best-validation parameters.
pub fn sweep_u(ds: &Dataset, base: &TrainConfig, u_values: &[usize]) -> Result<Vec<SweepRow>> {
    if u_values.is_empty() {
        return Err(Error::Config("no u values given".to_string()));
    }
    if let Some(&bad) = u_values.iter().find(|&&u| u > base.num_layers) {
        return Err(Error::Config(format!("u = {bad} exceeds num_layers = {}", base.num_layers)));
    }
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let mut rows = Vec::new();
    for &u in u_values {
        let cfg = TrainConfig { u, ..base.clone() };
        let out = train(ds, &cfg)?;
        let rec = evaluate(out.best(), &cfg.pipeline(), &test, ds.num_classes)?;
        rows.push(SweepRow {
            u,
            accuracy: rec.accuracy,
            roc_auc: rec.roc_auc,
            kept_confounder_fraction: rec.confounder_ratio,
            best_epoch: out.state.best_epoch,
        });
    }
    Ok(rows)
}

/// Line chart of test accuracy against `u`.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_u = rows.iter().map(|r| r.u).max().unwrap_or(1).max(1) as f64;
    let x = |u: usize| pad + (w - 2.0 * pad) * u as f64 / max_u;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    for t in 0..=4 {
        let a = t as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{a:.2}</text>"#,
            pad - 6.0,
            y(a) + 4.0
        );
    }
    for r in rows {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            x(r.u),
            h - pad + 16.0,
            r.u
        );
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.u);
    let points: Vec<String> = sorted.iter().map(|r| format!("{:.1},{:.1}", x(r.u), y(r.accuracy))).collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points.join(" ")
    );
    for r in &sorted {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
            x(r.u),
            y(r.accuracy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">u</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">test accuracy</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub mode: Mode,
    pub seed: u64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: Mode,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Trains every mode in `modes` once per seed, sequentially.
pub fn compare(ds: &Dataset, base: &TrainConfig, modes: &[Mode], seeds: &[u64]) -> Result<(Vec<CompareRow>, Vec<SeedResult>)> {
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".to_string()));
    }
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for &mode in modes {
        let mut accs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                mode,
                seed,
                ..base.clone()
            };
            let out = train(ds, &cfg)?;
            let rec = evaluate(out.best(), &cfg.pipeline(), &test, ds.num_classes)?;
            accs.push(rec.accuracy);
            runs.push(SeedResult {
                mode,
                seed,
                test_accuracy: rec.accuracy,
                best_epoch: out.state.best_epoch,
            });
        }
        let (mean, std) = mean_std(&accs);
        summary.push(CompareRow {
            mode,
            runs: accs.len(),
            mean,
            std,
        });
    }
    Ok((summary, runs))
}
