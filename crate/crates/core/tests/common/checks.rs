//! Check suites that both the focused tests and the acceptance runner use.

use rand::Rng;
use rcgrl::analysis::roc_auc;
use rcgrl::losses::{
    contrast_frozen, cross_entropy as ce_lib, loss_contrast_aux_with, loss_erm, loss_robustness_with, zeta, ContrastFrozen,
    LossConfig,
};
use rcgrl::model::{
    collect_grads, encode, iv_on_tape, remove_confounders, EdgeWeights, EncoderParams, IvGenParams, Pipeline,
};
use rcgrl::tape::Tape;
use rcgrl::{make_batch, AttributedGraph, GraphBatch};

use super::{dense_encode, max_rel_error, numeric_grad, random_graph, rng, Mat};

pub const FD_EPS: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-7;

pub struct Setup {
    pub graphs: Vec<AttributedGraph>,
    pub batch: GraphBatch,
    pub theta: EncoderParams,
    pub phi: IvGenParams,
    pub pipeline: Pipeline,
}

/// A random 3-graph batch with small random parameters.
pub fn setup(seed: u64) -> Setup {
    let mut r = rng(seed);
    let graphs: Vec<AttributedGraph> = (0..3)
        .map(|_| {
            let n = r.gen_range(3..=6);
            random_graph(&mut r, n, 3, 0.4, 3)
        })
        .collect();
    let batch = make_batch(&graphs).unwrap();
    let mut theta = EncoderParams::init(&mut r, 3, 5, 4, 3);
    let mut phi = IvGenParams::init(&mut r, 3, 4);
    // non-zero biases so every parameter has a gradient to check
    for l in theta.layers.iter_mut().chain(std::iter::once(&mut phi.layer)) {
        l.b_self.mapv_inplace(|_| r.gen_range(-0.3..0.3));
        l.b_agg.mapv_inplace(|_| r.gen_range(-0.3..0.3));
    }
    theta.head_b.mapv_inplace(|_| r.gen_range(-0.3..0.3));
    phi.score_b1.mapv_inplace(|_| r.gen_range(-0.3..0.3));
    let pipeline = Pipeline {
        use_removal: true,
        u: 2,
        drop_fraction: 0.5,
    };
    Setup {
        graphs,
        batch,
        theta,
        phi,
        pipeline,
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub batches: usize,
    /// `L_r` w.r.t. `phi`, regulariser gated off.
    pub lr_phi: f64,
    /// `L_r` w.r.t. `phi`, regulariser active.
    pub lr_phi_gated: f64,
    pub lc_theta: f64,
    pub erm_theta: f64,
    /// Mean edge weight w.r.t. `phi`.
    pub iv_phi: f64,
    pub routing_exact: bool,
    pub stop_gradient: bool,
    pub gate_flat: bool,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        [self.lr_phi, self.lr_phi_gated, self.lc_theta, self.erm_theta, self.iv_phi]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn mean_weight(phi: &IvGenParams, batch: &GraphBatch) -> (f64, Vec<Mat>) {
    let mut tape = Tape::new();
    let b = phi.bind(&mut tape, true);
    let z = iv_on_tape(&mut tape, &b, batch);
    let m = tape.mean(z);
    let mut g = tape.backward(m);
    (tape.scalar(m), collect_grads(phi, &b.vars(), &mut g))
}

/// Finite-difference and routing checks over `n` random batches.
pub fn gradient_suite(n: usize, seed: u64) -> GradReport {
    let mut rep = GradReport {
        routing_exact: true,
        stop_gradient: true,
        gate_flat: true,
        ..Default::default()
    };
    for b in 0..n {
        let s = setup(seed + b as u64);
        let off = LossConfig {
            sigma: 1e-12,
            ..LossConfig::default()
        };
        let on = LossConfig {
            sigma: 1e12,
            ..LossConfig::default()
        };

        for (cfg, slot) in [(&off, 0), (&on, 1)] {
            let lr = loss_robustness_with(&s.theta, &s.phi, &s.batch, &s.pipeline, cfg, None).unwrap();
            let frozen = lr.frozen.clone();
            let num = numeric_grad(&s.phi, FD_EPS, |p| {
                loss_robustness_with(&s.theta, p, &s.batch, &s.pipeline, cfg, Some(&frozen))
                    .unwrap()
                    .value
            });
            let err = max_rel_error(&lr.grad_phi, &num, FD_FLOOR);
            if slot == 0 {
                rep.lr_phi = rep.lr_phi.max(err);
                assert_eq!(lr.zeta, 0.0);
            } else {
                rep.lr_phi_gated = rep.lr_phi_gated.max(err);
                assert_eq!(lr.zeta, -1.0);
            }
            rep.routing_exact &= rcgrl::losses::all_zero(&lr.grad_theta);
        }

        // gate flatness: with the gate off, tau does not touch the gradient
        let a = loss_robustness_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &off, None).unwrap();
        let bigger = LossConfig { tau: 7.0 * off.tau, ..off.clone() };
        let b2 = loss_robustness_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &bigger, None).unwrap();
        rep.gate_flat &= a.grad_phi == b2.grad_phi && a.value == b2.value;

        let cfg = LossConfig::default();
        let lc = loss_contrast_aux_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &cfg, None).unwrap();
        rep.routing_exact &= rcgrl::losses::all_zero(&lc.grad_phi);
        let frozen = lc.frozen.clone();
        let num = numeric_grad(&s.theta, FD_EPS, |t| {
            loss_contrast_aux_with(t, &s.phi, &s.batch, &s.pipeline, &cfg, Some(&frozen))
                .unwrap()
                .value
        });
        rep.lc_theta = rep.lc_theta.max(max_rel_error(&lc.grad_theta, &num, FD_FLOOR));

        // stop-gradient: the analytic gradient must disagree with the
        // derivative obtained when the snapshot follows theta
        let tracking = numeric_grad(&s.theta, FD_EPS, |t| {
            let fr: ContrastFrozen = ContrastFrozen {
                removal: frozen.removal.clone(),
                snapshot: encode(t, &s.batch, Some(&frozen.removal), s.pipeline.u).unwrap().representation,
            };
            loss_contrast_aux_with(t, &s.phi, &s.batch, &s.pipeline, &cfg, Some(&fr))
                .unwrap()
                .value
        });
        rep.stop_gradient &= max_rel_error(&lc.grad_theta, &tracking, FD_FLOOR) > 1e-3;
        // and a different snapshot taken at another theta leaves the
        // gradient of L_o untouched while changing only the L_a part
        let mut other = s.theta.clone();
        other.head_w.mapv_inplace(|x| x * 1.5);
        let fr2 = contrast_frozen(&other, &s.phi, &s.batch, &s.pipeline).unwrap();
        let lo_only = LossConfig { lambda_: 0.0, ..cfg.clone() };
        let g1 = loss_contrast_aux_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &lo_only, Some(&frozen)).unwrap();
        let g2 = loss_contrast_aux_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &lo_only, Some(&fr2)).unwrap();
        rep.stop_gradient &= g1.grad_theta == g2.grad_theta;

        let erm = loss_erm(&s.theta, &s.batch).unwrap();
        let num = numeric_grad(&s.theta, FD_EPS, |t| loss_erm(t, &s.batch).unwrap().value);
        rep.erm_theta = rep.erm_theta.max(max_rel_error(&erm.grad_theta, &num, FD_FLOOR));

        let (_, g) = mean_weight(&s.phi, &s.batch);
        let num = numeric_grad(&s.phi, FD_EPS, |p| mean_weight(p, &s.batch).0);
        rep.iv_phi = rep.iv_phi.max(max_rel_error(&g, &num, FD_FLOOR));

        rep.batches += 1;
    }
    rep
}

/// Largest deviation between the library encoder and the dense oracle over
/// `n` random graphs with at most 10 nodes (plain, masked at u=2, and a
/// single layer with scales).
pub fn dense_oracle_suite(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let nodes = r.gen_range(1..=10);
        let g = random_graph(&mut r, nodes, 4, 0.3, 3);
        let theta = EncoderParams::init(&mut r, 4, 8, 4, 3);
        let batch = make_batch(std::slice::from_ref(&g)).unwrap();
        let z = EdgeWeights((0..g.num_edges()).map(|_| r.gen()).collect());
        let removal = remove_confounders(&batch, &z, 0.5).unwrap();
        for (rem, u) in [(None, 0), (Some(&removal), 2), (Some(&removal), 0)] {
            let out = encode(&theta, &batch, rem, u).unwrap();
            let (rep, logits) = dense_encode(&theta, &g, rem.map(|x| x.edge_scale.as_slice()), u);
            for (j, v) in rep.iter().enumerate() {
                worst = worst.max((out.representation[[0, j]] - v).abs());
            }
            for (j, v) in logits.iter().enumerate() {
                worst = worst.max((out.logits[[0, j]] - v).abs());
            }
        }
    }
    worst
}

/// Pair-counting AUC: each (positive, negative) pair scores 1 if ordered
/// correctly and 1/2 if tied.
pub fn brute_force_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Number of random cases (sizes 1..=200, heavy ties) on which the
/// library AUC and the brute-force AUC differ.
pub fn auc_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for c in 0..cases {
        let n = 1 + (c * 37) % 200;
        let levels = r.gen_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let positive: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        if roc_auc(&scores, &positive) != brute_force_auc(&scores, &positive) {
            bad += 1;
        }
    }
    bad
}

/// Reference removal on one graph.
pub fn oracle_removal(weights: &[f64], p: f64) -> Vec<bool> {
    let m = weights.len();
    let n_drop = ((p * m as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap().then(a.cmp(&b)));
    let mut kept = vec![true; m];
    for &e in order.iter().take(n_drop) {
        kept[e] = false;
    }
    kept
}

/// Enumerates all weight patterns over three levels for up to 8 edges and
/// a grid of drop fractions; returns (cases, mismatches).
pub fn removal_enumeration() -> (usize, usize) {
    let fractions: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).chain([0.75, 0.4, 0.3, 0.1]).collect();
    let (mut cases, mut bad) = (0, 0);
    for m in 0..=8usize {
        let g = AttributedGraph {
            edge_index: (0..m).map(|e| [e % 3, (e + 1) % 3]).collect(),
            causal_edge_mask: None,
            ..random_graph(&mut rng(m as u64), 3, 2, 0.0, 2)
        };
        let batch = make_batch(std::slice::from_ref(&g)).unwrap();
        for code in 0..3usize.pow(m as u32) {
            let weights: Vec<f64> = (0..m).map(|e| [0.2, 0.5, 0.9][(code / 3usize.pow(e as u32)) % 3]).collect();
            for &p in &fractions {
                let rem = remove_confounders(&batch, &EdgeWeights(weights.clone()), p).unwrap();
                let scale_ok = (0..m).all(|e| rem.edge_scale[e] == if rem.kept_edge_mask[e] { weights[e] } else { 0.0 });
                if rem.kept_edge_mask != oracle_removal(&weights, p) || !scale_ok {
                    bad += 1;
                }
                cases += 1;
            }
        }
    }
    (cases, bad)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn ce(logits: &[f64], y: usize) -> f64 {
    let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn row(m: &Mat, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Named (got, want) pairs for the loss formulas, each recomputed by hand
/// from raw encoder outputs.
pub fn formula_suite(seed: u64) -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut push = |name: &str, got: f64, want: f64| out.push((name.to_string(), got, want));

    // fixed examples
    let cfg = LossConfig::default();
    push("cosine([1,0],[1,1])", rcgrl::losses::cosine_sim(&[1.0, 0.0], &[1.0, 1.0]), 1.0 / 2f64.sqrt());
    push("CE uniform 3 classes", ce_lib(&[0.0, 0.0, 0.0], 0), 3f64.ln());
    push("zeta(M=0.005)", zeta(0.005, &cfg), -1.0);
    push("zeta(M=0.02)", zeta(0.02, &cfg), 0.0);
    {
        let t = vec![0.2, (1.0f64 - 0.04).sqrt()];
        let means = rcgrl::losses::ClassMeans {
            per_class: vec![Some(t)],
            overall: vec![1.0, 0.0],
        };
        let w = rcgrl::losses::sample_weights(&ndarray::array![[1.0, 0.0]], &[0], &[0], &means, &cfg);
        push("w correct s=0.2", w[0], 0.8);
        let w = rcgrl::losses::sample_weights(&ndarray::array![[-0.2, -(0.96f64).sqrt()]], &[0], &[1], &means, &cfg);
        push("w wrong s=-1", w[0], 0.0);
        let reps = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let means = rcgrl::losses::ClassMeans::from_batch(&reps, &[0, 1], 2);
        push(
            "M orthogonal pair",
            rcgrl::losses::regularizer_m(&reps, &means, &cfg),
            1000.0 * (1.0 - 1.0 / 2f64.sqrt()),
        );
    }

    // L_r and L_a on random batches, recomputed from encoder outputs
    for k in 0..5 {
        let s = setup(seed + k);
        for (label, cfg) in [
            ("gate off", LossConfig { gamma: 0.1, sigma: 1e-12, ..LossConfig::default() }),
            ("gate on", LossConfig { gamma: 0.1, sigma: 1e12, ..LossConfig::default() }),
            ("gamma 0", LossConfig { gamma: 0.0, sigma: 1e-12, ..LossConfig::default() }),
        ] {
            let lr = loss_robustness_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &cfg, None).unwrap();
            let z = rcgrl::model::compute_iv(&s.phi, &s.batch).unwrap();
            let removal = remove_confounders(&s.batch, &z, s.pipeline.drop_fraction).unwrap();
            let o = encode(&s.theta, &s.batch, Some(&removal), s.pipeline.u).unwrap();
            let n = s.graphs.len();
            let labels: Vec<usize> = s.graphs.iter().map(|g| g.label).collect();
            // class means and overall mean, by hand
            let dim = o.representation.ncols();
            let mut means = vec![vec![0.0; dim]; 3];
            let mut counts = [0usize; 3];
            let mut overall = vec![0.0; dim];
            for i in 0..n {
                counts[labels[i]] += 1;
                for j in 0..dim {
                    means[labels[i]][j] += o.representation[[i, j]];
                    overall[j] += o.representation[[i, j]] / n as f64;
                }
            }
            let mut lw = 0.0;
            let mut m = 0.0;
            for i in 0..n {
                let h = row(&o.representation, i);
                let t: Vec<f64> = means[labels[i]].iter().map(|x| x / counts[labels[i]] as f64).collect();
                let lg = row(&o.logits, i);
                let pred = (0..3).fold(0, |b, c| if lg[c] > lg[b] { c } else { b });
                let target = if pred == labels[i] { 1.0 } else { -1.0 };
                let w = (cos(&h, &t) - target).abs();
                lw += w.powf(cfg.gamma) * ce(&lg, labels[i]) / n as f64;
                m += 1000.0 * (cos(&h, &overall) - 1.0).abs() / n as f64;
            }
            let zt = if m <= cfg.sigma { -1.0 } else { 0.0 };
            push(&format!("L_w [{label}, batch {k}]"), lr.loss_w, lw);
            push(&format!("M [{label}, batch {k}]"), lr.m, m);
            push(&format!("L_r [{label}, batch {k}]"), lr.value, lw + zt * m);
            if cfg.gamma == 0.0 {
                let plain: f64 = (0..n).map(|i| ce(&row(&o.logits, i), labels[i])).sum::<f64>() / n as f64;
                push(&format!("L_w gamma=0 is mean CE [batch {k}]"), lr.loss_w, plain);
            }
        }

        let cfg = LossConfig::default();
        let lc = loss_contrast_aux_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &cfg, None).unwrap();
        let z = rcgrl::model::compute_iv(&s.phi, &s.batch).unwrap();
        let removal = remove_confounders(&s.batch, &z, s.pipeline.drop_fraction).unwrap();
        let o = encode(&s.theta, &s.batch, Some(&removal), s.pipeline.u).unwrap();
        let f = encode(&s.theta, &s.batch, None, s.pipeline.u).unwrap();
        let n = s.graphs.len();
        let la = -(0..n).map(|i| cos(&row(&o.representation, i), &row(&f.representation, i))).sum::<f64>() / n as f64;
        let lo = (0..n).map(|i| ce(&row(&o.logits, i), s.graphs[i].label)).sum::<f64>() / n as f64;
        push(&format!("L_a [batch {k}]"), lc.loss_a, la);
        push(&format!("L_o [batch {k}]"), lc.loss_o, lo);
        push(&format!("L_c = L_o + L_a [batch {k}]"), lc.value, lo + la);

        // orthogonal snapshot gives L_a = 0
        let mut snap = f.representation.clone();
        for i in 0..n {
            let v = row(&f.representation, i);
            let mut w: Vec<f64> = (0..v.len()).map(|j| ((j * 7 + i) % 5) as f64 - 2.0).collect();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let wv: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            for j in 0..w.len() {
                w[j] -= wv / vv * v[j];
            }
            for j in 0..w.len() {
                snap[[i, j]] = w[j];
            }
        }
        let fr = ContrastFrozen { removal: removal.clone(), snapshot: snap };
        let lc = loss_contrast_aux_with(&s.theta, &s.phi, &s.batch, &s.pipeline, &cfg, Some(&fr)).unwrap();
        push(&format!("L_a orthogonal [batch {k}]"), lc.loss_a, 0.0);
    }

    // identical branches give L_a = -1: no removal and unit weights
    let s = setup(seed + 100);
    let mut phi = s.phi.clone();
    phi.score_w2.fill(0.0);
    phi.score_b2.fill(50.0);
    let pipeline = Pipeline { drop_fraction: 0.0, ..s.pipeline };
    let lc = loss_contrast_aux_with(&s.theta, &phi, &s.batch, &pipeline, &LossConfig::default(), None).unwrap();
    push("L_a identical branches", lc.loss_a, -1.0);
    out
}

pub fn small_dataset(n: usize, seed: u64, bias: f64) -> rcgrl::Dataset {
    let cfg = rcgrl::synth::GenConfig {
        n_graphs: n,
        seed,
        bias: rcgrl::synth::Bias::Value(bias),
        ..Default::default()
    };
    rcgrl::synth::generate(&cfg).unwrap()
}

fn max_param_diff(a: &rcgrl::ModelParams, b: &rcgrl::ModelParams) -> f64 {
    use rcgrl::model::ParamSet;
    let ta = a.theta.tensors().into_iter().chain(a.phi.tensors());
    let tb = b.theta.tensors().into_iter().chain(b.phi.tensors());
    ta.zip(tb)
        .map(|(x, y)| (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max)
}

fn row_diff(a: &[rcgrl::trainer::MetricsRow], b: &[rcgrl::trainer::MetricsRow]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.epoch, x.phase, x.split), (y.epoch, y.phase, y.split));
        for (p, q) in [
            (x.loss_o, y.loss_o),
            (x.loss_a, y.loss_a),
            (x.loss_w, y.loss_w),
            (x.m, y.m),
            (x.zeta, y.zeta),
            (Some(x.accuracy), Some(y.accuracy)),
        ] {
            match (p, q) {
                (Some(p), Some(q)) => worst = worst.max((p - q).abs()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

#[derive(Debug)]
pub struct DeterminismReport {
    pub csv_identical: bool,
    /// Largest deviation (metrics and parameters) between an unbroken run
    /// and one resumed from a checkpoint, over one epoch of each phase.
    pub continuation_diff: f64,
}

pub fn determinism_suite(dir: &std::path::Path) -> DeterminismReport {
    use rcgrl::trainer::{checkpoint, restore, save_history, train, TrainConfig, Trainer};
    let ds = small_dataset(150, 9, 0.9);
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 16,
        hidden: 8,
        iv_hidden: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    save_history(&train(&ds, &cfg).unwrap().history, &a).unwrap();
    save_history(&train(&ds, &cfg).unwrap().history, &b).unwrap();
    let csv_identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let mut unbroken = Trainer::new(&ds, cfg.clone()).unwrap();
    let mut diff: f64 = 0.0;
    for _ in 0..2 {
        unbroken.run_epoch().unwrap();
    }
    for _ in 0..2 {
        // resume from a checkpoint of the current state, run one epoch on both
        let path = dir.join(format!("ck{}.json", unbroken.state().epoch));
        checkpoint(&cfg, unbroken.state(), &path).unwrap();
        let ck = restore(&path).unwrap();
        diff = diff.max(max_param_diff(&ck.state.params, &unbroken.state().params));
        let mut resumed = Trainer::from_state(&ds, ck.config, ck.state).unwrap();
        let r1 = unbroken.run_epoch().unwrap();
        let r2 = resumed.run_epoch().unwrap();
        diff = diff.max(row_diff(&r1, &r2));
        diff = diff.max(max_param_diff(&unbroken.state().params, &resumed.state().params));
    }
    DeterminismReport {
        csv_identical,
        continuation_diff: diff,
    }
}
