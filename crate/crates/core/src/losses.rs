//! Training objectives.
//!
//! * `L_r = L_w + zeta * M` trains the edge-weight generator `q` through a
//!   frozen encoder. `L_w` is a per-sample weighted cross-entropy that
//!   emphasises samples far from their class optimum; `M` penalises
//!   representation collapse and is only switched on (`zeta = -1`) while
//!   `M <= sigma`.
//! * `L_c = L_o + lambda * L_a` trains the encoder with `q` frozen. `L_o` is
//!   the cross-entropy through the removal pipeline and `L_a` pulls the
//!   plain encoder's full-graph output towards a detached snapshot of the
//!   removal-branch output (no negative samples).
//!
//! Class means, sample weights, the kept-edge set and `zeta` are constants
//! of each step; [`RobustnessFrozen`] and [`ContrastFrozen`] expose them so
//! the surrogate can be re-evaluated at perturbed parameters.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::model::{
    argmax_rows, collect_grads, compute_iv, encode, encode_on_tape, iv_on_tape, remove_confounders, EncoderParams,
    IvGenParams, Pipeline, Removal, TapeRemoval,
};
use crate::tape::{self, Mat, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Exponent on the per-sample weights `w_i`.
    pub gamma: f64,
    /// `M` is active while `M <= sigma`.
    pub sigma: f64,
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub tau: f64,
    pub o_max: f64,
    pub o_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.1,
            sigma: 0.01,
            lambda_: 1.0,
            tau: 1000.0,
            o_max: 1.0,
            o_min: -1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sigma > 0.0) {
            return bad("sigma must be > 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.o_min < self.o_max) {
            return bad("o_min must be < o_max");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !self.lambda_.is_finite() {
            return bad("lambda must be finite");
        }
        Ok(())
    }
}

/// Per-batch class means `t_l` and overall mean `t_bar` of the representations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    pub per_class: Vec<Option<Vec<f64>>>,
    pub overall: Vec<f64>,
}

impl ClassMeans {
    pub fn from_batch(reps: &Mat, labels: &[usize], num_classes: usize) -> Self {
        let dim = reps.ncols();
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        let mut overall = vec![0.0; dim];
        for (row, &y) in reps.rows().into_iter().zip(labels) {
            counts[y] += 1;
            for (j, &x) in row.iter().enumerate() {
                sums[y][j] += x;
                overall[j] += x;
            }
        }
        let n = reps.nrows().max(1) as f64;
        overall.iter_mut().for_each(|x| *x /= n);
        let per_class = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
            .collect();
        ClassMeans { per_class, overall }
    }
}

/// Cosine similarity `s(a, b)`. Zero vectors give 0.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    if a.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x == 0.0) {
        warn!("cosine similarity of a zero vector; using 0");
    }
    tape::cosine(a, b)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

/// Emphasis weights: `|s(h_i, t_{y_i}) - o_max|` for correctly predicted
/// samples, `|s(h_i, t_{y_i}) - o_min|` otherwise; 1 when the class mean is
/// undefined.
pub fn sample_weights(
    reps: &Mat,
    labels: &[usize],
    predictions: &[usize],
    means: &ClassMeans,
    cfg: &LossConfig,
) -> Vec<f64> {
    reps.rows()
        .into_iter()
        .zip(labels.iter().zip(predictions))
        .map(|(h, (&y, &p))| match means.per_class.get(y).and_then(Option::as_ref) {
            None => 1.0,
            Some(t) => {
                let s = cosine_sim(h.as_slice().unwrap(), t);
                let target = if p == y { cfg.o_max } else { cfg.o_min };
                (s - target).abs()
            }
        })
        .collect()
}

/// `M = tau * mean_i |s(h_i, t_bar) - o_max|`.
pub fn regularizer_m(reps: &Mat, means: &ClassMeans, cfg: &LossConfig) -> f64 {
    let n = reps.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = reps
        .rows()
        .into_iter()
        .map(|h| (cosine_sim(h.as_slice().unwrap(), &means.overall) - cfg.o_max).abs())
        .sum();
    cfg.tau * total / n as f64
}

/// Gate on the regulariser: -1 while `M <= sigma`, else 0.
pub fn zeta(m: f64, cfg: &LossConfig) -> f64 {
    if m <= cfg.sigma {
        -1.0
    } else {
        0.0
    }
}

/// Step constants of `L_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessFrozen {
    pub kept: Vec<usize>,
    pub sample_weights: Vec<f64>,
    pub t_bar: Vec<f64>,
    pub zeta: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessLoss {
    pub value: f64,
    pub loss_w: f64,
    pub m: f64,
    pub zeta: f64,
    pub correct: usize,
    pub grad_theta: Vec<Mat>,
    pub grad_phi: Vec<Mat>,
    pub frozen: RobustnessFrozen,
}

/// Robustness-emphasizing loss `L_r`; gradients flow only into `phi`.
pub fn loss_robustness(
    theta: &EncoderParams,
    phi: &IvGenParams,
    batch: &GraphBatch,
    pipeline: &Pipeline,
    cfg: &LossConfig,
) -> Result<RobustnessLoss> {
    loss_robustness_with(theta, phi, batch, pipeline, cfg, None)
}

/// [`loss_robustness`] with the step constants optionally pinned.
pub fn loss_robustness_with(
    theta: &EncoderParams,
    phi: &IvGenParams,
    batch: &GraphBatch,
    pipeline: &Pipeline,
    cfg: &LossConfig,
    frozen: Option<&RobustnessFrozen>,
) -> Result<RobustnessLoss> {
    if batch.num_graphs() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let tb = theta.bind(&mut tape, false);
    let pb = phi.bind(&mut tape, true);
    let z = iv_on_tape(&mut tape, &pb, batch);

    let kept = match frozen {
        Some(f) => f.kept.clone(),
        None => {
            let weights = crate::model::EdgeWeights(tape.value(z).iter().copied().collect());
            remove_confounders(batch, &weights, pipeline.drop_fraction)?.kept_indices()
        }
    };
    let tr = TapeRemoval::from_weights(&mut tape, batch, &kept, z);
    let (rep, logits) = encode_on_tape(&mut tape, &tb, batch, Some(&tr), pipeline.u);

    let labels = &batch.labels;
    let preds = argmax_rows(tape.value(logits));
    let correct = preds.iter().zip(labels.iter()).filter(|(p, y)| p == y).count();

    let (w, t_bar) = match frozen {
        Some(f) => (f.sample_weights.clone(), f.t_bar.clone()),
        None => {
            let means = ClassMeans::from_batch(tape.value(rep), labels, theta.num_classes());
            let w = sample_weights(tape.value(rep), labels, &preds, &means, cfg);
            (w, means.overall)
        }
    };
    let w_pow: Vec<f64> = w.iter().map(|&x| x.powf(cfg.gamma)).collect();
    let loss_w = tape.cross_entropy(logits, labels.clone(), w_pow);

    let n = batch.num_graphs();
    let t_rows = Mat::from_shape_fn((n, t_bar.len()), |(_, j)| t_bar[j]);
    let t_rows = tape.constant(t_rows);
    let s = tape.cosine_rows(rep, t_rows);
    let dev = tape.add_scalar(s, -cfg.o_max);
    let dev = tape.abs(dev);
    let m = tape.mean(dev);
    let m = tape.scale(m, cfg.tau);
    let m_value = tape.scalar(m);

    let zeta_value = frozen.map_or_else(|| zeta(m_value, cfg), |f| f.zeta);
    let total = if zeta_value != 0.0 {
        let gated = tape.scale(m, zeta_value);
        tape.add(loss_w, gated)
    } else {
        loss_w
    };

    let mut grads = tape.backward(total);
    Ok(RobustnessLoss {
        value: tape.scalar(total),
        loss_w: tape.scalar(loss_w),
        m: m_value,
        zeta: zeta_value,
        correct,
        grad_theta: collect_grads(theta, &tb.vars(), &mut grads),
        grad_phi: collect_grads(phi, &pb.vars(), &mut grads),
        frozen: RobustnessFrozen {
            kept,
            sample_weights: w,
            t_bar,
            zeta: zeta_value,
        },
    })
}

/// Step constants of `L_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastFrozen {
    pub removal: Removal,
    /// Detached removal-branch representations `f_{theta_dot}(r(G, q(G)))`.
    pub snapshot: Mat,
}

#[derive(Debug, Clone)]
pub struct ContrastLoss {
    pub value: f64,
    pub loss_o: f64,
    pub loss_a: f64,
    pub correct: usize,
    pub grad_theta: Vec<Mat>,
    pub grad_phi: Vec<Mat>,
    pub frozen: ContrastFrozen,
}

/// Contrast-auxiliary loss `L_c`; gradients flow only into `theta`.
pub fn loss_contrast_aux(
    theta: &EncoderParams,
    phi: &IvGenParams,
    batch: &GraphBatch,
    pipeline: &Pipeline,
    cfg: &LossConfig,
) -> Result<ContrastLoss> {
    loss_contrast_aux_with(theta, phi, batch, pipeline, cfg, None)
}

/// Builds the step constants of `L_c` for an explicit snapshot `theta_dot`.
pub fn contrast_frozen(
    theta_dot: &EncoderParams,
    phi: &IvGenParams,
    batch: &GraphBatch,
    pipeline: &Pipeline,
) -> Result<ContrastFrozen> {
    let z = compute_iv(phi, batch)?;
    let removal = remove_confounders(batch, &z, pipeline.drop_fraction)?;
    let snapshot = encode(theta_dot, batch, Some(&removal), pipeline.u)?.representation;
    Ok(ContrastFrozen { removal, snapshot })
}

/// [`loss_contrast_aux`] with the step constants optionally pinned. Without
/// `frozen` the snapshot is taken at the current `theta`.
pub fn loss_contrast_aux_with(
    theta: &EncoderParams,
    phi: &IvGenParams,
    batch: &GraphBatch,
    pipeline: &Pipeline,
    cfg: &LossConfig,
    frozen: Option<&ContrastFrozen>,
) -> Result<ContrastLoss> {
    if batch.num_graphs() == 0 {
        return Err(Error::EmptyBatch);
    }
    let removal = match frozen {
        Some(f) => f.removal.clone(),
        None => {
            let z = compute_iv(phi, batch)?;
            remove_confounders(batch, &z, pipeline.drop_fraction)?
        }
    };
    let mut tape = Tape::new();
    let tb = theta.bind(&mut tape, true);
    let pb = phi.bind(&mut tape, false);
    let tr = TapeRemoval::constant(&mut tape, batch, &removal);
    let (rep_o, logits_o) = encode_on_tape(&mut tape, &tb, batch, Some(&tr), pipeline.u);

    let n = batch.num_graphs();
    let loss_o = tape.cross_entropy(logits_o, batch.labels.clone(), vec![1.0; n]);
    let preds = argmax_rows(tape.value(logits_o));
    let correct = preds.iter().zip(batch.labels.iter()).filter(|(p, y)| p == y).count();

    // theta_dot equals the current theta, so the snapshot is the detached
    // value of the removal branch just computed.
    let snapshot = match frozen {
        Some(f) => f.snapshot.clone(),
        None => tape.value(rep_o).clone(),
    };
    let (rep_full, _) = encode_on_tape(&mut tape, &tb, batch, None, pipeline.u);
    let snap = tape.constant(snapshot.clone());
    let s = tape.cosine_rows(snap, rep_full);
    let mean_s = tape.mean(s);
    let loss_a = tape.scale(mean_s, -1.0);
    let weighted = tape.scale(loss_a, cfg.lambda_);
    let total = tape.add(loss_o, weighted);

    let mut grads = tape.backward(total);
    Ok(ContrastLoss {
        value: tape.scalar(total),
        loss_o: tape.scalar(loss_o),
        loss_a: tape.scalar(loss_a),
        correct,
        grad_theta: collect_grads(theta, &tb.vars(), &mut grads),
        grad_phi: collect_grads(phi, &pb.vars(), &mut grads),
        frozen: ContrastFrozen { removal, snapshot },
    })
}

#[derive(Debug, Clone)]
pub struct ErmLoss {
    pub value: f64,
    pub correct: usize,
    pub grad_theta: Vec<Mat>,
}

/// Plain mean cross-entropy of the encoder on full graphs.
pub fn loss_erm(theta: &EncoderParams, batch: &GraphBatch) -> Result<ErmLoss> {
    if batch.num_graphs() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let tb = theta.bind(&mut tape, true);
    let (_, logits) = encode_on_tape(&mut tape, &tb, batch, None, 0);
    let n = batch.num_graphs();
    let loss = tape.cross_entropy(logits, batch.labels.clone(), vec![1.0; n]);
    let correct = argmax_rows(tape.value(logits))
        .iter()
        .zip(batch.labels.iter())
        .filter(|(p, y)| p == y)
        .count();
    let mut grads = tape.backward(loss);
    Ok(ErmLoss {
        value: tape.scalar(loss),
        correct,
        grad_theta: collect_grads(theta, &tb.vars(), &mut grads),
    })
}

/// Euclidean norm over a list of gradient tensors.
pub fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// `true` if every gradient entry is exactly zero.
pub fn all_zero(grads: &[Mat]) -> bool {
    grads.iter().all(|g| g.iter().all(|&x| x == 0.0))
}
