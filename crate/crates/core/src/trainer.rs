//! Alternating optimisation of the edge-weight generator and the encoder,
//! plus the plain ERM baseline.
//!
//! With per-epoch alternation, odd epochs step `phi` on `L_r` and even
//! epochs step `theta` on `L_c`. Validation accuracy is measured after
//! every epoch and drives early stopping; the best-scoring parameters are
//! kept alongside the live ones.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::evaluate;
use crate::error::{Error, Result};
use crate::graph::{make_batch, AttributedGraph, Dataset, Split};
use crate::losses::{loss_contrast_aux, loss_erm, loss_robustness, LossConfig};
use crate::model::{EncoderParams, IvGenParams, ModelParams, Pipeline};
use crate::optim::Adam;

pub const CHECKPOINT_FORMAT: &str = "rcgrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Rcgrl,
    Erm,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rcgrl => "rcgrl",
            Mode::Erm => "erm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcgrl" => Ok(Mode::Rcgrl),
            "erm" => Ok(Mode::Erm),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected rcgrl or erm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    PerEpoch,
    PerBatch,
}

impl FromStr for Alternation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-epoch" => Ok(Alternation::PerEpoch),
            "per-batch" => Ok(Alternation::PerBatch),
            _ => Err(Error::Config(format!(
                "unknown alternation `{s}` (expected per-epoch or per-batch)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Theta,
    Phi,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Theta => "theta",
            Phase::Phi => "phi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Removal takes effect after this many message-passing layers.
    pub u: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub iv_hidden: usize,
    pub drop_fraction: f64,
    pub gamma: f64,
    pub sigma: f64,
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub tau: f64,
    pub o_max: f64,
    pub o_min: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// One gradient step per phase over the whole training split.
    pub full_batch: bool,
    pub max_epochs: usize,
    pub min_epochs_before_early_stop: usize,
    pub patience: usize,
    pub seed: u64,
    pub alternation: Alternation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        TrainConfig {
            mode: Mode::Rcgrl,
            u: 2,
            num_layers: 4,
            hidden: 32,
            iv_hidden: 32,
            drop_fraction: 0.75,
            gamma: loss.gamma,
            sigma: loss.sigma,
            lambda_: loss.lambda_,
            tau: loss.tau,
            o_max: loss.o_max,
            o_min: loss.o_min,
            lr: 1e-3,
            batch_size: 32,
            full_batch: false,
            max_epochs: 300,
            min_epochs_before_early_stop: 10,
            patience: 5,
            seed: 0,
            alternation: Alternation::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            sigma: self.sigma,
            lambda_: self.lambda_,
            tau: self.tau,
            o_max: self.o_max,
            o_min: self.o_min,
        }
    }

    /// Pipeline used for training-mode forward passes and evaluation.
    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            use_removal: self.mode == Mode::Rcgrl,
            u: self.u,
            drop_fraction: self.drop_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.u > self.num_layers {
            return bad(format!("u = {} exceeds num_layers = {}", self.u, self.num_layers));
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) {
            return bad(format!("drop_fraction {} is outside [0, 1]", self.drop_fraction));
        }
        if self.hidden == 0 || self.iv_hidden == 0 {
            return bad("hidden widths must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a positive finite number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        self.loss().validate()
    }
}

/// Everything needed to continue training bit-for-bit.
///
/// Shuffling uses a ChaCha8 stream derived from `(seed, epoch)`, so the
/// epoch counter is the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam_theta: Adam,
    pub adam_phi: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub bad_epochs: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, feature_dim: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let theta = EncoderParams::init(&mut rng, feature_dim, cfg.hidden, cfg.num_layers, num_classes);
        let phi = IvGenParams::init(&mut rng, feature_dim, cfg.iv_hidden);
        let adam_theta = Adam::new(&theta, cfg.lr);
        let adam_phi = Adam::new(&phi, cfg.lr);
        let params = ModelParams { theta, phi };
        TrainState {
            best_params: params.clone(),
            params,
            adam_theta,
            adam_phi,
            epoch: 0,
            best_val: None,
            best_epoch: 0,
            bad_epochs: 0,
            stopped: false,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub split: Split,
    pub loss_o: Option<f64>,
    pub loss_a: Option<f64>,
    pub loss_w: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    pub zeta: Option<f64>,
    pub accuracy: f64,
}

pub fn write_history_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_history(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(rows, std::io::BufWriter::new(f))
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    n: usize,
    correct: usize,
    loss_o: f64,
    loss_a: f64,
    loss_w: f64,
    m: f64,
    zeta: f64,
}

impl Acc {
    fn add(&mut self, n: usize, correct: usize, o: f64, a: f64, w: f64, m: f64, z: f64) {
        let k = n as f64;
        self.n += n;
        self.correct += correct;
        self.loss_o += k * o;
        self.loss_a += k * a;
        self.loss_w += k * w;
        self.m += k * m;
        self.zeta += k * z;
    }

    fn mean(&self, x: f64) -> f64 {
        x / self.n as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n as f64
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: Vec<&'a AttributedGraph>,
    val: Vec<&'a AttributedGraph>,
    num_classes: usize,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::init(&cfg, ds.feature_dim, ds.num_classes);
        Self::from_state(ds, cfg, state)
    }

    pub fn from_state(ds: &'a Dataset, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let train = ds.split(Split::Train);
        let val = ds.split(Split::Val);
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(Error::EmptySplit("val"));
        }
        let theta = &state.params.theta;
        if theta.feature_dim() != ds.feature_dim || theta.num_classes() != ds.num_classes {
            return Err(Error::Dimension(format!(
                "model expects feature_dim {} / {} classes, dataset has {} / {}",
                theta.feature_dim(),
                theta.num_classes(),
                ds.feature_dim,
                ds.num_classes
            )));
        }
        if theta.num_layers() != cfg.num_layers {
            return Err(Error::Dimension(format!(
                "model has {} layers, config asks for {}",
                theta.num_layers(),
                cfg.num_layers
            )));
        }
        Ok(Trainer {
            cfg,
            train,
            val,
            num_classes: ds.num_classes,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.cfg.max_epochs
    }

    /// Phase run in the given 1-based epoch under per-epoch alternation.
    pub fn phase_of(&self, epoch: usize) -> Phase {
        if self.cfg.mode == Mode::Erm || epoch % 2 == 0 {
            Phase::Theta
        } else {
            Phase::Phi
        }
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<&'a AttributedGraph>> {
        let mut order: Vec<&AttributedGraph> = self.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let size = if self.cfg.full_batch { order.len() } else { self.cfg.batch_size };
        order.chunks(size).map(<[_]>::to_vec).collect()
    }

    fn check(&self, value: f64, what: &str, phase: Phase) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                what: what.to_string(),
                epoch: self.state.epoch + 1,
                phase: phase.as_str(),
            })
        }
    }

    fn step_phi(&mut self, batch: &crate::graph::GraphBatch, acc: &mut Acc) -> Result<()> {
        let loss = loss_robustness(
            &self.state.params.theta,
            &self.state.params.phi,
            batch,
            &self.cfg.pipeline(),
            &self.cfg.loss(),
        )?;
        self.check(loss.value, "L_r", Phase::Phi)?;
        self.state.adam_phi.update(&mut self.state.params.phi, &loss.grad_phi);
        acc.add(batch.num_graphs(), loss.correct, f64::NAN, f64::NAN, loss.loss_w, loss.m, loss.zeta);
        Ok(())
    }

    fn step_theta(&mut self, batch: &crate::graph::GraphBatch, acc: &mut Acc) -> Result<()> {
        let n = batch.num_graphs();
        match self.cfg.mode {
            Mode::Erm => {
                let loss = loss_erm(&self.state.params.theta, batch)?;
                self.check(loss.value, "cross-entropy", Phase::Theta)?;
                self.state.adam_theta.update(&mut self.state.params.theta, &loss.grad_theta);
                acc.add(n, loss.correct, loss.value, f64::NAN, f64::NAN, f64::NAN, f64::NAN);
            }
            Mode::Rcgrl => {
                let loss = loss_contrast_aux(
                    &self.state.params.theta,
                    &self.state.params.phi,
                    batch,
                    &self.cfg.pipeline(),
                    &self.cfg.loss(),
                )?;
                self.check(loss.value, "L_c", Phase::Theta)?;
                self.state.adam_theta.update(&mut self.state.params.theta, &loss.grad_theta);
                acc.add(n, loss.correct, loss.loss_o, loss.loss_a, f64::NAN, f64::NAN, f64::NAN);
            }
        }
        Ok(())
    }

    fn train_row(&self, epoch: usize, phase: Phase, acc: &Acc) -> MetricsRow {
        let opt = |x: f64| {
            let v = acc.mean(x);
            (!v.is_nan()).then_some(v)
        };
        MetricsRow {
            epoch,
            phase,
            split: Split::Train,
            loss_o: opt(acc.loss_o),
            loss_a: opt(acc.loss_a),
            loss_w: opt(acc.loss_w),
            m: opt(acc.m),
            zeta: opt(acc.zeta),
            accuracy: acc.accuracy(),
        }
    }

    /// Runs one epoch and returns its history rows (train rows, then val).
    pub fn run_epoch(&mut self) -> Result<Vec<MetricsRow>> {
        let epoch = self.state.epoch + 1;
        let batches = self.batches(epoch);
        let mut rows = Vec::new();
        let per_batch = self.cfg.mode == Mode::Rcgrl && self.cfg.alternation == Alternation::PerBatch;
        let last_phase = if per_batch {
            let (mut phi_acc, mut theta_acc) = (Acc::default(), Acc::default());
            for graphs in &batches {
                let batch = make_batch(graphs)?;
                self.step_phi(&batch, &mut phi_acc)?;
                self.step_theta(&batch, &mut theta_acc)?;
            }
            rows.push(self.train_row(epoch, Phase::Phi, &phi_acc));
            rows.push(self.train_row(epoch, Phase::Theta, &theta_acc));
            Phase::Theta
        } else {
            let phase = self.phase_of(epoch);
            let mut acc = Acc::default();
            for graphs in &batches {
                let batch = make_batch(graphs)?;
                match phase {
                    Phase::Phi => self.step_phi(&batch, &mut acc)?,
                    Phase::Theta => self.step_theta(&batch, &mut acc)?,
                }
            }
            rows.push(self.train_row(epoch, phase, &acc));
            phase
        };

        let val = evaluate(&self.state.params, &self.cfg.pipeline(), &self.val, self.num_classes)?;
        rows.push(MetricsRow {
            epoch,
            phase: last_phase,
            split: Split::Val,
            loss_o: Some(val.loss),
            loss_a: None,
            loss_w: None,
            m: None,
            zeta: None,
            accuracy: val.accuracy,
        });
        self.state.epoch = epoch;
        self.track_best(val.accuracy);
        debug!(
            "epoch {epoch} ({}) train acc {:.4} val acc {:.4}",
            last_phase.as_str(),
            rows[0].accuracy,
            val.accuracy
        );
        Ok(rows)
    }

    fn track_best(&mut self, val_acc: f64) {
        let s = &mut self.state;
        if s.best_val.map_or(true, |b| val_acc > b) {
            s.best_val = Some(val_acc);
            s.best_epoch = s.epoch;
            s.best_params = s.params.clone();
            s.bad_epochs = 0;
        } else {
            s.bad_epochs += 1;
        }
        if s.epoch >= self.cfg.min_epochs_before_early_stop && s.bad_epochs >= self.cfg.patience {
            s.stopped = true;
        }
    }

    /// Trains until early stopping or `max_epochs`.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut history = Vec::new();
        while !self.is_done() {
            history.extend(self.run_epoch()?);
        }
        info!(
            "{} training finished after {} epochs; best val accuracy {:.4} at epoch {}",
            self.cfg.mode,
            self.state.epoch,
            self.state.best_val.unwrap_or(f64::NAN),
            self.state.best_epoch
        );
        Ok(history)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
}

impl TrainOutcome {
    /// Parameters with the best validation accuracy.
    pub fn best(&self) -> &ModelParams {
        &self.state.best_params
    }
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, cfg.clone())?;
    let history = trainer.run()?;
    Ok(TrainOutcome {
        state: trainer.into_state(),
        history,
    })
}

/// On-disk training snapshot: JSON with a format tag and version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            feature_dim: state.params.theta.feature_dim(),
            num_classes: state.params.theta.num_classes(),
            state: state.clone(),
        }
    }
}

pub fn checkpoint(cfg: &TrainConfig, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint::new(cfg, state);
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer(&mut w, &ck).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

pub fn restore(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(malformed(format!("missing format tag `{CHECKPOINT_FORMAT}`")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))
}
