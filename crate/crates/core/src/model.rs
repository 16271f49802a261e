//! Message-passing encoder, instrumental edge-weight generator, and the
//! parameter-free edge removal applied after encoder layer `u`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::tape::{Gradients, Mat, Tape, Var};

/// Access to the tensors of a parameter collection in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Mat>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

/// One message-passing layer:
/// `h'_v = tanh(h_v W_self + b_self + sum_{(u,v)} scale_uv (h_u W_agg + b_agg))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpLayerParams {
    pub w_self: Mat,
    pub b_self: Mat,
    pub w_agg: Mat,
    pub b_agg: Mat,
}

impl MpLayerParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        MpLayerParams {
            w_self: glorot(rng, d_in, d_out),
            b_self: Mat::zeros((1, d_out)),
            w_agg: glorot(rng, d_in, d_out),
            b_agg: Mat::zeros((1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_self.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w_self.ncols()
    }

    fn tensors(&self) -> [&Mat; 4] {
        [&self.w_self, &self.b_self, &self.w_agg, &self.b_agg]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 4] {
        [&mut self.w_self, &mut self.b_self, &mut self.w_agg, &mut self.b_agg]
    }

    fn bind(&self, tape: &mut Tape, track: bool) -> BoundLayer {
        BoundLayer {
            w_self: tape.leaf(self.w_self.clone(), track),
            b_self: tape.leaf(self.b_self.clone(), track),
            w_agg: tape.leaf(self.w_agg.clone(), track),
            b_agg: tape.leaf(self.b_agg.clone(), track),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    w_self: Var,
    b_self: Var,
    w_agg: Var,
    b_agg: Var,
}

impl BoundLayer {
    fn vars(&self) -> [Var; 4] {
        [self.w_self, self.b_self, self.w_agg, self.b_agg]
    }
}

/// Encoder `f` plus its linear classifier head (the collection `theta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<MpLayerParams>,
    pub head_w: Mat,
    pub head_b: Mat,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        feature_dim: usize,
        hidden: usize,
        num_layers: usize,
        num_classes: usize,
    ) -> Self {
        assert!(num_layers >= 1, "encoder needs at least one layer");
        let layers = (0..num_layers)
            .map(|k| MpLayerParams::init(rng, if k == 0 { feature_dim } else { hidden }, hidden))
            .collect();
        EncoderParams {
            layers,
            head_w: glorot(rng, hidden, num_classes),
            head_b: Mat::zeros((1, num_classes)),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn hidden(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.ncols()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundEncoder {
        BoundEncoder {
            layers: self.layers.iter().map(|l| l.bind(tape, track)).collect(),
            head_w: tape.leaf(self.head_w.clone(), track),
            head_b: tape.leaf(self.head_b.clone(), track),
        }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    layers: Vec<BoundLayer>,
    head_w: Var,
    head_b: Var,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|l| l.vars()).collect();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Instrumental-variable generator `q` (the collection `phi`): one
/// message-passing layer followed by a two-layer edge scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvGenParams {
    pub layer: MpLayerParams,
    pub score_w1: Mat,
    pub score_b1: Mat,
    pub score_w2: Mat,
    pub score_b2: Mat,
}

impl IvGenParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, hidden: usize) -> Self {
        IvGenParams {
            layer: MpLayerParams::init(rng, feature_dim, hidden),
            score_w1: glorot(rng, 2 * hidden, hidden),
            score_b1: Mat::zeros((1, hidden)),
            score_w2: glorot(rng, hidden, 1),
            score_b2: Mat::zeros((1, 1)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.d_in()
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundIvGen {
        BoundIvGen {
            layer: self.layer.bind(tape, track),
            score_w1: tape.leaf(self.score_w1.clone(), track),
            score_b1: tape.leaf(self.score_b1.clone(), track),
            score_w2: tape.leaf(self.score_w2.clone(), track),
            score_b2: tape.leaf(self.score_b2.clone(), track),
        }
    }
}

impl ParamSet for IvGenParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v: Vec<&Mat> = self.layer.tensors().to_vec();
        v.extend([&self.score_w1, &self.score_b1, &self.score_w2, &self.score_b2]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let IvGenParams {
            layer,
            score_w1,
            score_b1,
            score_w2,
            score_b2,
        } = self;
        let mut v: Vec<&mut Mat> = layer.tensors_mut().into_iter().collect();
        v.extend([score_w1, score_b1, score_w2, score_b2]);
        v
    }
}

#[derive(Debug, Clone)]
pub struct BoundIvGen {
    layer: BoundLayer,
    score_w1: Var,
    score_b1: Var,
    score_w2: Var,
    score_b2: Var,
}

impl BoundIvGen {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.layer.vars().to_vec();
        v.extend([self.score_w1, self.score_b1, self.score_w2, self.score_b2]);
        v
    }
}

/// Both trainable collections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: EncoderParams,
    pub phi: IvGenParams,
}

/// Pulls per-tensor gradients for `vars` out of `grads`, zero-filled where
/// nothing flowed (frozen collections end up all zeros).
pub fn collect_grads<P: ParamSet>(params: &P, vars: &[Var], grads: &mut Gradients) -> Vec<Mat> {
    params
        .tensors()
        .iter()
        .zip(vars)
        .map(|(t, &v)| grads.take_or_zeros(v, t.dim()))
        .collect()
}

/// Instrumental variable: one weight in `(0, 1)` per batch edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights(pub Vec<f64>);

impl EdgeWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Output of the removal function `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub kept_edge_mask: Vec<bool>,
    /// Message scale per edge: the edge weight if kept, 0 if dropped.
    pub edge_scale: Vec<f64>,
}

impl Removal {
    pub fn kept_indices(&self) -> Vec<usize> {
        self.kept_edge_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    /// Mean-pooled graph representations, one row per graph.
    pub representation: Mat,
    pub logits: Mat,
    pub kept_edge_mask: Option<Vec<bool>>,
}

/// Removal plan already placed on a tape: the subset of batch edges that
/// survive, and their message scales.
#[derive(Debug, Clone)]
pub struct TapeRemoval {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub scale: Var,
}

impl TapeRemoval {
    /// Gathers the kept edges' scales out of a tape-resident `E x 1` weight column.
    pub fn from_weights(tape: &mut Tape, batch: &GraphBatch, kept: &[usize], weights: Var) -> Self {
        let kept: Arc<[usize]> = kept.into();
        let scale = tape.gather_rows(weights, kept.clone());
        Self::with_scale(batch, &kept, scale)
    }

    /// Places constant scales for the kept edges.
    pub fn constant(tape: &mut Tape, batch: &GraphBatch, removal: &Removal) -> Self {
        let kept = removal.kept_indices();
        let scale = Mat::from_shape_fn((kept.len(), 1), |(i, _)| removal.edge_scale[kept[i]]);
        let scale = tape.constant(scale);
        Self::with_scale(batch, &kept, scale)
    }

    fn with_scale(batch: &GraphBatch, kept: &[usize], scale: Var) -> Self {
        TapeRemoval {
            src: kept.iter().map(|&e| batch.src[e]).collect(),
            dst: kept.iter().map(|&e| batch.dst[e]).collect(),
            scale,
        }
    }
}

fn mp_layer_tape(
    tape: &mut Tape,
    h: Var,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    scale: Option<Var>,
    layer: &BoundLayer,
) -> Var {
    let n = tape.value(h).nrows();
    let own = tape.matmul(h, layer.w_self);
    let own = tape.add_row(own, layer.b_self);
    let msg = tape.matmul(h, layer.w_agg);
    let msg = tape.add_row(msg, layer.b_agg);
    let agg = tape.scatter(msg, scale, src, dst, n);
    let pre = tape.add(own, agg);
    tape.tanh(pre)
}

/// Runs the encoder on `tape`, returning `(representation, logits)`.
///
/// Layers `1..=u` see the full graph with unit scale; when `removal` is
/// given, layers `u+1..=K` only see the kept edges with their scales.
pub fn encode_on_tape(
    tape: &mut Tape,
    theta: &BoundEncoder,
    batch: &GraphBatch,
    removal: Option<&TapeRemoval>,
    u: usize,
) -> (Var, Var) {
    let mut h = tape.constant(batch.node_feat.clone());
    for (k, layer) in theta.layers.iter().enumerate() {
        h = match removal {
            Some(r) if k >= u => {
                mp_layer_tape(tape, h, r.src.clone(), r.dst.clone(), Some(r.scale), layer)
            }
            _ => mp_layer_tape(tape, h, batch.src.clone(), batch.dst.clone(), None, layer),
        };
    }
    let rep = tape.segment_mean(h, batch.graph_assignment.clone(), batch.num_graphs());
    let logits = tape.matmul(rep, theta.head_w);
    let logits = tape.add_row(logits, theta.head_b);
    (rep, logits)
}

/// Runs `q` on `tape`, returning the `E x 1` edge-weight column.
pub fn iv_on_tape(tape: &mut Tape, phi: &BoundIvGen, batch: &GraphBatch) -> Var {
    let x = tape.constant(batch.node_feat.clone());
    let emb = mp_layer_tape(tape, x, batch.src.clone(), batch.dst.clone(), None, &phi.layer);
    let es = tape.gather_rows(emb, batch.src.clone());
    let ed = tape.gather_rows(emb, batch.dst.clone());
    let cat = tape.concat_cols(es, ed);
    let hid = tape.matmul(cat, phi.score_w1);
    let hid = tape.add_row(hid, phi.score_b1);
    let hid = tape.tanh(hid);
    let score = tape.matmul(hid, phi.score_w2);
    let score = tape.add_row(score, phi.score_b2);
    tape.sigmoid(score)
}

fn check_layer_input(h_cols: usize, layer: &MpLayerParams) -> Result<()> {
    if h_cols != layer.d_in() {
        return Err(Error::Dimension(format!(
            "node matrix width {h_cols} but layer expects {}",
            layer.d_in()
        )));
    }
    Ok(())
}

/// Applies one message-passing layer to a node matrix.
pub fn mp_layer(
    h: &Mat,
    edge_index: &[[usize; 2]],
    edge_scale: Option<&[f64]>,
    layer: &MpLayerParams,
) -> Result<Mat> {
    check_layer_input(h.ncols(), layer)?;
    let n = h.nrows();
    if let Some(e) = edge_index.iter().find(|e| e[0] >= n || e[1] >= n) {
        return Err(Error::Dimension(format!("edge {e:?} outside {n} nodes")));
    }
    if let Some(s) = edge_scale {
        if s.len() != edge_index.len() {
            return Err(Error::Dimension(format!(
                "{} edge scales for {} edges",
                s.len(),
                edge_index.len()
            )));
        }
    }
    let mut tape = Tape::new();
    let bound = layer.bind(&mut tape, false);
    let x = tape.constant(h.clone());
    let src: Arc<[usize]> = edge_index.iter().map(|e| e[0]).collect();
    let dst: Arc<[usize]> = edge_index.iter().map(|e| e[1]).collect();
    let scale = edge_scale.map(|s| tape.constant(Mat::from_shape_vec((s.len(), 1), s.to_vec()).unwrap()));
    let out = mp_layer_tape(&mut tape, x, src, dst, scale, &bound);
    Ok(tape.value(out).clone())
}

/// Generates the instrumental edge weights for every edge of `batch`.
pub fn compute_iv(phi: &IvGenParams, batch: &GraphBatch) -> Result<EdgeWeights> {
    check_layer_input(batch.feature_dim(), &phi.layer)?;
    let mut tape = Tape::new();
    let bound = phi.bind(&mut tape, false);
    let z = iv_on_tape(&mut tape, &bound, batch);
    Ok(EdgeWeights(tape.value(z).iter().copied().collect()))
}

/// Number of edges dropped from a graph with `num_edges` edges.
pub fn drop_count(num_edges: usize, drop_fraction: f64) -> usize {
    // The epsilon keeps products such as 0.29 * 100 from flooring to 28.
    ((drop_fraction * num_edges as f64) + 1e-9).floor().min(num_edges as f64) as usize
}

/// Parameter-free removal `r`: per graph, drops the lowest-weight
/// `floor(drop_fraction * |E_i|)` edges (lower edge index first on ties)
/// and scales surviving messages by their weight.
pub fn remove_confounders(batch: &GraphBatch, z: &EdgeWeights, drop_fraction: f64) -> Result<Removal> {
    if z.len() != batch.num_edges() {
        return Err(Error::Dimension(format!(
            "{} edge weights for {} edges",
            z.len(),
            batch.num_edges()
        )));
    }
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop_fraction {drop_fraction} outside [0, 1]")));
    }
    if let Some(i) = z.0.iter().position(|w| !w.is_finite()) {
        return Err(Error::Data(format!("edge weight {i} is not finite")));
    }
    let mut kept = vec![true; z.len()];
    let mut order: Vec<usize> = Vec::new();
    for g in 0..batch.num_graphs() {
        let span = batch.edge_span(g);
        let n_drop = drop_count(span.len(), drop_fraction);
        if n_drop == 0 {
            continue;
        }
        order.clear();
        order.extend(span);
        order.sort_by(|&a, &b| z.0[a].total_cmp(&z.0[b]).then(a.cmp(&b)));
        for &e in &order[..n_drop] {
            kept[e] = false;
        }
    }
    let edge_scale = z
        .0
        .iter()
        .zip(&kept)
        .map(|(&w, &k)| if k { w } else { 0.0 })
        .collect();
    Ok(Removal {
        kept_edge_mask: kept,
        edge_scale,
    })
}

fn check_encoder(theta: &EncoderParams, batch: &GraphBatch, u: usize) -> Result<()> {
    check_layer_input(batch.feature_dim(), &theta.layers[0])?;
    if u > theta.num_layers() {
        return Err(Error::Config(format!(
            "u = {u} outside [0, {}]",
            theta.num_layers()
        )));
    }
    Ok(())
}

/// Runs the encoder and classifier head. Without `removal` this is the
/// plain encoder `f'` on full graphs.
pub fn encode(
    theta: &EncoderParams,
    batch: &GraphBatch,
    removal: Option<&Removal>,
    u: usize,
) -> Result<EncodeOutput> {
    check_encoder(theta, batch, u)?;
    if let Some(r) = removal {
        if r.kept_edge_mask.len() != batch.num_edges() || r.edge_scale.len() != batch.num_edges() {
            return Err(Error::Dimension("removal is not aligned with the batch edges".into()));
        }
    }
    let mut tape = Tape::new();
    let bound = theta.bind(&mut tape, false);
    let tr = removal.map(|r| TapeRemoval::constant(&mut tape, batch, r));
    let (rep, logits) = encode_on_tape(&mut tape, &bound, batch, tr.as_ref(), u);
    Ok(EncodeOutput {
        representation: tape.value(rep).clone(),
        logits: tape.value(logits).clone(),
        kept_edge_mask: removal.map(|r| r.kept_edge_mask.clone()),
    })
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Mat) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Class predictions of the plain encoder on full graphs.
pub fn predict(theta: &EncoderParams, batch: &GraphBatch) -> Result<Vec<usize>> {
    Ok(argmax_rows(&encode(theta, batch, None, 0)?.logits))
}

/// How the encoder is driven at train and eval time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pipeline {
    pub use_removal: bool,
    pub u: usize,
    pub drop_fraction: f64,
}

/// Full forward pass: `q`, then `r`, then `f` with removal after layer `u`,
/// or just `f'` when the pipeline has removal disabled.
pub fn forward(params: &ModelParams, pipeline: &Pipeline, batch: &GraphBatch) -> Result<EncodeOutput> {
    if pipeline.use_removal {
        let z = compute_iv(&params.phi, batch)?;
        let removal = remove_confounders(batch, &z, pipeline.drop_fraction)?;
        encode(&params.theta, batch, Some(&removal), pipeline.u)
    } else {
        encode(&params.theta, batch, None, pipeline.u)
    }
}
