//! Graph data model, batching, and the JSON Lines dataset format.
//!
//! A dataset file starts with a header line
//! `{"num_classes": .., "feature_dim": .., "metadata": {..}}` followed by one
//! graph object per line. Edges are directed `[src, dst]` pairs; undirected
//! structure is expressed by listing both directions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One labeled graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedGraph {
    pub id: String,
    pub num_nodes: usize,
    #[serde(with = "row_matrix")]
    pub node_feat: Array2<f64>,
    pub edge_index: Vec<[usize; 2]>,
    pub label: usize,
    /// `true` marks an edge of the ground-truth causal subgraph.
    pub causal_edge_mask: Option<Vec<bool>>,
    pub split: Split,
}

impl AttributedGraph {
    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    /// Checks the per-graph invariants against a dataset-wide feature width.
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> std::result::Result<(), (String, String)> {
        let err = |field: &str, msg: String| Err((field.to_string(), msg));
        if self.node_feat.nrows() != self.num_nodes {
            return err(
                "node_feat",
                format!("{} rows for {} nodes", self.node_feat.nrows(), self.num_nodes),
            );
        }
        if self.num_nodes > 0 && self.node_feat.ncols() != feature_dim {
            return err(
                "node_feat",
                format!("width {} but feature_dim is {}", self.node_feat.ncols(), feature_dim),
            );
        }
        if let Some(pos) = self.node_feat.iter().position(|x| !x.is_finite()) {
            return err("node_feat", format!("non-finite value at flat index {pos}"));
        }
        for (i, &[a, b]) in self.edge_index.iter().enumerate() {
            if a >= self.num_nodes || b >= self.num_nodes {
                return err(
                    "edge_index",
                    format!("edge {i} = ({a},{b}) out of range for {} nodes", self.num_nodes),
                );
            }
        }
        if let Some(mask) = &self.causal_edge_mask {
            if mask.len() != self.edge_index.len() {
                return err(
                    "causal_edge_mask",
                    format!("length {} but {} edges", mask.len(), self.edge_index.len()),
                );
            }
        }
        if self.label >= num_classes {
            return err("label", format!("{} >= num_classes {}", self.label, num_classes));
        }
        Ok(())
    }
}

/// An in-memory graph dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<AttributedGraph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    feature_dim: usize,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
}

impl Dataset {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Dataset {
            graphs: Vec::new(),
            num_classes,
            feature_dim,
            metadata: BTreeMap::new(),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&AttributedGraph> {
        self.graphs.iter().filter(|g| g.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.graphs {
            g.validate(self.feature_dim, self.num_classes)
                .map_err(|(field, msg)| Error::Data(format!("graph `{}`: {field}: {msg}", g.id)))?;
        }
        Ok(())
    }
}

/// Reads a JSON Lines dataset, validating every record.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let schema = |line: usize, field: &str, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message,
    };

    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(schema(1, "header", "file is empty".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| schema(i + 1, "header", e.to_string()))?;
            }
        }
    };

    let mut ds = Dataset {
        graphs: Vec::new(),
        num_classes: header.num_classes,
        feature_dim: header.feature_dim,
        metadata: header.metadata,
    };
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut g: AttributedGraph = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("record")
                .to_string();
            schema(line_no, &field, msg)
        })?;
        if g.num_nodes == 0 {
            g.node_feat = Array2::zeros((0, ds.feature_dim));
        }
        g.validate(ds.feature_dim, ds.num_classes)
            .map_err(|(field, msg)| schema(line_no, &field, msg))?;
        ds.graphs.push(g);
    }
    Ok(ds)
}

/// Writes `ds` in the JSON Lines format read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
        metadata: ds.metadata.clone(),
    };
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Data(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for g in &ds.graphs {
        serde_json::to_writer(&mut w, g).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Block-diagonal concatenation of several graphs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_feat: Array2<f64>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Graph slot of every node.
    pub graph_assignment: Arc<[usize]>,
    pub labels: Arc<[usize]>,
    /// `node_offsets[g]..node_offsets[g + 1]` are the nodes of graph `g`.
    pub node_offsets: Vec<usize>,
    /// `edge_offsets[g]..edge_offsets[g + 1]` are the edges of graph `g`.
    pub edge_offsets: Vec<usize>,
    pub ids: Vec<String>,
    pub splits: Vec<Split>,
    pub causal_masks: Vec<Option<Vec<bool>>>,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_feat.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_feat.ncols()
    }

    pub fn edge_span(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_offsets[g]..self.edge_offsets[g + 1]
    }

    pub fn node_span(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }

    /// Causal mask over all batch edges, if every member graph carries one.
    pub fn causal_mask(&self) -> Option<Vec<bool>> {
        let mut out = Vec::with_capacity(self.num_edges());
        for m in &self.causal_masks {
            out.extend_from_slice(m.as_ref()?);
        }
        Some(out)
    }
}

/// Concatenates graphs into one disconnected batch graph.
pub fn make_batch<G: std::borrow::Borrow<AttributedGraph>>(graphs: &[G]) -> Result<GraphBatch> {
    let first = graphs.first().ok_or(Error::EmptyBatch)?.borrow();
    let dim = first.node_feat.ncols();
    let total_nodes: usize = graphs.iter().map(|g| g.borrow().num_nodes).sum();
    let total_edges: usize = graphs.iter().map(|g| g.borrow().num_edges()).sum();

    let mut node_feat = Array2::zeros((total_nodes, dim));
    let mut src = Vec::with_capacity(total_edges);
    let mut dst = Vec::with_capacity(total_edges);
    let mut assignment = Vec::with_capacity(total_nodes);
    let mut node_offsets = vec![0];
    let mut edge_offsets = vec![0];
    let mut labels = Vec::with_capacity(graphs.len());
    let mut ids = Vec::with_capacity(graphs.len());
    let mut splits = Vec::with_capacity(graphs.len());
    let mut causal_masks = Vec::with_capacity(graphs.len());

    let mut offset = 0;
    for (slot, g) in graphs.iter().enumerate() {
        let g = g.borrow();
        if g.num_nodes > 0 && g.node_feat.ncols() != dim {
            return Err(Error::Dimension(format!(
                "graph `{}` has feature width {} but batch width is {}",
                g.id,
                g.node_feat.ncols(),
                dim
            )));
        }
        if g.num_nodes > 0 {
            node_feat
                .slice_mut(s![offset..offset + g.num_nodes, ..])
                .assign(&g.node_feat);
        }
        for &[a, b] in &g.edge_index {
            src.push(a + offset);
            dst.push(b + offset);
        }
        assignment.extend(std::iter::repeat(slot).take(g.num_nodes));
        offset += g.num_nodes;
        node_offsets.push(offset);
        edge_offsets.push(src.len());
        labels.push(g.label);
        ids.push(g.id.clone());
        splits.push(g.split);
        causal_masks.push(g.causal_edge_mask.clone());
    }

    Ok(GraphBatch {
        node_feat,
        src: src.into(),
        dst: dst.into(),
        graph_assignment: assignment.into(),
        labels: labels.into(),
        node_offsets,
        edge_offsets,
        ids,
        splits,
        causal_masks,
    })
}

/// Inverse of [`make_batch`].
pub fn unbatch(batch: &GraphBatch) -> Vec<AttributedGraph> {
    (0..batch.num_graphs())
        .map(|g| {
            let nodes = batch.node_span(g);
            let off = nodes.start;
            let edge_index = batch
                .edge_span(g)
                .map(|e| [batch.src[e] - off, batch.dst[e] - off])
                .collect();
            AttributedGraph {
                id: batch.ids[g].clone(),
                num_nodes: nodes.len(),
                node_feat: batch.node_feat.slice(s![nodes, ..]).to_owned(),
                edge_index,
                label: batch.labels[g],
                causal_edge_mask: batch.causal_masks[g].clone(),
                split: batch.splits[g],
            }
        })
        .collect()
}

/// Serde adapter storing a matrix as a list of rows.
pub(crate) mod row_matrix {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(m.rows().into_iter().map(|r| r.to_vec()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged node_feat rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len().checked_div(ncols).unwrap_or(0), ncols), flat)
            .map_err(D::Error::custom)
    }
}
