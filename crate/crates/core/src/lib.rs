//! Confounder-robust graph classification.
//!
//! An auxiliary network `q` scores every edge; the lowest-scoring edges of
//! each graph are removed after layer `u` of the message-passing encoder
//! `f`, and the surviving messages are scaled by their scores. `q` and `f`
//! are trained alternately (see [`trainer`]).

pub mod analysis;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use graph::{load_dataset, make_batch, save_dataset, unbatch, AttributedGraph, Dataset, GraphBatch, Split};
pub use model::{EdgeWeights, EncoderParams, IvGenParams, ModelParams, Pipeline, Removal};
pub use trainer::{Mode, TrainConfig, TrainState};
