//! The assembled model: encoder, graph module and BiLSTM-CRF decoder
//! trained jointly on the CRF and graph learning losses.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod net;
mod train;

pub use adam::Adam;
pub use checkpoint::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, CONFIG_KEYS};
pub use gradcheck::{gradcheck_fixture, model_gradcheck, tiny_config};
pub use net::{combine_losses, Forward, Losses, Model, PreparedDoc};
pub use train::{
    evaluate, layer_sweep, split_validation, sweep_table, train, train_split, EpochMetrics, SweepRow,
};

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::decoding::DecodingError;
use crate::encoding::EncodingError;
use crate::graph::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Decoding(#[from] DecodingError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(
        "non-finite loss on document {doc_id:?} (epoch {epoch}, step {step}): l_crf = {l_crf}, l_gl = {l_gl}"
    )]
    NonFinite {
        doc_id: String,
        epoch: usize,
        step: u64,
        l_crf: f64,
        l_gl: f64,
    },
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch: file is corrupt")]
    Checksum,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
