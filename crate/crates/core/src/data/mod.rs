//! Documents, file formats, IOB tagging, synthetic corpora and entity metrics.

mod format;
mod iob;
mod metrics;
mod render;
mod synth;
mod types;

pub use format::{
    decode_png, document_to_json, encode_png, load_corpus, load_document, load_predictions,
    parse_document, parse_predictions, predictions_to_json, save_document, save_predictions, PredictionsFile,
    FORMAT_VERSION,
};
pub use iob::{decode_iob, is_valid_iob, to_iob};
pub use metrics::{compute_metrics, MetricsReport, Prf};
pub use render::{render_text, GLYPH_H, GLYPH_W};
pub use synth::{generate_synthetic, EntitySpec, LayoutMode, SynthConfig, ValueKind};
pub use types::{BBox, Crop, Document, EntitySpan, LabelSet, Segment, Tag, TagSequence};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: line {line}, column {column}: {msg}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{}{msg}", if path.is_empty() { String::new() } else { format!("{path}: ") })]
    Invalid { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{tags} tags for {chars} characters")]
    LengthMismatch { tags: usize, chars: usize },
    #[error("label {0} is not in the label set")]
    UnknownLabel(String),
    #[error("invalid synthetic schema: {0}")]
    Schema(String),
    #[error("image: {0}")]
    Image(String),
}

impl DataError {
    pub(crate) fn at_path(self, p: &str) -> Self {
        match self {
            DataError::Invalid { path, msg } if path.is_empty() => DataError::Invalid { path: p.into(), msg },
            DataError::Parse {
                path,
                line,
                column,
                msg,
            } if path.is_empty() => DataError::Parse {
                path: p.into(),
                line,
                column,
                msg,
            },
            other => other,
        }
    }
}
