//! The `pick-kie/1` dataset and predictions JSON formats.
//!
//! Dataset file:
//!
//! ```json
//! {"format": "pick-kie/1", "id": "doc-0",
//!  "segments": [{"bbox": [x, y, w, h], "text": "TOTAL", "entity": null, "image": null}]}
//! ```
//!
//! `image` is a base64-encoded PNG or null; a segment may also carry
//! `char_labels`, a list of IOB tag strings overriding `entity`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BBox, Crop, DataError, Document, EntitySpan, Segment, Tag};

pub const FORMAT_VERSION: &str = "pick-kie/1";

/// Largest accepted side of an embedded crop.
const MAX_IMAGE_SIDE: u32 = 4096;

#[derive(Deserialize)]
struct RawDocument {
    format: String,
    id: String,
    segments: Vec<RawSegment>,
}

#[derive(Deserialize)]
struct RawSegment {
    bbox: BBox,
    text: String,
    #[serde(default)]
    entity: Option<String>,
    #[serde(default)]
    image: Option<ImageField>,
    #[serde(default)]
    char_labels: Option<Vec<TagField>>,
}

#[derive(Deserialize)]
#[serde(try_from = "String")]
struct ImageField(Crop);

impl TryFrom<String> for ImageField {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let bytes = B64.decode(s.trim()).map_err(|e| format!("image is not valid base64: {e}"))?;
        decode_png(&bytes).map(ImageField).map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
#[serde(try_from = "String")]
struct TagField(Tag);

impl TryFrom<String> for TagField {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse().map(TagField)
    }
}

#[derive(Serialize)]
struct OutDocument<'a> {
    format: &'static str,
    id: &'a str,
    segments: Vec<OutSegment>,
}

#[derive(Serialize)]
struct OutSegment {
    bbox: BBox,
    text: String,
    entity: Option<String>,
    image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    char_labels: Option<Vec<String>>,
}

/// Predictions for one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub format: String,
    pub id: String,
    pub predictions: Vec<EntitySpan>,
}

fn json_error(path: &str, e: serde_json::Error) -> DataError {
    let msg = e.to_string();
    // serde_json appends " at line L column C"; the position is reported separately.
    let msg = match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    };
    DataError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        msg,
    }
}

fn check_format(format: &str) -> Result<(), DataError> {
    if format != FORMAT_VERSION {
        return Err(DataError::Invalid {
            path: String::new(),
            msg: format!("unsupported format {format:?}, expected {FORMAT_VERSION:?}"),
        });
    }
    Ok(())
}

/// Parses a dataset document from JSON text.
pub fn parse_document(text: &str) -> Result<Document, DataError> {
    let raw: RawDocument = serde_json::from_str(text).map_err(|e| json_error("", e))?;
    check_format(&raw.format)?;
    let mut segments = Vec::with_capacity(raw.segments.len());
    for (i, s) in raw.segments.into_iter().enumerate() {
        let at = |e: DataError| DataError::Invalid {
            path: String::new(),
            msg: format!("segment {i}: {}", strip_path(e)),
        };
        let image = match s.image {
            Some(ImageField(c)) => c,
            None => Crop::placeholder(&s.bbox),
        };
        let mut seg = Segment::new(&s.text, s.bbox, image, s.entity).map_err(at)?;
        if let Some(labels) = s.char_labels {
            seg = seg.with_labels(labels.into_iter().map(|t| t.0).collect()).map_err(at)?;
        }
        segments.push(seg);
    }
    Document::new(raw.id, segments)
}

fn strip_path(e: DataError) -> String {
    match e {
        DataError::Invalid { msg, .. } => msg,
        other => other.to_string(),
    }
}

pub fn load_document(path: impl AsRef<Path>) -> Result<Document, DataError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    parse_document(&text).map_err(|e| e.at_path(&p))
}

pub fn document_to_json(doc: &Document) -> String {
    let out = OutDocument {
        format: FORMAT_VERSION,
        id: &doc.id,
        segments: doc
            .segments
            .iter()
            .map(|s| OutSegment {
                bbox: s.bbox,
                text: s.text(),
                entity: s.entity.clone(),
                // placeholders are not representable in 8 bits, so they stay implicit
                image: (s.image != Crop::placeholder(&s.bbox)).then(|| B64.encode(encode_png(&s.image))),
                char_labels: s
                    .char_labels
                    .as_ref()
                    .map(|l| l.iter().map(Tag::to_string).collect()),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&out).expect("documents serialize")
}

pub fn save_document(doc: &Document, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, document_to_json(doc) + "\n").map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads every `*.json` file of a directory, sorted by file name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Document>, DataError> {
    let dir = dir.as_ref();
    let io = |source| DataError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths.iter().map(load_document).collect()
}

pub fn parse_predictions(text: &str) -> Result<PredictionsFile, DataError> {
    let p: PredictionsFile = serde_json::from_str(text).map_err(|e| json_error("", e))?;
    check_format(&p.format)?;
    if let Some(i) = p.predictions.iter().position(|s| s.text.is_empty() || s.entity.is_empty()) {
        return Err(DataError::Invalid {
            path: String::new(),
            msg: format!("prediction {i}: entity and text must be non-empty"),
        });
    }
    Ok(p)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionsFile, DataError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    parse_predictions(&text).map_err(|e| e.at_path(&p))
}

pub fn predictions_to_json(id: &str, spans: &[EntitySpan]) -> String {
    let p = PredictionsFile {
        format: FORMAT_VERSION.to_string(),
        id: id.to_string(),
        predictions: spans.to_vec(),
    };
    serde_json::to_string_pretty(&p).expect("predictions serialize")
}

pub fn save_predictions(id: &str, spans: &[EntitySpan], path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, predictions_to_json(id, spans) + "\n").map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Encodes a crop as 8-bit RGB PNG, quantizing channels to `round(255 v)`.
pub fn encode_png(crop: &Crop) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, crop.width as u32, crop.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        let bytes: Vec<u8> = crop
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_image_data(&bytes).expect("in-memory png data");
    }
    out
}

/// Decodes any 8/16-bit PNG into an RGB crop with channels in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Crop, DataError> {
    let err = |e: png::DecodingError| DataError::Image(e.to_string());
    let mut dec = png::Decoder::new_with_limits(Cursor::new(bytes), png::Limits { bytes: 1 << 26 });
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(err)?;
    let (w, h) = {
        let info = reader.info();
        (info.width, info.height)
    };
    if w == 0 || h == 0 || w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
        return Err(DataError::Image(format!("unsupported image size {w}x{h}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let px = &buf[..frame.buffer_size()];
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(DataError::Image("unexpanded palette image".into())),
    };
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &px[y * stride..y * stride + w * channels];
        for x in 0..w {
            let p = &row[x * channels..(x + 1) * channels];
            let rgb = match channels {
                1 | 2 => [p[0]; 3],
                _ => [p[0], p[1], p[2]],
            };
            data.extend(rgb.iter().map(|&c| c as f64 / 255.0));
        }
    }
    Crop::new(h, w, data)
}
