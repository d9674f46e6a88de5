use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Axis-aligned box in page pixels, anchored at its top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DataError> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: format!("bbox [{x}, {y}, {w}, {h}] has non-finite coordinates"),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: format!("bbox width and height must be positive, got w={w} h={h}"),
            });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| match e {
            DataError::Invalid { msg, .. } => msg,
            other => other.to_string(),
        })
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// RGB image crop, row-major `height x width x 3`, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Crop {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(DataError::Image(format!(
                "crop {height}x{width} needs {} channel values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// Mid-gray crop whose aspect follows the box.
    pub fn placeholder(bbox: &BBox) -> Self {
        const HEIGHT: usize = 16;
        let width = ((HEIGHT as f64) * bbox.w / bbox.h).round().clamp(2.0, 1024.0) as usize;
        Self::uniform(HEIGHT, width, 0.5)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// IOB tag of one character.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn entity(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(e) | Tag::Inside(e) => Some(e),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(e) => write!(f, "B-{e}"),
            Tag::Inside(e) => write!(f, "I-{e}"),
        }
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        match s.split_once('-') {
            Some(("B", e)) if !e.is_empty() => Ok(Tag::Begin(e.to_string())),
            Some(("I", e)) if !e.is_empty() => Ok(Tag::Inside(e.to_string())),
            _ => Err(format!("not an IOB tag: {s:?}")),
        }
    }
}

pub type TagSequence = Vec<Tag>;

/// One OCR text box with its transcript and crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub chars: Vec<char>,
    pub bbox: BBox,
    pub image: Crop,
    pub entity: Option<String>,
    pub char_labels: Option<TagSequence>,
}

impl Segment {
    pub fn new(text: &str, bbox: BBox, image: Crop, entity: Option<String>) -> Result<Self, DataError> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: "segment text must contain at least one character".into(),
            });
        }
        if matches!(entity.as_deref(), Some("")) {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: "entity name must not be empty".into(),
            });
        }
        Ok(Self {
            chars,
            bbox,
            image,
            entity,
            char_labels: None,
        })
    }

    /// Attaches explicit per-character labels.
    pub fn with_labels(mut self, labels: TagSequence) -> Result<Self, DataError> {
        if labels.len() != self.chars.len() {
            return Err(DataError::LengthMismatch {
                tags: labels.len(),
                chars: self.chars.len(),
            });
        }
        if !super::iob::is_valid_iob(&labels) {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: "char_labels is not a valid IOB sequence".into(),
            });
        }
        self.char_labels = Some(labels);
        Ok(self)
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Gold labels: explicit ones if present, else derived from the entity.
    pub fn gold_tags(&self) -> TagSequence {
        self.char_labels.clone().unwrap_or_else(|| super::iob::to_iob(self))
    }
}

/// A document: segments in reading order (top-to-bottom, then left-to-right).
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub segments: Vec<Segment>,
}

impl Document {
    /// Builds a document, sorting segments by `(y, x)` of their top-left corner.
    pub fn new(id: impl Into<String>, mut segments: Vec<Segment>) -> Result<Self, DataError> {
        if segments.is_empty() {
            return Err(DataError::Invalid {
                path: String::new(),
                msg: "empty document".into(),
            });
        }
        segments.sort_by(|a, b| {
            a.bbox
                .y
                .total_cmp(&b.bbox.y)
                .then(a.bbox.x.total_cmp(&b.bbox.x))
        });
        Ok(Self {
            id: id.into(),
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_chars(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    /// Gold entity spans, one per labelled run.
    pub fn gold_spans(&self) -> Vec<EntitySpan> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                super::iob::decode_iob(&s.gold_tags(), &s.chars, i).expect("gold tags match chars")
            })
            .collect()
    }

    /// Entity types named by any segment.
    pub fn entity_types(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .segments
            .iter()
            .flat_map(|s| {
                s.entity
                    .iter()
                    .cloned()
                    .chain(s.char_labels.iter().flatten().filter_map(|t| t.entity().map(str::to_string)))
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

/// An extracted entity value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity: String,
    pub text: String,
    pub segment_index: usize,
}

/// Dense indexing of IOB tags: `O` first, then `B-e`, `I-e` per entity in
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    entities: Vec<String>,
}

impl LabelSet {
    pub fn new<I, S>(entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entities: Vec<String> = entities.into_iter().map(Into::into).collect();
        entities.sort();
        entities.dedup();
        Self { entities }
    }

    pub fn from_documents(docs: &[Document]) -> Self {
        Self::new(docs.iter().flat_map(Document::entity_types))
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// Number of tags, `2E + 1`.
    pub fn len(&self) -> usize {
        2 * self.entities.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, tag: &Tag) -> Option<usize> {
        match tag {
            Tag::Outside => Some(0),
            Tag::Begin(e) => self.entities.binary_search(e).ok().map(|i| 1 + 2 * i),
            Tag::Inside(e) => self.entities.binary_search(e).ok().map(|i| 2 + 2 * i),
        }
    }

    pub fn tag(&self, index: usize) -> Option<Tag> {
        if index == 0 {
            return Some(Tag::Outside);
        }
        let e = self.entities.get((index - 1) / 2)?.clone();
        Some(if index % 2 == 1 { Tag::Begin(e) } else { Tag::Inside(e) })
    }

    pub fn encode(&self, tags: &[Tag]) -> Result<Vec<usize>, DataError> {
        tags.iter()
            .map(|t| {
                self.index(t)
                    .ok_or_else(|| DataError::UnknownLabel(t.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> TagSequence {
        ids.iter()
            .map(|&i| self.tag(i).unwrap_or(Tag::Outside))
            .collect()
    }
}
