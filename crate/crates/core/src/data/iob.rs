//! IOB (Inside, Outside, Begin) tagging of segment characters.

use super::{DataError, EntitySpan, Segment, Tag, TagSequence};

/// Tags a whole segment with its entity: `B-E, I-E, ...`, or all `O`.
pub fn to_iob(segment: &Segment) -> TagSequence {
    let n = segment.chars.len();
    match &segment.entity {
        Some(e) => (0..n)
            .map(|i| if i == 0 { Tag::Begin(e.clone()) } else { Tag::Inside(e.clone()) })
            .collect(),
        None => vec![Tag::Outside; n],
    }
}

/// Strict validity: every `I-X` follows `B-X` or `I-X`.
pub fn is_valid_iob(tags: &[Tag]) -> bool {
    let mut prev: Option<&str> = None;
    for t in tags {
        match t {
            Tag::Inside(e) if prev != Some(e.as_str()) => return false,
            _ => prev = t.entity(),
        }
    }
    true
}

/// Decodes maximal `B-X (I-X)*` runs into spans.
///
/// Decoding is lenient: an `I-X` that does not continue a run of `X` opens a
/// new span instead of being dropped.
pub fn decode_iob(tags: &[Tag], chars: &[char], segment_index: usize) -> Result<Vec<EntitySpan>, DataError> {
    if tags.len() != chars.len() {
        return Err(DataError::LengthMismatch {
            tags: tags.len(),
            chars: chars.len(),
        });
    }
    let mut spans = Vec::new();
    let mut open: Option<(String, String)> = None;
    for (tag, &c) in tags.iter().zip(chars) {
        match tag {
            Tag::Outside => {
                spans.extend(open.take().map(|(entity, text)| EntitySpan { entity, text, segment_index }));
            }
            Tag::Begin(e) => {
                spans.extend(open.take().map(|(entity, text)| EntitySpan { entity, text, segment_index }));
                open = Some((e.clone(), c.to_string()));
            }
            Tag::Inside(e) => match open.as_mut() {
                Some((cur, text)) if cur == e => text.push(c),
                _ => {
                    spans.extend(open.take().map(|(entity, text)| EntitySpan { entity, text, segment_index }));
                    open = Some((e.clone(), c.to_string()));
                }
            },
        }
    }
    spans.extend(open.map(|(entity, text)| EntitySpan { entity, text, segment_index }));
    Ok(spans)
}
