use std::collections::BTreeMap;

use super::EncodingError;
use crate::data::Document;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Character vocabulary. Ids 0 and 1 are reserved for padding and unknown
/// characters; real characters take the dense range starting at 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    char_to_id: BTreeMap<char, usize>,
}

impl Vocabulary {
    /// Collects every character of the corpus, numbered in code-point order.
    pub fn build(docs: &[Document]) -> Self {
        let mut chars: Vec<char> = docs
            .iter()
            .flat_map(|d| d.segments.iter().flat_map(|s| s.chars.iter().copied()))
            .collect();
        chars.sort_unstable();
        chars.dedup();
        Self {
            char_to_id: chars.into_iter().enumerate().map(|(i, c)| (c, i + 2)).collect(),
        }
    }

    /// Total id count including the two specials.
    pub fn len(&self) -> usize {
        self.char_to_id.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, chars: &[char]) -> Vec<usize> {
        chars.iter().map(|&c| self.id(c)).collect()
    }

    pub fn to_json(&self) -> String {
        let m: BTreeMap<String, usize> = self.char_to_id.iter().map(|(c, &i)| (c.to_string(), i)).collect();
        serde_json::to_string(&m).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EncodingError> {
        let m: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| EncodingError::Vocabulary(e.to_string()))?;
        Self::from_map(m)
    }

    pub fn from_map(m: BTreeMap<String, usize>) -> Result<Self, EncodingError> {
        let bad = |msg: String| Err(EncodingError::Vocabulary(msg));
        let mut char_to_id = BTreeMap::new();
        let mut seen = vec![false; m.len()];
        for (k, id) in m {
            let mut it = k.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return bad(format!("key {k:?} is not a single character"));
            };
            if id < 2 || id - 2 >= seen.len() || seen[id - 2] {
                return bad(format!("id {id} for {k:?} is reserved, duplicated or not dense"));
            }
            seen[id - 2] = true;
            char_to_id.insert(c, id);
        }
        Ok(Self { char_to_id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, Crop, Segment};

    fn doc(text: &str) -> Document {
        let b = BBox::new(0.0, 0.0, 4.0, 2.0).unwrap();
        Document::new("d", vec![Segment::new(text, b, Crop::placeholder(&b), None).unwrap()]).unwrap()
    }

    #[test]
    fn ids_are_dense_after_specials() {
        let v = Vocabulary::build(&[doc("bab"), doc("ca")]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode(&['a', 'b', 'c', 'z']), [2, 3, 4, UNK]);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::build(&[doc("héllo wörld")]);
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(Vocabulary::from_json(r#"{"a": 1}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"a": 2, "b": 2}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"a": 3}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"ab": 2}"#).is_err());
        assert!(Vocabulary::from_json(r#"[1]"#).is_err());
    }
}
