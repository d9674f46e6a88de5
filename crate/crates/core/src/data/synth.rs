//! Seeded synthetic receipts.
//!
//! Fixed layouts put every entity in the same grid cell on every page.
//! Variable layouts shuffle and jitter the blocks, add distractor lines, and
//! can emit an ambiguity probe: two entities of the same value kind carrying
//! identical text, told apart either by font color alone (their keys are
//! omitted) or by their key context alone (both drawn in black).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{render_text, text_width, GLYPH_H};
use super::{BBox, Crop, DataError, Document, Segment};

const ROW_STEP: f64 = 24.0;
const LEFT: f64 = 20.0;
const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutMode {
    Fixed,
    Variable,
}

impl fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayoutMode::Fixed => "fixed",
            LayoutMode::Variable => "variable",
        })
    }
}

impl FromStr for LayoutMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(LayoutMode::Fixed),
            "variable" => Ok(LayoutMode::Variable),
            _ => Err(format!("unknown layout mode {s:?} (expected fixed or variable)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Name,
    Date,
    Amount,
    Code,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntitySpec {
    pub name: String,
    pub kind: ValueKind,
    /// Key text printed before the value, e.g. `TOTAL:`.
    pub key: Option<String>,
    pub color: [u8; 3],
}

impl EntitySpec {
    pub fn new(name: &str, kind: ValueKind, key: Option<&str>, color: [u8; 3]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            key: key.map(str::to_string),
            color,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub mode: LayoutMode,
    pub entities: Vec<EntitySpec>,
    /// Word list for names and filler lines.
    pub vocabulary: Vec<String>,
    pub count: usize,
    pub render_images: bool,
    pub ambiguity_probe: bool,
    /// Extra filler lines per variable-layout document.
    pub distractors: usize,
    /// Emit variable-layout segments in random order rather than reading
    /// order, like OCR output that carries no serialization.
    pub shuffle_order: bool,
}

const WORDS: &[&str] = &[
    "KEDAI", "MAJU", "JAYA", "SINAR", "MEGA", "BARU", "PUTRA", "INDAH", "SEGAR", "CERIA", "BUMI", "TIMUR", "ALAM",
    "EMAS", "PERMATA", "HARAPAN", "MUTIARA", "SRI", "TANJUNG", "BUKIT", "TAMAN", "JALAN", "LORONG", "PASAR", "NASI",
    "AYAM", "TEH", "KOPI", "ROTI", "MEE", "GULA", "SUSU", "AIR", "BERAS", "MINYAK", "SABUN", "KERTAS", "PEN", "FAIL",
    "BATERI",
];

impl SynthConfig {
    /// Three-entity fixed layout.
    pub fn fixed(count: usize) -> Self {
        Self {
            mode: LayoutMode::Fixed,
            entities: vec![
                EntitySpec::new("COMPANY", ValueKind::Name, None, BLACK),
                EntitySpec::new("DATE", ValueKind::Date, Some("DATE:"), BLACK),
                EntitySpec::new("TOTAL", ValueKind::Amount, Some("TOTAL:"), BLACK),
            ],
            vocabulary: WORDS.iter().map(|w| w.to_string()).collect(),
            count,
            render_images: true,
            ambiguity_probe: false,
            distractors: 0,
            shuffle_order: false,
        }
    }

    /// Four-entity variable layout with the TOTAL/CASH ambiguity probe.
    pub fn variable(count: usize) -> Self {
        Self {
            mode: LayoutMode::Variable,
            entities: vec![
                EntitySpec::new("COMPANY", ValueKind::Name, None, BLACK),
                EntitySpec::new("DATE", ValueKind::Date, Some("DATE:"), BLACK),
                EntitySpec::new("TOTAL", ValueKind::Amount, Some("TOTAL:"), [200, 20, 20]),
                EntitySpec::new("CASH", ValueKind::Amount, Some("CASH:"), [20, 20, 200]),
            ],
            vocabulary: WORDS.iter().map(|w| w.to_string()).collect(),
            count,
            render_images: true,
            ambiguity_probe: true,
            distractors: 4,
            shuffle_order: true,
        }
    }

    fn validate(&self) -> Result<Option<(usize, usize)>, DataError> {
        let bad = |m: String| Err(DataError::Schema(m));
        if self.entities.is_empty() {
            return bad("at least one entity is required".into());
        }
        if self.vocabulary.is_empty() || self.vocabulary.iter().any(|w| w.trim().is_empty()) {
            return bad("vocabulary must be a non-empty list of non-empty words".into());
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.name.is_empty() || e.name.chars().any(|c| c.is_whitespace()) {
                return bad(format!("entity name {:?} must be non-empty without whitespace", e.name));
            }
            if self.entities[..i].iter().any(|o| o.name == e.name) {
                return bad(format!("duplicate entity {:?}", e.name));
            }
            if e.key.as_deref().is_some_and(|k| k.trim().is_empty()) {
                return bad(format!("entity {:?} has an empty key", e.name));
            }
        }
        if !self.ambiguity_probe {
            return Ok(None);
        }
        if self.mode != LayoutMode::Variable {
            return bad("the ambiguity probe needs the variable layout".into());
        }
        for i in 0..self.entities.len() {
            for j in i + 1..self.entities.len() {
                let (a, b) = (&self.entities[i], &self.entities[j]);
                if a.kind == b.kind && a.key.is_some() && b.key.is_some() && a.color != b.color {
                    return Ok(Some((i, j)));
                }
            }
        }
        bad("the ambiguity probe needs two keyed entities of the same kind with different colors".into())
    }
}

struct Page<'a> {
    cfg: &'a SynthConfig,
    segments: Vec<Segment>,
}

impl Page<'_> {
    fn put(&mut self, text: &str, x: f64, y: f64, entity: Option<&str>, color: [u8; 3]) -> Result<(), DataError> {
        let n = text.chars().count();
        let bbox = BBox::new(x, y, text_width(n) as f64, GLYPH_H as f64)?;
        let image = if self.cfg.render_images {
            render_text(text, color)
        } else {
            Crop::placeholder(&bbox)
        };
        self.segments
            .push(Segment::new(text, bbox, image, entity.map(str::to_string))?);
        Ok(())
    }
}

fn value(kind: ValueKind, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> String {
    match kind {
        ValueKind::Name => {
            const SUFFIX: &[&str] = &["SDN BHD", "TRADING", "ENTERPRISE", "LTD"];
            let n = rng.gen_range(1..=2);
            let mut parts: Vec<&str> = (0..n)
                .map(|_| cfg.vocabulary.choose(rng).unwrap().as_str())
                .collect();
            parts.push(SUFFIX.choose(rng).unwrap());
            parts.join(" ")
        }
        ValueKind::Date => format!(
            "{:02}/{:02}/{}",
            rng.gen_range(1..=28),
            rng.gen_range(1..=12),
            rng.gen_range(2015..=2024)
        ),
        ValueKind::Amount => format!("{}.{:02}", rng.gen_range(1..1000), rng.gen_range(0..100)),
        ValueKind::Code => {
            let letters: String = (0..2).map(|_| rng.gen_range(b'A'..=b'Z') as char).collect();
            format!("{letters}{:06}", rng.gen_range(0..1_000_000))
        }
    }
}

/// A filler line: `(left text, optional right text)`.
fn filler(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (String, Option<String>) {
    let word = |rng: &mut ChaCha8Rng| cfg.vocabulary.choose(rng).unwrap().clone();
    match rng.gen_range(0..4) {
        0 => (format!("{} {}", word(rng), word(rng)), None),
        1 => (format!("NO {} {}", rng.gen_range(1..200), word(rng)), None),
        2 => (
            format!("{} x{}", word(rng), rng.gen_range(1..10)),
            Some(value(ValueKind::Amount, cfg, rng)),
        ),
        _ => (
            ["TAX:", "DISC:", "CHANGE:", "REF:"].choose(rng).unwrap().to_string(),
            Some(value(ValueKind::Amount, cfg, rng)),
        ),
    }
}

fn fixed_page(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Segment>, DataError> {
    let mut page = Page { cfg, segments: vec![] };
    let mut row = 0.0;
    let mut y = || {
        row += 1.0;
        LEFT + (row - 1.0) * ROW_STEP
    };
    let header = format!("{} {}", cfg.vocabulary.choose(rng).unwrap(), cfg.vocabulary.choose(rng).unwrap());
    page.put(&header, LEFT, y(), None, BLACK)?;
    for e in &cfg.entities {
        let v = value(e.kind, cfg, rng);
        let ry = y();
        match &e.key {
            Some(k) => {
                page.put(k, LEFT, ry, None, BLACK)?;
                page.put(&v, LEFT + 120.0, ry, Some(&e.name), e.color)?;
            }
            None => page.put(&v, LEFT, ry, Some(&e.name), e.color)?,
        }
        let (left, right) = filler(cfg, rng);
        let ry = y();
        page.put(&left, LEFT, ry, None, BLACK)?;
        if let Some(r) = right {
            page.put(&r, LEFT + 240.0, ry, None, BLACK)?;
        }
    }
    Ok(page.segments)
}

enum Block {
    Entity { index: usize, text: String, keyed: bool, color: [u8; 3] },
    Filler(String, Option<String>),
}

fn variable_page(cfg: &SynthConfig, probe: Option<(usize, usize)>, rng: &mut ChaCha8Rng) -> Result<Vec<Segment>, DataError> {
    let mut blocks = Vec::new();
    let probe_text = probe.map(|(a, _)| value(cfg.entities[a].kind, cfg, rng));
    // true: colors are the only cue; false: keys are the only cue
    let color_cue = probe.is_some() && rng.gen_bool(0.5);
    for (index, e) in cfg.entities.iter().enumerate() {
        let in_probe = probe.is_some_and(|(a, b)| index == a || index == b);
        let text = match (&probe_text, in_probe) {
            (Some(t), true) => t.clone(),
            _ => value(e.kind, cfg, rng),
        };
        let keyed = e.key.is_some() && !(in_probe && color_cue);
        let color = if in_probe && !color_cue { BLACK } else { e.color };
        blocks.push(Block::Entity { index, text, keyed, color });
    }
    for _ in 0..cfg.distractors {
        let (l, r) = filler(cfg, rng);
        blocks.push(Block::Filler(l, r));
    }
    blocks.shuffle(rng);

    let mut page = Page { cfg, segments: vec![] };
    let mut row = 0usize;
    for block in &blocks {
        let x0 = LEFT + rng.gen_range(0..60) as f64;
        let mut y = |rng: &mut ChaCha8Rng| {
            row += 1;
            LEFT + (row - 1) as f64 * ROW_STEP + rng.gen_range(-3..=3) as f64
        };
        match block {
            Block::Entity { index, text, keyed, color } => {
                let e = &cfg.entities[*index];
                match (&e.key, keyed) {
                    (Some(k), true) => {
                        if rng.gen_bool(0.3) {
                            // key stacked above its value
                            page.put(k, x0, y(rng), None, BLACK)?;
                            page.put(text, x0, y(rng), Some(&e.name), *color)?;
                        } else {
                            let ry = y(rng);
                            page.put(k, x0, ry, None, BLACK)?;
                            let gap = rng.gen_range(16..80) as f64;
                            let vx = x0 + text_width(k.chars().count()) as f64 + gap;
                            page.put(text, vx, ry + rng.gen_range(-2..=2) as f64, Some(&e.name), *color)?;
                        }
                    }
                    _ => page.put(text, x0, y(rng), Some(&e.name), *color)?,
                }
            }
            Block::Filler(l, r) => {
                let ry = y(rng);
                page.put(l, x0, ry, None, BLACK)?;
                if let Some(r) = r {
                    let vx = x0 + text_width(l.chars().count()) as f64 + rng.gen_range(16..120) as f64;
                    page.put(r, vx, ry, None, BLACK)?;
                }
            }
        }
    }
    if cfg.shuffle_order {
        page.segments.shuffle(rng);
    }
    Ok(page.segments)
}

/// Generates `config.count` documents; a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<Document>, DataError> {
    let probe = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.count)
        .map(|i| {
            let segments = match config.mode {
                LayoutMode::Fixed => fixed_page(config, &mut rng)?,
                LayoutMode::Variable => variable_page(config, probe, &mut rng)?,
            };
            Document::new(format!("synth-{}-{seed}-{i:05}", config.mode), segments)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::document_to_json;

    #[test]
    fn fixed_is_deterministic() {
        let cfg = SynthConfig::fixed(10);
        let a: Vec<String> = generate_synthetic(&cfg, 3).unwrap().iter().map(document_to_json).collect();
        let b: Vec<String> = generate_synthetic(&cfg, 3).unwrap().iter().map(document_to_json).collect();
        assert_eq!(a, b);
        let c: Vec<String> = generate_synthetic(&cfg, 4).unwrap().iter().map(document_to_json).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_synthetic(&SynthConfig::fixed(0), 1).unwrap().is_empty());
    }

    #[test]
    fn fixed_cells_are_constant() {
        let docs = generate_synthetic(&SynthConfig::fixed(20), 5).unwrap();
        let cell = |d: &Document, e: &str| {
            let s = d.segments.iter().find(|s| s.entity.as_deref() == Some(e)).unwrap();
            (s.bbox.x, s.bbox.y)
        };
        for e in ["COMPANY", "DATE", "TOTAL"] {
            assert!(docs.iter().all(|d| cell(d, e) == cell(&docs[0], e)), "{e}");
        }
    }

    #[test]
    fn every_entity_appears_once() {
        for cfg in [SynthConfig::fixed(15), SynthConfig::variable(15)] {
            for d in generate_synthetic(&cfg, 9).unwrap() {
                for e in &cfg.entities {
                    let n = d.segments.iter().filter(|s| s.entity.as_deref() == Some(&e.name)).count();
                    assert_eq!(n, 1, "{} in {}", e.name, d.id);
                }
            }
        }
    }

    #[test]
    fn probe_emits_identical_transcripts() {
        let docs = generate_synthetic(&SynthConfig::variable(10), 2).unwrap();
        let probes = docs
            .iter()
            .filter(|d| {
                let t = |e: &str| d.segments.iter().find(|s| s.entity.as_deref() == Some(e)).unwrap().text();
                t("TOTAL") == t("CASH")
            })
            .count();
        assert_eq!(probes, 10);
    }

    #[test]
    fn invalid_schemas() {
        let mut c = SynthConfig::fixed(1);
        c.entities.clear();
        assert!(matches!(generate_synthetic(&c, 0), Err(DataError::Schema(_))));
        let mut c = SynthConfig::fixed(1);
        c.entities.push(c.entities[0].clone());
        assert!(generate_synthetic(&c, 0).is_err());
        let mut c = SynthConfig::variable(1);
        c.entities.retain(|e| e.name != "CASH");
        assert!(generate_synthetic(&c, 0).is_err());
        let mut c = SynthConfig::fixed(1);
        c.vocabulary.clear();
        assert!(generate_synthetic(&c, 0).is_err());
    }

    #[test]
    fn placeholders_without_rendering() {
        let mut c = SynthConfig::fixed(1);
        c.render_images = false;
        let d = &generate_synthetic(&c, 0).unwrap()[0];
        assert!(d.segments.iter().all(|s| s.image.data.iter().all(|&v| v == 0.5)));
    }
}
