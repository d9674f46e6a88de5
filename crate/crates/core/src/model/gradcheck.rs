//! Finite-difference check of the joint objective over every parameter of
//! a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::{check_params, DType, Dropout, GradCheckOptions, GroupReport};
use crate::data::{render_text, BBox, Document, LabelSet, Segment, GLYPH_H, GLYPH_W};
use crate::encoding::Vocabulary;

/// Configuration small enough for per-entry central differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_hidden: 4,
        lstm_layers: 2,
        blocks: 1,
        heads: 2,
        d_ff: 8,
        conv_channels: 2,
        t_cap: 4,
        layers: 2,
        dropout: 0.0,
        precision: DType::F64,
        ..ModelConfig::default()
    }
}

/// Three segments of at most five characters carrying two entity types.
pub fn gradcheck_fixture() -> Result<Document, ModelError> {
    let seg = |text: &str, x: f64, y: f64, entity: Option<&str>, color| -> Result<Segment, ModelError> {
        let w = (text.chars().count() * GLYPH_W) as f64;
        let bbox = BBox::new(x, y, w, GLYPH_H as f64)?;
        Ok(Segment::new(text, bbox, render_text(text, color), entity.map(str::to_string))?)
    };
    let segments = vec![
        seg("TX 2", 10.0, 10.0, None, [0, 0, 0])?,
        seg("01/02", 10.0, 40.0, Some("DATE"), [0, 0, 0])?,
        seg("9.5", 90.0, 41.0, Some("TOTAL"), [200, 20, 20])?,
    ];
    Ok(Document::new("gradcheck", segments)?)
}

/// Checks `L_crf + lambda * L_GL` on the fixture for every parameter group
/// of a model built from `config`. Dropout is off. Every parameter gets a
/// small seeded offset first so zero-initialized biases do not leave
/// rectifier inputs exactly on the kink.
pub fn model_gradcheck(config: &ModelConfig, opts: &GradCheckOptions) -> Result<Vec<GroupReport>, ModelError> {
    let doc = gradcheck_fixture()?;
    let docs = std::slice::from_ref(&doc);
    let mut model = Model::<f64>::new(config.clone(), Vocabulary::build(docs), LabelSet::from_documents(docs))?;
    let prepared = model.prepare(&doc, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    for (_, p) in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let mut params = std::mem::replace(&mut model.params, crate::autodiff::ParamStore::new());
    let reports = check_params(
        &mut params,
        |tape, s| Ok(model.losses(tape, s, &prepared, &mut Dropout::off())?.total),
        opts,
    );
    model.params = params;
    reports
}
