use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::{Dropout, ParamStore, Real, Tape, Tensor, Var};
use crate::data::{decode_iob, Crop, Document, EntitySpan, LabelSet};
use crate::decoding::{bilstm_emissions, crf_nll, init_decoder, pack, viterbi_decode, Emissions, Transitions};
use crate::encoding::{encode_document, init_encoder, prepare_images, Vocabulary};
use crate::graph::{graph_forward, init_graph, relation_features};

const TRANSITIONS: &str = "decoder.crf.transitions";
const EMBEDDING: &str = "encoder.text.embedding";

/// Configuration, vocabulary, label set and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub params: ParamStore<F>,
}

/// A document converted to model inputs once, reused across epochs.
#[derive(Clone, Debug)]
pub struct PreparedDoc<F> {
    pub id: String,
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    /// `[N, 3, h, w]` network input; absent when the image branch is off.
    pub images: Option<Tensor<F>>,
    /// `[N, N, 6]` pairwise relation features.
    pub relations: Tensor<F>,
    /// Gold label indices over the packed characters.
    pub gold: Option<Vec<usize>>,
    pub chars: Vec<Vec<char>>,
}

pub struct Forward<'t, F: Real> {
    pub emissions: Emissions<'t, F>,
    pub transitions: Transitions<'t, F>,
    pub adjacency: Var<'t, F>,
    pub l_gl: Var<'t, F>,
}

pub struct Losses<'t, F: Real> {
    pub total: Var<'t, F>,
    pub l_crf: Var<'t, F>,
    pub l_gl: Var<'t, F>,
}

/// `l_crf + lambda * l_gl`; with `lambda = 0` this is `l_crf` itself.
pub fn combine_losses<'t, F: Real>(l_crf: Var<'t, F>, l_gl: Var<'t, F>, lambda: f64) -> Result<Var<'t, F>, ModelError> {
    if lambda == 0.0 {
        return Ok(l_crf);
    }
    Ok(l_crf.add(l_gl.scale(crate::autodiff::lit(lambda)))?)
}

impl<F: Real> Model<F> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, labels: LabelSet) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &config.encoder(), vocab.len(), &mut rng);
        init_graph(&mut params, &config.graph(), &mut rng);
        init_decoder(&mut params, &config.decoder(labels.len()), &mut rng);
        Ok(Self {
            config,
            vocab,
            labels,
            params,
        })
    }

    /// Checks that parameter shapes agree with the vocabulary and labels.
    pub fn check_consistency(&self) -> Result<(), ModelError> {
        let rows = self.params.value(EMBEDDING).map(|t| t.shape()[0]);
        if rows != Some(self.vocab.len()) {
            return Err(ModelError::Vocabulary(format!(
                "embedding has {rows:?} rows but the vocabulary has {} ids",
                self.vocab.len()
            )));
        }
        let k = self.params.value(TRANSITIONS).map(|t| t.shape()[0]);
        if k != Some(self.labels.len() + 2) {
            return Err(ModelError::Checkpoint(format!(
                "transition matrix {k:?} does not fit {} tags",
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn prepare(&self, doc: &Document, with_gold: bool) -> Result<PreparedDoc<F>, ModelError> {
        let ids: Vec<Vec<usize>> = doc.segments.iter().map(|s| self.vocab.encode(&s.chars)).collect();
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let images = if self.config.ablate_image {
            None
        } else {
            let crops: Vec<&Crop> = doc.segments.iter().map(|s| &s.image).collect();
            Some(prepare_images::<F>(&crops, &self.config.encoder())?)
        };
        let boxes: Vec<_> = doc.segments.iter().map(|s| s.bbox).collect();
        let relations = relation_features::<F>(&boxes, &lengths)?;
        let gold = if with_gold {
            let mut g = Vec::with_capacity(doc.total_chars());
            for s in &doc.segments {
                g.extend(self.labels.encode(&s.gold_tags())?);
            }
            Some(g)
        } else {
            None
        };
        Ok(PreparedDoc {
            id: doc.id.clone(),
            ids,
            lengths,
            images,
            relations,
            gold,
            chars: doc.segments.iter().map(|s| s.chars.clone()).collect(),
        })
    }

    /// Encoder, graph module and emission scores for one document.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        params: &ParamStore<F>,
        doc: &PreparedDoc<F>,
        dropout: &mut Dropout,
    ) -> Result<Forward<'t, F>, ModelError> {
        let cfg = &self.config;
        let enc = encode_document(tape, params, &cfg.encoder(), &doc.ids, doc.images.as_ref(), dropout)?;
        let graph = graph_forward(tape, params, &cfg.graph(), enc.nodes, &doc.relations)?;
        let packed = pack(enc.x, graph.nodes, &doc.lengths)?;
        let emissions = bilstm_emissions(tape, params, &cfg.decoder(self.labels.len()), &packed, dropout)?;
        let transitions = Transitions::new(tape.param(params, TRANSITIONS)?)?;
        Ok(Forward {
            emissions,
            transitions,
            adjacency: graph.adjacency,
            l_gl: graph.loss,
        })
    }

    /// Joint objective against the prepared gold labels.
    pub fn losses<'t>(
        &self,
        tape: &'t Tape<F>,
        params: &ParamStore<F>,
        doc: &PreparedDoc<F>,
        dropout: &mut Dropout,
    ) -> Result<Losses<'t, F>, ModelError> {
        let gold = doc
            .gold
            .as_ref()
            .ok_or_else(|| ModelError::Config(format!("document {:?} was prepared without gold labels", doc.id)))?;
        let f = self.forward(tape, params, doc, dropout)?;
        let l_crf = crf_nll(&f.emissions, &f.transitions, gold)?;
        let total = combine_losses(l_crf, f.l_gl, self.config.lambda)?;
        Ok(Losses {
            total,
            l_crf,
            l_gl: f.l_gl,
        })
    }

    /// Best tag path per character, in packed order.
    pub fn tag_indices(&self, doc: &PreparedDoc<F>) -> Result<Vec<usize>, ModelError> {
        let tape = Tape::new();
        let f = self.forward(&tape, &self.params, doc, &mut Dropout::off())?;
        let transitions = self.params.value(TRANSITIONS).expect("checked at construction");
        Ok(viterbi_decode(&f.emissions.scores.value(), transitions, f.emissions.valid)?)
    }

    pub fn predict_prepared(&self, doc: &PreparedDoc<F>) -> Result<Vec<EntitySpan>, ModelError> {
        let tags = self.tag_indices(doc)?;
        let mut spans = Vec::new();
        let mut start = 0;
        for (i, chars) in doc.chars.iter().enumerate() {
            let seg = self.labels.decode(&tags[start..start + chars.len()]);
            spans.extend(decode_iob(&seg, chars, i)?);
            start += chars.len();
        }
        Ok(spans)
    }

    pub fn predict(&self, doc: &Document) -> Result<Vec<EntitySpan>, ModelError> {
        self.check_consistency()?;
        self.predict_prepared(&self.prepare(doc, false)?)
    }
}
