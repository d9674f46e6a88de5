use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Checkpoint, Model, ModelConfig, ModelError, PreparedDoc};
use crate::autodiff::{lit, Dropout, Real, Tape};
use crate::data::{compute_metrics, Document, EntitySpan, LabelSet, MetricsReport};
use crate::encoding::Vocabulary;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    /// Mean joint loss over the documents seen this epoch.
    pub loss: f64,
    pub l_crf: f64,
    pub l_gl: f64,
    /// Overall mEF on the validation split; null without one.
    #[serde(rename = "val_mEF")]
    pub val_mef: Option<f64>,
}

/// Seeded split into (train, validation). At least one document always
/// stays in the training part.
pub fn split_validation(docs: &[Document], fraction: f64, seed: u64) -> (Vec<Document>, Vec<Document>) {
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((docs.len() as f64 * fraction).round() as usize).min(docs.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| docs[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Holds out `config.val_fraction` of `docs` and trains on the rest.
pub fn train<F: Real>(docs: &[Document], config: &ModelConfig, log: &mut dyn Write) -> Result<Checkpoint<F>, ModelError> {
    let (tr, val) = split_validation(docs, config.val_fraction, config.seed);
    train_split(&tr, &val, config, log)
}

fn prepared_predictions<F: Real>(model: &Model<F>, docs: &[PreparedDoc<F>]) -> Result<Vec<Vec<EntitySpan>>, ModelError> {
    docs.iter().map(|d| model.predict_prepared(d)).collect()
}

/// Trains on `train`, scoring `val` after each epoch, and writes one JSON
/// line per epoch to `log`.
pub fn train_split<F: Real>(
    train: &[Document],
    val: &[Document],
    config: &ModelConfig,
    log: &mut dyn Write,
) -> Result<Checkpoint<F>, ModelError> {
    if train.is_empty() {
        return Err(ModelError::Config("training set is empty".into()));
    }
    let all: Vec<Document> = train.iter().chain(val).cloned().collect();
    let mut model = Model::<F>::new(config.clone(), Vocabulary::build(train), LabelSet::from_documents(&all))?;
    let prepared = train.iter().map(|d| model.prepare(d, true)).collect::<Result<Vec<_>, _>>()?;
    let val_prepared = val.iter().map(|d| model.prepare(d, false)).collect::<Result<Vec<_>, _>>()?;
    let val_gold: Vec<Vec<EntitySpan>> = val.iter().map(Document::gold_spans).collect();

    let mut adam = Adam::<F>::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut done = false;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut crf_sum, mut gl_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut pending = 0usize;
        model.params.zero_grads();
        for (pos, &i) in order.iter().enumerate() {
            let doc = &prepared[i];
            let mut dropout = if config.dropout > 0.0 {
                Dropout::train(config.dropout, ChaCha8Rng::seed_from_u64(rng.gen()))
            } else {
                Dropout::off()
            };
            {
                let tape = Tape::new();
                let l = model.losses(&tape, &model.params, doc, &mut dropout)?;
                let (total, l_crf, l_gl) = (
                    l.total.item().to_f64().unwrap(),
                    l.l_crf.item().to_f64().unwrap(),
                    l.l_gl.item().to_f64().unwrap(),
                );
                if !(total.is_finite() && l_crf.is_finite() && l_gl.is_finite()) {
                    return Err(ModelError::NonFinite {
                        doc_id: doc.id.clone(),
                        epoch,
                        step: adam.step,
                        l_crf,
                        l_gl,
                    });
                }
                tape.backward(l.total)?;
                tape.accumulate_into(&mut model.params);
                loss_sum += total;
                crf_sum += l_crf;
                gl_sum += l_gl;
                seen += 1;
            }
            pending += 1;
            if pending == config.batch_size || pos + 1 == order.len() {
                model.params.scale_grads(lit::<F>(1.0 / pending as f64));
                adam.update(&mut model.params);
                model.params.zero_grads();
                pending = 0;
                if config.max_steps > 0 && adam.step >= config.max_steps as u64 {
                    done = true;
                    break;
                }
            }
        }
        if !model.params.all_finite() {
            return Err(ModelError::NonFinite {
                doc_id: "<parameters>".into(),
                epoch,
                step: adam.step,
                l_crf: f64::NAN,
                l_gl: f64::NAN,
            });
        }
        let val_mef = if val_prepared.is_empty() {
            None
        } else {
            let pred = prepared_predictions(&model, &val_prepared)?;
            Some(compute_metrics(&pred, &val_gold).overall_micro.f1)
        };
        let n = seen.max(1) as f64;
        let line = EpochMetrics {
            epoch,
            step: adam.step,
            loss: loss_sum / n,
            l_crf: crf_sum / n,
            l_gl: gl_sum / n,
            val_mef,
        };
        writeln!(log, "{}", serde_json::to_string(&line).expect("metrics serialize"))
            .map_err(|e| ModelError::io(std::path::Path::new("<metrics log>"), e))?;
        if done {
            break;
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: adam,
    })
}

/// Entity metrics of `model` on `docs` against their gold spans.
pub fn evaluate<F: Real>(model: &Model<F>, docs: &[Document]) -> Result<MetricsReport, ModelError> {
    model.check_consistency()?;
    let pred = docs.iter().map(|d| model.predict(d)).collect::<Result<Vec<_>, _>>()?;
    let gold: Vec<Vec<EntitySpan>> = docs.iter().map(Document::gold_spans).collect();
    Ok(compute_metrics(&pred, &gold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layers: usize,
    pub final_loss: f64,
    pub l_crf: f64,
    pub l_gl: f64,
    /// Overall mEF on the evaluation documents.
    #[serde(rename = "mEF")]
    pub mef: f64,
    /// False when training stopped on a non-finite loss.
    pub finite: bool,
}

/// Trains one model per graph depth in `layers` and scores each on `test`.
pub fn layer_sweep<F: Real>(
    train: &[Document],
    test: &[Document],
    base: &ModelConfig,
    layers: &[usize],
) -> Result<Vec<SweepRow>, ModelError> {
    let mut rows = Vec::with_capacity(layers.len());
    for &l in layers {
        let cfg = ModelConfig { layers: l, ..base.clone() };
        let mut log = Vec::new();
        match train_split::<F>(train, &[], &cfg, &mut log) {
            Ok(ck) => {
                let last: EpochMetrics = serde_json::from_str(
                    std::str::from_utf8(&log).unwrap_or("").lines().last().unwrap_or("null"),
                )
                .map_err(|e| ModelError::Config(format!("metrics log: {e}")))?;
                let report = evaluate(&ck.model, test)?;
                rows.push(SweepRow {
                    layers: l,
                    final_loss: last.loss,
                    l_crf: last.l_crf,
                    l_gl: last.l_gl,
                    mef: report.overall_micro.f1,
                    finite: last.loss.is_finite() && ck.model.params.all_finite(),
                });
            }
            Err(ModelError::NonFinite { l_crf, l_gl, .. }) => rows.push(SweepRow {
                layers: l,
                final_loss: f64::NAN,
                l_crf,
                l_gl,
                mef: f64::NAN,
                finite: false,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Plain-text comparison table for [`layer_sweep`] rows.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6}  {:>10}  {:>10}  {:>10}  {:>7}  {:>6}", "layers", "loss", "l_crf", "l_gl", "mEF", "finite");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6}  {:>10.4}  {:>10.4}  {:>10.4}  {:>7.2}  {:>6}",
            r.layers,
            r.final_loss,
            r.l_crf,
            r.l_gl,
            100.0 * r.mef,
            r.finite
        );
    }
    s
}
