use pick_kie::autodiff::{Dropout, GradCheckOptions, ParamStore, Tape, Tensor};
use pick_kie::data::{generate_synthetic, Document, LabelSet, SynthConfig};
use pick_kie::decoding::crf_nll;
use pick_kie::encoding::Vocabulary;
use pick_kie::model::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, evaluate, gradcheck_fixture, load_checkpoint,
    model_gradcheck, save_checkpoint, tiny_config, train, train_split, Adam, Checkpoint, EpochMetrics, Model,
    ModelConfig, ModelError, CHECKPOINT_VERSION,
};
use proptest::prelude::*;

fn small_train_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_hidden: 16,
        blocks: 1,
        heads: 2,
        d_ff: 32,
        conv_channels: 4,
        t_cap: 8,
        lr: 3e-3,
        epochs: 2,
        ..ModelConfig::default()
    }
}

fn trained(n: usize, config: &ModelConfig) -> (Vec<Document>, Checkpoint<f64>) {
    let docs = generate_synthetic(&SynthConfig::fixed(n), 11).unwrap();
    let ck = train::<f64>(&docs, config, &mut Vec::new()).unwrap();
    (docs, ck)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let reports = model_gradcheck(&tiny_config(), &GradCheckOptions::default()).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for group in [
        "graph.adjacency_w",
        "graph.relation_w",
        "graph.layer0.w_alpha",
        "graph.layer1.w_node",
        "decoder.crf.transitions",
        "decoder.emission.weight",
        "encoder.text.embedding",
    ] {
        assert!(names.contains(&group), "{group} missing from {names:?}");
    }
    for r in &reports {
        assert!(r.checked > 0, "{}", r.name);
        assert!(r.max_rel_error <= 1e-4, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn zero_lambda_total_is_the_crf_loss() {
    let doc = gradcheck_fixture().unwrap();
    let docs = std::slice::from_ref(&doc);
    let config = ModelConfig { lambda: 0.0, ..tiny_config() };
    let m = Model::<f64>::new(config, Vocabulary::build(docs), LabelSet::from_documents(docs)).unwrap();
    let p = m.prepare(&doc, true).unwrap();
    let tape = Tape::new();
    let l = m.losses(&tape, &m.params, &p, &mut Dropout::off()).unwrap();
    let f = m.forward(&tape, &m.params, &p, &mut Dropout::off()).unwrap();
    let direct = crf_nll(&f.emissions, &f.transitions, p.gold.as_ref().unwrap()).unwrap();
    assert_eq!(l.total.item().to_bits(), direct.item().to_bits());
    assert!(l.l_gl.item() > 0.0);
}

#[test]
fn overfits_a_single_document() {
    let doc = gradcheck_fixture().unwrap();
    let config = ModelConfig {
        lr: 1e-2,
        epochs: 300,
        val_fraction: 0.0,
        ..tiny_config()
    };
    let ck = train_split::<f64>(std::slice::from_ref(&doc), &[], &config, &mut Vec::new()).unwrap();
    assert_eq!(ck.model.predict(&doc).unwrap(), doc.gold_spans());
}

#[test]
fn metrics_log_is_reproducible() {
    let docs = generate_synthetic(&SynthConfig::variable(8), 4).unwrap();
    let config = ModelConfig { val_fraction: 0.25, ..small_train_config() };
    let run = || {
        let mut log = Vec::new();
        train::<f64>(&docs, &config, &mut log).unwrap();
        log
    };
    let a = run();
    assert_eq!(a, run());
    let lines: Vec<EpochMetrics> = std::str::from_utf8(&a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l.val_mef.is_some() && l.loss.is_finite()));
    assert_eq!(lines[1].step, 12);
}

#[test]
fn max_steps_stops_training() {
    let docs = generate_synthetic(&SynthConfig::fixed(10), 4).unwrap();
    let config = ModelConfig {
        max_steps: 3,
        val_fraction: 0.0,
        epochs: 5,
        ..small_train_config()
    };
    let mut log = Vec::new();
    let ck = train::<f64>(&docs, &config, &mut log).unwrap();
    assert_eq!(ck.optimizer.step, 3);
    assert_eq!(std::str::from_utf8(&log).unwrap().lines().count(), 1);
}

#[test]
fn batches_average_gradients() {
    let docs = generate_synthetic(&SynthConfig::fixed(9), 4).unwrap();
    let config = ModelConfig {
        batch_size: 4,
        epochs: 1,
        val_fraction: 0.0,
        ..small_train_config()
    };
    let ck = train::<f64>(&docs, &config, &mut Vec::new()).unwrap();
    // 4 + 4 + 1
    assert_eq!(ck.optimizer.step, 3);
}

#[test]
fn single_precision_trains() {
    let docs = generate_synthetic(&SynthConfig::fixed(6), 4).unwrap();
    let config = ModelConfig { epochs: 1, ..small_train_config() };
    let ck = train::<f32>(&docs, &config, &mut Vec::new()).unwrap();
    assert!(ck.model.params.all_finite());
    assert_eq!(checkpoint_precision(&encode_checkpoint(&ck)).unwrap().as_str(), "f32");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (docs, ck) = trained(6, &ModelConfig { epochs: 1, ..small_train_config() });
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(encode_checkpoint(&back), bytes);
    for d in &docs {
        assert_eq!(back.model.predict(d).unwrap(), ck.model.predict(d).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    assert_eq!(load_checkpoint::<f64>(&path).unwrap(), ck);
    assert!(matches!(load_checkpoint::<f64>(dir.path().join("missing")), Err(ModelError::Io { .. })));
}

#[test]
fn checkpoint_rejects_damage() {
    let (_, ck) = trained(4, &ModelConfig { epochs: 1, ..small_train_config() });
    let bytes = encode_checkpoint(&ck);

    let mut v = bytes.clone();
    v[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode_checkpoint::<f64>(&v),
        Err(ModelError::Version { found, .. }) if found == CHECKPOINT_VERSION + 1
    ));

    for at in [30, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut c = bytes.clone();
        c[at] ^= 0x01;
        assert!(matches!(decode_checkpoint::<f64>(&c), Err(ModelError::Checksum)), "byte {at}");
    }

    assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]), Err(ModelError::Checksum)));
    assert!(decode_checkpoint::<f64>(&bytes[..10]).is_err());
    assert!(decode_checkpoint::<f64>(b"NOTACKPT00000000000000000000000000000000000000000000000000000").is_err());
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(ModelError::Checkpoint(_))));
}

#[test]
fn evaluation_reads_the_model_vocabulary() {
    let (docs, ck) = trained(10, &ModelConfig { epochs: 3, ..small_train_config() });
    let report = evaluate(&ck.model, &docs).unwrap();
    assert!(report.overall_micro.f1.is_finite());
    let mut broken = ck.model.clone();
    broken.vocab = Vocabulary::build(&[]);
    assert!(matches!(evaluate(&broken, &docs), Err(ModelError::Vocabulary(_))));
}

#[test]
fn huge_lambda_hurts_validation() {
    let docs = generate_synthetic(&SynthConfig::fixed(40), 21).unwrap();
    let (tr, val) = docs.split_at(30);
    let base = ModelConfig { epochs: 3, ..small_train_config() };
    let score = |lambda: f64| -> f64 {
        let cfg = ModelConfig { lambda, ..base.clone() };
        match train_split::<f64>(tr, val, &cfg, &mut Vec::new()) {
            Ok(ck) => evaluate(&ck.model, val).unwrap().overall_micro.f1,
            Err(ModelError::NonFinite { .. }) => 0.0,
            Err(e) => panic!("{e}"),
        }
    };
    let (default, huge) = (score(0.01), score(1e6));
    assert!(default > huge, "default {default}, huge {huge}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adam_ignores_zero_gradients(values in proptest::collection::vec(-5.0f64..5.0, 1..20), steps in 1usize..5) {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64(&[values.len()], &values).unwrap());
        let before = store.value("w").unwrap().clone();
        let mut adam = Adam::new(0.5);
        for _ in 0..steps {
            adam.update(&mut store);
        }
        prop_assert_eq!(store.value("w").unwrap(), &before);
    }
}
