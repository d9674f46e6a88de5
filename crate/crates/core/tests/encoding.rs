use pick_kie::autodiff::{check_params, Dropout, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use pick_kie::data::{render_text, Crop};
use pick_kie::encoding::{
    encode_document, encode_image, encode_text, fuse, init_encoder, pool_nodes, prepare_images, EncoderConfig,
    Pooling,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        blocks: 2,
        heads: 2,
        d_ff: 12,
        conv_channels: 4,
        t_cap: 8,
        pooling: Pooling::Mean,
    }
}

fn store(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_encoder(&mut s, cfg, 12, &mut ChaCha8Rng::seed_from_u64(seed));
    s
}

fn rows(t: &Tensor<f64>, seg: usize, len: usize) -> Vec<f64> {
    let (tt, d) = (t.shape()[1], t.shape()[2]);
    t.data()[seg * tt * d..(seg * tt + len) * d].to_vec()
}

#[test]
fn text_encoding_is_independent_of_other_segments() {
    let cfg = tiny();
    let s = store(&cfg, 1);
    let tape = Tape::new();
    let alone = encode_text(&tape, &s, &cfg, &[vec![3, 4, 5]], &mut Dropout::off()).unwrap().value();
    let batch = encode_text(
        &tape,
        &s,
        &cfg,
        &[vec![7, 2, 2, 9, 10, 11], vec![3, 4, 5], vec![6]],
        &mut Dropout::off(),
    )
    .unwrap()
    .value();
    for (a, b) in rows(&alone, 0, 3).iter().zip(rows(&batch, 1, 3)) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn identical_segments_encode_identically() {
    let cfg = tiny();
    let s = store(&cfg, 2);
    let tape = Tape::new();
    let y = encode_text(&tape, &s, &cfg, &[vec![4, 5, 6], vec![4, 5, 6]], &mut Dropout::off()).unwrap().value();
    assert_eq!(rows(&y, 0, 3), rows(&y, 1, 3));
}

#[test]
fn reversal_changes_text_encoding() {
    let cfg = tiny();
    let s = store(&cfg, 3);
    let tape = Tape::new();
    let ab = encode_text(&tape, &s, &cfg, &[vec![4, 5]], &mut Dropout::off()).unwrap().value();
    let ba = encode_text(&tape, &s, &cfg, &[vec![5, 4]], &mut Dropout::off()).unwrap().value();
    // position t of "ab" holds 'a' at t=0; compare the same character at different positions
    let d = cfg.d_model;
    assert_ne!(&ab.data()[..d], &ba.data()[d..2 * d]);
    assert_ne!(ab, ba);
}

#[test]
fn image_encoding_is_pure() {
    let cfg = tiny();
    let s = store(&cfg, 4);
    let crop = render_text("A1", [10, 200, 30]);
    let tape = Tape::new();
    let a = encode_image(&tape, &s, &cfg, &crop, 7).unwrap().value();
    let b = encode_image(&tape, &s, &cfg, &crop, 7).unwrap().value();
    assert_eq!(a, b);
    assert!(a.data().iter().any(|&v| v != 0.0));
}

#[test]
fn image_rows_cycle_past_the_map() {
    let cfg = tiny();
    let s = store(&cfg, 5);
    let crop = render_text("XYZW", [0, 0, 0]);
    let tape = Tape::new();
    let y = encode_image(&tape, &s, &cfg, &crop, 11).unwrap().value();
    let d = cfg.d_model;
    for t in cfg.t_cap..11 {
        assert_eq!(y.row(t), y.row(t - cfg.t_cap));
    }
    assert_eq!(y.data().len(), 11 * d);
}

#[test]
fn fuse_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vals: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let tape = Tape::<f64>::new();
    let te = tape.constant(Tensor::from_f64(&[2, 3, 4], &vals).unwrap());
    let zero = tape.zeros(&[2, 3, 4]);
    assert_eq!(fuse(te, zero).unwrap().value(), te.value());
    let twice = fuse(te, te).unwrap().value();
    assert!(twice.data().iter().zip(&vals).all(|(a, b)| *a == 2.0 * b));
    let other = tape.constant(Tensor::from_f64(&[2, 3, 4], &vals.iter().map(|v| v * 0.3 - 1.0).collect::<Vec<_>>()).unwrap());
    assert_eq!(fuse(te, other).unwrap().value(), fuse(other, te).unwrap().value());
    assert!(fuse(te, tape.zeros(&[2, 3, 5])).is_err());
}

#[test]
fn fuse_gradient_is_ones() {
    let tape = Tape::<f64>::new();
    let te = tape.leaf(Tensor::from_f64(&[1, 2, 2], &[0.5, -1.0, 2.0, 0.1]).unwrap(), true);
    let ie = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 1.0, -3.0, 0.0]).unwrap());
    let root = fuse(te, ie).unwrap().sum();
    tape.backward(root).unwrap();
    let analytic = te.grad().unwrap();
    // central differences of sum(TE + IE) in each coordinate
    let base = [0.5, -1.0, 2.0, 0.1];
    let ie_v = [1.0, 1.0, -3.0, 0.0];
    let f = |x: &[f64]| x.iter().zip(ie_v).map(|(a, b)| a + b).sum::<f64>();
    for i in 0..4 {
        let (mut p, mut m) = (base, base);
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let numeric = (f(&p) - f(&m)) / 2e-5;
        assert!((analytic.data()[i] - numeric).abs() < 1e-6);
        assert_eq!(analytic.data()[i], 1.0);
    }
}

#[test]
fn constant_rows_pool_to_the_constant() {
    let tape = Tape::<f64>::new();
    let c = [0.25, -7.0, 3.5];
    let data: Vec<f64> = (0..4).flat_map(|_| c).collect();
    let x = tape.constant(Tensor::from_f64(&[1, 4, 3], &data).unwrap());
    for pooling in [Pooling::Mean, Pooling::Max] {
        assert_eq!(pool_nodes(x, &[4], pooling).unwrap().value().data(), &c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_does_not_change_pooling(
        len in 1usize..5,
        extra in 0usize..4,
        vals in prop::collection::vec(-5.0f64..5.0, 12),
        garbage in -9.0f64..9.0,
    ) {
        let d = 3;
        let tape = Tape::<f64>::new();
        let tight = tape.constant(Tensor::from_f64(&[1, len, d], &vals[..len * d]).unwrap());
        let mut padded = vals[..len * d].to_vec();
        padded.extend(std::iter::repeat_n(garbage, extra * d));
        let padded = tape.constant(Tensor::from_f64(&[1, len + extra, d], &padded).unwrap());
        for pooling in [Pooling::Mean, Pooling::Max] {
            let a = pool_nodes(tight, &[len], pooling).unwrap().value();
            let b = pool_nodes(padded, &[len], pooling).unwrap().value();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut s = store(&cfg, 7);
    let ids = vec![vec![2, 3, 4], vec![5, 6], vec![7, 8, 9, 10]];
    let crops: Vec<Crop> = ["abc", "de", "fghi"].iter().map(|t| render_text(t, [30, 60, 90])).collect();
    let refs: Vec<&Crop> = crops.iter().collect();
    let images = prepare_images::<f64>(&refs, &cfg).unwrap();
    let weights: Vec<f64> = (0..3 * 8).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
    // move zero-initialized biases off the rectifier kinks
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for (name, p) in s.iter_mut() {
        if name.ends_with("bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    // a short step keeps the stencil from straddling kinks of the rectifiers
    // that follow each convolution
    let opts = GradCheckOptions {
        max_entries: 24,
        step: 2e-5,
        ..Default::default()
    };
    let reports = check_params(&mut s, |tape, s| {
        let enc = encode_document(tape, s, &cfg, &ids, Some(&images), &mut Dropout::off()).unwrap();
        let probe = tape.constant(Tensor::from_f64(&[3, 8], &weights).unwrap());
        let pooled: Var<'_, f64> = enc.nodes.mul(probe)?.sum();
        pooled.add(enc.x.sq_norm().scale(0.01))
    }, &opts)
    .unwrap();
    assert_eq!(reports.len(), s.len());
    for r in &reports {
        assert!(r.max_rel_error <= 1e-4, "{}: {:e}", r.name, r.max_rel_error);
    }
}
