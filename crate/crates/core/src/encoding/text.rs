//! Character transformer over a padded batch of segments.

use rand::Rng;

use super::{EncoderConfig, EncodingError, UNK};
use crate::autodiff::{init_layer_norm, init_linear, layer_norm, linear, lit, Dropout, ParamStore, Real, Tape, Tensor, Var};

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            data.push(lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![t, d], data).unwrap()
}

pub(super) fn init<F: Real>(store: &mut ParamStore<F>, cfg: &EncoderConfig, vocab: usize, rng: &mut impl Rng) {
    let d = cfg.d_model;
    store.insert_xavier("encoder.text.embedding", &[vocab, d], vocab, d, rng);
    for b in 0..cfg.blocks {
        let p = format!("encoder.text.block{b}");
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{proj}"), d, d, rng);
        }
        init_layer_norm(store, &format!("{p}.norm1"), d);
        init_linear(store, &format!("{p}.ff1"), d, cfg.d_ff, rng);
        init_linear(store, &format!("{p}.ff2"), cfg.d_ff, d, rng);
        init_layer_norm(store, &format!("{p}.norm2"), d);
    }
}

/// `[N, T, 1]` with ones at valid timesteps.
pub fn valid_mask<F: Real>(lengths: &[usize], t: usize) -> Tensor<F> {
    let data = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { F::one() } else { F::zero() }))
        .collect();
    Tensor::new(vec![lengths.len(), t, 1], data).unwrap()
}

fn attention<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    name: &str,
    x: Var<'t, F>,
    key_mask: Var<'t, F>,
) -> Result<Var<'t, F>, EncodingError> {
    let shape = x.shape();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let h = cfg.heads;
    let dh = d / h;
    let heads = |v: Var<'t, F>| -> Result<Var<'t, F>, EncodingError> {
        Ok(v.reshape(&[n, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, t, dh])?)
    };
    let q = heads(linear(tape, store, &format!("{name}.q"), x)?)?;
    let k = heads(linear(tape, store, &format!("{name}.k"), x)?)?;
    let v = heads(linear(tape, store, &format!("{name}.v"), x)?)?;
    let scores = q
        .matmul(k.permute(&[0, 2, 1])?)?
        .scale(lit(1.0 / (dh as f64).sqrt()))
        .add(key_mask)?;
    let ctx = scores
        .softmax()?
        .matmul(v)?
        .reshape(&[n, h, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, t, d])?;
    Ok(linear(tape, store, &format!("{name}.o"), ctx)?)
}

/// Encodes each segment independently; returns `[N, T, d_model]` with pad
/// rows zeroed, `T` the longest segment.
pub fn encode_text<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[Vec<usize>],
    dropout: &mut Dropout,
) -> Result<Var<'t, F>, EncodingError> {
    let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
    if lengths.iter().any(|&l| l == 0) {
        return Err(EncodingError::Input("segments must have at least one character".into()));
    }
    let (n, t, d) = (ids.len(), lengths.iter().copied().max().unwrap_or(0), cfg.d_model);
    let embed = tape.param(store, "encoder.text.embedding")?;
    let vocab = embed.shape()[0];
    let rows: Vec<Option<usize>> = ids
        .iter()
        .flat_map(|s| (0..t).map(move |i| s.get(i).map(|&id| if id < vocab { id } else { UNK })))
        .collect();
    let pe = tape.constant(positional_encoding(t, d));
    let mut x = embed.gather_rows(&rows)?.reshape(&[n, t, d])?.add(pe)?;
    x = dropout.apply(x)?;

    let neg = F::MASK_NEG;
    let key_mask: Vec<F> = lengths
        .iter()
        .flat_map(|&l| std::iter::repeat_n(l, cfg.heads))
        .flat_map(|l| (0..t).map(move |i| if i < l { F::zero() } else { neg }))
        .collect();
    let key_mask = tape.constant(Tensor::new(vec![n * cfg.heads, 1, t], key_mask)?);

    for b in 0..cfg.blocks {
        let p = format!("encoder.text.block{b}");
        let a = dropout.apply(attention(tape, store, cfg, &format!("{p}.attn"), x, key_mask)?)?;
        x = layer_norm(tape, store, &format!("{p}.norm1"), x.add(a)?)?;
        let hidden = linear(tape, store, &format!("{p}.ff1"), x)?.relu();
        let f = dropout.apply(linear(tape, store, &format!("{p}.ff2"), hidden)?)?;
        x = layer_norm(tape, store, &format!("{p}.norm2"), x.add(f)?)?;
    }
    Ok(x.mul(tape.constant(valid_mask(&lengths, t)))?)
}
