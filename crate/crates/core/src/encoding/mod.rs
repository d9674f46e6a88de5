//! Text and image encoders producing fused per-character features and
//! pooled node inputs.
//!
//! Each segment's characters pass through a small transformer; its crop
//! passes through a convolutional stack whose `t_cap` output cells are laid
//! over the characters (truncating or cycling). The two are summed
//! elementwise and pooled into one vector per segment.

mod image;
mod text;
mod vocab;

use rand::Rng;

use crate::autodiff::{AutodiffError, ParamStore, Real, Tape, Tensor, Var};

pub use image::{encode_image, encode_images, input_size, prepare_images, resize_bilinear, MAP_H};
pub use text::{encode_text, positional_encoding, valid_mask};
pub use vocab::{Vocabulary, PAD, UNK};

#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("degenerate crop {height}x{width}: both sides must be at least 2 px")]
    DegenerateCrop { height: usize, width: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(format!("unknown pooling {s:?} (expected mean or max)")),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub conv_channels: usize,
    /// Cells of the image feature map; a positive multiple of 4.
    pub t_cap: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        let bad = |m: &str| Err(EncodingError::Config(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_ff == 0 || self.conv_channels == 0 {
            return bad("d_ff and conv_channels must be positive");
        }
        if self.t_cap == 0 || self.t_cap % MAP_H != 0 {
            return bad("t_cap must be a positive multiple of 4");
        }
        Ok(())
    }
}

/// Registers text and image encoder parameters.
pub fn init_encoder<F: Real>(store: &mut ParamStore<F>, cfg: &EncoderConfig, vocab_size: usize, rng: &mut impl Rng) {
    text::init(store, cfg, vocab_size, rng);
    image::init(store, cfg, rng);
}

/// Elementwise sum of text and image features.
pub fn fuse<'t, F: Real>(te: Var<'t, F>, ie: Var<'t, F>) -> Result<Var<'t, F>, EncodingError> {
    if te.shape() != ie.shape() {
        return Err(AutodiffError::Shape {
            op: "fuse",
            shapes: vec![te.shape(), ie.shape()],
        }
        .into());
    }
    Ok(te.add(ie)?)
}

/// Pools `[N, T, d]` over each segment's first `lengths[i]` timesteps.
pub fn pool_nodes<'t, F: Real>(x: Var<'t, F>, lengths: &[usize], pooling: Pooling) -> Result<Var<'t, F>, EncodingError> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != lengths.len() || lengths.iter().any(|&l| l == 0 || l > shape[1]) {
        return Err(EncodingError::Input(format!(
            "pool_nodes: lengths {lengths:?} do not fit features {shape:?}"
        )));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let tape = x.tape();
    match pooling {
        Pooling::Mean => {
            let w: Vec<F> = lengths
                .iter()
                .flat_map(|&l| {
                    let inv = F::one() / F::from_usize(l).unwrap();
                    (0..t).map(move |i| if i < l { inv } else { F::zero() })
                })
                .collect();
            let w = tape.constant(Tensor::new(vec![n, 1, t], w)?);
            Ok(w.matmul(x)?.reshape(&[n, d])?)
        }
        Pooling::Max => {
            let neg = F::MASK_NEG;
            let m: Vec<F> = lengths
                .iter()
                .flat_map(|&l| (0..t).map(move |i| if i < l { F::zero() } else { neg }))
                .collect();
            let m = tape.constant(Tensor::new(vec![n, t, 1], m)?);
            Ok(x.add(m)?.max_axis(1)?)
        }
    }
}

/// Output of [`encode_document`].
pub struct Encoded<'t, F: Real> {
    /// Fused character features `[N, T, d_model]`, pads zero.
    pub x: Var<'t, F>,
    /// Pooled node features `[N, d_model]`.
    pub nodes: Var<'t, F>,
}

/// Runs both branches, fuses and pools. With `images` absent the image
/// branch contributes zeros.
pub fn encode_document<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    ids: &[Vec<usize>],
    images: Option<&Tensor<F>>,
    dropout: &mut crate::autodiff::Dropout,
) -> Result<Encoded<'t, F>, EncodingError> {
    let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
    let te = encode_text(tape, store, cfg, ids, dropout)?;
    let t = te.shape()[1];
    let x = match images {
        Some(img) => fuse(te, encode_images(tape, store, cfg, img, &lengths, t)?)?,
        None => te,
    };
    let nodes = pool_nodes(x, &lengths, cfg.pooling)?;
    Ok(Encoded { x, nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dropout;
    use crate::data::Crop;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            blocks: 2,
            heads: 2,
            d_ff: 16,
            conv_channels: 4,
            t_cap: 8,
            pooling: Pooling::Mean,
        }
    }

    fn store(cfg: &EncoderConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_encoder(&mut s, cfg, 10, &mut ChaCha8Rng::seed_from_u64(3));
        s
    }

    #[test]
    fn text_shape_and_padding() {
        let cfg = tiny();
        let s = store(&cfg);
        let tape = Tape::new();
        let y = encode_text(&tape, &s, &cfg, &[vec![2, 3], vec![4, 5, 6, 7]], &mut Dropout::off()).unwrap();
        assert_eq!(y.shape(), [2, 4, 8]);
        let v = y.value();
        assert!(v.data()[2 * 8..4 * 8].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_ids_fall_back_to_unk() {
        let cfg = tiny();
        let s = store(&cfg);
        let tape = Tape::new();
        let a = encode_text(&tape, &s, &cfg, &[vec![99, 2]], &mut Dropout::off()).unwrap().value();
        let b = encode_text(&tape, &s, &cfg, &[vec![UNK, 2]], &mut Dropout::off()).unwrap().value();
        assert_eq!(a, b);
    }

    #[test]
    fn image_shapes() {
        let cfg = tiny();
        let s = store(&cfg);
        let tape = Tape::new();
        let crop = Crop::uniform(16, 40, 0.2);
        for t in [1, 7, 30] {
            assert_eq!(encode_image(&tape, &s, &cfg, &crop, t).unwrap().shape(), [t, 8]);
        }
    }

    #[test]
    fn zero_weights_give_zero_image_embedding() {
        let cfg = tiny();
        let mut s = store(&cfg);
        for (name, p) in s.iter_mut() {
            if name.starts_with("encoder.image") {
                p.value.fill(0.0);
            }
        }
        let tape = Tape::new();
        let y = encode_image(&tape, &s, &cfg, &Crop::uniform(16, 16, 0.5), 5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { t_cap: 6, ..tiny() }.validate().is_err());
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::new();
        let a = [1.0, 2.0];
        let b = [3.0, -4.0];
        let mut data = vec![0.0; 5 * 2];
        data[..2].copy_from_slice(&a);
        data[2..4].copy_from_slice(&b);
        let x = tape.constant(Tensor::from_f64(&[1, 5, 2], &data).unwrap());
        let p = pool_nodes(x, &[2], Pooling::Mean).unwrap().value();
        assert_eq!(p.data(), &[2.0, -1.0]);
        let single = pool_nodes(x, &[1], Pooling::Mean).unwrap().value();
        assert_eq!(single.data(), &a);
        let m = pool_nodes(x, &[2], Pooling::Max).unwrap().value();
        assert_eq!(m.data(), &[3.0, 2.0]);
        assert!(pool_nodes(x, &[6], Pooling::Mean).is_err());
    }
}
