//! Convolutional branch: a stack of three stride-2 3x3 convolutions with
//! rectifiers, standing in for a ResNet backbone of the same output width.

use rand::Rng;

use super::{EncoderConfig, EncodingError};
use crate::autodiff::{lit, ParamStore, Real, Tape, Tensor, Var};
use crate::data::Crop;

/// Feature map height after the conv stack.
pub const MAP_H: usize = 4;
const DOWNSAMPLE: usize = 8;

/// Input size `(height, width)` the crops are resized to.
pub fn input_size(cfg: &EncoderConfig) -> (usize, usize) {
    (MAP_H * DOWNSAMPLE, cfg.t_cap / MAP_H * DOWNSAMPLE)
}

pub(super) fn init<F: Real>(store: &mut ParamStore<F>, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let widths = [3, cfg.conv_channels, cfg.conv_channels, cfg.d_model];
    for l in 0..3 {
        let (c, o) = (widths[l], widths[l + 1]);
        store.insert_xavier(format!("encoder.image.conv{l}.weight"), &[o, c, 3, 3], c * 9, o * 9, rng);
        store.insert_zeros(format!("encoder.image.conv{l}.bias"), &[1, o, 1, 1]);
    }
}

/// Bilinear resize (half-pixel centers) to channel-major `[3, h, w]`.
pub fn resize_bilinear(crop: &Crop, h: usize, w: usize) -> Result<Vec<f64>, EncodingError> {
    if crop.height < 2 || crop.width < 2 || h < 2 || w < 2 {
        return Err(EncodingError::DegenerateCrop {
            height: crop.height,
            width: crop.width,
        });
    }
    let sample = |dst: usize, out: usize, src: usize| {
        let s = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        let (y0, y1, fy) = sample(y, h, crop.height);
        for x in 0..w {
            let (x0, x1, fx) = sample(x, w, crop.width);
            let (a, b, c, d) = (crop.pixel(y0, x0), crop.pixel(y0, x1), crop.pixel(y1, x0), crop.pixel(y1, x1));
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                out[(ch * h + y) * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Stacks resized crops into the `[N, 3, h, w]` network input.
pub fn prepare_images<F: Real>(crops: &[&Crop], cfg: &EncoderConfig) -> Result<Tensor<F>, EncodingError> {
    let (h, w) = input_size(cfg);
    let mut data = Vec::with_capacity(crops.len() * 3 * h * w);
    for c in crops {
        data.extend(resize_bilinear(c, h, w)?.into_iter().map(lit::<F>));
    }
    Ok(Tensor::new(vec![crops.len(), 3, h, w], data)?)
}

/// Runs the conv stack on `[N, 3, h, w]` inputs and lays the `t_cap` map
/// cells of segment `i` over its `lengths[i]` characters, cycling when the
/// segment is longer than the map. Returns `[N, t, d_model]`, pads zero.
pub fn encode_images<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    images: &Tensor<F>,
    lengths: &[usize],
    t: usize,
) -> Result<Var<'t, F>, EncodingError> {
    let n = lengths.len();
    if images.rank() != 4 || images.shape()[0] != n {
        return Err(EncodingError::Input(format!(
            "expected {n} images, got shape {:?}",
            images.shape()
        )));
    }
    let mut x = tape.constant(images.clone());
    for l in 0..3 {
        let w = tape.param(store, &format!("encoder.image.conv{l}.weight"))?;
        let b = tape.param(store, &format!("encoder.image.conv{l}.bias"))?;
        x = x.conv2d(w, 2, 1)?.add(b)?.relu();
    }
    let shape = x.shape();
    let (d, cells) = (shape[1], shape[2] * shape[3]);
    if cells != cfg.t_cap {
        return Err(EncodingError::Input(format!(
            "feature map has {cells} cells, expected {}",
            cfg.t_cap
        )));
    }
    let flat = x.permute(&[0, 2, 3, 1])?.reshape(&[n * cells, d])?;
    let rows: Vec<Option<usize>> = lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &len)| (0..t).map(move |k| (k < len).then_some(i * cells + k % cells)))
        .collect();
    Ok(flat.gather_rows(&rows)?.reshape(&[n, t, d])?)
}

/// Single-crop convenience: `[t_i, d_model]` embedding of one segment image.
pub fn encode_image<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
    crop: &Crop,
    t_i: usize,
) -> Result<Var<'t, F>, EncodingError> {
    let images = prepare_images::<F>(&[crop], cfg)?;
    let out = encode_images(tape, store, cfg, &images, &[t_i], t_i)?;
    Ok(out.reshape(&[t_i, cfg.d_model])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constants_and_gradients() {
        let c = Crop::uniform(5, 9, 0.3);
        assert!(resize_bilinear(&c, 4, 7).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        // horizontal ramp stays a ramp
        let data: Vec<f64> = (0..2 * 4).flat_map(|i| [(i % 4) as f64 / 3.0; 3]).collect();
        let ramp = Crop::new(2, 4, data).unwrap();
        let r = resize_bilinear(&ramp, 2, 4).unwrap();
        assert_eq!(&r[..4], &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn degenerate_crop_is_error() {
        assert!(matches!(
            resize_bilinear(&Crop::uniform(1, 9, 0.5), 4, 4),
            Err(EncodingError::DegenerateCrop { .. })
        ));
    }
}
