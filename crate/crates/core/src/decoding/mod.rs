//! Document-level tagging head: the union layer packs every segment's
//! characters (each joined with its node embedding) into one sequence, a
//! bidirectional LSTM scores tags per timestep and a linear-chain CRF
//! scores whole tag paths.

mod crf;
mod lstm;

use rand::Rng;

use crate::autodiff::{concat, AutodiffError, ParamStore, Real, Var};

pub use crf::{crf_log_partition, crf_nll, crf_score, path_score, viterbi_decode, Transitions};
pub use lstm::{bilstm, bilstm_emissions, lstm_direction};

#[derive(Debug, thiserror::Error)]
pub enum DecodingError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("label {label} out of range for {tags} tags")]
    Label { label: usize, tags: usize },
    #[error("tag sequence has {got} entries, expected {expected} valid timesteps")]
    Length { got: usize, expected: usize },
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub lstm_layers: usize,
    /// Number of IOB tags `K`.
    pub tags: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodingError> {
        if self.d_model == 0 || self.d_hidden == 0 || self.lstm_layers == 0 || self.tags == 0 {
            return Err(DecodingError::Input(
                "decoder sizes (d_model, d_hidden, lstm_layers, tags) must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Registers LSTM, emission projection and CRF transition parameters.
pub fn init_decoder<F: Real>(store: &mut ParamStore<F>, cfg: &DecoderConfig, rng: &mut impl Rng) {
    let h = cfg.d_hidden;
    for l in 0..cfg.lstm_layers {
        let input = if l == 0 { 2 * cfg.d_model } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            let p = format!("decoder.lstm.layer{l}.{dir}");
            store.insert_xavier(format!("{p}.w_x"), &[input, 4 * h], input, 4 * h, rng);
            store.insert_xavier(format!("{p}.w_h"), &[h, 4 * h], h, 4 * h, rng);
            store.insert_zeros(format!("{p}.bias"), &[4 * h]);
        }
    }
    store.insert_xavier("decoder.emission.weight", &[2 * h, cfg.tags], 2 * h, cfg.tags, rng);
    let k = cfg.tags + 2;
    store.insert_zeros("decoder.crf.transitions", &[k, k]);
}

/// Union-layer output: `[N*T, 2*d]` features whose first `valid` rows are
/// the document's characters in reading order.
pub struct PackedSequence<'t, F: Real> {
    pub features: Var<'t, F>,
    pub mask: Vec<bool>,
    pub seg_of: Vec<usize>,
}

impl<F: Real> PackedSequence<'_, F> {
    pub fn valid(&self) -> usize {
        self.seg_of.len()
    }
}

/// Packs `x` `[N, T, d]` and node embeddings `[N, d]`: each valid character
/// row is joined with its segment's node row, pads trail with zeros.
pub fn pack<'t, F: Real>(x: Var<'t, F>, nodes: Var<'t, F>, lengths: &[usize]) -> Result<PackedSequence<'t, F>, DecodingError> {
    let (xs, ns) = (x.shape(), nodes.shape());
    if xs.len() != 3 || ns.len() != 2 || xs[0] != lengths.len() || ns[0] != xs[0] || ns[1] != xs[2] {
        return Err(DecodingError::Input(format!(
            "pack: features {xs:?} and nodes {ns:?} do not match {} segments",
            lengths.len()
        )));
    }
    let (n, t, d) = (xs[0], xs[1], xs[2]);
    if let Some(&l) = lengths.iter().find(|&&l| l > t) {
        return Err(DecodingError::Input(format!("pack: segment length {l} exceeds {t} timesteps")));
    }
    let seg_of: Vec<usize> = lengths.iter().enumerate().flat_map(|(i, &l)| std::iter::repeat_n(i, l)).collect();
    let pads = n * t - seg_of.len();
    let char_rows: Vec<Option<usize>> = lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| (0..l).map(move |k| Some(i * t + k)))
        .chain(std::iter::repeat_n(None, pads))
        .collect();
    let node_rows: Vec<Option<usize>> =
        seg_of.iter().map(|&s| Some(s)).chain(std::iter::repeat_n(None, pads)).collect();
    let chars = x.reshape(&[n * t, d])?.gather_rows(&char_rows)?;
    let joined = concat(&[chars, nodes.gather_rows(&node_rows)?], 1)?;
    let mut mask = vec![true; seg_of.len()];
    mask.resize(n * t, false);
    Ok(PackedSequence {
        features: joined,
        mask,
        seg_of,
    })
}

/// Per-timestep tag scores `[rows, K]`; only the first `valid` rows take
/// part in CRF scoring.
#[derive(Clone, Copy)]
pub struct Emissions<'t, F: Real> {
    pub scores: Var<'t, F>,
    pub valid: usize,
}

impl<'t, F: Real> Emissions<'t, F> {
    pub fn new(scores: Var<'t, F>, valid: usize) -> Result<Self, DecodingError> {
        let s = scores.shape();
        if s.len() != 2 || valid == 0 || valid > s[0] || s[1] == 0 {
            return Err(DecodingError::Input(format!(
                "emissions of shape {s:?} cannot hold {valid} valid timesteps"
            )));
        }
        Ok(Self { scores, valid })
    }

    pub fn tags(&self) -> usize {
        self.scores.shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn pack_lengths_and_layout() {
        let tape = Tape::<f64>::new();
        let x: Vec<f64> = (0..2 * 3 * 2).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 2], &x).unwrap());
        let v = tape.constant(Tensor::from_f64(&[2, 2], &[10.0, 11.0, 20.0, 21.0]).unwrap());
        let p = pack(x, v, &[2, 3]).unwrap();
        assert_eq!(p.seg_of, vec![0, 0, 1, 1, 1]);
        assert_eq!(p.mask, vec![true, true, true, true, true, false]);
        let f = p.features.value();
        assert_eq!(f.shape(), [6, 4]);
        assert_eq!(f.row(0), &[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(f.row(2), &[6.0, 7.0, 20.0, 21.0]);
        assert_eq!(f.row(4), &[10.0, 11.0, 20.0, 21.0]);
        assert_eq!(f.row(5), &[0.0; 4]);
    }

    #[test]
    fn zero_nodes_zero_second_half() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3, 2, 2], 1.5));
        let p = pack(x, tape.zeros(&[3, 2]), &[1, 2, 1]).unwrap();
        for r in 0..4 {
            assert_eq!(&p.features.value().row(r)[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn single_segment_pack_is_identity_on_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3, 1], &[4.0, 5.0, 6.0]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 1], &[9.0]).unwrap());
        let p = pack(x, v, &[3]).unwrap();
        assert_eq!(p.features.value().data(), &[4.0, 9.0, 5.0, 9.0, 6.0, 9.0]);
        assert!(pack(x, v, &[4]).is_err());
    }
}
