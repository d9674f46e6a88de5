use super::{DecoderConfig, DecodingError, Emissions, PackedSequence};
use crate::autodiff::{concat, Dropout, ParamStore, Real, Tape, Var};

/// One LSTM direction over the rows of `x` `[M, in]` with zero initial
/// state. Parameters `{prefix}.w_x` `[in, 4h]`, `{prefix}.w_h` `[h, 4h]`
/// and `{prefix}.bias` `[4h]` hold the gates in the order input, forget,
/// candidate, output. With `reverse` the recurrence runs from the last row.
pub fn lstm_direction<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var<'t, F>,
    reverse: bool,
) -> Result<Var<'t, F>, DecodingError> {
    let w_x = tape.param(store, &format!("{prefix}.w_x"))?;
    let w_h = tape.param(store, &format!("{prefix}.w_h"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    let h_dim = w_h.shape()[0];
    let m = x.shape()[0];
    let proj = x.matmul(w_x)?.add(bias)?;
    let mut h = tape.zeros(&[1, h_dim]);
    let mut c = tape.zeros(&[1, h_dim]);
    let mut outs = Vec::with_capacity(m);
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..m).rev()) } else { Box::new(0..m) };
    for t in order {
        let z = proj.slice(0, t, t + 1)?.add(h.matmul(w_h)?)?;
        let i = z.slice(1, 0, h_dim)?.sigmoid();
        let f = z.slice(1, h_dim, 2 * h_dim)?.sigmoid();
        let g = z.slice(1, 2 * h_dim, 3 * h_dim)?.tanh();
        let o = z.slice(1, 3 * h_dim, 4 * h_dim)?.sigmoid();
        c = f.mul(c)?.add(i.mul(g)?)?;
        h = o.mul(c.tanh())?;
        outs.push(h);
    }
    if reverse {
        outs.reverse();
    }
    Ok(concat(&outs, 0)?)
}

/// Stacked bidirectional LSTM: `[M, in]` to `[M, 2h]`, forward states
/// first.
pub fn bilstm<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &DecoderConfig,
    x: Var<'t, F>,
) -> Result<Var<'t, F>, DecodingError> {
    let mut h = x;
    for l in 0..cfg.lstm_layers {
        let fwd = lstm_direction(tape, store, &format!("decoder.lstm.layer{l}.fwd"), h, false)?;
        let bwd = lstm_direction(tape, store, &format!("decoder.lstm.layer{l}.bwd"), h, true)?;
        h = concat(&[fwd, bwd], 1)?;
    }
    Ok(h)
}

/// Runs the BiLSTM over the packed valid timesteps only and projects to
/// `K` scores. Pad rows of the result are zero.
pub fn bilstm_emissions<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &DecoderConfig,
    packed: &PackedSequence<'t, F>,
    dropout: &mut Dropout,
) -> Result<Emissions<'t, F>, DecodingError> {
    let valid = packed.valid();
    let rows = packed.features.shape()[0];
    if valid == 0 {
        return Err(DecodingError::Input("document has no characters".into()));
    }
    let x = dropout.apply(packed.features.slice(0, 0, valid)?)?;
    let h = bilstm(tape, store, cfg, x)?;
    let w_z = tape.param(store, "decoder.emission.weight")?;
    let z = h.matmul(w_z)?;
    let z = if rows > valid {
        let idx: Vec<Option<usize>> = (0..rows).map(|r| (r < valid).then_some(r)).collect();
        z.gather_rows(&idx)?
    } else {
        z
    };
    Emissions::new(z, valid)
}
