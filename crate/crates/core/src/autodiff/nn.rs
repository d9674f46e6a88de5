//! Layers composed from tape primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::real::{lit, Real};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// `x @ W + b` with `W` stored `[in, out]` under `{name}.weight` and `b`
/// under `{name}.bias`.
pub fn linear<'t, F: Real>(tape: &'t Tape<F>, store: &ParamStore<F>, name: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    x.matmul(w)?.add(b)
}

/// Registers the parameters used by [`linear`].
pub fn init_linear<F: Real>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.insert_xavier(format!("{name}.weight"), &[fan_in, fan_out], fan_in, fan_out, rng);
    store.insert_zeros(format!("{name}.bias"), &[fan_out]);
}

/// Normalizes over the last axis, then applies `{name}.gain` and
/// `{name}.offset`.
pub fn layer_norm<'t, F: Real>(tape: &'t Tape<F>, store: &ParamStore<F>, name: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let last = shape.len() - 1;
    let mut keep = shape.clone();
    keep[last] = 1;
    let mu = x.mean_axis(last)?.reshape(&keep)?;
    let centered = x.sub(mu)?;
    let var = centered.mul(centered)?.mean_axis(last)?.reshape(&keep)?;
    let norm = centered.div(var.add_scalar(lit(1e-5)).sqrt())?;
    let gain = tape.param(store, &format!("{name}.gain"))?;
    let offset = tape.param(store, &format!("{name}.offset"))?;
    norm.mul(gain)?.add(offset)
}

pub fn init_layer_norm<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) {
    store.insert_ones(format!("{name}.gain"), &[dim]);
    store.insert_zeros(format!("{name}.offset"), &[dim]);
}

/// Inverted dropout. Without a generator (inference) it is the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<'t, F: Real>(&mut self, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let shape = x.shape();
        let keep = lit::<F>(1.0 / (1.0 - rate));
        let n: usize = shape.iter().product();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        x.mul(x.tape().constant(Tensor::new(shape, mask)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut store = ParamStore::<f64>::new();
        init_layer_norm(&mut store, "ln", 4);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap());
        let y = layer_norm(&tape, &store, "ln", x).unwrap().value();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_off_is_identity_and_train_scales() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1000]));
        assert_eq!(Dropout::off().apply(x).unwrap().id(), x.id());
        let y = Dropout::train(0.5, ChaCha8Rng::seed_from_u64(1)).apply(x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
