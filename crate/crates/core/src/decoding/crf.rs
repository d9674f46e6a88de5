//! Linear-chain CRF over `K` tags with two extra boundary states: `SOS` at
//! index `K` and `EOS` at index `K + 1`.

use super::{DecodingError, Emissions};
use crate::autodiff::{sum_all, Real, Tensor, Var};

/// Transition scores `[K+2, K+2]`, entry `[i, j]` scoring `i -> j`.
/// Transitions into `SOS` and out of `EOS` are masked to `MASK_NEG`.
#[derive(Clone, Copy)]
pub struct Transitions<'t, F: Real> {
    pub matrix: Var<'t, F>,
    tags: usize,
}

impl<'t, F: Real> Transitions<'t, F> {
    pub fn new(raw: Var<'t, F>) -> Result<Self, DecodingError> {
        let s = raw.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] < 3 {
            return Err(DecodingError::Input(format!("transition matrix must be [K+2, K+2], got {s:?}")));
        }
        let k2 = s[0];
        let (sos, eos) = (k2 - 2, k2 - 1);
        let mask: Vec<F> = (0..k2 * k2)
            .map(|p| {
                let (i, j) = (p / k2, p % k2);
                if j == sos || i == eos { F::MASK_NEG } else { F::zero() }
            })
            .collect();
        let matrix = raw.add(raw.tape().constant(Tensor::new(vec![k2, k2], mask)?))?;
        Ok(Self { matrix, tags: k2 - 2 })
    }

    pub fn tags(&self) -> usize {
        self.tags
    }

    pub fn sos(&self) -> usize {
        self.tags
    }

    pub fn eos(&self) -> usize {
        self.tags + 1
    }

    /// `[K]` scores of `SOS -> k`.
    fn start(&self) -> Result<Var<'t, F>, DecodingError> {
        Ok(self.matrix.index(self.sos())?.slice(0, 0, self.tags)?)
    }

    /// `[K]` scores of `k -> EOS`.
    fn end(&self) -> Result<Var<'t, F>, DecodingError> {
        let k = self.tags;
        Ok(self.matrix.slice(0, 0, k)?.slice(1, k + 1, k + 2)?.reshape(&[k])?)
    }

    /// `[K, K]` tag-to-tag block.
    fn inner(&self) -> Result<Var<'t, F>, DecodingError> {
        let k = self.tags;
        Ok(self.matrix.slice(0, 0, k)?.slice(1, 0, k)?)
    }
}

fn check<F: Real>(z: &Emissions<'_, F>, t: &Transitions<'_, F>) -> Result<(), DecodingError> {
    if z.tags() != t.tags() {
        return Err(DecodingError::Input(format!(
            "emissions score {} tags but transitions cover {}",
            z.tags(),
            t.tags()
        )));
    }
    Ok(())
}

fn check_labels(y: &[usize], valid: usize, k: usize) -> Result<(), DecodingError> {
    if y.len() != valid {
        return Err(DecodingError::Length { got: y.len(), expected: valid });
    }
    match y.iter().find(|&&l| l >= k) {
        Some(&label) => Err(DecodingError::Label { label, tags: k }),
        None => Ok(()),
    }
}

/// Path score: boundary and tag-to-tag transitions plus emissions of `y`
/// over the valid timesteps.
pub fn crf_score<'t, F: Real>(z: &Emissions<'t, F>, t: &Transitions<'t, F>, y: &[usize]) -> Result<Var<'t, F>, DecodingError> {
    check(z, t)?;
    let k = t.tags();
    check_labels(y, z.valid, k)?;
    let k2 = k + 2;
    let emit: Vec<usize> = y.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let mut trans = Vec::with_capacity(y.len() + 1);
    trans.push(t.sos() * k2 + y[0]);
    trans.extend(y.windows(2).map(|w| w[0] * k2 + w[1]));
    trans.push(y[y.len() - 1] * k2 + t.eos());
    Ok(z.scores.take(&emit)?.sum().add(t.matrix.take(&trans)?.sum())?)
}

/// Log-sum-exp of the path score over all tag sequences, by the forward
/// recursion.
pub fn crf_log_partition<'t, F: Real>(z: &Emissions<'t, F>, t: &Transitions<'t, F>) -> Result<Var<'t, F>, DecodingError> {
    check(z, t)?;
    let k = t.tags();
    // [j, i] layout so that logsumexp over the last axis sums out the source
    let inner_t = t.inner()?.transpose()?;
    let mut alpha = t.start()?.add(z.scores.index(0)?)?;
    for step in 1..z.valid {
        let prev = alpha.reshape(&[1, k])?;
        alpha = inner_t.add(prev)?.logsumexp()?.add(z.scores.index(step)?)?;
    }
    Ok(alpha.add(t.end()?)?.logsumexp()?.reshape(&[])?)
}

/// Negative log-likelihood of `y`: log-partition minus path score.
pub fn crf_nll<'t, F: Real>(z: &Emissions<'t, F>, t: &Transitions<'t, F>, y: &[usize]) -> Result<Var<'t, F>, DecodingError> {
    let score = crf_score(z, t, y)?;
    Ok(sum_all(&[crf_log_partition(z, t)?, score.neg()])?)
}

/// Path score computed directly from values, using only the unmasked
/// entries of `transitions`.
pub fn path_score<F: Real>(emissions: &Tensor<F>, transitions: &Tensor<F>, y: &[usize]) -> Result<f64, DecodingError> {
    let (k, k2) = table_sizes(emissions, transitions)?;
    check_labels(y, y.len(), k)?;
    if y.is_empty() || y.len() > emissions.shape()[0] {
        return Err(DecodingError::Length { got: y.len(), expected: emissions.shape()[0] });
    }
    let z = |t: usize, l: usize| emissions.data()[t * k + l].to_f64().unwrap();
    let tr = |i: usize, j: usize| transitions.data()[i * k2 + j].to_f64().unwrap();
    let mut s = tr(k, y[0]) + tr(y[y.len() - 1], k + 1);
    for (i, &l) in y.iter().enumerate() {
        s += z(i, l);
    }
    for w in y.windows(2) {
        s += tr(w[0], w[1]);
    }
    Ok(s)
}

fn table_sizes<F: Real>(emissions: &Tensor<F>, transitions: &Tensor<F>) -> Result<(usize, usize), DecodingError> {
    let (es, ts) = (emissions.shape(), transitions.shape());
    if es.len() != 2 || ts.len() != 2 || ts[0] != ts[1] || ts[0] != es[1] + 2 || es[1] == 0 {
        return Err(DecodingError::Input(format!(
            "emissions {es:?} and transitions {ts:?} are not [M, K] and [K+2, K+2]"
        )));
    }
    Ok((es[1], ts[0]))
}

/// Highest-scoring tag sequence over the first `valid` rows of
/// `emissions`. Among equally scoring paths the lexicographically smallest
/// label sequence wins.
pub fn viterbi_decode<F: Real>(emissions: &Tensor<F>, transitions: &Tensor<F>, valid: usize) -> Result<Vec<usize>, DecodingError> {
    let (k, k2) = table_sizes(emissions, transitions)?;
    if valid == 0 || valid > emissions.shape()[0] {
        return Err(DecodingError::Input(format!(
            "cannot decode {valid} timesteps from {} rows",
            emissions.shape()[0]
        )));
    }
    let z = |t: usize, l: usize| emissions.data()[t * k + l].to_f64().unwrap();
    let tr = |i: usize, j: usize| transitions.data()[i * k2 + j].to_f64().unwrap();
    // beta[t][j]: best score of timesteps t.. given label j at t, through EOS
    let mut beta = vec![vec![0.0; k]; valid];
    for j in 0..k {
        beta[valid - 1][j] = z(valid - 1, j) + tr(j, k + 1);
    }
    for t in (0..valid - 1).rev() {
        for j in 0..k {
            let best = (0..k).map(|n| tr(j, n) + beta[t + 1][n]).fold(f64::NEG_INFINITY, f64::max);
            beta[t][j] = z(t, j) + best;
        }
    }
    // walk forward taking the first label that still reaches the optimum
    let first_best = |from: usize, row: &[f64]| {
        let scores: Vec<f64> = (0..k).map(|j| tr(from, j) + row[j]).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scores.iter().position(|&s| s == m).unwrap_or(0)
    };
    let mut path = Vec::with_capacity(valid);
    let mut prev = k;
    for row in &beta {
        prev = first_best(prev, row);
        path.push(prev);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn setup<'t>(tape: &'t Tape<f64>, z: &[f64], rows: usize, k: usize, tr: &[f64]) -> (Emissions<'t, f64>, Transitions<'t, f64>) {
        let zv = tape.leaf(Tensor::from_f64(&[rows, k], z).unwrap(), true);
        let tv = tape.leaf(Tensor::from_f64(&[k + 2, k + 2], tr).unwrap(), true);
        (Emissions::new(zv, rows).unwrap(), Transitions::new(tv).unwrap())
    }

    #[test]
    fn zero_scores_give_zero_path_score() {
        let tape = Tape::new();
        let (z, t) = setup(&tape, &[0.0; 6], 3, 2, &[0.0; 16]);
        assert_eq!(crf_score(&z, &t, &[1, 0, 1]).unwrap().item(), 0.0);
    }

    #[test]
    fn single_step_score_unrolls() {
        let tape = Tape::new();
        // K = 1: SOS = 1, EOS = 2
        let mut tr = vec![0.0; 9];
        tr[3] = 0.5; // SOS -> 0
        tr[2] = -0.75; // 0 -> EOS
        tr[2 * 3] = 0.25; // EOS -> 0, masked
        let (z, t) = setup(&tape, &[2.0], 1, 1, &tr);
        assert_eq!(crf_score(&z, &t, &[0]).unwrap().item(), 0.5 + 2.0 - 0.75);
    }

    #[test]
    fn uniform_two_by_two_partition_is_log_four() {
        let tape = Tape::new();
        let (z, t) = setup(&tape, &[0.0; 4], 2, 2, &[0.0; 16]);
        let lz = crf_log_partition(&z, &t).unwrap().item();
        assert!((lz - 4f64.ln()).abs() < 1e-12);
        assert!((crf_nll(&z, &t, &[1, 0]).unwrap().item() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn single_label_vocabulary_has_zero_loss() {
        let tape = Tape::new();
        let (z, t) = setup(&tape, &[0.3, -1.0, 2.0], 3, 1, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        assert!(crf_nll(&z, &t, &[0, 0, 0]).unwrap().item().abs() < 1e-12);
        assert!(crf_log_partition(&z, &t).unwrap().item().is_finite());
    }

    #[test]
    fn labels_are_validated() {
        let tape = Tape::new();
        let (z, t) = setup(&tape, &[0.0; 4], 2, 2, &[0.0; 16]);
        assert!(matches!(crf_score(&z, &t, &[0, 2]), Err(DecodingError::Label { label: 2, tags: 2 })));
        assert!(matches!(crf_score(&z, &t, &[0]), Err(DecodingError::Length { .. })));
    }

    #[test]
    fn viterbi_examples() {
        let z = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let tr = Tensor::zeros(&[4, 4]);
        assert_eq!(viterbi_decode(&z, &tr, 2).unwrap(), vec![0, 1]);
        let flat = Tensor::full(&[4, 3], 0.7);
        assert_eq!(viterbi_decode(&flat, &Tensor::zeros(&[5, 5]), 4).unwrap(), vec![0; 4]);
    }

    #[test]
    fn pad_rows_do_not_enter_the_partition() {
        let tape = Tape::<f64>::new();
        let zv = tape.constant(Tensor::from_f64(&[3, 2], &[0.0, 0.0, 0.0, 0.0, 50.0, -50.0]).unwrap());
        let t = Transitions::new(tape.zeros(&[4, 4])).unwrap();
        let z = Emissions::new(zv, 2).unwrap();
        assert!((crf_log_partition(&z, &t).unwrap().item() - 4f64.ln()).abs() < 1e-12);
    }
}
