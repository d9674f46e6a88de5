//! Dense row-major arrays and the raw kernels the tape is built from.

use super::real::Real;
use super::AutodiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, AutodiffError> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| super::lit::<F>(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            offset = offset * d + i;
        }
        self.data[offset]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                shapes: vec![self.shape.clone(), shape.to_vec()],
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: F) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[F] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as broadcast into `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                base[i - offset]
            }
        })
        .collect()
}

/// Visits every output position together with the matching offsets of two
/// broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // odometer over the outer axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>, AutodiffError> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| AutodiffError::Shape {
        op,
        shapes: vec![a.shape.clone(), b.shape.clone()],
    })?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![F::zero(); out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor { shape: out, data })
}

/// Backward of a broadcast binary op: `gx[ia] += dfx(g, x, y)` and
/// `gy[ib] += dfy(g, x, y)`, summing over broadcast axes.
pub(crate) fn broadcast_binary_backward<F: Real>(
    grad: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    want: (bool, bool),
    dfa: impl Fn(F, F, F) -> F,
    dfb: impl Fn(F, F, F) -> F,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let mut ga = want.0.then(|| Tensor::<F>::zeros(&a.shape));
    let mut gb = want.1.then(|| Tensor::<F>::zeros(&b.shape));
    let out = grad.shape.as_slice();
    if a.shape == b.shape {
        for o in 0..grad.data.len() {
            let (g, x, y) = (grad.data[o], a.data[o], b.data[o]);
            if let Some(t) = ga.as_mut() {
                t.data[o] += dfa(g, x, y);
            }
            if let Some(t) = gb.as_mut() {
                t.data[o] += dfb(g, x, y);
            }
        }
        return (ga, gb);
    }
    let sa = broadcast_strides(&a.shape, out);
    let sb = broadcast_strides(&b.shape, out);
    for_each_broadcast(out, &sa, &sb, |o, ia, ib| {
        let (g, x, y) = (grad.data[o], a.data[ia], b.data[ib]);
        if let Some(t) = ga.as_mut() {
            t.data[ia] += dfa(g, x, y);
        }
        if let Some(t) = gb.as_mut() {
            t.data[ib] += dfb(g, x, y);
        }
    });
    (ga, gb)
}

pub(crate) fn broadcast_to<F: Real>(t: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>, AutodiffError> {
    match broadcast_shape(&t.shape, shape) {
        Some(out) if out == shape => {}
        _ => {
            return Err(AutodiffError::Shape {
                op: "broadcast",
                shapes: vec![t.shape.clone(), shape.to_vec()],
            })
        }
    }
    let st = broadcast_strides(&t.shape, shape);
    let zeros = vec![0; shape.len()];
    let mut data = vec![F::zero(); shape.iter().product()];
    for_each_broadcast(shape, &st, &zeros, |o, i, _| data[o] = t.data[i]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Sums `grad` down to `shape` (the inverse of broadcasting).
pub(crate) fn reduce_to<F: Real>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, &grad.shape);
    let zeros = vec![0; grad.shape.len()];
    let mut out = Tensor::zeros(shape);
    for_each_broadcast(&grad.shape, &st, &zeros, |o, i, _| out.data[i] += grad.data[o]);
    out
}

pub(crate) fn permute<F: Real>(t: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let in_strides = contiguous_strides(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut data = vec![F::zero(); t.data.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| data[o] = t.data[i]);
    Tensor {
        shape: out_shape,
        data,
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batched matrix product layout: `batch` products of `[m,k] @ [k,n]`,
/// the right operand shared across the batch when `rhs_batched` is false.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub rhs_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(MatmulDims, Vec<usize>)> {
    match (a.len(), b.len()) {
        (0, _) | (_, 0) => None,
        (1, 1) => (a[0] == b[0]).then(|| {
            (
                MatmulDims { batch: 1, m: 1, k: a[0], n: 1, rhs_batched: false },
                vec![],
            )
        }),
        (1, 2) => (a[0] == b[0]).then(|| {
            (
                MatmulDims { batch: 1, m: 1, k: a[0], n: b[1], rhs_batched: false },
                vec![b[1]],
            )
        }),
        (_, 1) => {
            let k = *a.last().unwrap();
            (k == b[0]).then(|| {
                let m = a[..a.len() - 1].iter().product();
                (
                    MatmulDims { batch: 1, m, k, n: 1, rhs_batched: false },
                    a[..a.len() - 1].to_vec(),
                )
            })
        }
        (_, 2) => {
            let k = *a.last().unwrap();
            (k == b[0]).then(|| {
                let m = a[..a.len() - 1].iter().product();
                let mut out = a[..a.len() - 1].to_vec();
                out.push(b[1]);
                (MatmulDims { batch: 1, m, k, n: b[1], rhs_batched: false }, out)
            })
        }
        (3, 3) => (a[0] == b[0] && a[2] == b[1]).then(|| {
            (
                MatmulDims { batch: a[0], m: a[1], k: a[2], n: b[2], rhs_batched: true },
                vec![a[0], a[1], b[2]],
            )
        }),
        _ => None,
    }
}

/// `c[bi] (+)= op(a[bi]) @ op(b[bi])` where `ta`/`tb` select a transposed
/// read of the stored `[rows, cols]` blocks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batched<F: Real>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    ta: bool,
    a_batched: bool,
    b: &[F],
    tb: bool,
    b_batched: bool,
    c: &mut [F],
    c_batched: bool,
    accumulate: bool,
) {
    let (a_step, b_step, c_step) = (m * k, k * n, m * n);
    assert!(a.len() >= if a_batched { batch * a_step } else { a_step });
    assert!(b.len() >= if b_batched { batch * b_step } else { b_step });
    assert!(c.len() >= if c_batched { batch * c_step } else { c_step });
    // a block is stored [m,k] or, when transposed, [k,m]
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for bi in 0..batch {
        let ao = if a_batched { bi * a_step } else { 0 };
        let bo = if b_batched { bi * b_step } else { 0 };
        let co = if c_batched { bi * c_step } else { 0 };
        let beta = if accumulate || (!c_batched && bi > 0) {
            F::one()
        } else {
            F::zero()
        };
        if m == 0 || n == 0 {
            continue;
        }
        // SAFETY: the asserts above bound every block; c is a distinct &mut.
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a.as_ptr().add(ao),
                rsa,
                csa,
                b.as_ptr().add(bo),
                rsb,
                csb,
                beta,
                c.as_mut_ptr().add(co),
                n as isize,
                1,
            );
        }
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Unfolds one `[c,h,w]` image into `[c*kh*kw, ho*wo]` columns.
pub(crate) fn im2col<F: Real>(img: &[F], g: &ConvGeom, cols: &mut [F]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image.
pub(crate) fn col2im<F: Real>(cols: &[F], g: &ConvGeom, img: &mut [F]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_align_trailing() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn reduce_inverts_broadcast() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let b = broadcast_to(&t, &[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let r = reduce_to(&b, &[3]);
        assert_eq!(r.data(), &[2.0, 4.0, 6.0]);
        let r = reduce_to(&b, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 6.0]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = permute(&t, &[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_transposed_reads() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm_batched(1, 2, 2, 2, &a, false, false, &b, false, false, &mut c, false, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm_batched(1, 2, 2, 2, &a, true, false, &b, false, false, &mut c, false, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm_batched(1, 2, 2, 2, &a, false, false, &b, true, false, &mut c, false, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom { c: 1, h: 3, w: 3, kh: 3, kw: 3, ho: 2, wo: 2, stride: 2, pad: 1 };
        let img: Vec<f64> = (0..9).map(|x| x as f64).collect();
        let mut cols = vec![0.0; 9 * 4];
        im2col(&img, &g, &mut cols);
        let probe: Vec<f64> = (0..36).map(|x| (x as f64 * 0.37).sin()).collect();
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 9];
        col2im(&probe, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
