//! Soft adjacency learning and edge-conditioned graph convolution over
//! node-edge-node triplets.
//!
//! Shapes: `V` is `[N, d]`, the adjacency `A` is `[N, N]`, relation
//! embeddings and triplet features are `[N, N, d]`. Matrices that multiply
//! column vectors in the usual notation (`W v`) are stored `[out, in]` and
//! applied to row vectors as `v Wᵀ`; the node-update matrix right-multiplies
//! as written and is `[in, out]`.

use rand::Rng;

use crate::autodiff::{lit, AutodiffError, ParamStore, Real, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::data::BBox;

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("segment {index}: {msg}")]
    Geometry { index: usize, msg: String },
    #[error("invalid graph config: {0}")]
    Config(String),
}

/// Width of the pairwise geometry vector.
pub const RELATION_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub d_model: usize,
    pub layers: usize,
    pub eta: f64,
    pub gamma: f64,
    /// Learn a fresh adjacency from each layer's node features.
    pub relearn: bool,
    /// When false the adjacency is the uniform `1/N` matrix and the graph
    /// learning loss is zero.
    pub learn_adjacency: bool,
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(GraphError::Config("at least one graph layer is required".into()));
        }
        if !(self.eta >= 0.0 && self.gamma >= 0.0) {
            return Err(GraphError::Config("eta and gamma must be non-negative".into()));
        }
        Ok(())
    }
}

fn adjacency_weight_name(cfg: &GraphConfig, layer: usize) -> String {
    if cfg.relearn && layer > 0 {
        format!("graph.layer{layer}.adjacency_w")
    } else {
        "graph.adjacency_w".into()
    }
}

pub fn init_graph<F: Real>(store: &mut ParamStore<F>, cfg: &GraphConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    let adjacency_layers = if cfg.relearn { cfg.layers } else { 1 };
    for l in 0..adjacency_layers {
        store.insert_xavier(adjacency_weight_name(cfg, l), &[d], d, 1, rng);
    }
    store.insert_xavier("graph.relation_w", &[d, RELATION_DIM], RELATION_DIM, d, rng);
    for l in 0..cfg.layers {
        let p = format!("graph.layer{l}");
        store.insert_xavier(format!("{p}.w_vi"), &[d, d], d, d, rng);
        store.insert_xavier(format!("{p}.w_vj"), &[d, d], d, d, rng);
        store.insert_zeros(format!("{p}.bias"), &[d]);
        store.insert_xavier(format!("{p}.w_node"), &[d, d], d, d, rng);
        // the last layer's relation update would feed nothing
        if l + 1 < cfg.layers {
            store.insert_xavier(format!("{p}.w_alpha"), &[d, d], d, d, rng);
        }
    }
}

/// `[N, N, d]` differences `v_i - v_j`.
fn pairwise_diff<'t, F: Real>(v: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = v.shape();
    let (n, d) = (s[0], s[1]);
    Ok(v.reshape(&[n, 1, d])?.sub(v.reshape(&[1, n, d])?)?)
}

/// `A_i = softmax_j(LeakyReLU(w · |v_i - v_j|))`.
pub fn learn_adjacency<'t, F: Real>(v: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = v.shape();
    if s.len() != 2 || w.shape() != [s[1]] {
        return Err(AutodiffError::Shape {
            op: "learn_adjacency",
            shapes: vec![s, w.shape()],
        }
        .into());
    }
    let (n, d) = (s[0], s[1]);
    let scores = pairwise_diff(v)?
        .abs()
        .reshape(&[n * n, d])?
        .matmul(w.reshape(&[d, 1])?)?
        .reshape(&[n, n])?;
    Ok(scores.leaky_relu(lit(LEAKY_SLOPE)).softmax()?)
}

/// `mean_ij exp(A_ij + η‖v_i - v_j‖²) + γ‖A‖²_F`.
pub fn graph_learning_loss<'t, F: Real>(a: Var<'t, F>, v: Var<'t, F>, eta: f64, gamma: f64) -> Result<Var<'t, F>> {
    let dist = pairwise_diff(v)?;
    let dist2 = dist.mul(dist)?.sum_axis(2)?;
    let spread = a.add(dist2.scale(lit(eta)))?.exp().mean();
    Ok(spread.add(a.sq_norm().scale(lit(gamma)))?)
}

/// Pairwise geometry `[N, N, 6]`: for the ordered pair `(i, j)`,
/// `[(x_j - x_i)/h_i, (y_j - y_i)/h_i, w_i/h_i, h_j/h_i, w_j/h_i, T_j/T_i]`
/// with offsets measured between top-left corners.
pub fn relation_features<F: Real>(boxes: &[BBox], lengths: &[usize]) -> Result<Tensor<F>> {
    if boxes.len() != lengths.len() {
        return Err(GraphError::Geometry {
            index: boxes.len().min(lengths.len()),
            msg: format!("{} boxes for {} lengths", boxes.len(), lengths.len()),
        });
    }
    for (index, (b, &t)) in boxes.iter().zip(lengths).enumerate() {
        if !(b.h > 0.0) || !(b.w > 0.0) {
            return Err(GraphError::Geometry {
                index,
                msg: format!("box width and height must be positive, got w={} h={}", b.w, b.h),
            });
        }
        if t == 0 {
            return Err(GraphError::Geometry { index, msg: "empty transcript".into() });
        }
    }
    let n = boxes.len();
    let mut data = Vec::with_capacity(n * n * RELATION_DIM);
    for (bi, &ti) in boxes.iter().zip(lengths) {
        for (bj, &tj) in boxes.iter().zip(lengths) {
            let h = bi.h;
            data.extend(
                [
                    (bj.x - bi.x) / h,
                    (bj.y - bi.y) / h,
                    bi.w / h,
                    bj.h / h,
                    bj.w / h,
                    tj as f64 / ti as f64,
                ]
                .map(lit::<F>),
            );
        }
    }
    Ok(Tensor::new(vec![n, n, RELATION_DIM], data)?)
}

/// `α⁰_ij = W⁰_α r_ij` with `W⁰_α` of shape `[d, 6]`.
pub fn init_relation_embedding<'t, F: Real>(feats: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = feats.shape();
    let (n, d) = (s[0], w.shape()[0]);
    Ok(feats
        .reshape(&[n * n, RELATION_DIM])?
        .matmul(w.transpose()?)?
        .reshape(&[n, n, d])?)
}

/// `h_ij = relu(W_vi v_i + W_vj v_j + α_ij + b)`.
pub fn triplet_hidden<'t, F: Real>(
    v: Var<'t, F>,
    alpha: Var<'t, F>,
    w_vi: Var<'t, F>,
    w_vj: Var<'t, F>,
    b: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let s = v.shape();
    let (n, d) = (s[0], s[1]);
    let from_i = v.matmul(w_vi.transpose()?)?.reshape(&[n, 1, d])?;
    let from_j = v.matmul(w_vj.transpose()?)?.reshape(&[1, n, d])?;
    Ok(from_i.add(from_j)?.add(alpha)?.add(b)?.relu())
}

/// `v_i = relu((Σ_j A_ij h_ij) W)`.
pub fn node_update<'t, F: Real>(a: Var<'t, F>, h: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = h.shape();
    let (n, d) = (s[0], s[2]);
    let mixed = a.reshape(&[n, 1, n])?.matmul(h)?.reshape(&[n, d])?;
    Ok(mixed.matmul(w)?.relu())
}

/// `α_ij = relu(W_α h_ij)`.
pub fn relation_update<'t, F: Real>(h: Var<'t, F>, w: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = h.shape();
    let (n, d) = (s[0], s[2]);
    Ok(h.reshape(&[n * n, d])?.matmul(w.transpose()?)?.relu().reshape(&[n, n, d])?)
}

pub struct GraphOutput<'t, F: Real> {
    /// Final node embeddings `[N, d]`.
    pub nodes: Var<'t, F>,
    /// Adjacency used by the first layer.
    pub adjacency: Var<'t, F>,
    pub loss: Var<'t, F>,
}

/// Learns the adjacency from `x0` and runs `cfg.layers` rounds of triplet
/// features, node update and relation update.
pub fn graph_forward<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    cfg: &GraphConfig,
    x0: Var<'t, F>,
    feats: &Tensor<F>,
) -> Result<GraphOutput<'t, F>> {
    let n = x0.shape()[0];
    let adjacency_of = |v: Var<'t, F>, layer: usize| -> Result<(Var<'t, F>, Var<'t, F>)> {
        if !cfg.learn_adjacency {
            let uniform = Tensor::full(&[n, n], F::one() / F::from_usize(n).unwrap());
            return Ok((tape.constant(uniform), tape.scalar(F::zero())));
        }
        let w = tape.param(store, &adjacency_weight_name(cfg, layer))?;
        let a = learn_adjacency(v, w)?;
        Ok((a, graph_learning_loss(a, v, cfg.eta, cfg.gamma)?))
    };
    let (first, mut loss) = adjacency_of(x0, 0)?;
    let mut a = first;
    let mut v = x0;
    let mut alpha = init_relation_embedding(tape.constant(feats.clone()), tape.param(store, "graph.relation_w")?)?;
    for l in 0..cfg.layers {
        if cfg.relearn && l > 0 {
            let (al, ll) = adjacency_of(v, l)?;
            a = al;
            loss = loss.add(ll)?;
        }
        let p = format!("graph.layer{l}");
        let param = |s: &str| tape.param(store, &format!("{p}.{s}"));
        let h = triplet_hidden(v, alpha, param("w_vi")?, param("w_vj")?, param("bias")?)?;
        v = node_update(a, h, param("w_node")?)?;
        if l + 1 < cfg.layers {
            alpha = relation_update(h, param("w_alpha")?)?;
        }
    }
    Ok(GraphOutput {
        nodes: v,
        adjacency: first,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identical_nodes_give_uniform_adjacency() {
        let tape = Tape::new();
        let v = tape.constant(t(&[3, 2], &[0.3, -1.0, 0.3, -1.0, 0.3, -1.0]));
        let w = tape.constant(t(&[2], &[0.7, -2.0]));
        let a = learn_adjacency(v, w).unwrap().value();
        assert!(a.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn singleton_adjacency() {
        let tape = Tape::new();
        let a = learn_adjacency(tape.constant(t(&[1, 2], &[4.0, 5.0])), tape.constant(t(&[2], &[1.0, 1.0])))
            .unwrap()
            .value();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn two_node_adjacency_by_hand() {
        let tape = Tape::new();
        let a = learn_adjacency(tape.constant(t(&[2, 1], &[0.0, 10.0])), tape.constant(t(&[1], &[1.0])))
            .unwrap()
            .value();
        // softmax([0, 10]) = [1/(1+e^10), e^10/(1+e^10)]
        let small = 1.0 / (1.0 + 10f64.exp());
        assert!((a.data()[0] - small).abs() < 1e-15);
        assert!((a.data()[0] - 4.54e-5).abs() < 1e-7);
        assert!((a.data()[1] - (1.0 - small)).abs() < 1e-15);
        assert!((a.data()[2] - (1.0 - small)).abs() < 1e-15);
    }

    #[test]
    fn loss_closed_forms() {
        let tape = Tape::new();
        let v = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let a = tape.constant(Tensor::full(&[2, 2], 0.5));
        let l = graph_learning_loss(a, v, 1.0, 0.4).unwrap().item();
        assert!((l - (0.5f64.exp() + 0.4)).abs() < 1e-12);
        let zero = tape.zeros(&[2, 2]);
        assert_eq!(graph_learning_loss(zero, v, 1.0, 0.0).unwrap().item(), 1.0);
    }

    #[test]
    fn relation_features_by_hand() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 5.0).unwrap(), BBox::new(20.0, 10.0, 10.0, 10.0).unwrap()];
        let f = relation_features::<f64>(&boxes, &[4, 8]).unwrap();
        assert_eq!(&f.data()[6..12], &[4.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(&f.data()[..6], &[0.0, 0.0, 2.0, 1.0, 2.0, 1.0]);
        assert!(relation_features::<f64>(&boxes, &[4, 0]).is_err());
        let bad = BBox { x: 0.0, y: 0.0, w: 1.0, h: 0.0 };
        assert!(relation_features::<f64>(&[bad], &[1]).is_err());
    }

    #[test]
    fn relation_embedding_basis() {
        let tape = Tape::new();
        let mut e1 = [0.0; 6];
        e1[0] = 1.0;
        let feats = tape.constant(t(&[1, 1, 6], &e1));
        let w: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let alpha = init_relation_embedding(feats, tape.constant(t(&[3, 6], &w))).unwrap().value();
        assert_eq!(alpha.data(), &[0.0, 6.0, 12.0]);
    }

    #[test]
    fn triplet_zero_cases() {
        let tape = Tape::new();
        let v = tape.zeros(&[2, 3]);
        let alpha = tape.zeros(&[2, 2, 3]);
        let w = tape.zeros(&[3, 3]);
        let h = triplet_hidden(v, alpha, w, w, tape.zeros(&[3])).unwrap().value();
        assert!(h.data().iter().all(|&x| x == 0.0));
        let b = tape.constant(Tensor::full(&[3], -1.0));
        let h = triplet_hidden(v, alpha, w, w, b).unwrap().value();
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn node_update_identity_and_constant() {
        let tape = Tape::new();
        let h_vals: Vec<f64> = (0..2 * 2 * 2).map(|i| i as f64 * 0.5 - 1.0).collect();
        let h = tape.constant(t(&[2, 2, 2], &h_vals));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = node_update(eye, h, eye).unwrap().value();
        // self-loop rows h_00 = [-1, -0.5], h_11 = [2, 2.5]
        assert_eq!(v.data(), &[0.0, 0.0, 2.0, 2.5]);
        let constant = tape.constant(t(&[2, 2, 2], &[0.3, 0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.7]));
        let a = tape.constant(t(&[2, 2], &[0.2, 0.8, 0.6, 0.4]));
        let v = node_update(a, constant, eye).unwrap().value();
        for (x, e) in v.data().iter().zip([0.3, 0.7, 0.3, 0.7]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn relation_update_cases() {
        let tape = Tape::new();
        let h = tape.constant(t(&[2, 2, 2], &[0.5, 0.0, 2.0, 3.0, 0.0, 0.0, 1.25, 7.0]));
        let zero = relation_update(h, tape.zeros(&[2, 2])).unwrap().value();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(relation_update(h, eye).unwrap().value(), h.value());
    }

    #[test]
    fn uniform_ablation_has_zero_loss() {
        let cfg = GraphConfig {
            d_model: 4,
            layers: 1,
            eta: 1.0,
            gamma: 0.4,
            relearn: false,
            learn_adjacency: false,
        };
        let mut store = ParamStore::<f64>::new();
        init_graph(&mut store, &cfg, &mut rand::rngs::mock::StepRng::new(1, 1));
        let tape = Tape::new();
        let boxes = [BBox::new(0.0, 0.0, 4.0, 2.0).unwrap(), BBox::new(0.0, 5.0, 4.0, 2.0).unwrap()];
        let feats = relation_features(&boxes, &[2, 3]).unwrap();
        let x0 = tape.constant(t(&[2, 4], &[0.1, 0.2, 0.3, 0.4, -0.1, 0.0, 0.5, 1.0]));
        let out = graph_forward(&tape, &store, &cfg, x0, &feats).unwrap();
        assert_eq!(out.loss.item(), 0.0);
        assert!(out.adjacency.value().data().iter().all(|&x| x == 0.5));
    }
}
