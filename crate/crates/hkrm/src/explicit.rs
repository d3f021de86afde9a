//! The explicit knowledge path.
//!
//! Region-to-region edges are predicted by a stacked MLP over pairwise L1
//! feature differences, supervised toward prior-graph lookups of the
//! regions' ground-truth classes, and used (after clamping and row
//! normalization) to propagate features: `f' = Ê · f · W_e`.
//!
//! Every forward op returns the cache its backward needs; the branch-level
//! backward chains gradients through the propagation, the normalization,
//! the edge MLP, and the L1 difference back onto the input features.

use crate::error::{Error, Result};
use crate::graphs::PriorGraph;
use crate::matrix::DenseMatrix;
use crate::mlp::{Activation, MlpCache, MlpGrads, MlpStack};
use crate::optim::Sgd;
use serde::{Deserialize, Serialize};

/// Denominator guard for row normalization.
pub const ROW_NORM_EPS: f64 = 1e-8;

/// Features, boxes, labels and foreground scores for one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionBatch {
    /// N_r × D visual features.
    pub features: DenseMatrix,
    /// Ground-truth class per region (training only); class 0 is the
    /// background reserve.
    pub gt_classes: Vec<usize>,
    /// (x, y, w, h) per region, positive w and h.
    pub boxes: Vec<[f64; 4]>,
    /// Foreground confidence per region, in [0, 1].
    pub fg_prob: Vec<f64>,
}

impl RegionBatch {
    pub fn num_regions(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplicitConfig {
    /// Output widths of the edge predictor layers; the last must be 1.
    pub mlp_dims: Vec<usize>,
    /// Width E of the propagated features.
    pub embed_dim: usize,
    pub final_activation: Activation,
    /// Scale the edge loss (and its gradient) by 1/N_r².
    pub edge_loss_normalize: bool,
}

impl Default for ExplicitConfig {
    fn default() -> Self {
        ExplicitConfig {
            mlp_dims: vec![256, 128, 64, 1],
            embed_dim: 256,
            final_activation: Activation::Identity,
            edge_loss_normalize: false,
        }
    }
}

impl ExplicitConfig {
    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        if self.mlp_dims.last() != Some(&1) {
            return Err(Error::config(
                format!("{key_prefix}.mlp_dims"),
                "last layer width must be 1",
            ));
        }
        if self.mlp_dims.iter().any(|&d| d == 0) {
            return Err(Error::config(
                format!("{key_prefix}.mlp_dims"),
                "layer widths must be positive",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config(
                format!("{key_prefix}.embed_dim"),
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// All-pairs L1 differences, flattened to an (N·N) × D matrix; row `i·N+j`
/// holds `|f_i − f_j|`.
#[derive(Debug, Clone)]
pub struct PairwiseL1 {
    pub n: usize,
    pub dim: usize,
    pub data: DenseMatrix,
}

impl PairwiseL1 {
    #[inline]
    pub fn at(&self, i: usize, j: usize, d: usize) -> f64 {
        self.data.at(i * self.n + j, d)
    }
}

pub fn pairwise_l1(f: &DenseMatrix) -> PairwiseL1 {
    let n = f.rows();
    let dim = f.cols();
    let mut data = DenseMatrix::zeros(n * n, dim);
    for i in 0..n {
        let fi = f.row(i);
        for j in 0..n {
            let fj = f.row(j);
            let row = data.row_mut(i * n + j);
            for d in 0..dim {
                row[d] = (fi[d] - fj[d]).abs();
            }
        }
    }
    PairwiseL1 { n, dim, data }
}

/// Folds a gradient over the pairwise differences back onto the features:
/// `d/df_i |f_i − f_j| = sign(f_i − f_j)` elementwise, with sign(0) = 0.
pub fn pairwise_l1_backward(d_pairs: &DenseMatrix, f: &DenseMatrix) -> DenseMatrix {
    let n = f.rows();
    let dim = f.cols();
    assert_eq!(d_pairs.rows(), n * n);
    assert_eq!(d_pairs.cols(), dim);
    let mut d_f = DenseMatrix::zeros(n, dim);
    for i in 0..n {
        let fi = f.row(i);
        for j in 0..n {
            let fj = f.row(j);
            let g_ij = d_pairs.row(i * n + j);
            let g_ji = d_pairs.row(j * n + i);
            let out = d_f.row_mut(i);
            for d in 0..dim {
                let s = (fi[d] - fj[d]).signum();
                let s = if fi[d] == fj[d] { 0.0 } else { s };
                out[d] += (g_ij[d] + g_ji[d]) * s;
            }
        }
    }
    d_f
}

/// Forward state of one edge prediction.
pub struct EdgeForward {
    /// Raw ê, N×N. Exactly symmetric because |·| is.
    pub raw: DenseMatrix,
    pub pairs: PairwiseL1,
    pub mlp_cache: MlpCache,
}

/// `ê_ij = predictor(|f_i − f_j|)` for every region pair.
pub fn predict_edges(f: &DenseMatrix, predictor: &MlpStack) -> Result<EdgeForward> {
    if predictor.input_dim() != f.cols() {
        return Err(Error::shape(
            "predict_edges",
            format!("predictor input dim {}", predictor.input_dim()),
            format!("feature dim {}", f.cols()),
        ));
    }
    if predictor.output_dim() != 1 {
        return Err(Error::shape("predict_edges", "predictor output dim 1", predictor.output_dim()));
    }
    let n = f.rows();
    let pairs = pairwise_l1(f);
    let (out, mlp_cache) = predictor.forward(&pairs.data)?;
    let raw = DenseMatrix::from_fn(n, n, |i, j| out.at(i * n + j, 0));
    Ok(EdgeForward {
        raw,
        pairs,
        mlp_cache,
    })
}

/// Supervision targets: `ẽ_ij = prior[c_i][c_j]` for ground-truth classes.
pub fn target_edges(gt_classes: &[usize], prior: &PriorGraph) -> Result<DenseMatrix> {
    let c = prior.num_classes();
    if let Some(&bad) = gt_classes.iter().find(|&&g| g >= c) {
        return Err(Error::Domain(format!(
            "ground-truth class {bad} out of range for a {c}-class prior graph"
        )));
    }
    let n = gt_classes.len();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        prior.edge(gt_classes[i], gt_classes[j])
    }))
}

/// Squared-error edge loss over all pairs:
/// `L = Σ_i Σ_j ½·(ê_ij − ẽ_ij)²`, gradient `ê − ẽ`.
///
/// `mask` restricts supervision to regions with an assigned class: a pair
/// contributes only when both endpoints are masked in. `normalize` divides
/// by N_r².
pub fn edge_loss(
    predicted: &DenseMatrix,
    target: &DenseMatrix,
    mask: Option<&[bool]>,
    normalize: bool,
) -> Result<(f64, DenseMatrix)> {
    if (predicted.rows(), predicted.cols()) != (target.rows(), target.cols()) {
        return Err(Error::shape(
            "edge_loss",
            format!("{}x{}", target.rows(), target.cols()),
            format!("{}x{}", predicted.rows(), predicted.cols()),
        ));
    }
    let n = predicted.rows();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape("edge_loss mask", n, m.len()));
        }
    }
    let scale = if normalize { 1.0 / (n * n) as f64 } else { 1.0 };
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let live = mask.map_or(true, |m| m[i] && m[j]);
            if !live {
                continue;
            }
            let d = predicted.at(i, j) - target.at(i, j);
            loss += 0.5 * d * d;
            *grad.at_mut(i, j) = d * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Row-normalized nonnegative adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    /// N×N; rows sum to 1 where the clamped row had mass ≥ eps, to below 1
    /// for near-empty rows, and stay exactly 0 for rows with no mass.
    pub weights: DenseMatrix,
}

/// Cache for `normalize_rows_backward`.
pub struct NormCache {
    clamped: DenseMatrix,
    denoms: Vec<f64>,
    /// True where the denominator was the row sum itself (and therefore
    /// varies with the entries); false where the eps guard took over.
    sum_active: Vec<bool>,
}

/// Clamps negatives to zero, then divides each row by `max(row_sum, eps)`.
/// Rows with no positive mass stay zero instead of turning into NaN.
pub fn normalize_rows(raw: &DenseMatrix, eps: f64) -> (Adjacency, NormCache) {
    let n = raw.rows();
    let clamped = raw.map(|x| if x > 0.0 { x } else { 0.0 });
    let mut weights = DenseMatrix::zeros(n, raw.cols());
    let mut denoms = vec![0.0; n];
    let mut sum_active = vec![false; n];
    for i in 0..n {
        let s: f64 = clamped.row(i).iter().sum();
        let denom = s.max(eps);
        denoms[i] = denom;
        sum_active[i] = s > eps;
        if denom > 0.0 {
            for (o, &c) in weights.row_mut(i).iter_mut().zip(clamped.row(i)) {
                *o = c / denom;
            }
        }
    }
    (
        Adjacency { weights },
        NormCache {
            clamped,
            denoms,
            sum_active,
        },
    )
}

/// Gradient of the normalization w.r.t. the raw edges.
pub fn normalize_rows_backward(d_adj: &DenseMatrix, raw: &DenseMatrix, cache: &NormCache) -> DenseMatrix {
    let n = raw.rows();
    let m = raw.cols();
    let mut d_raw = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let denom = cache.denoms[i];
        if denom == 0.0 {
            continue;
        }
        let g = d_adj.row(i);
        let c = cache.clamped.row(i);
        let correction = if cache.sum_active[i] {
            // d/dc_k [c_j / s] has the shared −⟨g, c⟩/s² term.
            let dot: f64 = g.iter().zip(c).map(|(&a, &b)| a * b).sum();
            dot / (denom * denom)
        } else {
            0.0
        };
        let out = d_raw.row_mut(i);
        for k in 0..m {
            if raw.at(i, k) > 0.0 {
                out[k] = g[k] / denom - correction;
            }
        }
    }
    d_raw
}

pub struct PropagateCache {
    /// f · W, reused as the right factor of d_adj.
    fw: DenseMatrix,
    /// adj · f, reused as the left factor of d_w.
    af: DenseMatrix,
}

/// `f' = adj · f · W`, with the intermediates cached for the backward pass.
pub fn propagate(
    adj: &Adjacency,
    f: &DenseMatrix,
    w: &DenseMatrix,
) -> Result<(DenseMatrix, PropagateCache)> {
    if adj.weights.cols() != f.rows() {
        return Err(Error::shape(
            "propagate",
            format!("adjacency cols = {} regions", f.rows()),
            adj.weights.cols(),
        ));
    }
    if f.cols() != w.rows() {
        return Err(Error::shape(
            "propagate",
            format!("W rows = feature dim {}", f.cols()),
            w.rows(),
        ));
    }
    let fw = f.matmul(w);
    let af = adj.weights.matmul(f);
    let out = adj.weights.matmul(&fw);
    Ok((out, PropagateCache { fw, af }))
}

/// Gradients of `f' = adj·f·W` w.r.t. the adjacency, the features and the
/// transform.
pub fn propagate_backward(
    d_out: &DenseMatrix,
    adj: &Adjacency,
    w: &DenseMatrix,
    cache: &PropagateCache,
) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
    let d_adj = d_out.matmul_nt(&cache.fw);
    let d_w = cache.af.matmul_tn(d_out);
    let d_f = adj.weights.matmul_tn(&d_out.matmul_nt(w));
    (d_adj, d_f, d_w)
}

/// One explicit branch: edge predictor, feature transform, and the prior
/// graph its edges are supervised against.
#[derive(Debug, Clone)]
pub struct ExplicitBranch {
    pub predictor: MlpStack,
    /// W_e, D×E.
    pub embed: DenseMatrix,
    pub prior: PriorGraph,
    pub cfg: ExplicitConfig,
}

pub struct ExplicitForward {
    pub raw: DenseMatrix,
    pub adjacency: Adjacency,
    /// N×E evolved features.
    pub output: DenseMatrix,
    pairs_f: DenseMatrix,
    edge: EdgeForward,
    norm: NormCache,
    prop: PropagateCache,
}

pub struct ExplicitGrads {
    pub predictor: MlpGrads,
    pub d_embed: DenseMatrix,
    pub d_features: DenseMatrix,
}

impl ExplicitBranch {
    pub fn new(feature_dim: usize, cfg: ExplicitConfig, prior: PriorGraph, seed: u64) -> Self {
        let predictor = MlpStack::new(feature_dim, &cfg.mlp_dims, cfg.final_activation, seed);
        let mut rng = crate::rng::seeded_rng(seed, "explicit/embed");
        let limit = (6.0 / feature_dim as f64).sqrt();
        let embed = DenseMatrix::from_fn(feature_dim, cfg.embed_dim, |_, _| {
            rand::Rng::gen_range(&mut rng, -limit..limit)
        });
        ExplicitBranch {
            predictor,
            embed,
            prior,
            cfg,
        }
    }

    pub fn forward(&self, features: &DenseMatrix) -> Result<ExplicitForward> {
        let edge = predict_edges(features, &self.predictor)?;
        let (adjacency, norm) = normalize_rows(&edge.raw, ROW_NORM_EPS);
        let (output, prop) = propagate(&adjacency, features, &self.embed)?;
        Ok(ExplicitForward {
            raw: edge.raw.clone(),
            adjacency,
            output,
            pairs_f: features.clone(),
            edge,
            norm,
            prop,
        })
    }

    /// Chains `d_output` (gradient on the evolved features) and an optional
    /// extra gradient on the raw edges (the supervision term) back to every
    /// parameter and to the input features.
    pub fn backward(
        &self,
        fwd: &ExplicitForward,
        d_output: &DenseMatrix,
        d_raw_extra: Option<&DenseMatrix>,
    ) -> Result<ExplicitGrads> {
        let (d_adj, d_f_prop, d_embed) =
            propagate_backward(d_output, &fwd.adjacency, &self.embed, &fwd.prop);
        let mut d_raw = normalize_rows_backward(&d_adj, &fwd.raw, &fwd.norm);
        if let Some(extra) = d_raw_extra {
            d_raw.add_assign(extra);
        }
        let n = fwd.raw.rows();
        let upstream = DenseMatrix::from_fn(n * n, 1, |p, _| d_raw.at(p / n, p % n));
        let (predictor, d_pairs) = self.predictor.backward(&fwd.edge.mlp_cache, &upstream)?;
        let d_f_pairs = pairwise_l1_backward(&d_pairs, &fwd.pairs_f);
        let mut d_features = d_f_prop;
        d_features.add_assign(&d_f_pairs);
        Ok(ExplicitGrads {
            predictor,
            d_embed,
            d_features,
        })
    }

    pub fn apply_sgd(&mut self, grads: &ExplicitGrads, opt: &mut Sgd, prefix: &str) -> Result<()> {
        self.predictor
            .apply_sgd(&grads.predictor, opt, &format!("{prefix}.predictor"))?;
        opt.step(
            &format!("{prefix}.embed"),
            self.embed.data_mut(),
            grads.d_embed.data(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::GraphKind;
    use crate::mlp::Layer;
    use crate::rng::seeded_rng;
    use crate::testutil::{fd_loss_on_slice, rel_err, sum_matrix};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> DenseMatrix {
        let mut rng = seeded_rng(seed, "explicit-test");
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
    }

    fn small_prior(c: usize, seed: u64) -> PriorGraph {
        let mut rng = seeded_rng(seed, "prior");
        let mut edges = DenseMatrix::zeros(c, c);
        for i in 0..c {
            for j in (i + 1)..c {
                let v = rng.gen_range(0.0..1.0);
                *edges.at_mut(i, j) = v;
                *edges.at_mut(j, i) = v;
            }
        }
        PriorGraph {
            kind: GraphKind::Attribute,
            class_names: (0..c).map(|i| format!("c{i}")).collect(),
            edges,
        }
    }

    #[test]
    fn pairwise_l1_zero_for_equal_rows() {
        let f = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![1.0, -2.0]]);
        let p = pairwise_l1(&f);
        for d in 0..2 {
            assert_eq!(p.at(0, 1, d), 0.0);
            assert_eq!(p.at(0, 0, d), 0.0);
        }
    }

    #[test]
    fn pairwise_l1_is_symmetric() {
        let f = random_matrix(5, 3, 1, -2.0, 2.0);
        let p = pairwise_l1(&f);
        for i in 0..5 {
            for j in 0..5 {
                for d in 0..3 {
                    assert_eq!(p.at(i, j, d), p.at(j, i, d));
                }
            }
        }
    }

    #[test]
    fn pairwise_l1_matches_scalar_loop() {
        let f = DenseMatrix::from_rows(&[vec![1.0, 4.0], vec![-2.0, 0.5], vec![3.0, 3.0]]);
        let p = pairwise_l1(&f);
        for i in 0..3 {
            for j in 0..3 {
                for d in 0..2 {
                    let expect = (f.at(i, d) - f.at(j, d)).abs();
                    assert_eq!(p.at(i, j, d), expect);
                }
            }
        }
    }

    #[test]
    fn zero_weight_predictor_gives_constant_edges() {
        // With all-zero weights the output is the bias composition through
        // the activations, independent of the input.
        let predictor = MlpStack::from_layers(vec![
            Layer {
                weight: DenseMatrix::zeros(3, 4),
                bias: vec![0.5, -1.0, 0.25, 2.0],
                activation: Activation::Relu,
            },
            Layer {
                weight: DenseMatrix::zeros(4, 1),
                bias: vec![-0.75],
                activation: Activation::Identity,
            },
        ]);
        let f = random_matrix(4, 3, 2, -1.0, 1.0);
        let edges = predict_edges(&f, &predictor).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(edges.raw.at(i, j), -0.75);
            }
        }
    }

    #[test]
    fn predicted_edges_are_exactly_symmetric() {
        let predictor = MlpStack::new(6, &[8, 1], Activation::Identity, 3);
        let f = random_matrix(7, 6, 4, -1.5, 1.5);
        let edges = predict_edges(&f, &predictor).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                // Bitwise equality, not approximate.
                assert_eq!(
                    edges.raw.at(i, j).to_bits(),
                    edges.raw.at(j, i).to_bits(),
                    "asymmetry at {i},{j}"
                );
            }
        }
    }

    #[test]
    fn predict_edges_matches_per_pair_oracle() {
        let predictor = MlpStack::new(3, &[5, 1], Activation::Identity, 5);
        let f = random_matrix(4, 3, 6, -1.0, 1.0);
        let edges = predict_edges(&f, &predictor).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let diff = DenseMatrix::from_fn(1, 3, |_, d| (f.at(i, d) - f.at(j, d)).abs());
                let (out, _) = predictor.forward(&diff).unwrap();
                assert_eq!(edges.raw.at(i, j), out.at(0, 0));
            }
        }
    }

    #[test]
    fn predict_edges_rejects_dim_mismatch() {
        let predictor = MlpStack::new(5, &[1], Activation::Identity, 0);
        let f = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            predict_edges(&f, &predictor),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn target_edges_same_class_attribute_prior_is_zero() {
        let prior = small_prior(4, 7); // zero diagonal by construction
        let targets = target_edges(&[2, 2, 2], &prior).unwrap();
        assert!(targets.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn target_edges_two_regions_is_a_lookup() {
        let prior = small_prior(3, 8);
        let t = target_edges(&[0, 2], &prior).unwrap();
        assert_eq!(t.at(0, 0), prior.edge(0, 0));
        assert_eq!(t.at(0, 1), prior.edge(0, 2));
        assert_eq!(t.at(1, 0), prior.edge(2, 0));
        assert_eq!(t.at(1, 1), prior.edge(2, 2));
    }

    #[test]
    fn target_edges_fixture_matches_lookup_oracle() {
        let prior = small_prior(5, 9);
        let gt = [3, 1, 4, 1, 0, 2];
        let t = target_edges(&gt, &prior).unwrap();
        for (i, &ci) in gt.iter().enumerate() {
            for (j, &cj) in gt.iter().enumerate() {
                assert_eq!(t.at(i, j), prior.edge(ci, cj));
            }
        }
    }

    #[test]
    fn target_edges_rejects_out_of_range_class() {
        let prior = small_prior(3, 10);
        assert!(target_edges(&[0, 3], &prior).is_err());
    }

    #[test]
    fn edge_loss_zero_at_target() {
        let t = random_matrix(4, 4, 11, 0.0, 1.0);
        let (loss, grad) = edge_loss(&t, &t, None, false).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn edge_loss_one_by_one_hand_value() {
        let e = DenseMatrix::from_vec(1, 1, vec![0.5]);
        let t = DenseMatrix::from_vec(1, 1, vec![0.0]);
        let (loss, grad) = edge_loss(&e, &t, None, false).unwrap();
        assert_eq!(loss, 0.125);
        assert_eq!(grad.at(0, 0), 0.5);
    }

    #[test]
    fn edge_loss_gradient_matches_finite_differences() {
        let mut e = random_matrix(8, 8, 12, -1.0, 1.0);
        let t = random_matrix(8, 8, 13, 0.0, 1.0);
        let (_, grad) = edge_loss(&e, &t, None, false).unwrap();
        for p in (0..64).step_by(7) {
            let numeric = fd_loss_on_slice(
                &mut e,
                p,
                |m| edge_loss(m, &t, None, false).unwrap().0,
                1e-6,
            );
            assert!(rel_err(grad.data()[p], numeric) < 1e-6);
        }
    }

    #[test]
    fn edge_loss_mask_zeroes_background_pairs() {
        let e = random_matrix(3, 3, 14, -1.0, 1.0);
        let t = DenseMatrix::zeros(3, 3);
        let mask = [true, false, true];
        let (loss, grad) = edge_loss(&e, &t, Some(&mask), false).unwrap();
        let mut expect = 0.0;
        for i in [0usize, 2] {
            for j in [0usize, 2] {
                expect += 0.5 * e.at(i, j) * e.at(i, j);
            }
        }
        assert!((loss - expect).abs() < 1e-12);
        for j in 0..3 {
            assert_eq!(grad.at(1, j), 0.0);
            assert_eq!(grad.at(j, 1), 0.0);
        }
    }

    #[test]
    fn normalize_rows_divides_by_row_sum() {
        let raw = DenseMatrix::from_rows(&[vec![1.0, 1.0, 2.0]]);
        let (adj, _) = normalize_rows(&raw, ROW_NORM_EPS);
        let row = adj.weights.row(0);
        assert!((row[0] - 0.25).abs() < 1e-8);
        assert!((row[1] - 0.25).abs() < 1e-8);
        assert!((row[2] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn normalize_rows_all_negative_row_stays_zero() {
        let raw = DenseMatrix::from_rows(&[vec![-1.0, -0.5], vec![1.0, 1.0]]);
        let (adj, _) = normalize_rows(&raw, ROW_NORM_EPS);
        assert_eq!(adj.weights.row(0), &[0.0, 0.0]);
        assert_eq!(adj.weights.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_rows_sums_where_mass_exists() {
        let raw = random_matrix(10, 10, 15, -1.0, 1.0);
        let (adj, _) = normalize_rows(&raw, ROW_NORM_EPS);
        for i in 0..10 {
            let has_mass = raw.row(i).iter().any(|&x| x > 0.0);
            let s: f64 = adj.weights.row(i).iter().sum();
            if has_mass {
                assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
            } else {
                assert_eq!(s, 0.0);
            }
            assert!(adj.weights.row(i).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn propagate_identity_adjacency_is_plain_transform() {
        let f = random_matrix(4, 3, 16, -1.0, 1.0);
        let w = random_matrix(3, 2, 17, -1.0, 1.0);
        let adj = Adjacency {
            weights: DenseMatrix::identity(4),
        };
        let (out, _) = propagate(&adj, &f, &w).unwrap();
        assert_eq!(out, f.matmul(&w));
    }

    #[test]
    fn propagate_uniform_adjacency_averages_everything() {
        let n = 5;
        let f = random_matrix(n, 3, 18, -1.0, 1.0);
        let w = random_matrix(3, 2, 19, -1.0, 1.0);
        let adj = Adjacency {
            weights: DenseMatrix::from_fn(n, n, |_, _| 1.0 / n as f64),
        };
        let (out, _) = propagate(&adj, &f, &w).unwrap();
        for i in 1..n {
            for c in 0..2 {
                assert!((out.at(i, c) - out.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn propagate_is_linear_in_features() {
        let n = 4;
        let f1 = random_matrix(n, 3, 20, -1.0, 1.0);
        let f2 = random_matrix(n, 3, 21, -1.0, 1.0);
        let w = random_matrix(3, 2, 22, -1.0, 1.0);
        let (adj, _) = normalize_rows(&random_matrix(n, n, 23, 0.1, 1.0), ROW_NORM_EPS);
        let (a, b) = (0.7, -1.3);
        let combo = f1.scale(a).add(&f2.scale(b));
        let (lhs, _) = propagate(&adj, &combo, &w).unwrap();
        let (o1, _) = propagate(&adj, &f1, &w).unwrap();
        let (o2, _) = propagate(&adj, &f2, &w).unwrap();
        let rhs = o1.scale(a).add(&o2.scale(b));
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    fn branch_fixture(n: usize, d: usize, e: usize, seed: u64) -> (ExplicitBranch, DenseMatrix, Vec<usize>) {
        let cfg = ExplicitConfig {
            mlp_dims: vec![6, 1],
            embed_dim: e,
            final_activation: Activation::Identity,
            edge_loss_normalize: false,
        };
        let prior = small_prior(4, seed ^ 0xabc);
        let mut branch = ExplicitBranch::new(d, cfg, prior, seed);
        // Freshly initialized biases are zero, which parks the diagonal
        // pairs (zero input) exactly on the ReLU kink; randomize them so
        // the probe point is generic.
        let mut rng = seeded_rng(seed, "gt");
        for layer in branch.predictor.layers_mut() {
            for b in &mut layer.bias {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        let f = random_matrix(n, d, seed ^ 0x123, -1.0, 1.0);
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        (branch, f, gt)
    }

    /// Distance of the forward state to the nearest nondifferentiable point:
    /// ReLU pre-activations, the edge clamp at zero, and the off-diagonal
    /// |f_i − f_j| kinks. Finite differences are only trustworthy when the
    /// probe point keeps a margin much larger than the step.
    fn kink_margin(branch: &ExplicitBranch, f: &DenseMatrix) -> f64 {
        let mut margin = f64::INFINITY;
        let pairs = pairwise_l1(f);
        let mut a = pairs.data.clone();
        for layer in branch.predictor.layers() {
            let mut z = a.matmul(&layer.weight);
            z.add_row_bias(&layer.bias);
            if layer.activation == Activation::Relu {
                for &v in z.data() {
                    margin = margin.min(v.abs());
                }
            }
            a = z.map(|x| layer.activation.apply(x));
        }
        let edges = predict_edges(f, &branch.predictor).unwrap();
        for &v in edges.raw.data() {
            margin = margin.min(v.abs());
        }
        for i in 0..f.rows() {
            for j in 0..f.rows() {
                if i == j {
                    continue;
                }
                for d in 0..f.cols() {
                    margin = margin.min((f.at(i, d) - f.at(j, d)).abs());
                }
            }
        }
        margin
    }

    /// First fixture whose forward state keeps every kink at distance
    /// > 1e-3, so the 1e-5 central differences stay one-sided.
    fn kink_free_fixture(n: usize, d: usize, e: usize) -> (ExplicitBranch, DenseMatrix, Vec<usize>) {
        for seed in 0..200 {
            let (branch, f, gt) = branch_fixture(n, d, e, 31 + seed);
            if kink_margin(&branch, &f) > 1e-3 {
                return (branch, f, gt);
            }
        }
        panic!("no kink-free probe point found");
    }

    /// Scalar loss used by the end-to-end check:
    /// edge loss against the prior targets plus sum of evolved features.
    fn branch_loss(branch: &ExplicitBranch, f: &DenseMatrix, gt: &[usize]) -> f64 {
        let fwd = branch.forward(f).unwrap();
        let targets = target_edges(gt, &branch.prior).unwrap();
        let (el, _) = edge_loss(&fwd.raw, &targets, None, false).unwrap();
        el + sum_matrix(&fwd.output)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (mut branch, mut f, gt) = kink_free_fixture(5, 4, 3);
        let fwd = branch.forward(&f).unwrap();
        let targets = target_edges(&gt, &branch.prior).unwrap();
        let (_, d_raw) = edge_loss(&fwd.raw, &targets, None, false).unwrap();
        let ones = DenseMatrix::from_fn(fwd.output.rows(), fwd.output.cols(), |_, _| 1.0);
        let grads = branch.backward(&fwd, &ones, Some(&d_raw)).unwrap();

        // Predictor parameters.
        let f_ref = f.clone();
        for l in 0..grads.predictor.layers.len() {
            let lw = grads.predictor.layers[l].d_weight.clone();
            for p in 0..lw.data().len() {
                let orig = branch.predictor.layers()[l].weight.data()[p];
                branch.predictor.layers_mut()[l].weight.data_mut()[p] = orig + 1e-5;
                let plus = branch_loss(&branch, &f_ref, &gt);
                branch.predictor.layers_mut()[l].weight.data_mut()[p] = orig - 1e-5;
                let minus = branch_loss(&branch, &f_ref, &gt);
                branch.predictor.layers_mut()[l].weight.data_mut()[p] = orig;
                let numeric = (plus - minus) / 2e-5;
                assert!(
                    rel_err(lw.data()[p], numeric) < 1e-4,
                    "layer {l} weight {p}: {} vs {numeric}",
                    lw.data()[p]
                );
            }
            let lb = grads.predictor.layers[l].d_bias.clone();
            for p in 0..lb.len() {
                let orig = branch.predictor.layers()[l].bias[p];
                branch.predictor.layers_mut()[l].bias[p] = orig + 1e-5;
                let plus = branch_loss(&branch, &f_ref, &gt);
                branch.predictor.layers_mut()[l].bias[p] = orig - 1e-5;
                let minus = branch_loss(&branch, &f_ref, &gt);
                branch.predictor.layers_mut()[l].bias[p] = orig;
                let numeric = (plus - minus) / 2e-5;
                assert!(rel_err(lb[p], numeric) < 1e-4, "bias {p}");
            }
        }

        // Embed matrix.
        for p in 0..branch.embed.data().len() {
            let orig = branch.embed.data()[p];
            branch.embed.data_mut()[p] = orig + 1e-5;
            let plus = branch_loss(&branch, &f_ref, &gt);
            branch.embed.data_mut()[p] = orig - 1e-5;
            let minus = branch_loss(&branch, &f_ref, &gt);
            branch.embed.data_mut()[p] = orig;
            let numeric = (plus - minus) / 2e-5;
            assert!(rel_err(grads.d_embed.data()[p], numeric) < 1e-4, "embed {p}");
        }

        // Input features (both the pairwise and the propagation paths).
        for p in 0..f.data().len() {
            let numeric = fd_loss_on_slice(&mut f, p, |m| branch_loss(&branch, m, &gt), 1e-5);
            assert!(
                rel_err(grads.d_features.data()[p], numeric) < 1e-4,
                "feature {p}: {} vs {numeric}",
                grads.d_features.data()[p]
            );
        }
    }

    #[test]
    fn permuting_regions_permutes_edges_and_outputs() {
        let (branch, f, _) = branch_fixture(6, 4, 3, 37);
        let fwd = branch.forward(&f).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let f_perm = DenseMatrix::from_fn(6, 4, |i, d| f.at(perm[i], d));
        let fwd_perm = branch.forward(&f_perm).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                // Raw edges permute exactly (same per-pair arithmetic).
                assert_eq!(
                    fwd_perm.raw.at(i, j).to_bits(),
                    fwd.raw.at(perm[i], perm[j]).to_bits()
                );
            }
        }
        for i in 0..6 {
            for c in 0..3 {
                assert!((fwd_perm.output.at(i, c) - fwd.output.at(perm[i], c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_loss_fixed_point_leaves_edge_parameters_unchanged() {
        // A constant-bias predictor reproduces a constant target exactly;
        // the edge loss is then 0 and one SGD step (zero weight decay) must
        // not move the predictor.
        let n = 4;
        let target_value = 0.6;
        let predictor = MlpStack::from_layers(vec![Layer {
            weight: DenseMatrix::zeros(3, 1),
            bias: vec![target_value],
            activation: Activation::Identity,
        }]);
        let f = random_matrix(n, 3, 41, -1.0, 1.0);
        let edges = predict_edges(&f, &predictor).unwrap();
        let targets = DenseMatrix::from_fn(n, n, |_, _| target_value);
        let (loss, d_raw) = edge_loss(&edges.raw, &targets, None, false).unwrap();
        assert_eq!(loss, 0.0);

        let mut trained = predictor.clone();
        let (grads, _) = trained
            .backward(&edges.mlp_cache, &DenseMatrix::from_fn(n * n, 1, |p, _| d_raw.at(p / n, p % n)))
            .unwrap();
        let mut opt = Sgd::new(crate::optim::SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        trained.apply_sgd(&grads, &mut opt, "edge").unwrap();
        assert_eq!(
            trained.layers()[0].weight.data(),
            predictor.layers()[0].weight.data()
        );
        assert_eq!(trained.layers()[0].bias, predictor.layers()[0].bias);
    }
}
