//! The implicit knowledge path.
//!
//! M small MLPs each predict a region-to-region graph from pairwise L1
//! differences of relative geometry features `(x/w̄, y/h̄, w/w̄, h/h̄, p)`.
//! Per-graph edges are clamped at zero, averaged, an identity matrix is
//! added, and visual features are propagated over the (optionally
//! row-normalized) result: `g' = Ê^I · f · W_g`.
//!
//! There is no edge supervision here; the predictors learn only through
//! gradients arriving from the task loss.

use crate::error::{Error, Result};
use crate::explicit::{
    normalize_rows, normalize_rows_backward, pairwise_l1, pairwise_l1_backward, propagate,
    propagate_backward, Adjacency, NormCache, PropagateCache, ROW_NORM_EPS,
};
use crate::matrix::DenseMatrix;
use crate::mlp::{Activation, MlpCache, MlpGrads, MlpStack};
use crate::optim::Sgd;
use serde::{Deserialize, Serialize};

pub const GEOMETRY_DIM: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImplicitConfig {
    /// Number of independently parameterized graphs M.
    pub num_graphs: usize,
    /// Output widths of each graph's MLP; input is the 5-dim geometry
    /// difference, the last width must be 1.
    pub mlp_dims: Vec<usize>,
    /// Width E_g of the propagated features.
    pub embed_dim: usize,
    /// Row-normalize the averaged edges before propagation. Disable to
    /// propagate over the raw average-plus-identity.
    pub row_normalize: bool,
}

impl Default for ImplicitConfig {
    fn default() -> Self {
        ImplicitConfig {
            num_graphs: 10,
            mlp_dims: vec![5, 1],
            embed_dim: 256,
            row_normalize: true,
        }
    }
}

impl ImplicitConfig {
    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        if self.num_graphs == 0 {
            return Err(Error::config(
                format!("{key_prefix}.num_graphs"),
                "must be at least 1",
            ));
        }
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

/// Relative geometry features, one row `(x/w̄, y/h̄, w/w̄, h/h̄, p)` per
/// region. Scale-invariant by construction.
pub fn geometry_features(
    boxes: &[[f64; 4]],
    image_size: (f64, f64),
    fg_prob: &[f64],
) -> Result<DenseMatrix> {
    let (iw, ih) = image_size;
    if !(iw > 0.0 && ih > 0.0) {
        return Err(Error::Domain(format!(
            "image size must be positive, got {iw}x{ih}"
        )));
    }
    if boxes.len() != fg_prob.len() {
        return Err(Error::shape("geometry_features", boxes.len(), fg_prob.len()));
    }
    let mut q = DenseMatrix::zeros(boxes.len(), GEOMETRY_DIM);
    for (i, b) in boxes.iter().enumerate() {
        let row = q.row_mut(i);
        row[0] = b[0] / iw;
        row[1] = b[1] / ih;
        row[2] = b[2] / iw;
        row[3] = b[3] / ih;
        row[4] = fg_prob[i];
    }
    Ok(q)
}

/// Forward state of the multi-graph edge computation.
pub struct ImplicitEdges {
    /// Average of clamped per-graph edges plus identity (pre-normalization).
    pub combined: DenseMatrix,
    /// Per-graph raw predictions, for inspection dumps.
    pub per_graph: Vec<DenseMatrix>,
    caches: Vec<MlpCache>,
}

/// `ê^I = (1/M)·Σ_m relu(ê^(m)) + I`, with per-graph edges predicted from
/// pairwise geometry differences.
pub fn implicit_edges(q: &DenseMatrix, predictors: &[MlpStack]) -> Result<ImplicitEdges> {
    if predictors.is_empty() {
        return Err(Error::Domain("implicit module needs at least one graph".into()));
    }
    let n = q.rows();
    let pairs = pairwise_l1(q);
    let mut combined = DenseMatrix::identity(n);
    let mut per_graph = Vec::with_capacity(predictors.len());
    let mut caches = Vec::with_capacity(predictors.len());
    let inv_m = 1.0 / predictors.len() as f64;
    for p in predictors {
        if p.input_dim() != q.cols() {
            return Err(Error::shape(
                "implicit_edges",
                format!("predictor input dim {}", q.cols()),
                p.input_dim(),
            ));
        }
        let (out, cache) = p.forward(&pairs.data)?;
        let raw = DenseMatrix::from_fn(n, n, |i, j| out.at(i * n + j, 0));
        for i in 0..n {
            for j in 0..n {
                let e = raw.at(i, j);
                if e > 0.0 {
                    *combined.at_mut(i, j) += inv_m * e;
                }
            }
        }
        per_graph.push(raw);
        caches.push(cache);
    }
    Ok(ImplicitEdges {
        combined,
        per_graph,
        caches,
    })
}

/// One implicit branch: M edge predictors over geometry plus the shared
/// feature transform W_g.
#[derive(Debug, Clone)]
pub struct ImplicitBranch {
    pub predictors: Vec<MlpStack>,
    /// W_g, D×E_g.
    pub embed: DenseMatrix,
    pub cfg: ImplicitConfig,
}

pub struct ImplicitForward {
    /// N×E_g evolved features.
    pub output: DenseMatrix,
    pub edges: ImplicitEdges,
    pub adjacency: Adjacency,
    norm: Option<NormCache>,
    prop: PropagateCache,
    q: DenseMatrix,
}

pub struct ImplicitGrads {
    pub predictors: Vec<MlpGrads>,
    pub d_embed: DenseMatrix,
    pub d_features: DenseMatrix,
}

/// Starting value for the final-layer bias of every implicit predictor.
/// With a zero bias, graphs whose initial output lands below the clamp
/// receive no gradient and the whole branch can stay frozen at the
/// identity; a small positive offset keeps every graph live from step one.
pub const IMPLICIT_EDGE_BIAS_INIT: f64 = 0.25;

impl ImplicitBranch {
    pub fn new(feature_dim: usize, cfg: ImplicitConfig, seed: u64) -> Self {
        let predictors = (0..cfg.num_graphs)
            .map(|m| {
                let mut p = MlpStack::new(
                    GEOMETRY_DIM,
                    &cfg.mlp_dims,
                    Activation::Identity,
                    crate::rng::component_seed(seed, &format!("implicit/graph{m}")),
                );
                if let Some(last) = p.layers_mut().last_mut() {
                    last.bias.fill(IMPLICIT_EDGE_BIAS_INIT);
                }
                p
            })
            .collect();
        let mut rng = crate::rng::seeded_rng(seed, "implicit/embed");
        let limit = (6.0 / feature_dim as f64).sqrt();
        let embed = DenseMatrix::from_fn(feature_dim, cfg.embed_dim, |_, _| {
            rand::Rng::gen_range(&mut rng, -limit..limit)
        });
        ImplicitBranch {
            predictors,
            embed,
            cfg,
        }
    }

    /// Propagates visual features `f` over edges derived from geometry `q`.
    pub fn forward(&self, q: &DenseMatrix, f: &DenseMatrix) -> Result<ImplicitForward> {
        if q.rows() != f.rows() {
            return Err(Error::shape("propagate_implicit", f.rows(), q.rows()));
        }
        let edges = implicit_edges(q, &self.predictors)?;
        let (adjacency, norm) = if self.cfg.row_normalize {
            let (adj, cache) = normalize_rows(&edges.combined, ROW_NORM_EPS);
            (adj, Some(cache))
        } else {
            (
                Adjacency {
                    weights: edges.combined.clone(),
                },
                None,
            )
        };
        let (output, prop) = propagate(&adjacency, f, &self.embed)?;
        Ok(ImplicitForward {
            output,
            edges,
            adjacency,
            norm,
            prop,
            q: q.clone(),
        })
    }

    /// Routes `d_output` to every per-graph predictor, the transform, and
    /// the visual features. Geometry is scene data, so its gradient is
    /// folded but not returned.
    pub fn backward(&self, fwd: &ImplicitForward, d_output: &DenseMatrix) -> Result<ImplicitGrads> {
        let (d_adj, d_features, d_embed) =
            propagate_backward(d_output, &fwd.adjacency, &self.embed, &fwd.prop);
        let d_combined = match &fwd.norm {
            Some(cache) => normalize_rows_backward(&d_adj, &fwd.edges.combined, cache),
            None => d_adj,
        };
        let n = d_combined.rows();
        let inv_m = 1.0 / self.predictors.len() as f64;
        let mut predictors = Vec::with_capacity(self.predictors.len());
        for (m, p) in self.predictors.iter().enumerate() {
            // The identity summand is constant; each graph sees the average
            // weight through its own clamp mask.
            let raw = &fwd.edges.per_graph[m];
            let upstream = DenseMatrix::from_fn(n * n, 1, |pair, _| {
                let (i, j) = (pair / n, pair % n);
                if raw.at(i, j) > 0.0 {
                    inv_m * d_combined.at(i, j)
                } else {
                    0.0
                }
            });
            let (grads, _d_pairs) = p.backward(&fwd.edges.caches[m], &upstream)?;
            predictors.push(grads);
        }
        Ok(ImplicitGrads {
            predictors,
            d_embed,
            d_features,
        })
    }

    pub fn apply_sgd(&mut self, grads: &ImplicitGrads, opt: &mut Sgd, prefix: &str) -> Result<()> {
        assert_eq!(grads.predictors.len(), self.predictors.len());
        for (m, (p, g)) in self.predictors.iter_mut().zip(&grads.predictors).enumerate() {
            p.apply_sgd(g, opt, &format!("{prefix}.graph{m}"))?;
        }
        opt.step(
            &format!("{prefix}.embed"),
            self.embed.data_mut(),
            grads.d_embed.data(),
        )
    }
}

/// Gradient of the task loss w.r.t. the geometry input, for tests that
/// check the full chain. Mirrors `backward` but folds per-graph pair
/// gradients onto `q`.
pub fn implicit_geometry_grad(
    branch: &ImplicitBranch,
    fwd: &ImplicitForward,
    d_output: &DenseMatrix,
) -> Result<DenseMatrix> {
    let (d_adj, _, _) = propagate_backward(d_output, &fwd.adjacency, &branch.embed, &fwd.prop);
    let d_combined = match &fwd.norm {
        Some(cache) => normalize_rows_backward(&d_adj, &fwd.edges.combined, cache),
        None => d_adj,
    };
    let n = d_combined.rows();
    let inv_m = 1.0 / branch.predictors.len() as f64;
    let mut d_q = DenseMatrix::zeros(fwd.q.rows(), fwd.q.cols());
    for (m, p) in branch.predictors.iter().enumerate() {
        let raw = &fwd.edges.per_graph[m];
        let upstream = DenseMatrix::from_fn(n * n, 1, |pair, _| {
            let (i, j) = (pair / n, pair % n);
            if raw.at(i, j) > 0.0 {
                inv_m * d_combined.at(i, j)
            } else {
                0.0
            }
        });
        let (_, d_pairs) = p.backward(&fwd.edges.caches[m], &upstream)?;
        d_q.add_assign(&pairwise_l1_backward(&d_pairs, &fwd.q));
    }
    Ok(d_q)
}
