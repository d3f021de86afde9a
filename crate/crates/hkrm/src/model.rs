//! The composed classifier.
//!
//! Per region, the enabled branch outputs are concatenated with the raw
//! features — `[f | f'_a | f'_r | g']` — and fed to a linear classification
//! head. Disabled branches contribute nothing to the concatenation, so the
//! head width depends on the branch set. Explicit branches additionally
//! return their supervision loss against the prior graphs.

use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::explicit::{
    edge_loss, target_edges, ExplicitBranch, ExplicitConfig, ExplicitForward, ExplicitGrads,
    RegionBatch,
};
use crate::graphs::{GraphKind, PriorGraph};
use crate::implicit::{geometry_features, ImplicitBranch, ImplicitConfig, ImplicitForward, ImplicitGrads};
use crate::matrix::DenseMatrix;
use crate::mlp::MlpStack;
use crate::optim::Sgd;
use crate::rng::component_seed;
use serde::{Deserialize, Serialize};

pub const BACKGROUND_CLASS: usize = 0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Explicit branch supervised by the attribute prior.
    pub attr: Option<ExplicitConfig>,
    /// Explicit branch supervised by the relationship prior.
    pub rel: Option<ExplicitConfig>,
    /// Implicit geometry branch.
    pub implicit: Option<ImplicitConfig>,
    /// Weight of the edge-supervision losses in the total objective.
    pub lambda_edge: f64,
}

impl ModelConfig {
    pub fn head_input_dim(&self) -> usize {
        self.feature_dim
            + self.attr.as_ref().map_or(0, |c| c.embed_dim)
            + self.rel.as_ref().map_or(0, |c| c.embed_dim)
            + self.implicit.as_ref().map_or(0, |c| c.embed_dim)
    }
}

#[derive(Debug, Clone)]
pub struct LinearHead {
    /// (in_dim × num_classes).
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = crate::rng::seeded_rng(seed, "head");
        let limit = (6.0 / in_dim as f64).sqrt();
        LinearHead {
            weight: DenseMatrix::from_fn(in_dim, num_classes, |_, _| {
                rand::Rng::gen_range(&mut rng, -limit..limit)
            }),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = x.matmul(&self.weight);
        out.add_row_bias(&self.bias);
        out
    }

    pub fn backward(&self, x: &DenseMatrix, d_out: &DenseMatrix) -> (DenseMatrix, Vec<f64>, DenseMatrix) {
        let d_weight = x.matmul_tn(d_out);
        let d_bias = d_out.col_sums();
        let d_x = d_out.matmul_nt(&self.weight);
        (d_weight, d_bias, d_x)
    }
}

#[derive(Debug, Clone)]
pub struct HkrmModel {
    pub cfg: ModelConfig,
    pub attr: Option<ExplicitBranch>,
    pub rel: Option<ExplicitBranch>,
    pub implicit: Option<ImplicitBranch>,
    pub head: LinearHead,
}

/// Priors for the enabled explicit branches.
#[derive(Debug, Clone, Default)]
pub struct Priors {
    pub attribute: Option<PriorGraph>,
    pub relationship: Option<PriorGraph>,
}

pub struct ModelForward {
    pub logits: DenseMatrix,
    pub concat: DenseMatrix,
    pub attr: Option<ExplicitForward>,
    pub rel: Option<ExplicitForward>,
    pub implicit: Option<ImplicitForward>,
}

pub struct ModelGrads {
    pub head_weight: DenseMatrix,
    pub head_bias: Vec<f64>,
    pub attr: Option<ExplicitGrads>,
    pub rel: Option<ExplicitGrads>,
    pub implicit: Option<ImplicitGrads>,
    /// Gradient on the input features, for verification.
    pub d_features: DenseMatrix,
}

/// Edge-supervision terms computed during a training step.
#[derive(Debug, Clone, Default)]
pub struct EdgeLosses {
    pub attr: Option<f64>,
    pub rel: Option<f64>,
}

impl EdgeLosses {
    pub fn total(&self) -> f64 {
        self.attr.unwrap_or(0.0) + self.rel.unwrap_or(0.0)
    }
}

impl HkrmModel {
    /// Builds a model; explicit branches require their prior graph.
    /// `pretrained_head` seeds the feature rows of the head with an
    /// existing (feature-only) head, used by the two-phase schedule.
    pub fn new(
        cfg: ModelConfig,
        priors: &Priors,
        seed: u64,
        pretrained_head: Option<&LinearHead>,
    ) -> Result<Self> {
        let attr = match &cfg.attr {
            Some(bc) => {
                let prior = priors.attribute.clone().ok_or_else(|| {
                    Error::Domain("attribute branch enabled without an attribute prior".into())
                })?;
                Some(ExplicitBranch::new(
                    cfg.feature_dim,
                    bc.clone(),
                    prior,
                    component_seed(seed, "branch/attr"),
                ))
            }
            None => None,
        };
        let rel = match &cfg.rel {
            Some(bc) => {
                let prior = priors.relationship.clone().ok_or_else(|| {
                    Error::Domain("relationship branch enabled without a relationship prior".into())
                })?;
                Some(ExplicitBranch::new(
                    cfg.feature_dim,
                    bc.clone(),
                    prior,
                    component_seed(seed, "branch/rel"),
                ))
            }
            None => None,
        };
        let implicit = cfg
            .implicit
            .as_ref()
            .map(|ic| ImplicitBranch::new(cfg.feature_dim, ic.clone(), component_seed(seed, "branch/implicit")));

        let mut head = LinearHead::new(cfg.head_input_dim(), cfg.num_classes, component_seed(seed, "head"));
        if let Some(pre) = pretrained_head {
            if pre.weight.cols() != cfg.num_classes {
                return Err(Error::shape(
                    "pretrained head",
                    cfg.num_classes,
                    pre.weight.cols(),
                ));
            }
            let rows = pre.weight.rows().min(head.weight.rows());
            for r in 0..rows {
                for c in 0..cfg.num_classes {
                    *head.weight.at_mut(r, c) = pre.weight.at(r, c);
                }
            }
            head.bias = pre.bias.clone();
        }

        Ok(HkrmModel {
            cfg,
            attr,
            rel,
            implicit,
            head,
        })
    }

    pub fn forward(&self, batch: &RegionBatch, image_size: (f64, f64)) -> Result<ModelForward> {
        if batch.feature_dim() != self.cfg.feature_dim {
            return Err(Error::shape(
                "forward_model",
                format!("feature dim {}", self.cfg.feature_dim),
                batch.feature_dim(),
            ));
        }
        let f = &batch.features;
        let attr = self.attr.as_ref().map(|b| b.forward(f)).transpose()?;
        let rel = self.rel.as_ref().map(|b| b.forward(f)).transpose()?;
        let implicit = match &self.implicit {
            Some(b) => {
                let q = geometry_features(&batch.boxes, image_size, &batch.fg_prob)?;
                Some(b.forward(&q, f)?)
            }
            None => None,
        };

        let n = batch.num_regions();
        let mut concat = DenseMatrix::zeros(n, self.cfg.head_input_dim());
        for i in 0..n {
            let row = concat.row_mut(i);
            let mut o = 0;
            row[..f.cols()].copy_from_slice(f.row(i));
            o += f.cols();
            for branch in [&attr, &rel] {
                if let Some(fwd) = branch {
                    let e = fwd.output.cols();
                    row[o..o + e].copy_from_slice(fwd.output.row(i));
                    o += e;
                }
            }
            if let Some(fwd) = &implicit {
                let e = fwd.output.cols();
                row[o..o + e].copy_from_slice(fwd.output.row(i));
            }
        }

        let logits = self.head.forward(&concat);
        Ok(ModelForward {
            logits,
            concat,
            attr,
            rel,
            implicit,
        })
    }

    /// Edge-supervision losses and raw-edge gradients for the enabled
    /// explicit branches, masked to regions with a foreground class.
    pub fn edge_supervision(
        &self,
        fwd: &ModelForward,
        gt_classes: &[usize],
    ) -> Result<(EdgeLosses, Option<DenseMatrix>, Option<DenseMatrix>)> {
        let mask: Vec<bool> = gt_classes.iter().map(|&c| c != BACKGROUND_CLASS).collect();
        let mut losses = EdgeLosses::default();
        let mut d_attr = None;
        let mut d_rel = None;
        if let (Some(branch), Some(f)) = (&self.attr, &fwd.attr) {
            let targets = target_edges(gt_classes, &branch.prior)?;
            let (l, mut g) = edge_loss(&f.raw, &targets, Some(&mask), branch.cfg.edge_loss_normalize)?;
            losses.attr = Some(self.cfg.lambda_edge * l);
            for x in g.data_mut() {
                *x *= self.cfg.lambda_edge;
            }
            d_attr = Some(g);
        }
        if let (Some(branch), Some(f)) = (&self.rel, &fwd.rel) {
            let targets = target_edges(gt_classes, &branch.prior)?;
            let (l, mut g) = edge_loss(&f.raw, &targets, Some(&mask), branch.cfg.edge_loss_normalize)?;
            losses.rel = Some(self.cfg.lambda_edge * l);
            for x in g.data_mut() {
                *x *= self.cfg.lambda_edge;
            }
            d_rel = Some(g);
        }
        Ok((losses, d_attr, d_rel))
    }

    /// Chains `d_logits` (plus optional raw-edge gradients) back through
    /// the head and every enabled branch.
    pub fn backward(
        &self,
        fwd: &ModelForward,
        d_logits: &DenseMatrix,
        d_raw_attr: Option<&DenseMatrix>,
        d_raw_rel: Option<&DenseMatrix>,
        features: &DenseMatrix,
    ) -> Result<ModelGrads> {
        let (head_weight, head_bias, d_concat) = self.head.backward(&fwd.concat, d_logits);

        let n = features.rows();
        let d_dim = features.cols();
        let mut d_features = DenseMatrix::zeros(n, d_dim);
        for i in 0..n {
            d_features
                .row_mut(i)
                .copy_from_slice(&d_concat.row(i)[..d_dim]);
        }

        let mut offset = d_dim;
        let mut slice_cols = |e: usize| -> DenseMatrix {
            let m = DenseMatrix::from_fn(n, e, |i, j| d_concat.at(i, offset + j));
            offset += e;
            m
        };

        let attr = match (&self.attr, &fwd.attr) {
            (Some(branch), Some(f)) => {
                let d_out = slice_cols(f.output.cols());
                let g = branch.backward(f, &d_out, d_raw_attr)?;
                d_features.add_assign(&g.d_features);
                Some(g)
            }
            _ => None,
        };
        let rel = match (&self.rel, &fwd.rel) {
            (Some(branch), Some(f)) => {
                let d_out = slice_cols(f.output.cols());
                let g = branch.backward(f, &d_out, d_raw_rel)?;
                d_features.add_assign(&g.d_features);
                Some(g)
            }
            _ => None,
        };
        let implicit = match (&self.implicit, &fwd.implicit) {
            (Some(branch), Some(f)) => {
                let d_out = slice_cols(f.output.cols());
                let g = branch.backward(f, &d_out)?;
                d_features.add_assign(&g.d_features);
                Some(g)
            }
            _ => None,
        };

        Ok(ModelGrads {
            head_weight,
            head_bias,
            attr,
            rel,
            implicit,
            d_features,
        })
    }

    pub fn apply_sgd(&mut self, grads: &ModelGrads, opt: &mut Sgd) -> Result<()> {
        opt.step("head.weight", self.head.weight.data_mut(), grads.head_weight.data())?;
        opt.step("head.bias", &mut self.head.bias, &grads.head_bias)?;
        if let (Some(branch), Some(g)) = (&mut self.attr, &grads.attr) {
            branch.apply_sgd(g, opt, "attr")?;
        }
        if let (Some(branch), Some(g)) = (&mut self.rel, &grads.rel) {
            branch.apply_sgd(g, opt, "rel")?;
        }
        if let (Some(branch), Some(g)) = (&mut self.implicit, &grads.implicit) {
            branch.apply_sgd(g, opt, "implicit")?;
        }
        Ok(())
    }

    pub fn to_store(&self, meta: String) -> TensorStore {
        let mut store = TensorStore::new(meta);
        store.insert("head.weight", self.head.weight.clone());
        store.insert_vec("head.bias", &self.head.bias);
        let put_mlp = |store: &mut TensorStore, prefix: &str, mlp: &MlpStack| {
            for (i, layer) in mlp.layers().iter().enumerate() {
                store.insert(&format!("{prefix}.layer{i}.weight"), layer.weight.clone());
                store.insert_vec(&format!("{prefix}.layer{i}.bias"), &layer.bias);
            }
        };
        if let Some(b) = &self.attr {
            put_mlp(&mut store, "attr.predictor", &b.predictor);
            store.insert("attr.embed", b.embed.clone());
            store.insert("attr.prior", b.prior.edges.clone());
        }
        if let Some(b) = &self.rel {
            put_mlp(&mut store, "rel.predictor", &b.predictor);
            store.insert("rel.embed", b.embed.clone());
            store.insert("rel.prior", b.prior.edges.clone());
        }
        if let Some(b) = &self.implicit {
            for (m, p) in b.predictors.iter().enumerate() {
                put_mlp(&mut store, &format!("implicit.graph{m}"), p);
            }
            store.insert("implicit.embed", b.embed.clone());
        }
        store
    }

    /// Restores parameters into a freshly constructed model of the same
    /// configuration.
    pub fn load_params(&mut self, store: &TensorStore, class_names: &[String]) -> Result<()> {
        self.head.weight = store.get("head.weight")?.clone();
        self.head.bias = store.get_vec("head.bias")?;
        let load_mlp = |prefix: &str, mlp: &mut MlpStack| -> Result<()> {
            for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
                layer.weight = store.get(&format!("{prefix}.layer{i}.weight"))?.clone();
                layer.bias = store.get_vec(&format!("{prefix}.layer{i}.bias"))?;
            }
            Ok(())
        };
        if let Some(b) = &mut self.attr {
            load_mlp("attr.predictor", &mut b.predictor)?;
            b.embed = store.get("attr.embed")?.clone();
            b.prior = PriorGraph {
                kind: GraphKind::Attribute,
                class_names: class_names.to_vec(),
                edges: store.get("attr.prior")?.clone(),
            };
        }
        if let Some(b) = &mut self.rel {
            load_mlp("rel.predictor", &mut b.predictor)?;
            b.embed = store.get("rel.embed")?.clone();
            b.prior = PriorGraph {
                kind: GraphKind::Relationship,
                class_names: class_names.to_vec(),
                edges: store.get("rel.prior")?.clone(),
            };
        }
        if let Some(b) = &mut self.implicit {
            for (m, p) in b.predictors.iter_mut().enumerate() {
                load_mlp(&format!("implicit.graph{m}"), p)?;
            }
            b.embed = store.get("implicit.embed")?.clone();
        }
        Ok(())
    }
}

/// Numerically stable softmax cross-entropy, averaged over regions.
/// Returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy(logits: &DenseMatrix, targets: &[usize]) -> Result<(f64, DenseMatrix)> {
    let n = logits.rows();
    let c = logits.cols();
    if targets.len() != n {
        return Err(Error::shape("softmax_cross_entropy", n, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Domain(format!("target class {bad} out of range 0..{c}")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut z = 0.0;
        for &x in row {
            z += (x - max).exp();
        }
        let log_z = z.ln() + max;
        loss += (log_z - row[targets[i]]) * inv_n;
        let g = grad.row_mut(i);
        for (k, &x) in row.iter().enumerate() {
            let p = (x - max).exp() / z;
            g[k] = (p - if k == targets[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Per-region argmax of the logits.
pub fn predictions(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
