//! The training loop.
//!
//! Two phases: the baseline head is trained on raw features first, then a
//! model with the requested knowledge branches starts from that head and
//! trains end to end. Prior graphs are rebuilt from annotations sampled
//! out of the world — the same pipeline a real annotation dump would go
//! through — rather than read off the world's ground-truth rules.
//!
//! Everything is deterministic in (config, seed): scenes come from labelled
//! seed streams, gradient accumulation is fixed-order, and the optimizer
//! state is keyed by parameter name.

use crate::annotations::ingest_annotations;
use crate::checkpoint::TensorStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graphs::{build_attribute_graph, build_relationship_graph};
use crate::metrics::{evaluate_seeded, EpochRecord, Metrics};
use crate::model::{softmax_cross_entropy, HkrmModel, ModelConfig, ModelGrads, Priors};
use crate::optim::Sgd;
use crate::rng::component_seed;
use crate::world::{annotation_corpus, generate_scene, WorldSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Baseline,
    Attr,
    Rel,
    Spatial,
    All,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Attr => "attr",
            Ablation::Rel => "rel",
            Ablation::Spatial => "spatial",
            Ablation::All => "all",
        }
    }

    pub fn uses_attr(self) -> bool {
        matches!(self, Ablation::Attr | Ablation::All)
    }

    pub fn uses_rel(self) -> bool {
        matches!(self, Ablation::Rel | Ablation::All)
    }

    pub fn uses_implicit(self) -> bool {
        matches!(self, Ablation::Spatial | Ablation::All)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Ablation::Baseline),
            "attr" => Ok(Ablation::Attr),
            "rel" => Ok(Ablation::Rel),
            "spatial" => Ok(Ablation::Spatial),
            "all" => Ok(Ablation::All),
            other => Err(Error::config(
                "ablation",
                format!("unknown ablation `{other}`; expected baseline|attr|rel|spatial|all"),
            )),
        }
    }
}

/// Assembles the model configuration for one ablation arm.
pub fn model_config(run: &RunConfig, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        feature_dim: run.world.feature_dim,
        num_classes: run.world.num_classes,
        attr: ablation.uses_attr().then(|| run.explicit.clone()),
        rel: ablation.uses_rel().then(|| run.explicit.clone()),
        implicit: ablation.uses_implicit().then(|| run.implicit.clone()),
        lambda_edge: run.train.lambda_edge,
    }
}

/// Builds the priors an ablation needs by sampling an annotation corpus
/// from the world and running it through the graph pipeline.
pub fn build_priors(world: &WorldSpec, run: &RunConfig, ablation: Ablation) -> Result<Priors> {
    let mut priors = Priors::default();
    if !(ablation.uses_attr() || ablation.uses_rel()) {
        return Ok(priors);
    }
    let records = annotation_corpus(world, run.train.annotation_scenes, run.seed);
    let ingest = ingest_annotations(&records, &world.vocabulary())?;
    if ablation.uses_attr() {
        let (graph, _) = build_attribute_graph(&ingest.table, run.graphs.attribute_mode)?;
        priors.attribute = Some(graph);
    }
    if ablation.uses_rel() {
        let (graph, _) = build_relationship_graph(&ingest.triples)?;
        priors.relationship = Some(graph);
    }
    Ok(priors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub ablation: String,
    pub epoch: usize,
    pub run_config: RunConfig,
    pub world: WorldSpec,
}

pub struct TrainOutput {
    pub model: HkrmModel,
    pub history: Vec<EpochRecord>,
    pub final_metrics: Metrics,
    pub priors: Priors,
}

struct GradAccum {
    grads: Option<ModelGrads>,
}

impl GradAccum {
    fn new() -> Self {
        GradAccum { grads: None }
    }

    fn add(&mut self, g: ModelGrads) {
        match &mut self.grads {
            None => self.grads = Some(g),
            Some(acc) => {
                acc.head_weight.add_assign(&g.head_weight);
                for (a, b) in acc.head_bias.iter_mut().zip(&g.head_bias) {
                    *a += b;
                }
                if let (Some(a), Some(b)) = (&mut acc.attr, &g.attr) {
                    a.predictor.add_assign(&b.predictor);
                    a.d_embed.add_assign(&b.d_embed);
                }
                if let (Some(a), Some(b)) = (&mut acc.rel, &g.rel) {
                    a.predictor.add_assign(&b.predictor);
                    a.d_embed.add_assign(&b.d_embed);
                }
                if let (Some(a), Some(b)) = (&mut acc.implicit, &g.implicit) {
                    for (pa, pb) in a.predictors.iter_mut().zip(&b.predictors) {
                        pa.add_assign(pb);
                    }
                    a.d_embed.add_assign(&b.d_embed);
                }
            }
        }
    }

    fn finish(mut self, scale: f64) -> Option<ModelGrads> {
        if let Some(g) = &mut self.grads {
            for x in g.head_weight.data_mut() {
                *x *= scale;
            }
            for x in &mut g.head_bias {
                *x *= scale;
            }
            for branch in [&mut g.attr, &mut g.rel] {
                if let Some(b) = branch {
                    b.predictor.scale_assign(scale);
                    for x in b.d_embed.data_mut() {
                        *x *= scale;
                    }
                }
            }
            if let Some(b) = &mut g.implicit {
                for p in &mut b.predictors {
                    p.scale_assign(scale);
                }
                for x in b.d_embed.data_mut() {
                    *x *= scale;
                }
            }
        }
        self.grads
    }
}

/// Trains one ablation arm. Checkpoints are written per epoch when
/// `out_dir` is set; a non-finite loss aborts with the last good checkpoint
/// already on disk. `on_epoch` fires after each epoch's evaluation.
pub fn train(
    world: &WorldSpec,
    run: &RunConfig,
    ablation: Ablation,
    out_dir: Option<&Path>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutput> {
    run.validate()?;
    let tc = &run.train;
    let priors = build_priors(world, run, ablation)?;
    let model_seed = component_seed(run.seed, "model");

    // Phase 1: baseline head only.
    let baseline_cfg = model_config(run, Ablation::Baseline);
    let mut model = HkrmModel::new(baseline_cfg, &Priors::default(), model_seed, None)?;
    let mut history = Vec::new();
    let mut scene_counter = 0u64;

    let mut opt = Sgd::new(tc.sgd);
    run_phase(
        world,
        run,
        &mut model,
        &mut opt,
        1,
        tc.epochs_phase1,
        0,
        &mut scene_counter,
        &mut history,
        ablation,
        out_dir,
        &mut on_epoch,
    )?;

    // Phase 2: enable branches, seeding the head's feature rows from the
    // baseline.
    if ablation != Ablation::Baseline {
        let cfg = model_config(run, ablation);
        model = HkrmModel::new(cfg, &priors, model_seed, Some(&model.head))?;
    }
    let mut opt = Sgd::new(tc.sgd);
    run_phase(
        world,
        run,
        &mut model,
        &mut opt,
        2,
        tc.epochs_phase2,
        tc.epochs_phase1,
        &mut scene_counter,
        &mut history,
        ablation,
        out_dir,
        &mut on_epoch,
    )?;

    let final_metrics = evaluate_seeded(&model, world, tc.eval_scenes, run.seed, 1)?;
    if let Some(dir) = out_dir {
        write_checkpoint(&model, world, run, ablation, history.len(), &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutput {
        model,
        history,
        final_metrics,
        priors,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    world: &WorldSpec,
    run: &RunConfig,
    model: &mut HkrmModel,
    opt: &mut Sgd,
    phase: u8,
    epochs: usize,
    epoch_offset: usize,
    scene_counter: &mut u64,
    history: &mut Vec<EpochRecord>,
    ablation: Ablation,
    out_dir: Option<&Path>,
    on_epoch: &mut Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<()> {
    let tc = &run.train;
    let base_lr = tc.sgd.learning_rate;
    for e in 0..epochs {
        let epoch = epoch_offset + e;
        if tc.lr_decay_every > 0 && e > 0 && e % tc.lr_decay_every == 0 {
            let k = (e / tc.lr_decay_every) as i32;
            opt.set_learning_rate(base_lr * tc.lr_decay_factor.powi(k));
        }
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut edge_attr_sum = 0.0;
        let mut edge_rel_sum = 0.0;
        for _step in 0..tc.steps_per_epoch {
            let mut accum = GradAccum::new();
            let mut step_loss = 0.0;
            for _k in 0..tc.scenes_per_step {
                let seed = match tc.fixed_scene_seed {
                    Some(s) => s,
                    None => component_seed(run.seed, &format!("train/scene{}", *scene_counter)),
                };
                *scene_counter += 1;
                let scene = generate_scene(world, seed);
                let fwd = model.forward(&scene.batch, scene.image_size)?;
                let (ce, d_logits) = softmax_cross_entropy(&fwd.logits, &scene.batch.gt_classes)?;
                let (edges, d_attr, d_rel) = model.edge_supervision(&fwd, &scene.batch.gt_classes)?;
                let total = ce + edges.total();
                if !total.is_finite() {
                    if let Some(dir) = out_dir {
                        let _ = write_checkpoint(
                            model,
                            world,
                            run,
                            ablation,
                            epoch,
                            &dir.join("last_good.ckpt"),
                        );
                    }
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch}: loss = {total} (ce {ce}, edges {})",
                        edges.total()
                    )));
                }
                step_loss += total;
                ce_sum += ce;
                edge_attr_sum += edges.attr.unwrap_or(0.0);
                edge_rel_sum += edges.rel.unwrap_or(0.0);
                let grads = model.backward(
                    &fwd,
                    &d_logits,
                    d_attr.as_ref(),
                    d_rel.as_ref(),
                    &scene.batch.features,
                )?;
                accum.add(grads);
            }
            loss_sum += step_loss / tc.scenes_per_step as f64;
            if let Some(grads) = accum.finish(1.0 / tc.scenes_per_step as f64) {
                model.apply_sgd(&grads, opt)?;
            }
        }

        let scenes_per_epoch = (tc.steps_per_epoch * tc.scenes_per_step) as f64;
        let eval = evaluate_seeded(model, world, tc.eval_scenes, run.seed, 1)?;
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / tc.steps_per_epoch as f64,
            train_ce: ce_sum / scenes_per_epoch,
            train_edge_attr: edge_attr_sum / scenes_per_epoch,
            train_edge_rel: edge_rel_sum / scenes_per_epoch,
            eval_accuracy: eval.overall_accuracy,
            eval_foreground_accuracy: eval.foreground_accuracy,
            eval_rare_accuracy: eval.rare_class_accuracy,
            eval_confusable_accuracy: eval.confusable_accuracy_mean,
            eval_edge_mae_attr: eval.edge_mae_attr,
            eval_edge_mae_rel: eval.edge_mae_rel,
        };
        if let Some(dir) = out_dir {
            write_checkpoint(model, world, run, ablation, epoch, &dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok(())
}

pub fn write_checkpoint(
    model: &HkrmModel,
    world: &WorldSpec,
    run: &RunConfig,
    ablation: Ablation,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: crate::versions::CHECKPOINT,
        ablation: ablation.as_str().to_string(),
        epoch,
        run_config: run.clone(),
        world: world.clone(),
    };
    let store = model.to_store(serde_json::to_string(&meta).expect("meta serializes"));
    store.save(path)
}

/// Restores a trained model plus its world and config from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(HkrmModel, CheckpointMeta)> {
    let store = TensorStore::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&store.meta)
        .map_err(|e| Error::format(&path.display().to_string(), format!("bad metadata: {e}")))?;
    let ablation = Ablation::from_str(&meta.ablation)?;
    let cfg = model_config(&meta.run_config, ablation);

    // Priors are restored from the checkpoint tensors themselves; the
    // constructor just needs placeholders of the right shape.
    let placeholder = |kind| {
        Some(crate::graphs::PriorGraph {
            kind,
            class_names: meta.world.class_names.clone(),
            edges: crate::matrix::DenseMatrix::zeros(meta.world.num_classes(), meta.world.num_classes()),
        })
    };
    let priors = Priors {
        attribute: cfg.attr.is_some().then(|| placeholder(crate::graphs::GraphKind::Attribute)).flatten(),
        relationship: cfg.rel.is_some().then(|| placeholder(crate::graphs::GraphKind::Relationship)).flatten(),
    };
    let mut model = HkrmModel::new(cfg, &priors, 0, None)?;
    model.load_params(&store, &meta.world.class_names)?;
    Ok((model, meta))
}
