//! Evaluation: accuracy slices, edge error against the priors, and the
//! cluster-cohesion ratio used to quantify what the attribute branch learns.

use crate::error::{Error, Result};
use crate::explicit::target_edges;
use crate::matrix::DenseMatrix;
use crate::model::{predictions, softmax_cross_entropy, HkrmModel, BACKGROUND_CLASS};
use crate::world::{generate_scene, SyntheticScene, WorldSpec};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Fraction of positively-weighted foreground classes counted as rare
/// (bottom of the frequency ranking).
pub const RARE_QUANTILE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub count: u64,
    pub correct: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub class_a: String,
    pub class_b: String,
    pub count: u64,
    pub correct: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_scenes: usize,
    pub num_regions: u64,
    pub overall_accuracy: f64,
    /// Accuracy over foreground regions only.
    pub foreground_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Accuracy over the bottom frequency quantile of drawn foreground
    /// classes; background and rule-driven classes are excluded.
    pub rare_class_accuracy: f64,
    pub rare_classes: Vec<String>,
    pub confusable_pairs: Vec<PairAccuracy>,
    pub confusable_accuracy_mean: f64,
    pub mean_ce_loss: f64,
    /// Mean |ê − ẽ| over supervised region pairs, per explicit branch.
    pub edge_mae_attr: Option<f64>,
    pub edge_mae_rel: Option<f64>,
}

/// Runs the model over scenes and tallies every slice.
pub fn evaluate(model: &HkrmModel, world: &WorldSpec, scenes: &[SyntheticScene]) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::Domain("evaluate called with no scenes".into()));
    }
    let c = world.num_classes();
    let mut per_class_count = vec![0u64; c];
    let mut per_class_correct = vec![0u64; c];
    let mut total = 0u64;
    let mut correct = 0u64;
    let mut fg_total = 0u64;
    let mut fg_correct = 0u64;
    let mut ce_sum = 0.0;
    let mut attr_mae = MaeAccum::default();
    let mut rel_mae = MaeAccum::default();

    for scene in scenes {
        let fwd = model.forward(&scene.batch, scene.image_size)?;
        let preds = predictions(&fwd.logits);
        let gt = &scene.batch.gt_classes;
        let (ce, _) = softmax_cross_entropy(&fwd.logits, gt)?;
        ce_sum += ce;
        for (&p, &t) in preds.iter().zip(gt) {
            per_class_count[t] += 1;
            total += 1;
            let ok = p == t;
            if ok {
                per_class_correct[t] += 1;
                correct += 1;
            }
            if t != BACKGROUND_CLASS {
                fg_total += 1;
                if ok {
                    fg_correct += 1;
                }
            }
        }
        let mask: Vec<bool> = gt.iter().map(|&t| t != BACKGROUND_CLASS).collect();
        if let (Some(branch), Some(f)) = (&model.attr, &fwd.attr) {
            let targets = target_edges(gt, &branch.prior)?;
            attr_mae.add(&f.raw, &targets, &mask);
        }
        if let (Some(branch), Some(f)) = (&model.rel, &fwd.rel) {
            let targets = target_edges(gt, &branch.prior)?;
            rel_mae.add(&f.raw, &targets, &mask);
        }
    }

    let per_class: Vec<ClassAccuracy> = (0..c)
        .map(|k| ClassAccuracy {
            class: world.class_names[k].clone(),
            count: per_class_count[k],
            correct: per_class_correct[k],
            accuracy: ratio(per_class_correct[k], per_class_count[k]),
        })
        .collect();

    // Rare set: bottom quantile of positively weighted foreground classes,
    // ranked by configured draw weight.
    let mut weighted: Vec<usize> = (1..c).filter(|&k| world.class_weights[k] > 0.0).collect();
    weighted.sort_by(|&a, &b| {
        world.class_weights[a]
            .partial_cmp(&world.class_weights[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n_rare = ((weighted.len() as f64 * RARE_QUANTILE).ceil() as usize).max(1).min(weighted.len());
    let rare: Vec<usize> = weighted[..n_rare].to_vec();
    let rare_count: u64 = rare.iter().map(|&k| per_class_count[k]).sum();
    let rare_correct: u64 = rare.iter().map(|&k| per_class_correct[k]).sum();

    let confusable_pairs: Vec<PairAccuracy> = world
        .config
        .confusable
        .iter()
        .map(|p| {
            let count = per_class_count[p.a] + per_class_count[p.b];
            let correct = per_class_correct[p.a] + per_class_correct[p.b];
            PairAccuracy {
                class_a: world.class_names[p.a].clone(),
                class_b: world.class_names[p.b].clone(),
                count,
                correct,
                accuracy: ratio(correct, count),
            }
        })
        .collect();
    let confusable_accuracy_mean = if confusable_pairs.is_empty() {
        0.0
    } else {
        confusable_pairs.iter().map(|p| p.accuracy).sum::<f64>() / confusable_pairs.len() as f64
    };

    Ok(Metrics {
        num_scenes: scenes.len(),
        num_regions: total,
        overall_accuracy: ratio(correct, total),
        foreground_accuracy: ratio(fg_correct, fg_total),
        per_class,
        rare_class_accuracy: ratio(rare_correct, rare_count),
        rare_classes: rare.iter().map(|&k| world.class_names[k].clone()).collect(),
        confusable_pairs,
        confusable_accuracy_mean,
        mean_ce_loss: ce_sum / scenes.len() as f64,
        edge_mae_attr: attr_mae.finish(),
        edge_mae_rel: rel_mae.finish(),
    })
}

#[derive(Default)]
struct MaeAccum {
    sum: f64,
    count: u64,
}

impl MaeAccum {
    fn add(&mut self, predicted: &DenseMatrix, targets: &DenseMatrix, mask: &[bool]) {
        let n = predicted.rows();
        for i in 0..n {
            for j in 0..n {
                if mask[i] && mask[j] {
                    self.sum += (predicted.at(i, j) - targets.at(i, j)).abs();
                    self.count += 1;
                }
            }
        }
    }

    fn finish(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Generates `n` evaluation scenes from the `eval/scene{i}` streams and
/// evaluates. `jobs > 1` fans scene generation and forwards across threads;
/// results merge in index order so the outcome is identical either way.
pub fn evaluate_seeded(
    model: &HkrmModel,
    world: &WorldSpec,
    n: usize,
    root_seed: u64,
    jobs: usize,
) -> Result<Metrics> {
    let scenes = generate_eval_scenes(world, n, root_seed, jobs);
    evaluate(model, world, &scenes)
}

pub fn eval_scene_seed(root_seed: u64, index: usize) -> u64 {
    crate::rng::component_seed(root_seed, &format!("eval/scene{index}"))
}

pub fn generate_eval_scenes(world: &WorldSpec, n: usize, root_seed: u64, jobs: usize) -> Vec<SyntheticScene> {
    let jobs = jobs.max(1);
    if jobs == 1 || n < 2 {
        return (0..n)
            .map(|i| generate_scene(world, eval_scene_seed(root_seed, i)))
            .collect();
    }
    let chunk = n.div_ceil(jobs);
    let mut out: Vec<Option<SyntheticScene>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            scope.spawn(move || {
                for (k, s) in slot.iter_mut().enumerate() {
                    let i = t * chunk + k;
                    *s = Some(generate_scene(world, eval_scene_seed(root_seed, i)));
                }
            });
        }
    });
    out.into_iter().map(|s| s.expect("all scenes generated")).collect()
}

/// Per-region embeddings of one branch over a set of scenes, paired with
/// ground-truth labels. Used for the cohesion metric.
pub fn collect_branch_embeddings(
    model: &HkrmModel,
    scenes: &[SyntheticScene],
    branch: EmbeddingSource,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for scene in scenes {
        let fwd = model.forward(&scene.batch, scene.image_size)?;
        let emb: &DenseMatrix = match branch {
            EmbeddingSource::RawFeatures => &scene.batch.features,
            EmbeddingSource::Attribute => {
                &fwd.attr
                    .as_ref()
                    .ok_or_else(|| Error::Domain("attribute branch disabled".into()))?
                    .output
            }
            EmbeddingSource::Relationship => {
                &fwd.rel
                    .as_ref()
                    .ok_or_else(|| Error::Domain("relationship branch disabled".into()))?
                    .output
            }
            EmbeddingSource::Implicit => {
                &fwd.implicit
                    .as_ref()
                    .ok_or_else(|| Error::Domain("implicit branch disabled".into()))?
                    .output
            }
        };
        for (i, &t) in scene.batch.gt_classes.iter().enumerate() {
            if t != BACKGROUND_CLASS {
                rows.push(emb.row(i).to_vec());
                labels.push(t);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Domain("no foreground regions in scene set".into()));
    }
    Ok((DenseMatrix::from_rows(&rows), labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    RawFeatures,
    Attribute,
    Relationship,
    Implicit,
}

/// Ratio of mean within-group to mean between-group distance of class-mean
/// embeddings. Groups are sets of class ids (classes sharing an attribute
/// or spatial rule); classes not present in `labels` are skipped. Lower is
/// more cohesive.
pub fn cluster_cohesion(
    embeddings: &DenseMatrix,
    labels: &[usize],
    groups: &[Vec<usize>],
) -> Result<f64> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape("cluster_cohesion", embeddings.rows(), labels.len()));
    }
    let max_class = labels.iter().copied().max().unwrap_or(0);
    let dim = embeddings.cols();
    let mut sums = vec![vec![0.0; dim]; max_class + 1];
    let mut counts = vec![0u64; max_class + 1];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(embeddings.row(i)) {
            *s += x;
        }
    }
    let mean_of = |class: usize| -> Option<Vec<f64>> {
        if class <= max_class && counts[class] > 0 {
            Some(sums[class].iter().map(|s| s / counts[class] as f64).collect())
        } else {
            None
        }
    };

    // Group id per class, restricted to present classes.
    let mut members: Vec<(usize, Vec<f64>)> = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        for &class in group {
            if let Some(m) = mean_of(class) {
                members.push((g, m));
            }
        }
    }
    let distinct_groups: std::collections::BTreeSet<usize> = members.iter().map(|(g, _)| *g).collect();
    if distinct_groups.len() < 2 {
        return Err(Error::Domain(
            "cluster_cohesion needs class means in at least two groups".into(),
        ));
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut within = (0.0, 0u64);
    let mut between = (0.0, 0u64);
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            let d = dist(&members[i].1, &members[j].1);
            if members[i].0 == members[j].0 {
                within.0 += d;
                within.1 += 1;
            } else {
                between.0 += d;
                between.1 += 1;
            }
        }
    }
    if within.1 == 0 {
        return Err(Error::Domain(
            "cluster_cohesion needs at least one within-group pair".into(),
        ));
    }
    let within_mean = within.0 / within.1 as f64;
    let between_mean = between.0 / between.1 as f64;
    if between_mean == 0.0 {
        return Err(Error::Domain("between-group distances are all zero".into()));
    }
    Ok(within_mean / between_mean)
}

/// One epoch's worth of history, serialized into the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_edge_attr: f64,
    pub train_edge_rel: f64,
    pub eval_accuracy: f64,
    pub eval_foreground_accuracy: f64,
    pub eval_rare_accuracy: f64,
    pub eval_confusable_accuracy: f64,
    pub eval_edge_mae_attr: Option<f64>,
    pub eval_edge_mae_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub ablation: String,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub final_metrics: Metrics,
}

pub fn metrics_to_json(file: &MetricsFile) -> String {
    serde_json::to_string_pretty(file).expect("metrics serialize")
}

/// Plot-ready CSV: one row per epoch, fixed column order.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(
        "epoch,phase,train_loss,train_ce,train_edge_attr,train_edge_rel,\
         eval_accuracy,eval_foreground_accuracy,eval_rare_accuracy,\
         eval_confusable_accuracy,eval_edge_mae_attr,eval_edge_mae_rel\n",
    );
    for r in history {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase,
            r.train_loss,
            r.train_ce,
            r.train_edge_attr,
            r.train_edge_rel,
            r.eval_accuracy,
            r.eval_foreground_accuracy,
            r.eval_rare_accuracy,
            r.eval_confusable_accuracy,
            opt(r.eval_edge_mae_attr),
            opt(r.eval_edge_mae_rel),
        );
    }
    out
}

/// Matrix CSV without any header, used by the edge inspection dumps.
pub fn matrix_to_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m.at(i, j));
        }
        out.push('\n');
    }
    out
}
