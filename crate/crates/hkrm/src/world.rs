//! Synthetic desk-scale worlds.
//!
//! A world defines class prototypes in feature space plus the structure the
//! knowledge modules are supposed to exploit: confusable pairs (prototypes
//! within epsilon of each other), context rules (a class co-occurs with a
//! companion class with some probability), spatial rules (a class lives in
//! a vertical band), shared-attribute groups, and a long-tail frequency
//! profile. Scenes sample regions from that description; annotation records
//! sampled from the same rules let the graph-construction pipeline rebuild
//! the priors exactly as it would from a real annotation dump.

use crate::annotations::{AnnotationRecord, Relation, Vocabulary};
use crate::error::{Error, Result};
use crate::explicit::RegionBatch;
use crate::matrix::DenseMatrix;
use crate::rng::{sample_normal, seeded_rng};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub a: usize,
    pub b: usize,
    /// Prototype distance between the two classes.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRule {
    pub class: usize,
    pub companion: usize,
    /// Probability that an instance of `class` brings its companion into
    /// the scene (and is annotated with the relation).
    pub prob: f64,
    #[serde(default = "default_predicate")]
    pub predicate: String,
}

fn default_predicate() -> String {
    "with".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRule {
    pub class: usize,
    /// [lo, hi] fraction of image height the box's top edge falls in.
    pub band: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Total classes including the background reserve at id 0.
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_attributes: usize,
    /// Foreground classes are assigned round-robin to this many
    /// shared-attribute groups.
    pub attr_groups: usize,
    /// Probability that an instance is annotated with each attribute of its
    /// class profile.
    pub attr_emit_prob: f64,
    pub prototype_scale: f64,
    /// Long-tail exponent: foreground class k (1-based rank) is drawn with
    /// weight k^-exponent. Zero means uniform.
    pub long_tail_exponent: f64,
    pub noise_sigma: f64,
    pub min_regions: usize,
    pub max_regions: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Fraction of randomly drawn regions that are background.
    pub background_fraction: f64,
    /// Classes placed exactly once in every scene (scene furniture such as
    /// a ceiling-like or floor-like anchor).
    pub anchors: Vec<usize>,
    pub confusable: Vec<ConfusablePair>,
    pub context_rules: Vec<ContextRule>,
    pub spatial_rules: Vec<SpatialRule>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_classes: 12,
            feature_dim: 64,
            num_attributes: 12,
            attr_groups: 3,
            attr_emit_prob: 0.9,
            prototype_scale: 1.0,
            long_tail_exponent: 1.0,
            noise_sigma: 0.08,
            min_regions: 8,
            max_regions: 32,
            image_width: 100.0,
            image_height: 100.0,
            background_fraction: 0.15,
            anchors: Vec::new(),
            confusable: Vec::new(),
            context_rules: Vec::new(),
            spatial_rules: Vec::new(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        let cfg_err = |key: &str, msg: String| Err(Error::config(format!("{key_prefix}.{key}"), msg));
        if self.num_classes < 2 {
            return cfg_err("num_classes", format!("need at least 2, got {}", self.num_classes));
        }
        if self.feature_dim < 2 {
            return cfg_err("feature_dim", format!("need at least 2, got {}", self.feature_dim));
        }
        if self.attr_groups == 0 || self.attr_groups > self.num_attributes {
            return cfg_err(
                "attr_groups",
                format!(
                    "must be in 1..={}, got {}",
                    self.num_attributes, self.attr_groups
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.attr_emit_prob) {
            return cfg_err("attr_emit_prob", format!("must be in [0,1], got {}", self.attr_emit_prob));
        }
        if !(self.prototype_scale > 0.0) {
            return cfg_err("prototype_scale", "must be positive".into());
        }
        if self.noise_sigma < 0.0 {
            return cfg_err("noise_sigma", "must be nonnegative".into());
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return cfg_err(
                "min_regions",
                format!("need 1 <= min <= max, got {}..{}", self.min_regions, self.max_regions),
            );
        }
        if self.min_regions < self.anchors.len() + 2 {
            return cfg_err(
                "min_regions",
                format!(
                    "must leave room for {} anchors plus two drawn regions",
                    self.anchors.len()
                ),
            );
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return cfg_err("image_width", "image dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return cfg_err(
                "background_fraction",
                format!("must be in [0,1), got {}", self.background_fraction),
            );
        }
        let check_class = |key: &str, c: usize| {
            if c == 0 || c >= self.num_classes {
                cfg_err(key, format!("class id {c} is not a foreground class"))
            } else {
                Ok(())
            }
        };
        for (i, a) in self.anchors.iter().enumerate() {
            check_class(&format!("anchors[{i}]"), *a)?;
        }
        for (i, p) in self.confusable.iter().enumerate() {
            check_class(&format!("confusable[{i}].a"), p.a)?;
            check_class(&format!("confusable[{i}].b"), p.b)?;
            if p.a == p.b {
                return cfg_err(&format!("confusable[{i}]"), "pair members must differ".into());
            }
            if p.epsilon < 0.0 || p.epsilon > self.prototype_scale {
                return cfg_err(
                    &format!("confusable[{i}].epsilon"),
                    format!(
                        "epsilon {} exceeds prototype scale {}",
                        p.epsilon, self.prototype_scale
                    ),
                );
            }
        }
        for (i, r) in self.context_rules.iter().enumerate() {
            check_class(&format!("context_rules[{i}].class"), r.class)?;
            check_class(&format!("context_rules[{i}].companion"), r.companion)?;
            if !(0.0..=1.0).contains(&r.prob) {
                return cfg_err(&format!("context_rules[{i}].prob"), "must be in [0,1]".into());
            }
        }
        for (i, r) in self.spatial_rules.iter().enumerate() {
            check_class(&format!("spatial_rules[{i}].class"), r.class)?;
            if !(0.0..=1.0).contains(&r.band[0]) || !(0.0..=1.0).contains(&r.band[1]) || r.band[0] >= r.band[1]
            {
                return cfg_err(
                    &format!("spatial_rules[{i}].band"),
                    format!("need 0 <= lo < hi <= 1, got [{}, {}]", r.band[0], r.band[1]),
                );
            }
        }
        Ok(())
    }
}

/// A fully materialized world: prototypes, draw weights, attribute
/// profiles, and name lists for the annotation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub predicate_names: Vec<String>,
    /// C×D; row 0 is the background prototype.
    pub prototypes: DenseMatrix,
    /// Normalized draw weights per class (anchors and rule companions are
    /// zero: they enter scenes by rule, not by draw).
    pub class_weights: Vec<f64>,
    /// Shared-attribute group id per class; background has none.
    pub attr_group_of: Vec<Option<usize>>,
    /// Attribute ids each class can be annotated with.
    pub attr_profile: Vec<Vec<usize>>,
    pub seed: u64,
}

/// One sampled scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub batch: RegionBatch,
    pub image_size: (f64, f64),
}

const PROTOTYPE_ATTEMPTS: usize = 1000;

/// Builds a world deterministically from config and seed. Prototypes of
/// non-confusable classes are rejected until they sit more than 3 sigma
/// apart; confusable pairs are placed exactly epsilon apart.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    config.validate("world")?;
    let c = config.num_classes;
    let d = config.feature_dim;
    let mut rng = seeded_rng(seed, "world/prototypes");

    // Classes whose prototype is tied to another one.
    let mut tied_to: Vec<Option<(usize, f64)>> = vec![None; c];
    for p in &config.confusable {
        tied_to[p.b] = Some((p.a, p.epsilon));
    }

    let min_sep = 3.0 * config.noise_sigma;
    let mut prototypes = DenseMatrix::zeros(c, d);
    for class in 0..c {
        if let Some((base, eps)) = tied_to[class] {
            if base >= class {
                return Err(Error::config(
                    "world.confusable",
                    format!("pair base {base} must precede tied class {class}"),
                ));
            }
            let dir = random_unit(&mut rng, d);
            for k in 0..d {
                *prototypes.at_mut(class, k) = prototypes.at(base, k) + eps * dir[k];
            }
            continue;
        }
        let mut placed = false;
        for _ in 0..PROTOTYPE_ATTEMPTS {
            let candidate = random_sphere_point(&mut rng, d, config.prototype_scale);
            let ok = (0..class).all(|other| {
                if tied_to[other].is_some() {
                    return true;
                }
                let dist = (0..d)
                    .map(|k| (candidate[k] - prototypes.at(other, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist > min_sep
            });
            if ok {
                for k in 0..d {
                    *prototypes.at_mut(class, k) = candidate[k];
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Domain(format!(
                "could not separate prototype for class {class} by more than {min_sep}; \
                 reduce noise_sigma or num_classes"
            )));
        }
    }

    // Long-tail draw weights over foreground classes, with rule-driven
    // classes removed from the random pool.
    let mut by_rule: Vec<bool> = vec![false; c];
    for a in &config.anchors {
        by_rule[*a] = true;
    }
    for r in &config.context_rules {
        by_rule[r.companion] = true;
    }
    let mut weights = vec![0.0; c];
    let mut rank = 0usize;
    for class in 1..c {
        if by_rule[class] {
            continue;
        }
        rank += 1;
        weights[class] = (rank as f64).powf(-config.long_tail_exponent);
    }
    let fg_total: f64 = weights.iter().sum();
    if fg_total == 0.0 {
        return Err(Error::config(
            "world.num_classes",
            "every foreground class is rule-driven; nothing left to draw",
        ));
    }
    let fg_scale = (1.0 - config.background_fraction) / fg_total;
    for w in weights.iter_mut() {
        *w *= fg_scale;
    }
    weights[0] = config.background_fraction;

    // Attribute groups: foreground classes round-robin, attributes split
    // into contiguous blocks per group.
    let mut attr_group_of = vec![None; c];
    let mut attr_profile: Vec<Vec<usize>> = vec![Vec::new(); c];
    let per_group = (config.num_attributes / config.attr_groups).max(1);
    for class in 1..c {
        let g = (class - 1) % config.attr_groups;
        attr_group_of[class] = Some(g);
        let lo = (g * per_group).min(config.num_attributes.saturating_sub(1));
        let hi = ((g + 1) * per_group).min(config.num_attributes);
        attr_profile[class] = (lo..hi).collect();
    }

    let class_names: Vec<String> = (0..c)
        .map(|i| {
            if i == 0 {
                "background".to_string()
            } else {
                format!("class{i:02}")
            }
        })
        .collect();
    let attribute_names = (0..config.num_attributes).map(|i| format!("attr{i:02}")).collect();
    let mut predicate_names: Vec<String> = config
        .context_rules
        .iter()
        .map(|r| r.predicate.clone())
        .collect();
    predicate_names.sort();
    predicate_names.dedup();

    Ok(WorldSpec {
        config: config.clone(),
        class_names,
        attribute_names,
        predicate_names,
        prototypes,
        class_weights: weights,
        attr_group_of,
        attr_profile,
        seed,
    })
}

fn random_unit(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| sample_normal(rng, 0.0, 1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn random_sphere_point(rng: &mut ChaCha12Rng, d: usize, radius: f64) -> Vec<f64> {
    random_unit(rng, d).into_iter().map(|x| x * radius).collect()
}

fn weighted_draw(rng: &mut ChaCha12Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.config.image_width, self.config.image_height)
    }

    /// The vocabulary the annotation pipeline indexes everything by.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(
            self.class_names.clone(),
            self.attribute_names.clone(),
            self.predicate_names.clone(),
        )
    }

    /// Classes grouped by shared attribute profile, for cohesion metrics.
    pub fn attribute_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.config.attr_groups];
        for (class, g) in self.attr_group_of.iter().enumerate() {
            if let Some(g) = g {
                groups[*g].push(class);
            }
        }
        groups.retain(|g| !g.is_empty());
        groups
    }

    fn spatial_band(&self, class: usize) -> Option<[f64; 2]> {
        self.config
            .spatial_rules
            .iter()
            .find(|r| r.class == class)
            .map(|r| r.band)
    }
}

/// Samples one scene: anchors, weighted class draws, rule companions,
/// band-constrained boxes, prototype-plus-noise features.
pub fn generate_scene(world: &WorldSpec, seed: u64) -> SyntheticScene {
    let cfg = &world.config;
    let mut rng = seeded_rng(seed, "scene");
    let n = rng.gen_range(cfg.min_regions..=cfg.max_regions);

    let mut classes = Vec::with_capacity(n);
    classes.extend_from_slice(&cfg.anchors);
    while classes.len() < n {
        classes.push(weighted_draw(&mut rng, &world.class_weights));
    }

    // Context companions: one Bernoulli draw per rule and scene (consumed
    // unconditionally so the stream layout is fixed). When the draw fires
    // and the rule's class is present, the companion replaces the last
    // filler region, so every instance of the class sees its companion
    // with exactly the configured probability.
    let is_filler = |class: usize, cfg: &WorldConfig| {
        class == 0
            || (!cfg.anchors.contains(&class)
                && cfg.context_rules.iter().all(|r| r.class != class && r.companion != class)
                && cfg.confusable.iter().all(|p| p.a != class && p.b != class))
    };
    for rule in &cfg.context_rules {
        let fired = rng.gen::<f64>() < rule.prob;
        if !fired || !classes.contains(&rule.class) || classes.contains(&rule.companion) {
            continue;
        }
        let slot = (0..classes.len()).rev().find(|&j| is_filler(classes[j], cfg));
        if let Some(j) = slot {
            classes[j] = rule.companion;
        }
    }

    let (iw, ih) = world.image_size();
    let mut boxes = Vec::with_capacity(classes.len());
    let mut fg_prob = Vec::with_capacity(classes.len());
    let mut features = DenseMatrix::zeros(classes.len(), cfg.feature_dim);
    for (i, &class) in classes.iter().enumerate() {
        let w = rng.gen_range(0.08..0.25) * iw;
        let h = rng.gen_range(0.08..0.25) * ih;
        let x = rng.gen_range(0.0..(iw - w));
        let y = match world.spatial_band(class) {
            Some([lo, hi]) => {
                let y_max = (hi * ih).min(ih - h);
                let y_min = (lo * ih).min(y_max);
                if y_max > y_min {
                    rng.gen_range(y_min..y_max)
                } else {
                    y_min
                }
            }
            None => rng.gen_range(0.0..(ih - h)),
        };
        boxes.push([x, y, w, h]);
        fg_prob.push(if class == 0 {
            rng.gen_range(0.05..0.35)
        } else {
            rng.gen_range(0.65..0.95)
        });
        let row = features.row_mut(i);
        for k in 0..cfg.feature_dim {
            row[k] = world.prototypes.at(class, k)
                + if cfg.noise_sigma > 0.0 {
                    sample_normal(&mut rng, 0.0, cfg.noise_sigma)
                } else {
                    0.0
                };
        }
    }

    SyntheticScene {
        batch: RegionBatch {
            features,
            gt_classes: classes,
            boxes,
            fg_prob,
        },
        image_size: (iw, ih),
    }
}

/// Annotation records for one scene: attribute draws from the class
/// profile, relation records for context rules whose companion is present.
/// Uses its own labelled stream so emitting annotations never perturbs the
/// scene itself.
pub fn scene_annotations(world: &WorldSpec, scene: &SyntheticScene, seed: u64) -> Vec<AnnotationRecord> {
    let cfg = &world.config;
    let mut rng = seeded_rng(seed, "annotations");
    let image = format!("scene-{seed:016x}");
    let mut records = Vec::new();
    for (i, &class) in scene.batch.gt_classes.iter().enumerate() {
        if class == 0 {
            continue;
        }
        let mut attributes = Vec::new();
        for &a in &world.attr_profile[class] {
            if rng.gen::<f64>() < cfg.attr_emit_prob {
                attributes.push(world.attribute_names[a].clone());
            }
        }
        let mut relations = Vec::new();
        for rule in &cfg.context_rules {
            if rule.class == class && scene.batch.gt_classes.contains(&rule.companion) {
                relations.push(Relation {
                    predicate: rule.predicate.clone(),
                    object_class: world.class_names[rule.companion].clone(),
                });
            }
        }
        let _ = i;
        records.push(AnnotationRecord {
            image: image.clone(),
            class: world.class_names[class].clone(),
            attributes,
            relations,
        });
    }
    records
}

/// A corpus of annotation records over `num_scenes` scenes; scene `i` uses
/// the stream labelled `annot/scene{i}` under the given root seed.
pub fn annotation_corpus(world: &WorldSpec, num_scenes: usize, root_seed: u64) -> Vec<AnnotationRecord> {
    let mut records = Vec::new();
    for i in 0..num_scenes {
        let scene_seed = crate::rng::component_seed(root_seed, &format!("annot/scene{i}"));
        let scene = generate_scene(world, scene_seed);
        records.extend(scene_annotations(world, &scene, scene_seed));
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::ingest_annotations;

    fn base_config() -> WorldConfig {
        WorldConfig {
            num_classes: 8,
            feature_dim: 16,
            num_attributes: 9,
            attr_groups: 3,
            noise_sigma: 0.05,
            min_regions: 6,
            max_regions: 12,
            long_tail_exponent: 1.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn world_generation_is_deterministic() {
        let cfg = base_config();
        let w1 = generate_world(&cfg, 42).unwrap();
        let w2 = generate_world(&cfg, 42).unwrap();
        assert_eq!(w1.prototypes.data(), w2.prototypes.data());
        assert_eq!(w1.class_weights, w2.class_weights);
    }

    #[test]
    fn prototypes_without_confusables_are_well_separated() {
        let cfg = base_config();
        let w = generate_world(&cfg, 7).unwrap();
        let min_sep = 3.0 * cfg.noise_sigma;
        for i in 0..cfg.num_classes {
            for j in (i + 1)..cfg.num_classes {
                let dist = (0..cfg.feature_dim)
                    .map(|k| (w.prototypes.at(i, k) - w.prototypes.at(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > min_sep, "classes {i},{j} separated by {dist}");
            }
        }
    }

    #[test]
    fn confusable_pair_sits_exactly_epsilon_apart() {
        let mut cfg = base_config();
        cfg.confusable = vec![ConfusablePair {
            a: 2,
            b: 3,
            epsilon: 0.05,
        }];
        let w = generate_world(&cfg, 11).unwrap();
        let dist = (0..cfg.feature_dim)
            .map(|k| (w.prototypes.at(2, k) - w.prototypes.at(3, k)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dist - 0.05).abs() < 1e-12, "distance {dist}");
    }

    #[test]
    fn oversized_epsilon_is_a_config_error() {
        let mut cfg = base_config();
        cfg.confusable = vec![ConfusablePair {
            a: 2,
            b: 3,
            epsilon: 5.0,
        }];
        let err = generate_world(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn zero_sigma_scenes_reproduce_prototypes_exactly() {
        let mut cfg = base_config();
        cfg.noise_sigma = 0.0;
        let w = generate_world(&cfg, 3).unwrap();
        let scene = generate_scene(&w, 9);
        for (i, &class) in scene.batch.gt_classes.iter().enumerate() {
            for k in 0..cfg.feature_dim {
                assert_eq!(scene.batch.features.at(i, k), w.prototypes.at(class, k));
            }
        }
    }

    #[test]
    fn flat_exponent_gives_uniform_frequencies() {
        let mut cfg = base_config();
        cfg.long_tail_exponent = 0.0;
        cfg.background_fraction = 0.0;
        let w = generate_world(&cfg, 5).unwrap();
        let mut counts = vec![0u64; cfg.num_classes];
        let mut total = 0u64;
        for s in 0..2000 {
            let scene = generate_scene(&w, 100_000 + s);
            for &c in &scene.batch.gt_classes {
                counts[c] += 1;
                total += 1;
            }
        }
        let fg_classes = cfg.num_classes - 1;
        let expect = 1.0 / fg_classes as f64;
        for class in 1..cfg.num_classes {
            let freq = counts[class] as f64 / total as f64;
            assert!(
                (freq - expect).abs() < 0.02,
                "class {class}: {freq} vs {expect}"
            );
        }
    }

    #[test]
    fn long_tail_exponent_orders_frequencies() {
        let mut cfg = base_config();
        cfg.long_tail_exponent = 1.5;
        let w = generate_world(&cfg, 5).unwrap();
        // Rank-1 class weight must dominate the last rank.
        assert!(w.class_weights[1] > 3.0 * w.class_weights[cfg.num_classes - 1]);
    }

    #[test]
    fn spatial_band_constrains_box_tops() {
        let mut cfg = base_config();
        cfg.spatial_rules = vec![SpatialRule {
            class: 4,
            band: [0.0, 0.2],
        }];
        cfg.long_tail_exponent = 0.0;
        let w = generate_world(&cfg, 13).unwrap();
        let mut seen = 0;
        for s in 0..200 {
            let scene = generate_scene(&w, 7000 + s);
            for (i, &class) in scene.batch.gt_classes.iter().enumerate() {
                if class == 4 {
                    seen += 1;
                    let y_frac = scene.batch.boxes[i][1] / cfg.image_height;
                    assert!(y_frac <= 0.2, "box top at {y_frac}");
                }
            }
        }
        assert!(seen > 10, "rule class never drawn");
    }

    #[test]
    fn scene_region_count_respects_bounds() {
        let cfg = base_config();
        let w = generate_world(&cfg, 17).unwrap();
        for s in 0..100 {
            let scene = generate_scene(&w, 300 + s);
            let n = scene.batch.num_regions();
            assert!(n >= cfg.min_regions && n <= cfg.max_regions);
            for b in &scene.batch.boxes {
                assert!(b[2] > 0.0 && b[3] > 0.0);
                assert!(b[0] >= 0.0 && b[0] + b[2] <= cfg.image_width + 1e-9);
                assert!(b[1] >= 0.0 && b[1] + b[3] <= cfg.image_height + 1e-9);
            }
        }
    }

    #[test]
    fn recovered_cooccurrence_matches_configured_probability() {
        let mut cfg = base_config();
        cfg.num_classes = 9;
        cfg.context_rules = vec![ContextRule {
            class: 2,
            companion: 8,
            prob: 0.7,
            predicate: "with".into(),
        }];
        let w = generate_world(&cfg, 19).unwrap();
        let records = annotation_corpus(&w, 10_000, 19);
        let ingest = ingest_annotations(&records, &w.vocabulary()).unwrap();

        let class_instances = records
            .iter()
            .filter(|r| r.class == w.class_names[2])
            .count() as f64;
        let with_relation: u64 = ingest
            .triples
            .entries
            .iter()
            .filter(|t| t.subject == 2 && t.object == 8)
            .map(|t| t.count)
            .sum();
        let recovered = with_relation as f64 / class_instances;
        assert!(
            (recovered - 0.7).abs() < 0.02,
            "recovered co-occurrence {recovered}"
        );
    }

    #[test]
    fn annotations_do_not_perturb_scenes() {
        let cfg = base_config();
        let w = generate_world(&cfg, 23).unwrap();
        let a = generate_scene(&w, 55);
        let _ = scene_annotations(&w, &a, 55);
        let b = generate_scene(&w, 55);
        assert_eq!(a.batch.features.data(), b.batch.features.data());
        assert_eq!(a.batch.gt_classes, b.batch.gt_classes);
    }

    #[test]
    fn attribute_groups_partition_foreground_classes() {
        let cfg = base_config();
        let w = generate_world(&cfg, 29).unwrap();
        let groups = w.attribute_groups();
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            for &c in g {
                assert!(c > 0);
                assert!(seen.insert(c), "class {c} in two groups");
            }
        }
        assert_eq!(seen.len(), cfg.num_classes - 1);
        // Same group implies identical attribute profile here.
        for g in &groups {
            for w2 in g.windows(2) {
                assert_eq!(w.attr_profile[w2[0]], w.attr_profile[w2[1]]);
            }
        }
    }
}
