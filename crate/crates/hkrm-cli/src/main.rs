//! `hkrm` — build prior graphs, generate synthetic worlds, train and
//! evaluate the knowledge-routed classifier, and inspect learned edges.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure. All outputs are written atomically (temp file + rename) to the
//! paths given by `--out`/`--out-dir`; inputs are never modified.

mod logging;

use clap::{Parser, Subcommand};
use hkrm::annotations::{ingest_annotations, read_annotations_file, read_name_list, write_annotations, Vocabulary};
use hkrm::config::parse_config;
use hkrm::error::Error;
use hkrm::graphs::{build_attribute_graph, build_relationship_graph, graph_to_csv, save_graph, AttributeEdgeMode};
use hkrm::matrix::DenseMatrix;
use hkrm::metrics::{
    evaluate_seeded, history_to_csv, matrix_to_csv, metrics_to_json, MetricsFile,
    METRICS_SCHEMA_VERSION,
};
use hkrm::model::{HkrmModel, BACKGROUND_CLASS};
use hkrm::explicit::target_edges;
use hkrm::implicit::geometry_features;
use hkrm::train::{load_checkpoint, train, Ablation};
use hkrm::world::{annotation_corpus, generate_scene, generate_world};
use logging::{LogFormat, Logger};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

fn version_string() -> &'static str {
    static V: OnceLock<String> = OnceLock::new();
    V.get_or_init(|| {
        format!(
            "{} (schemas: checkpoint={}, graph={}, config={}, metrics={})",
            env!("CARGO_PKG_VERSION"),
            hkrm::versions::CHECKPOINT,
            hkrm::versions::GRAPH,
            hkrm::versions::CONFIG,
            hkrm::versions::METRICS,
        )
    })
}

#[derive(Parser)]
#[command(name = "hkrm", version = version_string(), about = "Knowledge-routed region graph modules")]
struct Cli {
    /// Log format for progress events (stderr).
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Text)]
    log: LogFormat,
    /// Worker threads for scene generation during evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prior class-to-class graph from annotation records.
    BuildGraph {
        /// Newline-delimited JSON annotation file.
        #[arg(long)]
        annotations: PathBuf,
        /// attribute | relationship
        #[arg(long)]
        kind: String,
        /// Attribute graphs only: emit 1 - JS instead of raw divergence.
        #[arg(long)]
        similarity: bool,
        /// Keep only the N most frequent attributes when inferring the
        /// vocabulary (0 keeps all).
        #[arg(long, default_value_t = 0)]
        top_attrs: usize,
        /// Optional class list (one name per line); inferred when absent.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Optional attribute list.
        #[arg(long)]
        attributes: Option<PathBuf>,
        /// Optional predicate list.
        #[arg(long)]
        predicates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV rendering for inspection.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Materialize a world from a run config and write it as JSON.
    GenWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also sample an annotation corpus into this NDJSON file.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Scenes to sample for the corpus.
        #[arg(long, default_value_t = 100)]
        annotation_scenes: usize,
    },
    /// Train one ablation arm; writes checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// baseline | attr | rel | spatial | all
        #[arg(long, default_value = "all")]
        ablation: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on freshly generated scenes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        /// Write the metrics JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump predicted, target and normalized edge matrices as CSV.
    InspectEdges {
        #[arg(long)]
        model: PathBuf,
        /// attribute | relationship | implicit
        #[arg(long)]
        module: String,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Convert a metrics JSON file to plot-ready CSV.
    ExportMetrics {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let logger = Logger::new(cli.log);
    if let Err(e) = run(cli, &logger) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numeric(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn atomic_write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    hkrm::io_util::atomic_write(path, text.as_bytes())
}

fn run(cli: Cli, logger: &Logger) -> Result<(), Error> {
    match cli.command {
        Command::BuildGraph {
            annotations,
            kind,
            similarity,
            top_attrs,
            classes,
            attributes,
            predicates,
            out,
            csv,
        } => {
            let records = read_annotations_file(&annotations)?;
            let inferred = Vocabulary::infer(
                &records,
                (top_attrs > 0).then_some(top_attrs),
                None,
            );
            let vocab = Vocabulary::new(
                match classes {
                    Some(p) => read_name_list(&p)?,
                    None => inferred.classes,
                },
                match attributes {
                    Some(p) => read_name_list(&p)?,
                    None => inferred.attributes,
                },
                match predicates {
                    Some(p) => read_name_list(&p)?,
                    None => inferred.predicates,
                },
            );
            let ingest = ingest_annotations(&records, &vocab)?;
            if ingest.report.total_skipped() > 0 {
                logger.event(
                    "skipped_names",
                    serde_json::to_value(&ingest.report).expect("report serializes"),
                );
            }
            let (graph, report) = match kind.as_str() {
                "attribute" => {
                    let mode = if similarity {
                        AttributeEdgeMode::Similarity
                    } else {
                        AttributeEdgeMode::Divergence
                    };
                    build_attribute_graph(&ingest.table, mode)?
                }
                "relationship" => build_relationship_graph(&ingest.triples)?,
                other => {
                    return Err(Error::Config {
                        key: "kind".into(),
                        message: format!("unknown graph kind `{other}`; expected attribute|relationship"),
                    })
                }
            };
            if !report.empty_classes.is_empty() || !report.zero_rows.is_empty() {
                logger.event(
                    "degenerate_classes",
                    serde_json::to_value(&report).expect("report serializes"),
                );
            }
            save_graph(&graph, &out)?;
            if let Some(csv_path) = csv {
                atomic_write_text(&csv_path, &graph_to_csv(&graph))?;
            }
            logger.event(
                "graph_written",
                json!({ "kind": kind, "classes": graph.num_classes(), "out": out.display().to_string() }),
            );
            Ok(())
        }

        Command::GenWorld {
            config,
            out,
            annotations,
            annotation_scenes,
        } => {
            let run_cfg = parse_config(&config)?;
            let world = generate_world(&run_cfg.world, run_cfg.seed)?;
            atomic_write_text(&out, &serde_json::to_string_pretty(&world).expect("world serializes"))?;
            if let Some(ann_path) = annotations {
                let records = annotation_corpus(&world, annotation_scenes, run_cfg.seed);
                atomic_write_text(&ann_path, &write_annotations(&records))?;
                logger.event(
                    "annotations_written",
                    json!({ "records": records.len(), "scenes": annotation_scenes }),
                );
            }
            logger.event(
                "world_written",
                json!({ "classes": world.num_classes(), "out": out.display().to_string() }),
            );
            Ok(())
        }

        Command::Train {
            config,
            ablation,
            out_dir,
        } => {
            let run_cfg = parse_config(&config)?;
            let ablation = Ablation::from_str(&ablation)?;
            std::fs::create_dir_all(&out_dir)?;
            let world = generate_world(&run_cfg.world, run_cfg.seed)?;
            let mut log_epoch = |r: &hkrm::metrics::EpochRecord| {
                logger.event(
                    "epoch",
                    serde_json::to_value(r).expect("record serializes"),
                );
            };
            let output = train(&world, &run_cfg, ablation, Some(&out_dir), Some(&mut log_epoch))?;
            let metrics = MetricsFile {
                schema_version: METRICS_SCHEMA_VERSION,
                ablation: ablation.as_str().to_string(),
                seed: run_cfg.seed,
                history: output.history.clone(),
                final_metrics: output.final_metrics.clone(),
            };
            atomic_write_text(&out_dir.join("metrics.json"), &metrics_to_json(&metrics))?;
            atomic_write_text(&out_dir.join("metrics.csv"), &history_to_csv(&output.history))?;
            atomic_write_text(
                &out_dir.join("config.toml"),
                &hkrm::config::normalized_toml(&run_cfg),
            )?;
            logger.event(
                "train_done",
                json!({
                    "ablation": ablation.as_str(),
                    "final_accuracy": output.final_metrics.overall_accuracy,
                    "out_dir": out_dir.display().to_string(),
                }),
            );
            Ok(())
        }

        Command::Eval {
            model,
            scenes,
            seed,
            out,
        } => {
            let (model, meta) = load_checkpoint(&model)?;
            let metrics = evaluate_seeded(&model, &meta.world, scenes, seed, cli.jobs)?;
            let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
            println!("{text}");
            if let Some(path) = out {
                atomic_write_text(&path, &text)?;
            }
            Ok(())
        }

        Command::InspectEdges {
            model,
            module,
            scene_seed,
            out_dir,
        } => {
            let (model, meta) = load_checkpoint(&model)?;
            std::fs::create_dir_all(&out_dir)?;
            let scene = generate_scene(&meta.world, scene_seed);
            inspect_edges(&model, &meta.world, &scene, &module, &out_dir, logger)
        }

        Command::ExportMetrics { metrics, out } => {
            let text = std::fs::read_to_string(&metrics)?;
            let file: MetricsFile = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: metrics.display().to_string(),
                message: format!("not a metrics file: {e}"),
            })?;
            atomic_write_text(&out, &history_to_csv(&file.history))?;
            logger.event("metrics_exported", json!({ "epochs": file.history.len() }));
            Ok(())
        }
    }
}

fn inspect_edges(
    model: &HkrmModel,
    world: &hkrm::world::WorldSpec,
    scene: &hkrm::world::SyntheticScene,
    module: &str,
    out_dir: &Path,
    logger: &Logger,
) -> Result<(), Error> {
    let fwd = model.forward(&scene.batch, scene.image_size)?;
    let gt = &scene.batch.gt_classes;
    let write = |name: &str, m: &DenseMatrix| -> Result<(), Error> {
        atomic_write_text(&out_dir.join(name), &matrix_to_csv(m))
    };
    let gt_column = DenseMatrix::from_fn(gt.len(), 1, |i, _| gt[i] as f64);
    write("gt_classes.csv", &gt_column)?;
    let _ = world;
    match module {
        "attribute" | "relationship" => {
            let (branch, forward) = if module == "attribute" {
                (model.attr.as_ref(), fwd.attr.as_ref())
            } else {
                (model.rel.as_ref(), fwd.rel.as_ref())
            };
            let (branch, forward) = match (branch, forward) {
                (Some(b), Some(f)) => (b, f),
                _ => {
                    return Err(Error::Domain(format!(
                        "checkpoint has no {module} branch"
                    )))
                }
            };
            let targets = target_edges(gt, &branch.prior)?;
            write(&format!("{module}_predicted.csv"), &forward.raw)?;
            write(&format!("{module}_target.csv"), &targets)?;
            write(&format!("{module}_adjacency.csv"), &forward.adjacency.weights)?;
        }
        "implicit" => {
            let (branch, forward) = match (&model.implicit, &fwd.implicit) {
                (Some(b), Some(f)) => (b, f),
                _ => return Err(Error::Domain("checkpoint has no implicit branch".into())),
            };
            let _ = branch;
            for (m, g) in forward.edges.per_graph.iter().enumerate() {
                write(&format!("implicit_graph{m}.csv"), g)?;
            }
            write("implicit_combined.csv", &forward.edges.combined)?;
            write("implicit_adjacency.csv", &forward.adjacency.weights)?;
            // Geometry input alongside, to make the dumps interpretable.
            let q = geometry_features(&scene.batch.boxes, scene.image_size, &scene.batch.fg_prob)?;
            write("geometry.csv", &q)?;
        }
        other => {
            return Err(Error::Config {
                key: "module".into(),
                message: format!("unknown module `{other}`; expected attribute|relationship|implicit"),
            })
        }
    }
    let fg = gt.iter().filter(|&&c| c != BACKGROUND_CLASS).count();
    logger.event(
        "edges_written",
        json!({ "module": module, "regions": gt.len(), "foreground": fg }),
    );
    Ok(())
}
