//! Command-line front end: validate and summarize datasets, generate
//! synthetic corpora, decode dense map bundles, score predictions, and
//! benchmark the decoder.
//!
//! Exit codes: 0 success, 1 a validation run found violations, 2 structural
//! or file errors (including unusable flags).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use h2o_core::datamodel::{
    compute_stats, read_dataset, read_predictions, write_dataset, write_predictions,
};
use h2o_core::decoder::{
    bench_decode, decode, read_bundle, read_detections, write_bundle, write_detections,
    DecodeConfig,
};
use h2o_core::dense::build_anchor_grid;
use h2o_core::evaluator::{evaluate, EvalConfig, EvalMode, EvalReport, EvalScenario, RoleVariant};
use h2o_core::synthgen::{
    generate_scene, perturb_bundle, perturb_detections, render_perfect_bundle, NoiseModel,
    SynthConfig,
};
use h2o_core::taxonomy::{validate_scene, Taxonomy};
use h2o_core::{PredictedTriplet, Real, Scene};

#[derive(Parser)]
#[command(
    name = "h2o",
    version,
    about = "Interaction detection toolkit: datasets, dense-map decoding, scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset against the annotation rules (R1-R6).
    Validate {
        /// Dataset document (JSON).
        dataset: PathBuf,
    },
    /// Print corpus statistics.
    Stats {
        /// Dataset document (JSON).
        dataset: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print the verb registry as a table.
    Taxonomy,
    /// Generate a synthetic corpus: dataset, bundles, detections, manifest.
    Synth(SynthArgs),
    /// Decode dense map bundles into scored triplets.
    Decode(DecodeArgs),
    /// Score predictions against a ground-truth dataset.
    Eval(EvalArgs),
    /// Time the decoder across interaction counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed range, e.g. `0..20` (end exclusive) or a single seed.
    #[arg(long, default_value = "0..10")]
    seeds: String,
    /// Gaussian sigma on verb/presence planes.
    #[arg(long, default_value_t = 0.0)]
    noise_prob: f64,
    /// Gaussian sigma on embedding planes.
    #[arg(long, default_value_t = 0.0)]
    noise_embed: f64,
    /// Gaussian sigma on detection box coordinates (pixels).
    #[arg(long, default_value_t = 0.0)]
    noise_box: f64,
}

#[derive(Args)]
struct DecodeArgs {
    /// One bundle file (pairs with --detections).
    #[arg(long, conflicts_with = "manifest", requires = "detections")]
    bundle: Option<PathBuf>,
    /// Detections for --bundle.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Manifest written by `synth`; decodes every scene it lists.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Triplet score floor.
    #[arg(long)]
    floor: Option<f64>,
    /// Detection count cap after suppression.
    #[arg(long)]
    topk: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth dataset document.
    gt: PathBuf,
    /// Predictions file.
    predictions: PathBuf,
    /// Target-class handling.
    #[arg(long, value_enum, default_value_t = ModeArg::Original)]
    mode: ModeArg,
    /// Role variant: 1 (strict empty-target matching) or 2 (lenient).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
    role: u8,
    /// IoU threshold for box matches.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Write the JSON report here (and print the table); default prints
    /// the JSON report to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Original,
    Objectness,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated ground-truth interaction counts.
    #[arg(long, default_value = "1,10,50")]
    interactions: String,
    /// Timing repetitions per count (minimum is reported).
    #[arg(long, default_value_t = 30)]
    repetitions: usize,
}

/// Scene inventory tying bundles to their detection files, as written by
/// `synth` and consumed by `decode --manifest`. Paths are relative to the
/// manifest's directory.
#[derive(Serialize, Deserialize)]
struct Manifest {
    scenes: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    image_id: u64,
    bundle: String,
    detections: String,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Validate { dataset } => cmd_validate(&dataset),
        Command::Stats { dataset, json } => cmd_stats(&dataset, json),
        Command::Taxonomy => cmd_taxonomy(),
        Command::Synth(args) => cmd_synth(&args),
        Command::Decode(args) => cmd_decode(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench(args) => cmd_bench(&args),
    }
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn cmd_validate(dataset: &Path) -> Result<u8> {
    let scenes = read_scenes(dataset)?;
    let tax = Taxonomy::builtin();
    let mut total = 0usize;
    for scene in &scenes {
        let violations = validate_scene(scene, tax)
            .with_context(|| format!("validating image {}", scene.image_id))?;
        for v in &violations {
            println!("image {}: {} subject {}: {}", scene.image_id, v.rule, v.subject, v.message);
        }
        total += violations.len();
    }
    println!("{total} violations");
    Ok(if total == 0 { 0 } else { 1 })
}

fn cmd_stats(dataset: &Path, json: bool) -> Result<u8> {
    let scenes = read_scenes(dataset)?;
    let stats = compute_stats(&scenes, Taxonomy::builtin())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        println!("images:            {}", stats.n_images);
        println!("persons:           {}", stats.n_persons);
        println!("objects:           {}", stats.n_objects);
        println!("persons per image: {:.3}", stats.persons_per_image);
        println!("objects per image: {:.3}", stats.objects_per_image);
        println!("interactions by category:");
        for (category, count) in &stats.interactions_per_category {
            println!("  {:<18} {count}", format!("{category:?}"));
        }
    }
    Ok(0)
}

fn cmd_taxonomy() -> Result<u8> {
    let tax = Taxonomy::builtin();
    println!(
        "{:>3}  {:<30} {:<18} {:<15} {}",
        "id", "verb", "category", "target", "instrument"
    );
    for verb in tax.verbs() {
        println!(
            "{:>3}  {:<30} {:<18} {:<15} {}",
            verb.id,
            verb.name,
            format!("{:?}", verb.category),
            format!("{:?}", verb.rule.kind),
            if verb.rule.instrument_allowed { "yes" } else { "no" }
        );
    }
    Ok(0)
}

fn parse_seed_range(text: &str) -> Result<std::ops::Range<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (start, end) = (a.trim().parse::<u64>()?, b.trim().parse::<u64>()?);
        if start >= end {
            bail!("empty seed range {text:?}");
        }
        Ok(start..end)
    } else {
        let seed = text.trim().parse::<u64>()?;
        Ok(seed..seed + 1)
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<u8> {
    let seeds = parse_seed_range(&args.seeds)?;
    let config = SynthConfig {
        noise: NoiseModel {
            sigma_prob: args.noise_prob,
            sigma_embed: args.noise_embed,
            sigma_box: args.noise_box,
        },
        ..SynthConfig::default()
    };
    let grid = build_anchor_grid::<Real>(config.image_size.0, config.image_size.1, &config.grid)?;
    let tax = Taxonomy::builtin();

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut scenes = Vec::new();
    let mut manifest = Manifest { scenes: Vec::new() };
    for seed in seeds {
        let scene = generate_scene::<Real>(&config, seed)?;
        let (mut bundle, mut dets) =
            render_perfect_bundle(&scene, &grid, tax, config.embedding_dim)?;
        perturb_bundle(&mut bundle, &config.noise, seed);
        perturb_detections(&mut dets, &config.noise, config.image_size, seed);

        let bundle_name = format!("scene_{seed}.h2odm");
        let dets_name = format!("scene_{seed}.dets.json");
        write_bundle(&bundle, args.out.join(&bundle_name))?;
        write_detections(&dets, args.out.join(&dets_name))?;
        manifest.scenes.push(ManifestEntry {
            image_id: scene.image_id,
            bundle: bundle_name,
            detections: dets_name,
        });
        scenes.push(scene);
    }

    write_dataset(&scenes, args.out.join("gt.h2o"))?;
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(args.out.join("manifest.json"), manifest_json + "\n")?;
    println!(
        "wrote {} scenes to {} (gt.h2o, manifest.json, bundles, detections)",
        scenes.len(),
        args.out.display()
    );
    Ok(0)
}

fn decode_config(args: &DecodeArgs) -> DecodeConfig<Real> {
    let mut config = DecodeConfig::default();
    if let Some(floor) = args.floor {
        config.score_floor = floor;
    }
    if let Some(topk) = args.topk {
        config.nms.top_k = topk;
    }
    config
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")
}

fn cmd_decode(args: &DecodeArgs) -> Result<u8> {
    let config = decode_config(args);
    let tax = Taxonomy::builtin();

    let predictions: Vec<PredictedTriplet> = match (&args.bundle, &args.manifest) {
        (Some(bundle_path), None) => {
            let detections_path = args.detections.as_ref().expect("clap enforces pairing");
            let bundle = read_bundle::<Real>(bundle_path)
                .with_context(|| format!("reading bundle {}", bundle_path.display()))?;
            let dets = read_detections::<Real>(detections_path)
                .with_context(|| format!("reading detections {}", detections_path.display()))?;
            decode(&bundle, &dets, tax, &config)?
        }
        (None, Some(manifest_path)) => {
            let text = std::fs::read_to_string(manifest_path)
                .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
            let manifest: Manifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing manifest {}", manifest_path.display()))?;
            let base = manifest_path.parent().unwrap_or(Path::new("."));

            use rayon::prelude::*;
            let per_scene: Vec<Result<Vec<PredictedTriplet>>> = thread_pool(args.jobs)?.install(|| {
                manifest
                    .scenes
                    .par_iter()
                    .map(|entry| {
                        let bundle = read_bundle::<Real>(base.join(&entry.bundle))
                            .with_context(|| format!("reading bundle {}", entry.bundle))?;
                        let dets = read_detections::<Real>(base.join(&entry.detections))
                            .with_context(|| format!("reading detections {}", entry.detections))?;
                        Ok(decode(&bundle, &dets, tax, &config)?)
                    })
                    .collect()
            });
            let mut all = Vec::new();
            for scene_preds in per_scene {
                all.extend(scene_preds?);
            }
            all
        }
        (None, None) => bail!("pass either --bundle with --detections, or --manifest"),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    match &args.out {
        Some(path) => {
            write_predictions(&predictions, path)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} predictions to {}", predictions.len(), path.display());
        }
        None => print!(
            "{}",
            h2o_core::datamodel::predictions_to_string(&predictions)?
        ),
    }
    Ok(0)
}

fn render_report_table(report: &EvalReport) -> String {
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:>3}  {:<30} {:>9} {:>8} {:>9} {:>8}",
        "id", "verb", "gt_agent", "gt_role", "ap_agent", "ap_role"
    );
    let cell = |ap: Option<f64>| match ap {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    };
    for row in &report.verbs {
        let _ = writeln!(
            table,
            "{:>3}  {:<30} {:>9} {:>8} {:>9} {:>8}",
            row.verb_id,
            row.verb,
            row.n_gt_agent,
            row.n_gt_role,
            cell(row.ap_agent),
            cell(row.ap_role)
        );
    }
    let _ = writeln!(
        table,
        "scenario {} at IoU {}: mean AP agent {}, mean AP role {}",
        report.scenario,
        report.iou_threshold,
        cell(report.mean_ap_agent),
        cell(report.mean_ap_role)
    );
    table
}

fn cmd_eval(args: &EvalArgs) -> Result<u8> {
    let scenes = read_scenes(&args.gt)?;
    let predictions = read_predictions::<Real>(&args.predictions)
        .with_context(|| format!("reading predictions {}", args.predictions.display()))?;
    let config = EvalConfig {
        scenario: EvalScenario {
            mode: match args.mode {
                ModeArg::Original => EvalMode::Original,
                ModeArg::Objectness => EvalMode::Objectness,
            },
            role: match args.role {
                1 => RoleVariant::Role1,
                _ => RoleVariant::Role2,
            },
        },
        iou_threshold: args.iou,
    };

    let report = thread_pool(args.jobs)?
        .install(|| evaluate(&scenes, &predictions, Taxonomy::builtin(), &config))?;

    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => {
            std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", render_report_table(&report));
        }
        None => print!("{json}"),
    }
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> Result<u8> {
    let counts: Vec<usize> = args
        .interactions
        .split(',')
        .map(|t| t.trim().parse::<usize>().context("parsing --interactions"))
        .collect::<Result<_>>()?;
    let rows = bench_decode(&counts, args.repetitions)?;
    println!("{:>12} {:>14} {:>9}", "interactions", "min_decode_us", "triplets");
    for row in &rows {
        println!(
            "{:>12} {:>14.1} {:>9}",
            row.interactions,
            row.min_decode.as_secs_f64() * 1e6,
            row.triplets
        );
    }
    Ok(0)
}
