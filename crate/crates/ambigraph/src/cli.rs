//! Command-line front end: scene generation, single-method solving, batch
//! evaluation, and the Monte-Carlo trial driver.
//!
//! Exit codes: 0 success, 2 validation error, 3 solver failure,
//! 4 insufficient data.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::averaging::AveragingConfig;
use crate::formats::{
    self, decisions_csv, histogram_csv, metrics_csv, read_detections, trials_csv, write_json,
    DetectionsFile, MapFile,
};
use crate::harness::{
    self, evaluate_scene, generate_scene, largest_component, resolved_from_selections,
    run_baseline, run_trials, sfm_for_method, HarnessError, Method, SceneConfig,
};
use crate::multigraph::MultigraphError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_INSUFFICIENT_DATA: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "ambigraph",
    version,
    about = "Multi-view disambiguation of planar-marker pose ambiguity and marker-based SfM"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and write its detections file.
    Generate(GenerateArgs),
    /// Disambiguate a detections file with one method and reconstruct.
    Solve(SolveArgs),
    /// Run every method on a detections file with ground truth and write the
    /// metrics and ratio-histogram tables.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo precision trials over seeded synthetic scenes.
    Mc(McArgs),
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Number of markers.
    #[arg(long, default_value_t = 6)]
    markers: u32,
    /// Number of images.
    #[arg(long, default_value_t = 20)]
    images: u32,
    /// Corner noise sigma in pixels.
    #[arg(long = "noise-px", default_value_t = 0.0)]
    noise_px: f64,
    /// Marker side length in meters.
    #[arg(long, default_value_t = 0.18)]
    marker_size: f64,
    /// Use the small/distant-marker preset (more ambiguous detections).
    #[arg(long)]
    ambiguous: bool,
    /// RNG seed (the AMBIGRAPH_SEED environment variable overrides this).
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        let base = if self.ambiguous {
            SceneConfig::ambiguous_preset()
        } else {
            SceneConfig { marker_size: self.marker_size, ..SceneConfig::default() }
        };
        let seed = std::env::var("AMBIGRAPH_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(self.seed);
        SceneConfig {
            n_markers: self.markers,
            n_images: self.images,
            noise_sigma: self.noise_px,
            seed,
            ..base
        }
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Output detections file (JSON).
    #[arg(short, long)]
    output: PathBuf,
    /// Omit the ground-truth block.
    #[arg(long)]
    no_ground_truth: bool,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Input detections file (JSON).
    input: PathBuf,
    /// Disambiguation method.
    #[arg(long, default_value = "ours")]
    method: String,
    /// Reprojection-error-ratio threshold override (m2/m3 only).
    #[arg(long)]
    ratio_threshold: Option<f64>,
    /// Output directory (map.json, decisions.csv).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Input detections file with a ground-truth block.
    input: PathBuf,
    /// Output directory (metrics.csv, error_ratio_hist.csv, weight_ratio_hist.csv).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct McArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Number of seeded trials.
    #[arg(long, default_value_t = 20)]
    trials: u32,
    /// Worker threads for the trials.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

fn classify(err: &HarnessError) -> i32 {
    match err {
        HarnessError::Multigraph(MultigraphError::DisconnectedGraph(components)) => {
            eprintln!("error: detection graph is disconnected; components:");
            for c in components {
                eprintln!("  {c:?}");
            }
            EXIT_SOLVER
        }
        HarnessError::Selection(crate::selection::SelectionError::Multigraph(
            MultigraphError::DisconnectedGraph(components),
        )) => {
            eprintln!("error: detection graph is disconnected; components:");
            for c in components {
                eprintln!("  {c:?}");
            }
            EXIT_SOLVER
        }
        HarnessError::DisconnectedScene(_) | HarnessError::InvalidConfig(_) => {
            eprintln!("error: {err}");
            EXIT_VALIDATION
        }
        HarnessError::NoDecisions => {
            eprintln!("error: insufficient data ({err})");
            EXIT_INSUFFICIENT_DATA
        }
        other => {
            eprintln!("error: {other}");
            EXIT_SOLVER
        }
    }
}

fn cmd_generate(args: &GenerateArgs) -> i32 {
    let config = args.scene.config();
    let (gt, detections) = match generate_scene(&config) {
        Ok(r) => r,
        Err(e) => return classify(&e),
    };
    let file = DetectionsFile::from_detections(
        config.intrinsics,
        config.marker_size,
        &detections,
        (!args.no_ground_truth).then_some(&gt),
    );
    if let Err(e) = write_json(&args.output, &file) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    println!(
        "wrote {} ({} markers, {} images, {} detections)",
        args.output.display(),
        config.n_markers,
        file.images.len(),
        detections.len()
    );
    EXIT_OK
}

fn cmd_solve(args: &SolveArgs) -> i32 {
    let Some(method) = Method::parse(&args.method) else {
        eprintln!("error: unknown method {:?} (expected m1|m2|m3|m4|ours)", args.method);
        return EXIT_VALIDATION;
    };
    let file = match read_detections(&args.input) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let detections = match file.solve_detections() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SOLVER;
        }
    };
    if detections.is_empty() {
        eprintln!("error: insufficient data (no detections)");
        return EXIT_INSUFFICIENT_DATA;
    }
    let config = AveragingConfig::default();
    let output = match run_baseline(method, &detections, &config, args.ratio_threshold) {
        Ok(o) => o,
        Err(e) => return classify(&e),
    };
    let decided = output.selections.decisions.values().filter(|d| d.is_some()).count();
    if decided == 0 {
        eprintln!("error: insufficient data ({method:?} discarded every detection)");
        return EXIT_INSUFFICIENT_DATA;
    }

    if let Err(e) = std::fs::create_dir_all(&args.output) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }

    // map reconstruction on the resolved detections
    let specs: std::collections::BTreeMap<u32, crate::ppe::MarkerSpec> = detections
        .iter()
        .map(|d| (d.marker_id, crate::ppe::MarkerSpec { id: d.marker_id, size: file.marker_size_m }))
        .collect();
    let sfm = sfm_for_method(&output, &detections, &specs, &file.camera);
    let Some((map, _, _)) = sfm else {
        eprintln!("error: insufficient data (reconstruction failed)");
        return EXIT_INSUFFICIENT_DATA;
    };
    let resolved = largest_component(resolved_from_selections(&detections, &output.selections));
    println!(
        "{}: {} detections resolved, {} markers mapped, {} cameras localised",
        method.name(),
        resolved.len(),
        map.marker_poses.len(),
        map.camera_poses.len()
    );

    if let Err(e) = write_json(&args.output.join("map.json"), &MapFile::from_map(&map)) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    // per-detection diagnostics: error ratios always, weight ratios when the
    // method optimises indicators
    let diagnostics: Vec<harness::DetectionDiagnostic> = detections
        .iter()
        .map(|d| harness::DetectionDiagnostic {
            key: crate::multigraph::DetectionKey {
                image_id: d.image_id,
                marker_id: d.marker_id,
            },
            error_ratio: d.error_ratio(),
            weight_ratio: output
                .indicators
                .as_ref()
                .and_then(|s| {
                    s.get(&crate::multigraph::DetectionKey {
                        image_id: d.image_id,
                        marker_id: d.marker_id,
                    })
                })
                .map(crate::selection::weight_ratio),
        })
        .collect();
    let csv = decisions_csv(&output.selections.decisions, &diagnostics);
    if let Err(e) = std::fs::write(args.output.join("decisions.csv"), csv) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    EXIT_OK
}

fn cmd_evaluate(args: &EvaluateArgs) -> i32 {
    let file = match read_detections(&args.input) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    if file.ground_truth.is_none() {
        eprintln!("error: {}", formats::FormatError::MissingGroundTruth);
        return EXIT_VALIDATION;
    }
    let detections = match file.solve_detections() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SOLVER;
        }
    };
    let gt = match file.ground_truth_for(&detections) {
        Ok(gt) => gt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    // reconstruct a scene config view for evaluation (specs + intrinsics)
    let scene = SceneConfig {
        n_markers: gt.marker_poses.len() as u32,
        n_images: gt.camera_poses.len() as u32,
        marker_size: file.marker_size_m,
        intrinsics: file.camera,
        ..SceneConfig::default()
    };
    let config = AveragingConfig::default();
    let report = match evaluate_scene(&gt, &detections, &scene, &Method::ALL, &config) {
        Ok(r) => r,
        Err(e) => return classify(&e),
    };
    if let Err(e) = std::fs::create_dir_all(&args.output) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    let metrics = metrics_csv(&report);
    print!("{metrics}");
    let error_hist = histogram_csv(report.diagnostics.iter().map(|d| d.error_ratio));
    let weight_hist =
        histogram_csv(report.diagnostics.iter().filter_map(|d| d.weight_ratio));
    for (name, text) in [
        ("metrics.csv", metrics),
        ("error_ratio_hist.csv", error_hist),
        ("weight_ratio_hist.csv", weight_hist),
    ] {
        if let Err(e) = std::fs::write(args.output.join(name), text) {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    }
    EXIT_OK
}

fn cmd_mc(args: &McArgs) -> i32 {
    let base = args.scene.config();
    let seeds: Vec<u64> = (0..args.trials as u64).map(|t| base.seed.wrapping_add(t)).collect();
    let config = AveragingConfig::default();
    let trials = match run_trials(&base, &seeds, &Method::ALL, &config, args.jobs.max(1)) {
        Ok(t) => t,
        Err(e) => return classify(&e),
    };
    let csv = trials_csv(base.noise_sigma, &trials, &Method::ALL);
    if let Err(e) = std::fs::write(&args.output, &csv) {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }
    // summary to stdout
    for method in Method::ALL {
        let values: Vec<f64> =
            trials.iter().filter_map(|t| t.precision.get(&method).and_then(|p| *p)).collect();
        if values.is_empty() {
            println!("{}: no decisions", method.name());
        } else {
            println!(
                "{}: mean precision {:.2}, median {:.2} ({} trials)",
                method.name(),
                harness::mean(&values),
                harness::median(&values),
                values.len()
            );
        }
    }
    EXIT_OK
}

/// Parses `argv` and runs the requested command, returning the exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Mc(args) => cmd_mc(args),
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}
