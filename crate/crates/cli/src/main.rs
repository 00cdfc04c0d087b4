//! Batch command-line surface for the dual-energy reconstruction pipeline.
//!
//! Subcommands chain through files: `calibrate` fits beam coefficients,
//! `tables` bakes them into attenuation lookups, `phantom` and `noise`
//! synthesize inputs, and `recon`/`strip`/`ensemble` reconstruct. Every
//! command is a pure function of its inputs, flags, and seed: re-running
//! with identical arguments produces byte-identical output files (`bench`
//! timing rows are the one deliberate exception). Outputs carry the content
//! hashes of their inputs so stale calibrations cannot be mixed silently.
//!
//! Machine-readable JSON summaries go to stdout, human-oriented progress to
//! stderr. Exit codes: 0 success, 2 input/schema error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use zrecon_core::calibrate::{fit_calibration, load_measurements};
use zrecon_core::forward::{
    build_lookup, load_lookup, save_lookup, standard_model, AttenuationLookup, ForwardModel,
    LookupGrid, PairParams,
};
use zrecon_core::groundtruth::{ground_truth_map, GroundTruthMap};
use zrecon_core::image::{DualEnergyImage, PlaneSet};
use zrecon_core::phantom::{
    apply_noise, cargo_phantom, rect_cm_to_px, render_ideal, shield_sample_rect_cm,
    shielded_phantom, Phantom, DEFAULT_PIXEL_PITCH, SHIELD_COLUMNS,
};
use zrecon_core::recon::{
    ensemble_stats, reconstruct, rect_region, solve_segment, strip_shield_reconstruct_many,
    EnsembleConfig, SegmentMeasurements, SegmentSolution,
};
use zrecon_core::segment::{felzenszwalb_segment, SegmentLabelMap, SegmentParams};
use zrecon_core::xsec::{load_library, synthetic_library, CrossSectionLibrary};
use zrecon_core::Error as CoreError;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "zrecon",
    version,
    about = "Dual-energy radiographic (lambda, Z) reconstruction pipeline"
)]
struct Cli {
    /// Worker threads for parallel sections (0 = all available cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Cross-section table directory (overrides ZRECON_DATA; default: the
    /// built-in synthetic library).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit semiempirical beam coefficients from reference measurements.
    Calibrate(CalibrateArgs),
    /// Bake a calibrated model into binary attenuation lookup tables.
    Tables(TablesArgs),
    /// Synthesize a built-in phantom: scene, ideal image, ground truth.
    Phantom(PhantomArgs),
    /// Resample an ideal image with relative Gaussian noise.
    Noise(NoiseArgs),
    /// Segment an image and reconstruct per-segment (lambda, Z).
    Recon(ReconArgs),
    /// Two-pass shield stripping over rectangular pixel regions.
    Strip(StripArgs),
    /// Median/std maps over an ensemble of noisy reconstructions.
    Ensemble(EnsembleArgs),
    /// Time reconstruction over upsampled phantom sizes.
    Bench(BenchArgs),
    /// Export per-object summary tables from result planes.
    #[command(name = "export-csv")]
    ExportCsv(ExportCsvArgs),
}

/// Felzenszwalb segmentation knobs shared by the reconstructing commands.
/// Defaults mirror the library's `SegmentParams::default()`.
#[derive(Args)]
struct SegArgs {
    /// Gaussian pre-smoothing width in pixels.
    #[arg(long = "seg-sigma", default_value_t = SegmentParams::default().sigma_smooth)]
    seg_sigma: f64,

    /// Merge-threshold scale k (larger favors larger segments).
    #[arg(long = "seg-k", default_value_t = SegmentParams::default().k)]
    seg_k: f64,

    /// Minimum segment size in pixels.
    #[arg(long = "seg-min-size", default_value_t = SegmentParams::default().min_size)]
    seg_min_size: usize,
}

impl SegArgs {
    fn params(&self) -> SegmentParams {
        SegmentParams {
            sigma_smooth: self.seg_sigma,
            k: self.seg_k,
            min_size: self.seg_min_size,
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Measurements JSON: [{material, lambda_g_cm2, alpha_h, alpha_l}, ...].
    #[arg(long)]
    measurements: PathBuf,

    /// Output parameter JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TablesArgs {
    /// Calibrated parameter JSON from `calibrate`.
    #[arg(long)]
    params: PathBuf,

    /// Output lookup table path.
    #[arg(long)]
    out: PathBuf,

    /// Upper end of the table's lambda range, g/cm2.
    #[arg(long, default_value_t = 300.0)]
    lambda_max: f64,

    /// Table lambda step, g/cm2.
    #[arg(long, default_value_t = 0.5)]
    lambda_step: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    /// Seven reference boxes, three balls, and a shielded pit in a container.
    Cargo,
    /// A 5x5 material grid behind steel slabs of growing area density.
    Shielded,
}

#[derive(Args)]
struct PhantomArgs {
    /// Which built-in phantom to synthesize.
    #[arg(long, value_enum)]
    kind: PhantomKind,

    /// Pixel pitch in cm.
    #[arg(long, default_value_t = DEFAULT_PIXEL_PITCH)]
    pitch: f64,

    /// Optional calibrated parameters (default: unity coefficients).
    #[arg(long)]
    params: Option<PathBuf>,

    /// Output directory for scene.json, ideal.zri, ground_truth.zri,
    /// objects.json (and shields.json for the shielded phantom).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    /// Input dual-energy image.
    #[arg(long)]
    input: PathBuf,

    /// Output noisy image path.
    #[arg(long)]
    out: PathBuf,

    /// Relative noise width: sigma = fraction * alpha.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,

    /// RNG seed (required: noise is stochastic).
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct ReconArgs {
    /// Input dual-energy image.
    #[arg(long)]
    input: PathBuf,

    /// Prebuilt lookup tables from `tables`.
    #[arg(long)]
    tables: PathBuf,

    /// Calibrated parameters; when given, their model hash must match the
    /// tables or the command exits 2.
    #[arg(long)]
    params: Option<PathBuf>,

    /// Precomputed label map (default: segment the input image).
    #[arg(long)]
    labels: Option<PathBuf>,

    #[command(flatten)]
    seg: SegArgs,

    /// Output directory for result.zri, labels.zri, report.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StripArgs {
    /// Input dual-energy image.
    #[arg(long)]
    input: PathBuf,

    /// Prebuilt lookup tables from `tables`.
    #[arg(long)]
    tables: PathBuf,

    /// Calibrated parameters for the hardened pass-2 model (required; must
    /// match the tables' model hash).
    #[arg(long)]
    params: PathBuf,

    /// Shield-only pixel rectangle x0,y0,x1,y1 (half-open).
    #[arg(long, value_parser = parse_rect)]
    shield_rect: RectPx,

    /// Object pixel rectangle x0,y0,x1,y1; repeat for multiple objects.
    #[arg(long = "object-rect", value_parser = parse_rect, required = true)]
    object_rect: Vec<RectPx>,

    /// Upper end of the pass-2 lookup's lambda range, g/cm2.
    #[arg(long, default_value_t = 150.0)]
    pass2_lambda_max: f64,

    /// Pass-2 lookup lambda step, g/cm2.
    #[arg(long, default_value_t = 0.5)]
    pass2_lambda_step: f64,

    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Ideal (noiseless) input image.
    #[arg(long)]
    input: PathBuf,

    /// Prebuilt lookup tables from `tables`.
    #[arg(long)]
    tables: PathBuf,

    /// Calibrated parameters; when given, checked against the tables.
    #[arg(long)]
    params: Option<PathBuf>,

    /// Relative noise width per run.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,

    /// Number of independently noised reconstructions.
    #[arg(long)]
    n_runs: usize,

    /// Master RNG seed (required: runs are stochastic).
    #[arg(long)]
    seed: u64,

    #[command(flatten)]
    seg: SegArgs,

    /// Output statistics planes path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Prebuilt tables (default: build from params in memory, untimed).
    #[arg(long)]
    tables: Option<PathBuf>,

    /// Optional calibrated parameters (default: unity coefficients).
    #[arg(long)]
    params: Option<PathBuf>,

    /// Upsampled pixel counts to time, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [250_000, 500_000, 1_000_000, 2_000_000])]
    sizes: Vec<usize>,

    #[command(flatten)]
    seg: SegArgs,

    /// Output CSV path (pixels, seconds).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportCsvArgs {
    /// Result planes from `recon` (result.zri) or `ensemble` (stats planes).
    #[arg(long)]
    result: PathBuf,

    /// Ground-truth planes from `phantom` (optional: blank GT columns).
    #[arg(long)]
    gt: Option<PathBuf>,

    /// Object list JSON from `phantom`.
    #[arg(long)]
    objects: PathBuf,

    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// A half-open pixel rectangle parsed from `x0,y0,x1,y1`.
#[derive(Clone, Copy, Debug)]
struct RectPx([usize; 4]);

impl RectPx {
    fn tuple(&self) -> (usize, usize, usize, usize) {
        (self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

fn parse_rect(s: &str) -> Result<RectPx, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err(format!("expected x0,y0,x1,y1, got {s:?}"));
    }
    let mut rect = [0usize; 4];
    for (slot, part) in rect.iter_mut().zip(&parts) {
        *slot = part.trim().parse::<usize>().map_err(|e| format!("{part:?}: {e}"))?;
    }
    if rect[2] <= rect[0] || rect[3] <= rect[1] {
        return Err(format!("empty rectangle {s:?}"));
    }
    Ok(RectPx(rect))
}

// ---------------------------------------------------------------------------
// Failure plumbing
// ---------------------------------------------------------------------------

/// A command failure carrying the exit code mandated by the error class:
/// 2 for input/schema problems, 3 for numeric ones.
struct Failure {
    code: i32,
    message: String,
    details: Option<Value>,
}

impl Failure {
    fn input(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into(), details: None }
    }

    fn with_details(mut self, details: Value) -> Failure {
        self.details = Some(details);
        self
    }
}

impl From<CoreError> for Failure {
    fn from(err: CoreError) -> Failure {
        let code = match err {
            CoreError::Opaque { .. }
            | CoreError::SingularJacobian
            | CoreError::NonConvergence { .. }
            | CoreError::NoSolution => 3,
            _ => 2,
        };
        Failure { code, message: err.to_string(), details: None }
    }
}

type CmdResult = Result<Value, Failure>;

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(&cli));
}

fn run(cli: &Cli) -> i32 {
    if cli.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
        if let Err(e) = pool {
            return report(Err(Failure::input(format!("--threads: {e}"))));
        }
    }
    let outcome = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Tables(a) => cmd_tables(cli, a),
        Command::Phantom(a) => cmd_phantom(cli, a),
        Command::Noise(a) => cmd_noise(a),
        Command::Recon(a) => cmd_recon(cli, a),
        Command::Strip(a) => cmd_strip(cli, a),
        Command::Ensemble(a) => cmd_ensemble(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::ExportCsv(a) => cmd_export_csv(a),
    };
    report(outcome)
}

/// Print the JSON summary (stdout) and diagnostics (stderr); return the
/// process exit code. Writes ignore broken pipes so `zrecon ... | head`
/// exits with the command's own status.
fn report(outcome: CmdResult) -> i32 {
    use std::io::Write;
    match outcome {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{}", to_pretty(&summary));
            0
        }
        Err(Failure { code, message, details }) => {
            eprintln!("error: {message}");
            let mut payload = json!({ "ok": false, "error": message });
            if let Some(details) = details {
                payload["details"] = details;
            }
            let _ = writeln!(std::io::stdout(), "{}", to_pretty(&payload));
            code
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("JSON serialization")
}

/// Resolve the cross-section library: `--data` flag first, then the
/// ZRECON_DATA environment variable, then the built-in synthetic library.
fn load_xsec(cli: &Cli) -> Result<(Arc<CrossSectionLibrary>, String), Failure> {
    if let Some(dir) = &cli.data {
        return Ok((Arc::new(load_library(dir)?), dir.display().to_string()));
    }
    if let Some(dir) = std::env::var_os("ZRECON_DATA") {
        if !dir.is_empty() {
            let dir = PathBuf::from(dir);
            let lib = load_library(&dir)?;
            return Ok((Arc::new(lib), dir.display().to_string()));
        }
    }
    Ok((Arc::new(synthetic_library()), "builtin".to_string()))
}

/// Build the standard beam/model pair for a parameter file (unity when
/// absent).
fn load_model(cli: &Cli, params: Option<&PathBuf>) -> Result<ForwardModel, Failure> {
    let (lib, source) = load_xsec(cli)?;
    let params = match params {
        Some(path) => PairParams::load(path)?,
        None => PairParams::unity(),
    };
    eprintln!("model: {source} cross sections");
    Ok(standard_model(lib, params)?)
}

/// SHA-256 of a file's raw bytes, lowercase hex.
fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::from(CoreError::io(path, e)))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::from(CoreError::io(path, e)))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::from(CoreError::io(path, e)))
}

/// Reject prebuilt tables that were not generated from the given model.
fn check_model_hash(lut: &AttenuationLookup, fm: &ForwardModel) -> Result<(), Failure> {
    let model_hash = fm.content_hash();
    if lut.model_hash != model_hash {
        return Err(Failure::input(format!(
            "stale tables: lookup model hash {} != calibrated model hash {}",
            lut.model_hash, model_hash
        )));
    }
    Ok(())
}

/// One declared phantom object: name, material description, its own lambda
/// contribution at center, and the half-open pixel sampling rectangle.
#[derive(Serialize, Deserialize)]
struct ObjectEntry {
    name: String,
    material: String,
    lambda_g_cm2: f64,
    rect_px: [usize; 4],
}

/// Compact JSON view of a segment solution.
fn solution_json(sol: &SegmentSolution) -> Value {
    let solutions: Vec<Value> = sol
        .solutions
        .iter()
        .map(|s| {
            let mean_lambda = if s.lambdas.is_empty() {
                f64::NAN
            } else {
                s.lambdas.iter().sum::<f64>() / s.lambdas.len() as f64
            };
            json!({ "z": s.z, "chi2": s.chi2, "mean_lambda": mean_lambda })
        })
        .collect();
    json!({ "degenerate": sol.degenerate, "solutions": solutions })
}

/// Median of the finite entries; NaN when none are finite.
fn median_finite(values: &[f64]) -> f64 {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    finite.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = finite.len();
    if n % 2 == 1 {
        finite[n / 2]
    } else {
        0.5 * (finite[n / 2 - 1] + finite[n / 2])
    }
}

/// Fixed-precision CSV cell; empty for NaN so downstream tools skip it.
fn csv_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> CmdResult {
    let (lib, source) = load_xsec(cli)?;
    let meas = load_measurements(&a.measurements)?;
    eprintln!("calibrating {} measurements against {source} cross sections", meas.len());
    let base = standard_model(lib, PairParams::unity())?;
    let params = fit_calibration(&base, &meas)?;
    params.save(&a.out)?;
    let model_hash = base.with_params(params)?.content_hash();
    eprintln!("wrote {}", a.out.display());
    Ok(json!({
        "command": "calibrate",
        "ok": true,
        "n_measurements": meas.len(),
        "params": params,
        "model_hash": model_hash,
        "out": a.out.display().to_string(),
    }))
}

fn cmd_tables(cli: &Cli, a: &TablesArgs) -> CmdResult {
    let fm = load_model(cli, Some(&a.params))?;
    let grid = LookupGrid { lambda_max: a.lambda_max, lambda_step: a.lambda_step };
    eprintln!(
        "building lookup tables over lambda in [0, {}] step {}",
        a.lambda_max, a.lambda_step
    );
    let lut = build_lookup(&fm, grid)?;
    save_lookup(&lut, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(json!({
        "command": "tables",
        "ok": true,
        "model_hash": lut.model_hash,
        "lambda_max": a.lambda_max,
        "lambda_step": a.lambda_step,
        "n_lambda": lut.n_lambda,
        "out": a.out.display().to_string(),
    }))
}

fn cmd_phantom(cli: &Cli, a: &PhantomArgs) -> CmdResult {
    if !a.pitch.is_finite() || a.pitch <= 0.0 {
        return Err(Failure::input(format!("--pitch must be positive, got {}", a.pitch)));
    }
    let fm = load_model(cli, a.params.as_ref())?;
    let base = match a.kind {
        PhantomKind::Cargo => cargo_phantom(),
        PhantomKind::Shielded => shielded_phantom(),
    };
    let phantom = Phantom { scene: base.scene.with_pitch(a.pitch), objects: base.objects };
    create_dir(&a.out_dir)?;

    let (ideal, _paths) = render_ideal(&phantom.scene, &fm)?;
    eprintln!("rendered {}x{} px at {} cm pitch", ideal.width, ideal.height, a.pitch);
    let gt = ground_truth_map(&phantom.scene, &fm)?;

    let scene_path = a.out_dir.join("scene.json");
    let ideal_path = a.out_dir.join("ideal.zri");
    let gt_path = a.out_dir.join("ground_truth.zri");
    let objects_path = a.out_dir.join("objects.json");
    phantom.scene.save(&scene_path)?;
    ideal.save(&ideal_path)?;
    gt.save(&gt_path)?;

    let objects: Vec<ObjectEntry> = phantom
        .objects
        .iter()
        .map(|obj| {
            let (x0, y0, x1, y1) = phantom.sample_rect_px(obj);
            ObjectEntry {
                name: obj.name.clone(),
                material: phantom.scene.primitives[obj.prim_index].material.describe(),
                lambda_g_cm2: obj.lambda_at_center,
                rect_px: [x0, y0, x1, y1],
            }
        })
        .collect();
    write_text(&objects_path, &to_pretty(&objects))?;

    let mut files = json!({
        "scene": scene_path.display().to_string(),
        "ideal": ideal_path.display().to_string(),
        "ground_truth": gt_path.display().to_string(),
        "objects": objects_path.display().to_string(),
    });

    if matches!(a.kind, PhantomKind::Shielded) {
        let shields: Vec<Value> = (0..SHIELD_COLUMNS.len())
            .filter_map(|col| {
                shield_sample_rect_cm(col).map(|rect| {
                    let (x0, y0, x1, y1) = rect_cm_to_px(&phantom.scene, rect);
                    json!({
                        "col": col,
                        "shield_lambda_g_cm2": SHIELD_COLUMNS[col],
                        "rect_px": [x0, y0, x1, y1],
                    })
                })
            })
            .collect();
        let shields_path = a.out_dir.join("shields.json");
        write_text(&shields_path, &to_pretty(&shields))?;
        files["shields"] = json!(shields_path.display().to_string());
    }

    eprintln!("wrote {}", a.out_dir.display());
    Ok(json!({
        "command": "phantom",
        "ok": true,
        "kind": match a.kind {
            PhantomKind::Cargo => "cargo",
            PhantomKind::Shielded => "shielded",
        },
        "width": ideal.width,
        "height": ideal.height,
        "pixel_pitch_cm": a.pitch,
        "n_objects": objects.len(),
        "model_hash": fm.content_hash(),
        "files": files,
    }))
}

fn cmd_noise(a: &NoiseArgs) -> CmdResult {
    let img = DualEnergyImage::load(&a.input)?;
    let noisy = apply_noise(&img, a.fraction, a.seed)?;
    noisy.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(json!({
        "command": "noise",
        "ok": true,
        "width": noisy.width,
        "height": noisy.height,
        "fraction": a.fraction,
        "seed": a.seed,
        "input_hash": file_hash(&a.input)?,
        "content_hash": file_hash(&a.out)?,
        "out": a.out.display().to_string(),
    }))
}

fn cmd_recon(cli: &Cli, a: &ReconArgs) -> CmdResult {
    let img = DualEnergyImage::load(&a.input)?;
    let lut = load_lookup(&a.tables)?;
    if let Some(params) = &a.params {
        let fm = load_model(cli, Some(params))?;
        check_model_hash(&lut, &fm)?;
    }
    let labels = match &a.labels {
        Some(path) => SegmentLabelMap::load(path)?,
        None => {
            let labels = felzenszwalb_segment(&img, &a.seg.params())?;
            eprintln!("segmented into {} regions", labels.n_segments());
            labels
        }
    };

    let started = Instant::now();
    let rec = match reconstruct(&img, &lut, &labels) {
        Ok(rec) => rec,
        Err(err) => {
            let failure = Failure::from(err);
            if failure.code == 3 {
                let diags = diagnose_segments(&img, &lut, &labels);
                for d in &diags {
                    eprintln!("segment {}: {}", d["label"], d["error"]);
                }
                return Err(failure.with_details(json!({ "failed_segments": diags })));
            }
            return Err(failure);
        }
    };
    eprintln!(
        "reconstructed {} segments in {:.3} s",
        rec.segments.len(),
        started.elapsed().as_secs_f64()
    );

    create_dir(&a.out_dir)?;
    let result_path = a.out_dir.join("result.zri");
    let labels_path = a.out_dir.join("labels.zri");
    let report_path = a.out_dir.join("report.json");

    let input_hash = file_hash(&a.input)?;
    let tables_hash = file_hash(&a.tables)?;
    let mut planes = rec.to_planes();
    planes.meta.insert("input_hash".into(), input_hash.clone());
    planes.meta.insert("tables_hash".into(), tables_hash.clone());
    planes.save(&result_path)?;
    labels.save(&labels_path)?;

    let report = json!({
        "model_hash": rec.model_hash,
        "input_hash": input_hash,
        "tables_hash": tables_hash,
        "segments": rec.report(),
    });
    write_text(&report_path, &to_pretty(&report))?;

    let n_degenerate = rec.segments.iter().filter(|s| s.solution.degenerate).count();
    Ok(json!({
        "command": "recon",
        "ok": true,
        "width": rec.width,
        "height": rec.height,
        "n_segments": rec.segments.len(),
        "n_degenerate": n_degenerate,
        "model_hash": rec.model_hash,
        "input_hash": input_hash,
        "files": {
            "result": result_path.display().to_string(),
            "labels": labels_path.display().to_string(),
            "report": report_path.display().to_string(),
        },
    }))
}

/// Identify which segments fail to solve, for exit-3 diagnostics.
fn diagnose_segments(
    img: &DualEnergyImage,
    lut: &AttenuationLookup,
    labels: &SegmentLabelMap,
) -> Vec<Value> {
    const MAX_REPORTED: usize = 20;
    let mut out = Vec::new();
    for label in 0..labels.n_segments() {
        let meas = SegmentMeasurements::from_image(img, labels.pixels_of(label as u32));
        if let Err(err) = solve_segment(lut, &meas) {
            out.push(json!({
                "label": label,
                "n_pixels": meas.n_total(),
                "error": err.to_string(),
            }));
            if out.len() >= MAX_REPORTED {
                break;
            }
        }
    }
    out
}

fn cmd_strip(cli: &Cli, a: &StripArgs) -> CmdResult {
    let img = DualEnergyImage::load(&a.input)?;
    let lut = load_lookup(&a.tables)?;
    let fm = load_model(cli, Some(&a.params))?;
    check_model_hash(&lut, &fm)?;

    let shield_region = rect_region(img.width, img.height, a.shield_rect.tuple());
    if shield_region.is_empty() {
        return Err(Failure::input("shield rectangle selects no pixels"));
    }
    let mut object_regions = Vec::with_capacity(a.object_rect.len());
    for rect in &a.object_rect {
        let region = rect_region(img.width, img.height, rect.tuple());
        if region.is_empty() {
            return Err(Failure::input(format!(
                "object rectangle {:?} selects no pixels",
                rect.0
            )));
        }
        object_regions.push(region);
    }

    // Single-pass reference solutions: the biased view the stripping corrects.
    let single_pass: Vec<SegmentSolution> = object_regions
        .iter()
        .map(|region| solve_segment(&lut, &SegmentMeasurements::from_image(&img, region)))
        .collect::<Result<_, _>>()?;

    let pass2_grid =
        LookupGrid { lambda_max: a.pass2_lambda_max, lambda_step: a.pass2_lambda_step };
    let stripped = strip_shield_reconstruct_many(
        &img,
        &fm,
        &lut,
        pass2_grid,
        &shield_region,
        &object_regions,
    )?;
    eprintln!(
        "shield estimate: lambda {:.2} g/cm2, z {}",
        stripped.shield.lambda_shield, stripped.shield.z_shield
    );

    let objects: Vec<Value> = a
        .object_rect
        .iter()
        .enumerate()
        .map(|(i, rect)| {
            json!({
                "rect_px": rect.0,
                "n_pixels": object_regions[i].len(),
                "single_pass": solution_json(&single_pass[i]),
                "stripped": solution_json(&stripped.object_solutions[i]),
            })
        })
        .collect();

    let summary = json!({
        "command": "strip",
        "ok": true,
        "model_hash": lut.model_hash,
        "input_hash": file_hash(&a.input)?,
        "shield": {
            "rect_px": a.shield_rect.0,
            "n_pixels": shield_region.len(),
            "lambda_shield": stripped.shield.lambda_shield,
            "z_shield": stripped.shield.z_shield,
            "solution": solution_json(&stripped.shield_solution),
        },
        "alpha_offset_h": stripped.alpha_offset_h,
        "alpha_offset_l": stripped.alpha_offset_l,
        "objects": objects,
        "out": a.out.display().to_string(),
    });
    write_text(&a.out, &to_pretty(&summary))?;
    eprintln!("wrote {}", a.out.display());
    Ok(summary)
}

fn cmd_ensemble(cli: &Cli, a: &EnsembleArgs) -> CmdResult {
    let ideal = DualEnergyImage::load(&a.input)?;
    let lut = load_lookup(&a.tables)?;
    if let Some(params) = &a.params {
        let fm = load_model(cli, Some(params))?;
        check_model_hash(&lut, &fm)?;
    }
    let cfg = EnsembleConfig {
        noise_fraction: a.fraction,
        n_runs: a.n_runs,
        seed: a.seed,
        segment: a.seg.params(),
    };
    eprintln!("running {} noisy reconstructions at {} relative noise", a.n_runs, a.fraction);
    let stats = ensemble_stats(&ideal, &lut, &cfg)?;
    if !stats.failed_runs.is_empty() {
        eprintln!("{} run(s) failed: {:?}", stats.failed_runs.len(), stats.failed_runs);
    }

    let mut planes = stats.to_planes();
    planes.meta.insert("input_hash".into(), file_hash(&a.input)?);
    planes.meta.insert("model_hash".into(), lut.model_hash.clone());
    planes.meta.insert("seed".into(), a.seed.to_string());
    planes.meta.insert("noise_fraction".into(), format!("{}", a.fraction));
    planes.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());

    Ok(json!({
        "command": "ensemble",
        "ok": true,
        "width": stats.width,
        "height": stats.height,
        "n_runs": stats.n_runs,
        "failed_runs": stats.failed_runs,
        "seed": a.seed,
        "fraction": a.fraction,
        "model_hash": lut.model_hash,
        "content_hash": planes.content_hash(),
        "out": a.out.display().to_string(),
    }))
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> CmdResult {
    if a.sizes.is_empty() {
        return Err(Failure::input("--sizes must list at least one pixel count"));
    }
    let fm = load_model(cli, a.params.as_ref())?;
    let lut = match &a.tables {
        Some(path) => {
            let lut = load_lookup(path)?;
            if a.params.is_some() {
                check_model_hash(&lut, &fm)?;
            }
            lut
        }
        None => build_lookup(&fm, LookupGrid::default())?,
    };

    let base = cargo_phantom();
    let aspect = base.scene.canvas.width_cm / base.scene.canvas.height_cm;
    let mut rows: Vec<(usize, f64)> = Vec::with_capacity(a.sizes.len());
    for &target in &a.sizes {
        if target == 0 {
            return Err(Failure::input("--sizes entries must be positive"));
        }
        // Snap to an integral pixel grid: pick the row count, derive the
        // pitch from it so both canvas extents stay whole multiples.
        let rows_px = (target as f64 / aspect).sqrt().round().max(1.0);
        let pitch = base.scene.canvas.height_cm / rows_px;
        let scene = base.scene.with_pitch(pitch);
        let (ideal, _) = render_ideal(&scene, &fm)?;
        let labels = felzenszwalb_segment(&ideal, &a.seg.params())?;
        let started = Instant::now();
        let rec = reconstruct(&ideal, &lut, &labels)?;
        let seconds = started.elapsed().as_secs_f64();
        eprintln!(
            "bench: {} px ({} segments) reconstructed in {:.3} s",
            rec.len(),
            rec.segments.len(),
            seconds
        );
        rows.push((rec.len(), seconds));
    }

    let slope = loglog_slope(&rows);
    let mut csv = String::from("pixels,seconds\n");
    for (pixels, seconds) in &rows {
        csv.push_str(&format!("{pixels},{seconds:.6}\n"));
    }
    write_text(&a.out, &csv)?;
    eprintln!("wrote {}", a.out.display());

    Ok(json!({
        "command": "bench",
        "ok": true,
        "rows": rows
            .iter()
            .map(|&(pixels, seconds)| json!({ "pixels": pixels, "seconds": seconds }))
            .collect::<Vec<_>>(),
        "loglog_slope": slope,
        "model_hash": lut.model_hash,
        "out": a.out.display().to_string(),
    }))
}

/// Least-squares slope of ln(seconds) against ln(pixels); NaN with < 2 rows.
fn loglog_slope(rows: &[(usize, f64)]) -> f64 {
    if rows.len() < 2 {
        return f64::NAN;
    }
    let points: Vec<(f64, f64)> =
        rows.iter().map(|&(n, s)| ((n as f64).ln(), s.ln())).collect();
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
    let (mx, my) = (sx / n, sy / n);
    let sxy: f64 = points.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn cmd_export_csv(a: &ExportCsvArgs) -> CmdResult {
    let planes = PlaneSet::load(&a.result)?;
    let objects: Vec<ObjectEntry> = {
        let text = std::fs::read_to_string(&a.objects)
            .map_err(|e| Failure::from(CoreError::io(&a.objects, e)))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::from(CoreError::parse(&a.objects, e.to_string())))?
    };
    let gt = match &a.gt {
        Some(path) => {
            let gt = GroundTruthMap::load(path)?;
            if gt.width != planes.width || gt.height != planes.height {
                return Err(Failure::input(format!(
                    "ground truth {}x{} does not match result {}x{}",
                    gt.width, gt.height, planes.width, planes.height
                )));
            }
            Some(gt)
        }
        None => None,
    };

    // `recon` result planes and `ensemble` stats planes carry different
    // names for the same three displayed quantities.
    let ensemble = planes.plane("median_z_low").is_ok();
    let z_plane = planes.plane(if ensemble { "median_z_low" } else { "z_low" })?;
    let zh_plane = planes.plane(if ensemble { "median_z_high" } else { "z_high_or_nan" })?;
    let lam_plane = planes.plane(if ensemble { "median_lambda" } else { "lambda" })?;
    let std_plane = if ensemble { Some(planes.plane("std_z_low")?) } else { None };

    let mut csv =
        String::from("object,n_pixels,gt_lambda,gt_z_low,gt_z_high,lambda,z_low,z_high,std_z\n");
    let mut rows_json = Vec::with_capacity(objects.len());
    for obj in &objects {
        let [x0, y0, x1, y1] = obj.rect_px;
        let region = rect_region(planes.width, planes.height, (x0, y0, x1, y1));
        let take =
            |plane: &[f64]| -> Vec<f64> { region.iter().map(|&i| plane[i as usize]).collect() };
        let z_low = median_finite(&take(z_plane));
        let z_high = median_finite(&take(zh_plane));
        let lambda = median_finite(&take(lam_plane));
        let std_z = std_plane.map(|p| median_finite(&take(p))).unwrap_or(f64::NAN);
        let (gt_lambda, gt_z_low, gt_z_high) = match &gt {
            Some(gt) => (
                median_finite(&take(&gt.lambda_eff)),
                median_finite(&take(&gt.z_low)),
                median_finite(&take(&gt.z_high)),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            obj.name,
            region.len(),
            csv_num(gt_lambda),
            csv_num(gt_z_low),
            csv_num(gt_z_high),
            csv_num(lambda),
            csv_num(z_low),
            csv_num(z_high),
            csv_num(std_z),
        ));
        rows_json.push(json!({
            "object": obj.name,
            "n_pixels": region.len(),
            "gt_lambda": gt_lambda,
            "gt_z_low": gt_z_low,
            "gt_z_high": gt_z_high,
            "lambda": lambda,
            "z_low": z_low,
            "z_high": z_high,
            "std_z": std_z,
        }));
    }
    write_text(&a.out, &csv)?;
    eprintln!("wrote {} rows to {}", objects.len(), a.out.display());

    Ok(json!({
        "command": "export-csv",
        "ok": true,
        "kind": if ensemble { "ensemble" } else { "recon" },
        "n_objects": objects.len(),
        "rows": rows_json,
        "out": a.out.display().to_string(),
    }))
}
