//! Command-line surface: every subcommand reads a JSON manifest,
//! resolves a seed, and writes its artifacts into the output directory.
//!
//! Seed precedence: `--seed` flag, then the `SCRIBSEG_SEED` environment
//! variable (the only supported environment override), then the
//! manifest's `seed` field. Re-running any command with the same
//! manifest and seed produces byte-identical output files.
//!
//! Exit codes: 0 success, 2 manifest/file errors, 3 training
//! divergence, 4 other computation errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scribseg::core::{LabelMap, SeededRng, UNLABELED};
use scribseg::error::{Error, Result};
use scribseg::estimator::{estimate_pi, PosteriorBatch, DEFAULT_MAX_ITER, DEFAULT_TOL};
use scribseg::io::{
    check_schema_version, fmt_float, line_chart, read_image, read_json, read_label_pgm,
    read_probmap, write_csv, write_image, write_json, write_label_pgm, Series, SCHEMA_VERSION,
};
use scribseg::metrics::{evaluate, MetricReport};
use scribseg::mixaug::{
    apply_mix, default_occlusion_side, occlude_at, plan_mix, MixConfig, MixPlan,
};
use scribseg::scribblegen::{compute_stats, generate, ScribbleForm, ScribbleStats};
use scribseg::study::{generate_scribbles, run_study, BudgetMode, BudgetSpec, StudyRequest};
use scribseg::trainer::{predict, synth_dataset, train, PixelModel, SynthSpec, TrainConfig};

/// Name of the single supported environment override.
const SEED_ENV: &str = "SCRIBSEG_SEED";

#[derive(Parser)]
#[command(
    name = "scribseg",
    about = "Desk-scale laboratory for scribble-supervised segmentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON manifest describing the run.
    #[arg(long)]
    manifest: PathBuf,
    /// Seed override; beats SCRIBSEG_SEED and the manifest's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scribble annotations for ground-truth label maps.
    Scribble(Common),
    /// Train the pixel classifier on a synthetic dataset.
    Train(Common),
    /// Run the annotation-efficiency study (PCE-only, form x budget x seed).
    Study(Common),
    /// Estimate class mixture ratios over unlabeled pixels by EM.
    EstimatePi(Common),
    /// Write a mixed/occluded image pair for inspection.
    MixPreview(Common),
    /// Evaluate predicted label maps against ground truth.
    Metrics(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Scribble(c) => cmd_scribble(c),
        Command::Train(c) => cmd_train(c),
        Command::Study(c) => cmd_study(c),
        Command::EstimatePi(c) => cmd_estimate_pi(c),
        Command::MixPreview(c) => cmd_mix_preview(c),
        Command::Metrics(c) => cmd_metrics(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) | Error::Json(_) | Error::BadFile { .. } | Error::BadManifest(_) => 2,
                Error::TrainingDiverged { .. } => 3,
                _ => 4,
            };
            ExitCode::from(code)
        }
    }
}

/// Flag > environment > manifest.
fn resolve_seed(common: &Common, manifest_seed: u64) -> Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    if let Ok(text) = std::env::var(SEED_ENV) {
        return text
            .parse()
            .map_err(|_| Error::BadManifest(format!("{SEED_ENV} must be a u64, got {text:?}")));
    }
    Ok(manifest_seed)
}

fn load_manifest<T: serde::de::DeserializeOwned>(common: &Common) -> Result<T> {
    read_json(&common.manifest)
}

fn prepare_out(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)?;
    Ok(&common.out)
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

// ---------------------------------------------------------------------------
// scribble
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScribbleManifest {
    schema_version: u32,
    seed: u64,
    /// Class count; labels in the ground truth must lie below it.
    m: usize,
    /// Ground-truth label PGMs.
    gt_files: Vec<String>,
    form: ScribbleForm,
    budget: BudgetSpec,
}

#[derive(Debug, Serialize)]
struct ScribbleFileStats {
    file: String,
    scribble_file: String,
    #[serde(flatten)]
    stats: ScribbleStats,
}

#[derive(Debug, Serialize)]
struct ScribbleStatsReport {
    schema_version: u32,
    seed: u64,
    files: Vec<ScribbleFileStats>,
}

fn cmd_scribble(common: &Common) -> Result<()> {
    let manifest: ScribbleManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    if manifest.gt_files.is_empty() {
        return Err(Error::BadManifest("gt_files must not be empty".into()));
    }
    let seed = resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;
    let mut rng = SeededRng::new(seed).derive(0x5c_71b);
    let mut files = Vec::new();
    for path in &manifest.gt_files {
        let gt = read_label_pgm(Path::new(path))?;
        let budget = manifest.budget.resolve(&gt, manifest.m);
        let scribbles = generate(&gt, manifest.form, &budget, &mut rng)?;
        let scribble_file = format!("{}.scribble.pgm", stem_of(path));
        write_label_pgm(&out.join(&scribble_file), &scribbles)?;
        files.push(ScribbleFileStats {
            file: path.clone(),
            scribble_file,
            stats: compute_stats(&scribbles, &gt, manifest.m)?,
        });
    }
    write_json(
        &out.join("scribble_stats.json"),
        &ScribbleStatsReport {
            schema_version: SCHEMA_VERSION,
            seed,
            files,
        },
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainManifest {
    schema_version: u32,
    seed: u64,
    /// Synthetic dataset; its trailing images beyond `train_count`
    /// form the test split.
    dataset: SynthSpec,
    train_count: usize,
    form: ScribbleForm,
    budget: BudgetSpec,
    config: TrainConfig,
}

#[derive(Debug, Serialize)]
struct ModelFile {
    schema_version: u32,
    model: PixelModel,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    schema_version: u32,
    seed: u64,
    final_pi: Option<Vec<f64>>,
    /// One metric report per test image, in dataset order.
    per_image: Vec<MetricReport>,
    mean_dice: f64,
    /// Per foreground class, averaged over test images.
    mean_dice_per_class: Vec<f64>,
    /// Per foreground class; null where no image had a finite distance.
    mean_hausdorff_per_class: Vec<Option<f64>>,
}

fn cmd_train(common: &Common) -> Result<()> {
    let manifest: TrainManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    let seed = resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;

    let mut spec = manifest.dataset.clone();
    spec.seed = seed;
    if manifest.train_count == 0 || manifest.train_count >= spec.count {
        return Err(Error::BadManifest(format!(
            "train_count {} must split {} images into non-empty train and test sets",
            manifest.train_count, spec.count
        )));
    }
    let mut data = synth_dataset(&spec)?;
    let test_set = data.split_off(manifest.train_count);
    let scribbles = generate_scribbles(&data, spec.m, manifest.form, &manifest.budget, seed)?;
    let mut cfg = manifest.config.clone();
    cfg.seed = seed;
    let outcome = train(&data, &scribbles, &test_set, spec.m, &cfg)?;

    write_json(
        &out.join("model.json"),
        &ModelFile {
            schema_version: SCHEMA_VERSION,
            model: outcome.model.clone(),
        },
    )?;

    let rows: Vec<Vec<String>> = outcome
        .log
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_float(r.pce),
                fmt_float(r.global),
                fmt_float(r.spatial),
                fmt_float(r.shape),
                fmt_float(r.total),
                fmt_float(r.test_dice),
            ]
        })
        .collect();
    write_csv(
        &out.join("train_log.csv"),
        &[
            "epoch",
            "pce",
            "global",
            "spatial",
            "shape",
            "total",
            "mean_dice",
        ],
        &rows,
    )?;

    let per_image: Vec<MetricReport> = test_set
        .iter()
        .map(|s| {
            let pred = predict(&outcome.model, &s.image)?;
            evaluate(&pred.argmax(), &s.gt, spec.m)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_fg = spec.m - 1;
    let mean_dice_per_class = (0..n_fg)
        .map(|k| per_image.iter().map(|r| r.dice[k]).sum::<f64>() / per_image.len() as f64)
        .collect();
    let mean_hausdorff_per_class = (0..n_fg)
        .map(|k| {
            let finite: Vec<f64> = per_image
                .iter()
                .filter_map(|r| r.hausdorff[k])
                .filter(|v| v.is_finite())
                .collect();
            if finite.is_empty() {
                None
            } else {
                Some(finite.iter().sum::<f64>() / finite.len() as f64)
            }
        })
        .collect();
    let mean_dice = per_image.iter().map(|r| r.mean_dice).sum::<f64>() / per_image.len() as f64;
    write_json(
        &out.join("metrics.json"),
        &TrainReport {
            schema_version: SCHEMA_VERSION,
            seed,
            final_pi: outcome.final_pi.clone(),
            per_image,
            mean_dice,
            mean_dice_per_class,
            mean_hausdorff_per_class,
        },
    )
}

// ---------------------------------------------------------------------------
// study
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyManifest {
    schema_version: u32,
    /// Base seed; study seeds are seed..seed+seed_count.
    seed: u64,
    forms: Vec<ScribbleForm>,
    budgets: Vec<usize>,
    budget_mode: BudgetMode,
    seed_count: usize,
}

fn form_name(form: ScribbleForm) -> String {
    match form {
        ScribbleForm::Points => "points".into(),
        ScribbleForm::RandomWalk { step } => format!("random_walk_l{step}"),
        ScribbleForm::DirRandomWalk => "dir_random_walk".into(),
        ScribbleForm::Skeleton => "skeleton".into(),
    }
}

fn cmd_study(common: &Common) -> Result<()> {
    let manifest: StudyManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    let seed = resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;
    let req = StudyRequest {
        forms: manifest.forms.clone(),
        budgets: manifest.budgets.clone(),
        budget_mode: manifest.budget_mode,
        seeds: (0..manifest.seed_count as u64).map(|i| seed + i).collect(),
    };
    let report = run_study(&req)?;

    let cell_rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                form_name(c.form),
                c.budget.to_string(),
                c.seed.to_string(),
                fmt_float(c.test_dice),
            ]
        })
        .collect();
    write_csv(
        &out.join("study_cells.csv"),
        &["form", "budget", "seed", "test_dice"],
        &cell_rows,
    )?;

    let mean_rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            vec![
                form_name(p.form),
                p.budget.to_string(),
                fmt_float(p.mean_dice),
            ]
        })
        .collect();
    write_csv(
        &out.join("study_means.csv"),
        &["form", "budget", "mean_dice"],
        &mean_rows,
    )?;

    let series: Vec<Series> = req
        .forms
        .iter()
        .map(|&form| Series {
            name: form_name(form),
            points: report
                .points
                .iter()
                .filter(|p| p.form == form)
                .map(|p| (p.budget as f64, p.mean_dice))
                .collect(),
        })
        .collect();
    fs::write(
        out.join("study.svg"),
        line_chart(
            "Test Dice by scribble budget",
            "scribble pixels per image",
            "mean test Dice",
            &series,
        ),
    )?;

    write_json(&out.join("study_report.json"), &report)
}

// ---------------------------------------------------------------------------
// estimate-pi
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatePiManifest {
    schema_version: u32,
    seed: u64,
    /// Prediction JSON over the full image (probability map).
    pred_file: String,
    /// Scribble PGM over the same grid; its labeled pixels define the
    /// class frequencies and its unlabeled pixels the EM sample.
    scribble_file: String,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default = "default_max_iter")]
    max_iter: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

#[derive(Debug, Serialize)]
struct PiReport {
    schema_version: u32,
    pi: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn cmd_estimate_pi(common: &Common) -> Result<()> {
    let manifest: EstimatePiManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;
    let pred = read_probmap(Path::new(&manifest.pred_file))?;
    let scribbles = read_label_pgm(Path::new(&manifest.scribble_file))?;
    if scribbles.height != pred.height || scribbles.width != pred.width {
        return Err(Error::ShapeMismatch);
    }
    let m = pred.m;
    let mut counts = vec![0usize; m];
    let mut posteriors = Vec::new();
    for row in 0..pred.height {
        for col in 0..pred.width {
            let l = scribbles.at(row, col);
            if l == UNLABELED {
                posteriors.extend_from_slice(pred.row(row * pred.width + col));
            } else {
                if l as usize >= m {
                    return Err(Error::ClassOutOfRange { label: l, m });
                }
                counts[l as usize] += 1;
            }
        }
    }
    let n_labeled: usize = counts.iter().sum();
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::ClassUnobserved { class: k });
        }
    }
    let freq: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / n_labeled as f64)
        .collect();
    let batch = PosteriorBatch::new(posteriors, m, freq.clone())?;
    let estimate = estimate_pi(&batch, &freq, manifest.tol, manifest.max_iter)?;

    write_json(
        &out.join("pi.json"),
        &PiReport {
            schema_version: SCHEMA_VERSION,
            pi: estimate.pi.clone(),
            iterations: estimate.iterations,
            converged: estimate.converged,
        },
    )?;
    let rows: Vec<Vec<String>> = estimate
        .trace
        .iter()
        .enumerate()
        .map(|(i, &v)| vec![i.to_string(), fmt_float(v)])
        .collect();
    write_csv(&out.join("trace.csv"), &["iteration", "surrogate"], &rows)
}

// ---------------------------------------------------------------------------
// mix-preview
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixPreviewManifest {
    schema_version: u32,
    seed: u64,
    m: usize,
    /// Index JSONs of the two source images.
    image1: String,
    image2: String,
    /// Scribble PGMs of the two source images.
    scribbles1: String,
    scribbles2: String,
    #[serde(default)]
    mix: MixConfig,
    /// Defaults to the image-size-scaled occlusion side.
    occlusion_side: Option<usize>,
}

#[derive(Debug, Serialize)]
struct MixPlanFile {
    schema_version: u32,
    plan: MixPlan,
}

#[derive(Debug, Serialize)]
struct SoftLabelFile {
    schema_version: u32,
    height: usize,
    width: usize,
    m: usize,
    weights: Vec<f64>,
}

fn cmd_mix_preview(common: &Common) -> Result<()> {
    let manifest: MixPreviewManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    let seed = resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;
    let x1 = read_image(Path::new(&manifest.image1))?;
    let x2 = read_image(Path::new(&manifest.image2))?;
    let y1 = read_label_pgm(Path::new(&manifest.scribbles1))?;
    let y2 = read_label_pgm(Path::new(&manifest.scribbles2))?;
    let side = manifest
        .occlusion_side
        .unwrap_or_else(|| default_occlusion_side(x1.height.min(x1.width)));
    let mut rng = SeededRng::new(seed).derive(0x1717);

    let mut emit = |name: &str, a: &scribseg::Image, la: &LabelMap, b, lb| -> Result<()> {
        let plan = plan_mix(a, b, &manifest.mix, side, &mut rng)?;
        let (mut img, mut soft) = apply_mix(a, la, b, lb, &plan, manifest.m)?;
        if let Some(occ) = &plan.occlusion {
            occlude_at(&mut img, &mut soft, occ)?;
        }
        write_image(out, name, &img)?;
        write_json(
            &out.join(format!("{name}_plan.json")),
            &MixPlanFile {
                schema_version: SCHEMA_VERSION,
                plan,
            },
        )?;
        write_json(
            &out.join(format!("{name}_labels.json")),
            &SoftLabelFile {
                schema_version: SCHEMA_VERSION,
                height: soft.height,
                width: soft.width,
                m: soft.m,
                weights: soft.weights,
            },
        )
    };
    emit("mixed12", &x1, &y1, &x2, &y2)?;
    emit("mixed21", &x2, &y2, &x1, &y1)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsManifest {
    schema_version: u32,
    seed: u64,
    m: usize,
    pred_files: Vec<String>,
    gt_files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct MetricsPair {
    pred_file: String,
    gt_file: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    schema_version: u32,
    pairs: Vec<MetricsPair>,
    mean_dice: f64,
}

fn cmd_metrics(common: &Common) -> Result<()> {
    let manifest: MetricsManifest = load_manifest(common)?;
    check_schema_version(&common.manifest, manifest.schema_version)?;
    resolve_seed(common, manifest.seed)?;
    let out = prepare_out(common)?;
    if manifest.pred_files.len() != manifest.gt_files.len() || manifest.pred_files.is_empty() {
        return Err(Error::BadManifest(
            "pred_files and gt_files must be equal-length and non-empty".into(),
        ));
    }
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    for (pred_path, gt_path) in manifest.pred_files.iter().zip(&manifest.gt_files) {
        let pred = read_label_pgm(Path::new(pred_path))?;
        let gt = read_label_pgm(Path::new(gt_path))?;
        let report = evaluate(&pred, &gt, manifest.m)?;
        for (i, &class) in report.classes.iter().enumerate() {
            rows.push(vec![
                pred_path.clone(),
                class.to_string(),
                fmt_float(report.dice[i]),
                match report.hausdorff[i] {
                    Some(v) if v.is_finite() => fmt_float(v),
                    Some(_) => "inf".into(),
                    None => "".into(),
                },
            ]);
        }
        pairs.push(MetricsPair {
            pred_file: pred_path.clone(),
            gt_file: gt_path.clone(),
            report,
        });
    }
    let mean_dice = pairs.iter().map(|p| p.report.mean_dice).sum::<f64>() / pairs.len() as f64;
    write_csv(
        &out.join("metrics.csv"),
        &["pred_file", "class", "dice", "hausdorff"],
        &rows,
    )?;
    write_json(
        &out.join("metrics.json"),
        &MetricsFile {
            schema_version: SCHEMA_VERSION,
            pairs,
            mean_dice,
        },
    )
}
