//! Experiment orchestration: the standard synthetic benchmark, the
//! configuration ablation, and the annotation-efficiency study.
//!
//! Everything here is deterministic given the seeds in the request;
//! study cells run in parallel when the `parallel` feature is enabled
//! and results are aggregated in sorted cell-key order either way.

use serde::{Deserialize, Serialize};

use crate::core::{LabelMap, SeededRng};
use crate::error::{Error, Result};
use crate::scribblegen::{generate, ScribbleBudget, ScribbleForm};
use crate::trainer::{synth_dataset, train, Sample, SynthSpec, TrainConfig, TrainOutcome};

/// Total scribble pixels per image on the standard benchmark.
pub const BENCHMARK_SCRIBBLE_TOTAL: usize = 120;

/// Number of training images on the standard benchmark; the remaining
/// images of the synthetic dataset form the test split.
pub const BENCHMARK_TRAIN_COUNT: usize = 10;

/// Dataset generator settings for the standard benchmark: 64x64 images,
/// four classes, 10 train / 5 test.
pub fn benchmark_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        ..SynthSpec::default()
    }
}

/// Training settings for the standard benchmark.
///
/// These deviate from the defaults where the linear pixel classifier
/// needs it: a higher learning rate (the model is far smaller than a
/// UNet), a reduced shape weight, a capped EM iteration count with the
/// mixture ratio damped all the way to the labeled frequencies, and the
/// shape loss gated behind the same warm-up as the spatial prior so
/// that neither consumes the model's own predictions before they carry
/// signal.
pub fn benchmark_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 1.0,
        gate_shape_with_warmup: true,
        pi_damping: 1.0,
        em_max_iter: 3,
        seed,
        ..TrainConfig::default()
    };
    cfg.weights.warmup_epochs = 100;
    cfg.weights.lambda3 = 0.1;
    cfg
}

/// How the per-class pixel budget of a scribble map is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BudgetSpec {
    /// Explicit per-class pixel counts; index = class.
    PerClass(Vec<usize>),
    /// The same pixel count for every class.
    Uniform { n_pix: usize },
    /// Budget split across classes in proportion to their area; see
    /// [`proportional_budget`].
    Proportional { total: usize },
}

impl BudgetSpec {
    pub fn resolve(&self, gt: &LabelMap, m: usize) -> ScribbleBudget {
        match self {
            BudgetSpec::PerClass(per_class) => ScribbleBudget {
                per_class: per_class.clone(),
            },
            BudgetSpec::Uniform { n_pix } => ScribbleBudget::uniform(m, *n_pix),
            BudgetSpec::Proportional { total } => proportional_budget(gt, m, *total),
        }
    }
}

/// Generates one scribble map per sample, all drawn from a single
/// seed-derived stream so the set is reproducible as a whole.
pub fn generate_scribbles(
    samples: &[Sample],
    m: usize,
    form: ScribbleForm,
    budget: &BudgetSpec,
    seed: u64,
) -> Result<Vec<LabelMap>> {
    let mut rng = SeededRng::new(seed).derive(0x5c_71b);
    samples
        .iter()
        .map(|s| generate(&s.gt, form, &budget.resolve(&s.gt, m), &mut rng))
        .collect()
}

/// Scribble budget proportional to each class's area, so sparse
/// supervision inherits the class imbalance of the image instead of
/// correcting it. Classes present in the ground truth receive at least
/// two pixels; absent classes receive zero.
pub fn proportional_budget(gt: &LabelMap, m: usize, total: usize) -> ScribbleBudget {
    let mut counts = vec![0usize; m];
    for &l in &gt.labels {
        counts[l as usize] += 1;
    }
    let n: usize = counts.iter().sum();
    let per_class = counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0
            } else {
                (((total * c) as f64 / n as f64).round() as usize).max(2)
            }
        })
        .collect();
    ScribbleBudget { per_class }
}

/// Benchmark dataset split plus per-image scribbles for one seed.
pub struct BenchmarkData {
    pub train_set: Vec<Sample>,
    pub test_set: Vec<Sample>,
    pub scribbles: Vec<LabelMap>,
    pub m: usize,
}

/// Generates the benchmark images and scribbles for one seed with the
/// given scribble form and budget.
pub fn benchmark_data(seed: u64, form: ScribbleForm, budget: &BudgetSpec) -> Result<BenchmarkData> {
    let spec = benchmark_spec(seed);
    let mut data = synth_dataset(&spec)?;
    let test_set = data.split_off(BENCHMARK_TRAIN_COUNT);
    let scribbles = generate_scribbles(&data, spec.m, form, budget, seed)?;
    Ok(BenchmarkData {
        train_set: data,
        test_set,
        scribbles,
        m: spec.m,
    })
}

/// The three training configurations compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    /// Partial cross entropy on the raw scribbles only.
    PceOnly,
    /// Adds mixup augmentation and the global consistency loss.
    PceAugGlobal,
    /// All four loss terms.
    Full,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [
        AblationArm::PceOnly,
        AblationArm::PceAugGlobal,
        AblationArm::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationArm::PceOnly => "pce_only",
            AblationArm::PceAugGlobal => "pce_aug_global",
            AblationArm::Full => "full",
        }
    }

    pub fn config(&self, seed: u64) -> TrainConfig {
        let cfg = benchmark_config(seed);
        match self {
            AblationArm::PceOnly => cfg.pce_only(),
            AblationArm::PceAugGlobal => cfg.pce_aug_global(),
            AblationArm::Full => cfg,
        }
    }
}

/// One trained (arm, seed) cell of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub arm: AblationArm,
    pub seed: u64,
    pub test_dice: f64,
}

/// Seed-averaged ablation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub cells: Vec<AblationCell>,
    pub mean_pce_only: f64,
    pub mean_pce_aug_global: f64,
    pub mean_full: f64,
}

/// Runs the three-arm ablation over the given seeds on the standard
/// benchmark and reports seed-averaged test Dice per arm.
pub fn run_ablation(seeds: &[u64]) -> Result<AblationReport> {
    let keys: Vec<(AblationArm, u64)> = AblationArm::ALL
        .iter()
        .flat_map(|&arm| seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let budget = BudgetSpec::Proportional {
        total: BENCHMARK_SCRIBBLE_TOTAL,
    };
    let cells = run_cells(&keys, |&(arm, seed)| {
        let data = benchmark_data(seed, ScribbleForm::Points, &budget)?;
        let outcome = train_cell(&data, &arm.config(seed))?;
        Ok(AblationCell {
            arm,
            seed,
            test_dice: final_dice(&outcome),
        })
    })?;
    let mean = |arm: AblationArm| {
        let picked: Vec<f64> = cells
            .iter()
            .filter(|c| c.arm == arm)
            .map(|c| c.test_dice)
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    Ok(AblationReport {
        schema_version: crate::io::SCHEMA_VERSION,
        mean_pce_only: mean(AblationArm::PceOnly),
        mean_pce_aug_global: mean(AblationArm::PceAugGlobal),
        mean_full: mean(AblationArm::Full),
        cells,
    })
}

/// How the scalar budgets of a [`StudyRequest`] are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Each budget value is the pixel count per class.
    Uniform,
    /// Each budget value is the total split in proportion to class
    /// area.
    Proportional,
}

/// Request for the annotation-efficiency study: PCE-only training per
/// (form, budget, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyRequest {
    pub forms: Vec<ScribbleForm>,
    pub budgets: Vec<usize>,
    pub budget_mode: BudgetMode,
    pub seeds: Vec<u64>,
}

impl StudyRequest {
    /// The study configuration behind the reported form-ordering and
    /// budget-trend results: three forms, uniform per-class budgets
    /// {3, 6, 12}, five seeds.
    pub fn standard() -> Self {
        StudyRequest {
            forms: vec![
                ScribbleForm::Points,
                ScribbleForm::DirRandomWalk,
                ScribbleForm::RandomWalk { step: 1 },
            ],
            budgets: vec![3, 6, 12],
            budget_mode: BudgetMode::Uniform,
            seeds: (0..5).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.forms.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return Err(Error::BadManifest(
                "study requires at least one form, one budget, and one seed".into(),
            ));
        }
        Ok(())
    }

    fn budget_spec(&self, value: usize) -> BudgetSpec {
        match self.budget_mode {
            BudgetMode::Uniform => BudgetSpec::Uniform { n_pix: value },
            BudgetMode::Proportional => BudgetSpec::Proportional { total: value },
        }
    }
}

/// One trained (form, budget, seed) cell of the efficiency study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub form: ScribbleForm,
    pub budget: usize,
    pub seed: u64,
    pub test_dice: f64,
}

/// Seed-averaged Dice for one (form, budget) point of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub form: ScribbleForm,
    pub budget: usize,
    pub mean_dice: f64,
}

/// Full efficiency-study outcome with trend evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub cells: Vec<StudyCell>,
    pub points: Vec<StudyPoint>,
    /// Per form: seed-averaged Dice never drops by more than
    /// [`TREND_SLACK`] as the budget grows.
    pub budget_trend_ok: Vec<(ScribbleForm, bool)>,
    /// For each adjacent pair in the requested form order at each
    /// budget: Dice(earlier) >= Dice(later) - [`TREND_SLACK`].
    pub form_ordering_ok: bool,
}

/// Slack allowed by the monotone-trend and form-ordering assertions.
pub const TREND_SLACK: f64 = 0.01;

/// Runs the efficiency study: PCE-only training per (form, budget,
/// seed), aggregated deterministically in sorted cell-key order.
pub fn run_study(req: &StudyRequest) -> Result<StudyReport> {
    req.validate()?;
    let mut keys = Vec::new();
    for (fi, &form) in req.forms.iter().enumerate() {
        for &budget in &req.budgets {
            for &seed in &req.seeds {
                keys.push((fi, form, budget, seed));
            }
        }
    }
    let cells = run_cells(&keys, |&(_, form, budget, seed)| {
        let data = benchmark_data(seed, form, &req.budget_spec(budget))?;
        let cfg = benchmark_config(seed).pce_only();
        let outcome = train_cell(&data, &cfg)?;
        Ok(StudyCell {
            form,
            budget,
            seed,
            test_dice: final_dice(&outcome),
        })
    })?;

    let mut points = Vec::new();
    for &form in &req.forms {
        for &budget in &req.budgets {
            let picked: Vec<f64> = cells
                .iter()
                .filter(|c| c.form == form && c.budget == budget)
                .map(|c| c.test_dice)
                .collect();
            points.push(StudyPoint {
                form,
                budget,
                mean_dice: picked.iter().sum::<f64>() / picked.len() as f64,
            });
        }
    }

    let mut budgets_sorted = req.budgets.clone();
    budgets_sorted.sort_unstable();
    let mean_of = |form: ScribbleForm, budget: usize| {
        points
            .iter()
            .find(|p| p.form == form && p.budget == budget)
            .map(|p| p.mean_dice)
            .unwrap()
    };
    let budget_trend_ok = req
        .forms
        .iter()
        .map(|&form| {
            let ok = budgets_sorted
                .windows(2)
                .all(|w| mean_of(form, w[1]) >= mean_of(form, w[0]) - TREND_SLACK);
            (form, ok)
        })
        .collect();
    let form_ordering_ok = budgets_sorted.iter().all(|&budget| {
        req.forms
            .windows(2)
            .all(|w| mean_of(w[0], budget) >= mean_of(w[1], budget) - TREND_SLACK)
    });

    Ok(StudyReport {
        schema_version: crate::io::SCHEMA_VERSION,
        cells,
        points,
        budget_trend_ok,
        form_ordering_ok,
    })
}

fn train_cell(data: &BenchmarkData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(
        &data.train_set,
        &data.scribbles,
        &data.test_set,
        data.m,
        cfg,
    )
}

fn final_dice(outcome: &TrainOutcome) -> f64 {
    outcome.log.last().map(|r| r.test_dice).unwrap_or(0.0)
}

/// Maps `f` over the cell keys, in parallel when the `parallel` feature
/// is enabled, preserving key order in the output.
fn run_cells<K: Sync, T: Send>(
    keys: &[K],
    f: impl Fn(&K) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        keys.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        keys.iter().map(f).collect()
    }
}
