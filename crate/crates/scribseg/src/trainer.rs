//! Synthetic nested-shape dataset, a linear-softmax pixel classifier
//! over handcrafted features, and the training loop that wires scribble
//! supervision, mixup augmentation, the consistency loss, mixture-ratio
//! estimation, the spatial prior, and shape regularization together.
//!
//! The classifier is deliberately linear so every gradient is analytic
//! and auditable by finite differences at desk scale.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::core::{
    maybe_par_map, softmax, ClassSet, Image, LabelMap, ProbMap, SeededRng, SoftLabelMap, UNLABELED,
};
use crate::energy::{
    precompute_kernel, rank_select, spatial_energy_cached, ClassSplit, EnergyConfig, KernelCache,
};
use crate::error::{Error, Result};
use crate::estimator::{estimate_pi, PosteriorBatch, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::losses::{
    global_consistency_loss, pce_loss, shape_loss, spatial_prior_loss, LossValue, LossWeights,
};
use crate::metrics;
use crate::mixaug::{apply_mix, occlude_at, plan_mix, MixConfig, MixPlan};

/// Per-class base intensities of the synthetic dataset: background,
/// disk, ring, blob.
pub const BASE_INTENSITIES: [f64; 4] = [0.15, 0.85, 0.45, 0.65];

/// Synthetic nested-shape dataset specification. Each image holds a
/// bright disk nested inside a ring plus an offset blob, mimicking the
/// nesting of cardiac structures at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub side: usize,
    pub m: usize,
    pub noise_sigma: f64,
    /// Peak of a fixed diagonal illumination gradient added to every
    /// image. It is identical across the dataset and linear in the
    /// pixel coordinates, so a model with coordinate features can
    /// compensate it exactly — but only when its supervision covers
    /// enough of the image plane to pin the slope down.
    pub ramp: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            side: 64,
            m: 4,
            noise_sigma: 0.05,
            ramp: 0.3,
            count: 15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.side < 32 || self.m < 2 || self.m > 4 || self.count == 0 {
            return Err(Error::BadManifest(format!(
                "invalid synthetic spec: side {} (>= 32), m {} (2..=4), count {}",
                self.side, self.m, self.count
            )));
        }
        Ok(())
    }
}

/// One synthetic image with exact ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub gt: LabelMap,
}

/// Generate `spec.count` images. Class layout per image: a disk
/// (class 1) surrounded by a ring (class 2), plus an offset elliptical
/// blob (class 3) touching the ring from outside; classes above
/// `spec.m - 1` are omitted.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    (0..spec.count)
        .map(|i| synth_one(spec, &mut root.derive(i as u64)))
        .collect()
}

fn synth_one(spec: &SynthSpec, rng: &mut SeededRng) -> Result<Sample> {
    let s = spec.side as f64;
    let side = spec.side;
    let cy = rng.gen_range(0.42 * s..0.58 * s);
    let cx = rng.gen_range(0.42 * s..0.58 * s);
    let r_disk = rng.gen_range(0.10 * s..0.16 * s);
    let t_ring = rng.gen_range(0.05 * s..0.08 * s);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let r_ring = r_disk + t_ring;
    let blob_a = rng.gen_range(0.08 * s..0.12 * s);
    let blob_b = rng.gen_range(0.05 * s..0.08 * s);
    let blob_cy = cy + (r_ring + 0.8 * blob_a) * theta.sin();
    let blob_cx = cx + (r_ring + 0.8 * blob_a) * theta.cos();
    let phi = rng.gen_range(0.0..std::f64::consts::PI);
    let mut labels = vec![0u16; side * side];
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let label = if d <= r_disk {
                1
            } else if d <= r_ring && spec.m > 2 {
                2
            } else if spec.m > 3 {
                // Rotated ellipse membership for the blob.
                let (dy, dx) = (y - blob_cy, x - blob_cx);
                let (sin, cos) = phi.sin_cos();
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if (u / blob_a).powi(2) + (v / blob_b).powi(2) <= 1.0 {
                    3
                } else {
                    0
                }
            } else {
                0
            };
            labels[r * side + c] = label;
        }
    }
    let gt = LabelMap::new(side, side, labels)?;
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let data: Vec<f64> = gt
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let base = BASE_INTENSITIES[l as usize] + ramp_at(spec, i / side, i % side);
            if spec.noise_sigma > 0.0 {
                base + normal.sample(rng)
            } else {
                base
            }
        })
        .collect();
    Ok(Sample {
        image: Image::new(side, side, 1, data)?,
        gt,
    })
}

/// Shared diagonal illumination offset at a pixel, from 0 at the
/// top-left corner to `spec.ramp` at the bottom-right.
pub fn ramp_at(spec: &SynthSpec, row: usize, col: usize) -> f64 {
    spec.ramp * (row + col) as f64 / (2 * (spec.side - 1)) as f64
}

/// Handcrafted per-pixel features: channel intensities, 3x3 local mean
/// and standard deviation per channel (reflection padding), normalized
/// x and y in [0, 1], and a constant 1.
pub fn featurize(image: &Image) -> Features {
    let (h, w, c) = (image.height, image.width, image.channels);
    let dim = 3 * c + 3;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        };
        i.clamp(0, n - 1) as usize
    };
    let mut data = vec![0.0; h * w * dim];
    for r in 0..h {
        for col in 0..w {
            let f = &mut data[(r * w + col) * dim..(r * w + col) * dim + dim];
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let v = image.at(
                            reflect(r as isize + dr, h),
                            reflect(col as isize + dc, w),
                            ch,
                        );
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / 9.0;
                let var = (sq / 9.0 - mean * mean).max(0.0);
                f[ch] = image.at(r, col, ch);
                f[c + ch] = mean;
                f[2 * c + ch] = var.sqrt();
            }
            f[3 * c] = if w > 1 {
                col as f64 / (w - 1) as f64
            } else {
                0.0
            };
            f[3 * c + 1] = if h > 1 {
                r as f64 / (h - 1) as f64
            } else {
                0.0
            };
            f[3 * c + 2] = 1.0;
        }
    }
    Features {
        height: h,
        width: w,
        dim,
        data,
    }
}

/// Row-major per-pixel feature matrix.
#[derive(Debug, Clone)]
pub struct Features {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Linear-softmax pixel classifier: logits = W^T f + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelModel {
    /// Row-major `dim x m` weight matrix.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub m: usize,
}

impl PixelModel {
    pub fn zeros(dim: usize, m: usize) -> Self {
        Self {
            weights: vec![0.0; dim * m],
            bias: vec![0.0; m],
            dim,
            m,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Forward pass over precomputed features.
pub fn predict_features(model: &PixelModel, feats: &Features) -> Result<ProbMap> {
    if feats.dim != model.dim {
        return Err(Error::FeatureDimMismatch {
            expected: model.dim,
            got: feats.dim,
        });
    }
    let (m, dim) = (model.m, model.dim);
    let rows = maybe_par_map(feats.n_pixels(), |i| {
        let f = feats.row(i);
        let mut logits = vec![0.0; m];
        for k in 0..m {
            let mut z = model.bias[k];
            for d in 0..dim {
                z += model.weights[d * m + k] * f[d];
            }
            logits[k] = z;
        }
        softmax(&logits)
    });
    let mut probs = Vec::with_capacity(feats.n_pixels() * m);
    for row in rows {
        probs.extend(row?);
    }
    Ok(ProbMap::new_unchecked(feats.height, feats.width, m, probs))
}

/// Featurize-then-forward convenience wrapper.
pub fn predict(model: &PixelModel, image: &Image) -> Result<ProbMap> {
    predict_features(model, &featurize(image))
}

/// Training schedule configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Images per gradient update.
    pub batch_size: usize,
    pub weights: LossWeights,
    pub energy: EnergyConfig,
    pub mix: MixConfig,
    /// Enable mixup + occlusion supervision augmentation.
    pub augment: bool,
    /// Classes regularized toward a single connected component.
    pub connected_classes: Vec<u16>,
    /// Also hold back the shape loss during the warm-up epochs. The
    /// default keeps it active from the start; self-distilling a near-
    /// uniform early prediction can lock in a bad argmax, so benchmark
    /// configurations typically enable this.
    pub gate_shape_with_warmup: bool,
    /// Blend factor pulling the estimated mixture ratio back toward
    /// the scribble-label frequency: 0 uses the EM estimate as is,
    /// 1 ignores it. Damping guards the ranking against the corner
    /// fixed points EM reaches on miscalibrated early predictions.
    pub pi_damping: f64,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub occlusion_side: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.05,
            batch_size: 10,
            weights: LossWeights {
                warmup_epochs: 30,
                ..LossWeights::default()
            },
            energy: EnergyConfig::default(),
            mix: MixConfig::default(),
            augment: true,
            connected_classes: vec![1, 2, 3],
            gate_shape_with_warmup: false,
            pi_damping: 0.0,
            em_tol: DEFAULT_TOL,
            em_max_iter: DEFAULT_MAX_ITER,
            occlusion_side: crate::mixaug::default_occlusion_side(64),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Ablation baseline: partial cross entropy only.
    pub fn pce_only(mut self) -> Self {
        self.augment = false;
        self.weights.lambda1 = 0.0;
        self.weights.lambda2 = 0.0;
        self.weights.lambda3 = 0.0;
        self
    }

    /// Ablation middle rung: augmentation plus global consistency.
    pub fn pce_aug_global(mut self) -> Self {
        self.augment = true;
        self.weights.lambda2 = 0.0;
        self.weights.lambda3 = 0.0;
        self
    }
}

/// One per-epoch log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pce: f64,
    pub global: f64,
    pub spatial: f64,
    pub shape: f64,
    pub total: f64,
    pub test_dice: f64,
}

/// Trained model plus the per-epoch metric log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PixelModel,
    pub log: Vec<EpochRecord>,
    /// Final mixture-ratio estimate, when the spatial branch ran.
    pub final_pi: Option<Vec<f64>>,
}

/// Class frequencies over scribbled pixels pooled across the set.
fn pooled_labeled_frequency(scribbles: &[LabelMap], m: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; m];
    for s in scribbles {
        for &l in &s.labels {
            if l != UNLABELED {
                counts[l as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoSupervision);
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::ClassUnobserved { class: k });
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Blockwise mix of two prediction tensors under the same plan used for
/// the images, with the occluded region zeroed. The result is a raw
/// tensor (rows need not be simplex) used as a consistency target.
fn mix_predictions(p1: &ProbMap, p2: &ProbMap, plan: &MixPlan) -> ProbMap {
    let (h, w, m) = (p1.height, p1.width, p1.m);
    let grid = plan.grid;
    let (bh, bw) = (h / grid, w / grid);
    let mut out = vec![0.0; h * w * m];
    for b in 0..grid * grid {
        let beta = plan.beta[b];
        let (dst_r, dst_c) = (b / grid * bh, b % grid * bw);
        let (s1_r, s1_c) = (plan.perm1[b] / grid * bh, plan.perm1[b] % grid * bw);
        let (s2_r, s2_c) = (plan.perm2[b] / grid * bh, plan.perm2[b] % grid * bw);
        for r in 0..bh {
            for c in 0..bw {
                let dst = (dst_r + r) * w + (dst_c + c);
                let i1 = (s1_r + r) * w + (s1_c + c);
                let i2 = (s2_r + r) * w + (s2_c + c);
                for k in 0..m {
                    out[dst * m + k] =
                        (1.0 - beta) * p1.probs[i1 * m + k] + beta * p2.probs[i2 * m + k];
                }
            }
        }
    }
    if let Some(occ) = &plan.occlusion {
        for r in 0..h {
            for c in 0..w {
                if crate::mixaug::occlusion_covers(occ, r, c) {
                    out[(r * w + c) * m..(r * w + c + 1) * m].fill(0.0);
                }
            }
        }
    }
    ProbMap::new_unchecked(h, w, m, out)
}

/// Accumulate `feats^T grad_logits` into the weight-space gradient.
fn accumulate_weight_grad(
    feats: &Features,
    grad_logits: &[f64],
    m: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let dim = feats.dim;
    for i in 0..feats.n_pixels() {
        let f = feats.row(i);
        let g = &grad_logits[i * m..(i + 1) * m];
        for d in 0..dim {
            let fd = f[d];
            if fd == 0.0 {
                continue;
            }
            for k in 0..m {
                gw[d * m + k] += fd * g[k];
            }
        }
        for k in 0..m {
            gb[k] += g[k];
        }
    }
}

struct SpatialState {
    pi: Vec<f64>,
    /// Per-train-image positive/negative splits.
    splits: Vec<ClassSplit>,
}

/// Pooled EM estimate of the class mixture ratio over unlabeled pixels,
/// then per-image energy ranking into positives/negatives.
fn build_spatial_state(
    preds: &[ProbMap],
    scribbles: &[LabelMap],
    caches: &[KernelCache],
    labeled_freq: &[f64],
    cfg: &TrainConfig,
    m: usize,
) -> Result<SpatialState> {
    let mut rows: Vec<f64> = Vec::new();
    for (pred, scribble) in preds.iter().zip(scribbles) {
        for (i, &l) in scribble.labels.iter().enumerate() {
            if l == UNLABELED {
                rows.extend_from_slice(pred.row(i));
            }
        }
    }
    let batch = PosteriorBatch::new(rows, m, labeled_freq.to_vec())?;
    let est = estimate_pi(&batch, labeled_freq, cfg.em_tol, cfg.em_max_iter)?;
    let d = cfg.pi_damping.clamp(0.0, 1.0);
    let mut pi: Vec<f64> = est
        .pi
        .iter()
        .zip(labeled_freq)
        .map(|(&e, &f)| (1.0 - d) * e + d * f)
        .collect();
    let z: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= z;
    }
    let splits = preds
        .iter()
        .zip(scribbles)
        .zip(caches)
        .map(|((pred, scribble), cache)| {
            let mut split = ClassSplit {
                positives: vec![Vec::new(); m],
                negatives: vec![Vec::new(); m],
            };
            for k in 0..m {
                let energy = spatial_energy_cached(pred, cache, k);
                let (pos, neg) = rank_select(&energy, scribble, pi[k]);
                split.positives[k] = pos;
                split.negatives[k] = neg;
            }
            Ok(split)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpatialState { pi, splits })
}

/// Mean foreground Dice of the model over a labeled evaluation set.
pub fn mean_test_dice(model: &PixelModel, test: &[Sample], m: usize) -> Result<f64> {
    if test.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for sample in test {
        let pred = predict(model, &sample.image)?.argmax();
        acc += metrics::evaluate(&pred, &sample.gt, m)?.mean_dice;
    }
    Ok(acc / test.len() as f64)
}

/// Train the pixel classifier on scribble supervision. `train_set` and
/// `scribbles` are parallel slices; `test_set` is held out and only
/// used for the per-epoch Dice log.
pub fn train(
    train_set: &[Sample],
    scribbles: &[LabelMap],
    test_set: &[Sample],
    m: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || train_set.len() != scribbles.len() {
        return Err(Error::NoSupervision);
    }
    let labeled_freq = pooled_labeled_frequency(scribbles, m)?;
    let feats: Vec<Features> = train_set.iter().map(|s| featurize(&s.image)).collect();
    let dim = feats[0].dim;
    let mut model = PixelModel::zeros(dim, m);
    let targets: Vec<SoftLabelMap> = scribbles
        .iter()
        .map(|s| SoftLabelMap::from_labels(s, m))
        .collect::<Result<Vec<_>>>()?;
    let classes = ClassSet::new(
        m,
        cfg.connected_classes
            .iter()
            .copied()
            .filter(|&k| (k as usize) < m)
            .collect(),
    )?;
    let spatial_on = cfg.weights.lambda2 > 0.0;
    let shape_on = cfg.weights.lambda3 > 0.0;
    let global_on = cfg.augment && cfg.weights.lambda1 > 0.0;
    // Kernel caches are only needed once the spatial branch activates.
    let mut caches: Vec<KernelCache> = Vec::new();
    let root = SeededRng::new(cfg.seed);
    let n = train_set.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut final_pi = None;
    for epoch in 0..cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        // Current predictions on the unmixed training images, used by
        // the spatial branch, the shape loss, and as consistency
        // targets; all stop-gradient.
        let preds: Vec<ProbMap> = feats
            .iter()
            .map(|f| predict_features(&model, f))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                // Logits blowing past f64 range mid-run is divergence,
                // not a malformed input.
                Error::NonFiniteLogits => Error::TrainingDiverged { epoch },
                other => other,
            })?;
        let spatial = if spatial_on && epoch >= cfg.weights.warmup_epochs {
            if caches.is_empty() {
                caches = train_set
                    .iter()
                    .map(|s| precompute_kernel(&s.image, &cfg.energy))
                    .collect();
            }
            let state = build_spatial_state(&preds, scribbles, &caches, &labeled_freq, cfg, m)?;
            final_pi = Some(state.pi.clone());
            Some(state)
        } else {
            None
        };
        // Random pairing for this epoch's augmentation.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut gw = vec![0.0; dim * m];
        let mut gb = vec![0.0; m];
        let mut in_batch = 0usize;
        let mut sums = [0.0f64; 5]; // pce, global, spatial, shape, total
        for (pos, &i) in order.iter().enumerate() {
            // Pair neighbor in the shuffled order; the odd image out
            // (when n is odd) trains unaugmented this epoch.
            let partner = if pos ^ 1 < n { order[pos ^ 1] } else { i };
            let pred_i = predict_features(&model, &feats[i])?;
            let mut pce_val = pce_loss(&pred_i, &targets[i])?;
            accumulate_weight_grad(&feats[i], &pce_val.grad, m, &mut gw, &mut gb);
            let mut global_val = LossValue::zero(pred_i.probs.len());
            if cfg.augment && partner != i {
                let (x1, y1) = (&train_set[i].image, &scribbles[i]);
                let (x2, y2) = (&train_set[partner].image, &scribbles[partner]);
                let plan = plan_mix(x1, x2, &cfg.mix, cfg.occlusion_side, &mut rng)?;
                let (mut xm, mut ym) = apply_mix(x1, y1, x2, y2, &plan, m)?;
                if let Some(occ) = &plan.occlusion {
                    occlude_at(&mut xm, &mut ym, occ)?;
                }
                let fm = featurize(&xm);
                let pred_m = predict_features(&model, &fm)?;
                // Mixed-pair supervision: PCE against transported soft
                // labels plus occluded background.
                let pce_m = pce_loss(&pred_m, &ym)?;
                accumulate_weight_grad(&fm, &pce_m.grad, m, &mut gw, &mut gb);
                pce_val.value = 0.5 * (pce_val.value + pce_m.value);
                if global_on {
                    // Both mix directions share beta but swap roles.
                    let plan21 = plan_mix(x2, x1, &cfg.mix, cfg.occlusion_side, &mut rng)?;
                    let (mut xm21, mut ym21) = apply_mix(x2, y2, x1, y1, &plan21, m)?;
                    if let Some(occ) = &plan21.occlusion {
                        occlude_at(&mut xm21, &mut ym21, occ)?;
                    }
                    let fm21 = featurize(&xm21);
                    let pred_m21 = predict_features(&model, &fm21)?;
                    let u12 = mix_predictions(&preds[i], &preds[partner], &plan);
                    let u21 = mix_predictions(&preds[partner], &preds[i], &plan21);
                    let cons = global_consistency_loss(&u12, &pred_m, &u21, &pred_m21)?;
                    let mut g12 = cons.grad_v12;
                    let mut g21 = cons.grad_v21;
                    for g in g12.iter_mut() {
                        *g *= cfg.weights.lambda1;
                    }
                    for g in g21.iter_mut() {
                        *g *= cfg.weights.lambda1;
                    }
                    accumulate_weight_grad(&fm, &g12, m, &mut gw, &mut gb);
                    accumulate_weight_grad(&fm21, &g21, m, &mut gw, &mut gb);
                    global_val.value = cons.value;
                }
            }
            let spatial_val = match &spatial {
                Some(state) => {
                    let v = spatial_prior_loss(&pred_i, &state.splits[i]);
                    let mut g = v.grad.clone();
                    for x in g.iter_mut() {
                        *x *= cfg.weights.lambda2;
                    }
                    accumulate_weight_grad(&feats[i], &g, m, &mut gw, &mut gb);
                    v
                }
                None => LossValue::zero(pred_i.probs.len()),
            };
            let shape_val = if shape_on
                && (!cfg.gate_shape_with_warmup || epoch >= cfg.weights.warmup_epochs)
            {
                let v = shape_loss(&pred_i, &classes);
                let mut g = v.grad.clone();
                for x in g.iter_mut() {
                    *x *= cfg.weights.lambda3;
                }
                accumulate_weight_grad(&feats[i], &g, m, &mut gw, &mut gb);
                v
            } else {
                LossValue::zero(pred_i.probs.len())
            };
            let total = pce_val.value
                + cfg.weights.lambda1 * global_val.value
                + cfg.weights.lambda2 * spatial_val.value
                + cfg.weights.lambda3 * shape_val.value;
            if !total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            sums[0] += pce_val.value;
            sums[1] += global_val.value;
            sums[2] += spatial_val.value;
            sums[3] += shape_val.value;
            sums[4] += total;
            in_batch += 1;
            if in_batch == cfg.batch_size || pos + 1 == n {
                let scale = cfg.learning_rate / in_batch as f64;
                for (wv, g) in model.weights.iter_mut().zip(&gw) {
                    *wv -= scale * g;
                }
                for (bv, g) in model.bias.iter_mut().zip(&gb) {
                    *bv -= scale * g;
                }
                gw.fill(0.0);
                gb.fill(0.0);
                in_batch = 0;
            }
        }
        if !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let inv = 1.0 / n as f64;
        log.push(EpochRecord {
            epoch,
            pce: sums[0] * inv,
            global: sums[1] * inv,
            spatial: sums[2] * inv,
            shape: sums[3] * inv,
            total: sums[4] * inv,
            test_dice: mean_test_dice(&model, test_set, m).map_err(|e| match e {
                Error::NonFiniteLogits => Error::TrainingDiverged { epoch },
                other => other,
            })?,
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        final_pi,
    })
}

/// Worst relative disagreement between the analytic weight-space
/// gradient and central finite differences, per loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub pce: f64,
    pub global: f64,
    pub spatial: f64,
    pub shape: f64,
    pub total: f64,
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff < 1e-9 {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Audit every analytic gradient against central finite differences on
/// one image (paired with its mirror image for the consistency term).
/// All stop-gradient targets are frozen at the base model.
pub fn finite_diff_audit(
    model: &PixelModel,
    image: &Image,
    scribbles: &LabelMap,
    m: usize,
    cfg: &TrainConfig,
) -> Result<AuditReport> {
    let feats = featurize(image);
    if feats.dim != model.dim {
        return Err(Error::FeatureDimMismatch {
            expected: model.dim,
            got: feats.dim,
        });
    }
    let targets = SoftLabelMap::from_labels(scribbles, m)?;
    if targets.weights.iter().all(|&v| v == 0.0) {
        return Err(Error::NoSupervision);
    }
    // Mirror partner exercises a non-trivial mix.
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut mirror = Image::zeros(h, w, c);
    let mut mirror_scribbles = LabelMap::unlabeled(h, w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                *mirror.at_mut(r, col, ch) = image.at(r, w - 1 - col, ch);
            }
            mirror_scribbles.set(r, col, scribbles.at(r, w - 1 - col));
        }
    }
    let mut rng = SeededRng::new(cfg.seed).derive(0xa0d17);
    let plan = plan_mix(image, &mirror, &cfg.mix, cfg.occlusion_side, &mut rng)?;
    let plan21 = plan_mix(&mirror, image, &cfg.mix, cfg.occlusion_side, &mut rng)?;
    let (mut xm, mut ym) = apply_mix(image, scribbles, &mirror, &mirror_scribbles, &plan, m)?;
    if let Some(occ) = &plan.occlusion {
        occlude_at(&mut xm, &mut ym, occ)?;
    }
    let (mut xm21, mut ym21) = apply_mix(&mirror, &mirror_scribbles, image, scribbles, &plan21, m)?;
    if let Some(occ) = &plan21.occlusion {
        occlude_at(&mut xm21, &mut ym21, occ)?;
    }
    let fm = featurize(&xm);
    let fm21 = featurize(&xm21);
    let mirror_feats = featurize(&mirror);
    // Frozen stop-gradient targets from the base model.
    let base_pred = predict_features(model, &feats)?;
    let base_mirror = predict_features(model, &mirror_feats)?;
    let u12 = mix_predictions(&base_pred, &base_mirror, &plan);
    let u21 = mix_predictions(&base_mirror, &base_pred, &plan21);
    let classes = ClassSet::new(
        m,
        cfg.connected_classes
            .iter()
            .copied()
            .filter(|&k| (k as usize) < m)
            .collect(),
    )?;
    let hard = base_pred.argmax();
    let mut shape_targets: Vec<(usize, crate::morphology::BinaryMask)> = Vec::new();
    let mut shape_total = 0usize;
    for &k in &classes.connected_classes {
        let lc = crate::morphology::largest_component(&crate::morphology::BinaryMask::of_class(
            &hard, k,
        ));
        shape_total += lc.count();
        shape_targets.push((k as usize, lc));
    }
    let labeled_freq = pooled_labeled_frequency(std::slice::from_ref(scribbles), m)?;
    let cache = precompute_kernel(image, &cfg.energy);
    let mut splits = ClassSplit {
        positives: vec![Vec::new(); m],
        negatives: vec![Vec::new(); m],
    };
    {
        let mut rows = Vec::new();
        for (i, &l) in scribbles.labels.iter().enumerate() {
            if l == UNLABELED {
                rows.extend_from_slice(base_pred.row(i));
            }
        }
        let batch = PosteriorBatch::new(rows, m, labeled_freq.clone())?;
        let est = estimate_pi(&batch, &labeled_freq, cfg.em_tol, cfg.em_max_iter)?;
        for k in 0..m {
            let energy = spatial_energy_cached(&base_pred, &cache, k);
            let (pos, neg) = rank_select(&energy, scribbles, est.pi[k]);
            splits.positives[k] = pos;
            splits.negatives[k] = neg;
        }
    }
    // Loss values as functions of a flat parameter vector [W; b].
    let n_params = model.dim * m + m;
    let unpack = |params: &[f64]| -> PixelModel {
        PixelModel {
            weights: params[..model.dim * m].to_vec(),
            bias: params[model.dim * m..].to_vec(),
            dim: model.dim,
            m,
        }
    };
    let pack = |model: &PixelModel| -> Vec<f64> {
        let mut v = model.weights.clone();
        v.extend_from_slice(&model.bias);
        v
    };
    let shape_frozen = |pred: &ProbMap| -> f64 {
        if shape_total == 0 {
            return 0.0;
        }
        let mut v = 0.0;
        for (k, mask) in &shape_targets {
            for (i, &b) in mask.bits.iter().enumerate() {
                if b {
                    v -= pred.row(i)[*k].max(crate::losses::LOG_CLAMP).ln();
                }
            }
        }
        v / shape_total as f64
    };
    let eval = |params: &[f64]| -> Result<(f64, f64, f64, f64)> {
        let model = unpack(params);
        let pred = predict_features(&model, &feats)?;
        let pce = pce_loss(&pred, &targets)?.value;
        let v12 = predict_features(&model, &fm)?;
        let v21 = predict_features(&model, &fm21)?;
        let global = global_consistency_loss(&u12, &v12, &u21, &v21)?.value;
        let spatial = spatial_prior_loss(&pred, &splits).value;
        let shape = shape_frozen(&pred);
        Ok((pce, global, spatial, shape))
    };
    // Analytic gradients.
    let pred = predict_features(model, &feats)?;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    {
        let pce = pce_loss(&pred, &targets)?;
        let mut gw = vec![0.0; model.dim * m];
        let mut gb = vec![0.0; m];
        accumulate_weight_grad(&feats, &pce.grad, m, &mut gw, &mut gb);
        gw.extend(gb);
        grads.push(gw);
    }
    {
        let v12 = predict_features(model, &fm)?;
        let v21 = predict_features(model, &fm21)?;
        let cons = global_consistency_loss(&u12, &v12, &u21, &v21)?;
        let mut gw = vec![0.0; model.dim * m];
        let mut gb = vec![0.0; m];
        accumulate_weight_grad(&fm, &cons.grad_v12, m, &mut gw, &mut gb);
        accumulate_weight_grad(&fm21, &cons.grad_v21, m, &mut gw, &mut gb);
        gw.extend(gb);
        grads.push(gw);
    }
    {
        let spatial = spatial_prior_loss(&pred, &splits);
        let mut gw = vec![0.0; model.dim * m];
        let mut gb = vec![0.0; m];
        accumulate_weight_grad(&feats, &spatial.grad, m, &mut gw, &mut gb);
        gw.extend(gb);
        grads.push(gw);
    }
    {
        let shape = shape_loss(&pred, &classes);
        let mut gw = vec![0.0; model.dim * m];
        let mut gb = vec![0.0; m];
        accumulate_weight_grad(&feats, &shape.grad, m, &mut gw, &mut gb);
        gw.extend(gb);
        grads.push(gw);
    }
    let lambdas = [
        1.0,
        cfg.weights.lambda1,
        cfg.weights.lambda2,
        cfg.weights.lambda3,
    ];
    let total_grad: Vec<f64> = (0..n_params)
        .map(|i| (0..4).map(|t| lambdas[t] * grads[t][i]).sum())
        .collect();
    // Numeric gradients per loss via central differences.
    let base = pack(model);
    let step = 1e-5;
    let mut numeric = vec![vec![0.0; n_params]; 4];
    let mut z = base.clone();
    for i in 0..n_params {
        let orig = z[i];
        z[i] = orig + step;
        let up = eval(&z)?;
        z[i] = orig - step;
        let down = eval(&z)?;
        z[i] = orig;
        let ups = [up.0, up.1, up.2, up.3];
        let downs = [down.0, down.1, down.2, down.3];
        for t in 0..4 {
            numeric[t][i] = (ups[t] - downs[t]) / (2.0 * step);
        }
    }
    let numeric_total: Vec<f64> = (0..n_params)
        .map(|i| (0..4).map(|t| lambdas[t] * numeric[t][i]).sum())
        .collect();
    Ok(AuditReport {
        pce: max_rel_error(&grads[0], &numeric[0]),
        global: max_rel_error(&grads[1], &numeric[1]),
        spatial: max_rel_error(&grads[2], &numeric[2]),
        shape: max_rel_error(&grads[3], &numeric[3]),
        total: max_rel_error(&total_grad, &numeric_total),
    })
}

/// Saliency of the supervision signal: the input-space gradient norm of
/// the partial cross entropy, usable as the loss-gradient saliency mode.
pub fn pce_input_gradient(
    model: &PixelModel,
    image: &Image,
    scribbles: &LabelMap,
    m: usize,
) -> Result<Image> {
    let feats = featurize(image);
    let pred = predict_features(model, &feats)?;
    let targets = SoftLabelMap::from_labels(scribbles, m)?;
    let loss = pce_loss(&pred, &targets)?;
    // d logits / d intensity channel: the raw-intensity feature weight
    // plus the 3x3 mean-feature weight spread over the window; the
    // dominant direct term suffices for a saliency signal.
    let c = image.channels;
    let mut out = Image::zeros(image.height, image.width, c);
    for i in 0..feats.n_pixels() {
        let g = &loss.grad[i * m..(i + 1) * m];
        for ch in 0..c {
            let mut acc = 0.0;
            for k in 0..m {
                acc += g[k] * (model.weights[ch * m + k] + model.weights[(c + ch) * m + k] / 9.0);
            }
            out.data[i * c + ch] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scribblegen::{generate, ScribbleBudget, ScribbleForm};

    fn spec() -> SynthSpec {
        SynthSpec {
            side: 64,
            m: 4,
            noise_sigma: 0.05,
            ramp: 0.3,
            count: 3,
            seed: 7,
        }
    }

    #[test]
    fn synth_noise_free_intensities_exact() {
        let s = SynthSpec {
            noise_sigma: 0.0,
            ..spec()
        };
        for sample in synth_dataset(&s).unwrap() {
            for (i, &l) in sample.gt.labels.iter().enumerate() {
                let want = BASE_INTENSITIES[l as usize] + ramp_at(&s, i / 64, i % 64);
                assert_eq!(sample.image.data[i], want);
            }
        }
    }

    #[test]
    fn synth_deterministic_per_seed() {
        let a = synth_dataset(&spec()).unwrap();
        let b = synth_dataset(&spec()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.gt.labels, y.gt.labels);
        }
    }

    #[test]
    fn synth_class_areas_within_bounds() {
        // Disk radius in [0.10s, 0.16s] bounds the class-1 area; the
        // blob ellipse bounds class 3. Checked over 100 seeds.
        let mut spec = spec();
        spec.count = 1;
        for seed in 0..100 {
            spec.seed = seed;
            let sample = &synth_dataset(&spec).unwrap()[0];
            let s = spec.side as f64;
            let count = |k: u16| sample.gt.labels.iter().filter(|&&l| l == k).count() as f64;
            let disk = count(1);
            let lo = std::f64::consts::PI * (0.10 * s - 1.0).powi(2) * 0.8;
            let hi = std::f64::consts::PI * (0.16 * s + 1.0).powi(2) * 1.2;
            assert!(
                disk > lo && disk < hi,
                "disk area {disk} outside [{lo}, {hi}]"
            );
            // All classes present.
            for k in 0..4 {
                assert!(count(k) > 0.0, "class {k} missing (seed {seed})");
            }
        }
    }

    #[test]
    fn featurize_constant_image() {
        let img = Image::new(4, 4, 1, vec![0.3; 16]).unwrap();
        let f = featurize(&img);
        assert_eq!(f.dim, 6);
        for i in 0..16 {
            let row = f.row(i);
            assert!((row[0] - 0.3).abs() < 1e-12);
            assert!((row[1] - 0.3).abs() < 1e-12); // mean
            assert!(row[2].abs() < 1e-7); // std
            assert_eq!(row[5], 1.0);
        }
    }

    #[test]
    fn featurize_corner_mean_reflection() {
        // 3x3 image, corner (0,0): reflected window indices duplicate
        // row/col 1 values. Window values: [v11,v10,v11, v01,v00,v01,
        // v11,v10,v11] where vrc = image[r][c] with reflection r=-1 -> 1.
        let img = Image::new(3, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let f = featurize(&img);
        // Reflection of index -1 is 1: rows used are {1,0,1}, cols {1,0,1}.
        let vals = [5.0, 4.0, 5.0, 2.0, 1.0, 2.0, 5.0, 4.0, 5.0];
        let mean: f64 = vals.iter().sum::<f64>() / 9.0;
        assert!((f.row(0)[1] - mean).abs() < 1e-12);
    }

    #[test]
    fn featurize_normalized_coordinates() {
        let img = Image::zeros(5, 7, 1);
        let f = featurize(&img);
        assert_eq!(f.row(0)[3], 0.0);
        assert_eq!(f.row(0)[4], 0.0);
        let last = f.row(5 * 7 - 1);
        assert_eq!(last[3], 1.0);
        assert_eq!(last[4], 1.0);
        let mid = f.row(2 * 7 + 3);
        assert!((mid[3] - 0.5).abs() < 1e-12);
        assert!((mid[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_zero_weights_uniform() {
        let img = Image::new(4, 4, 1, vec![0.5; 16]).unwrap();
        let model = PixelModel::zeros(6, 3);
        let p = predict(&model, &img).unwrap();
        for i in 0..16 {
            for k in 0..3 {
                assert!((p.row(i)[k] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_intensity_monotone() {
        // Weight only the raw-intensity feature for class 1: its
        // probability must increase with intensity.
        let mut model = PixelModel::zeros(6, 2);
        model.weights[1] = 3.0; // feature 0, class 1
        let img = Image::new(1, 4, 1, vec![0.1, 0.3, 0.6, 0.9]).unwrap();
        let p = predict(&model, &img).unwrap();
        for i in 1..4 {
            assert!(p.row(i)[1] > p.row(i - 1)[1]);
        }
    }

    #[test]
    fn predict_simplex_rows() {
        let sample = &synth_dataset(&spec()).unwrap()[0];
        let mut model = PixelModel::zeros(6, 4);
        for (i, w) in model.weights.iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        let p = predict(&model, &sample.image).unwrap();
        for i in 0..p.n_pixels() {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn predict_feature_dim_mismatch() {
        let img = Image::zeros(4, 4, 1);
        let model = PixelModel::zeros(9, 3);
        assert!(matches!(
            predict(&model, &img),
            Err(Error::FeatureDimMismatch { .. })
        ));
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            // The linear model needs far larger steps than the default
            // schedule to move visibly within a short test run.
            learning_rate: 1.0,
            occlusion_side: crate::mixaug::default_occlusion_side(64),
            weights: LossWeights {
                warmup_epochs: epochs / 2,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    fn scribbled(samples: &[Sample], seed: u64) -> Vec<LabelMap> {
        let mut rng = SeededRng::new(seed);
        samples
            .iter()
            .map(|s| {
                generate(
                    &s.gt,
                    ScribbleForm::Points,
                    &ScribbleBudget::uniform(4, 20),
                    &mut rng,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn train_deterministic() {
        let data = synth_dataset(&spec()).unwrap();
        let scribbles = scribbled(&data, 1);
        let cfg = tiny_config(6);
        let a = train(&data, &scribbles, &data, 4, &cfg).unwrap();
        let b = train(&data, &scribbles, &data, 4, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn train_pce_only_matches_zero_lambdas() {
        let data = synth_dataset(&spec()).unwrap();
        let scribbles = scribbled(&data, 1);
        let cfg = tiny_config(5).pce_only();
        let out = train(&data, &scribbles, &data, 4, &cfg).unwrap();
        for rec in &out.log {
            assert_eq!(rec.global, 0.0);
            assert_eq!(rec.spatial, 0.0);
            assert_eq!(rec.shape, 0.0);
            assert!((rec.total - rec.pce).abs() < 1e-12);
        }
    }

    #[test]
    fn train_warmup_has_no_spatial_contribution() {
        let data = synth_dataset(&spec()).unwrap();
        let scribbles = scribbled(&data, 1);
        let mut cfg = tiny_config(8);
        cfg.weights.warmup_epochs = 4;
        let out = train(&data, &scribbles, &data, 4, &cfg).unwrap();
        for rec in &out.log[..4] {
            assert_eq!(rec.spatial, 0.0);
        }
        assert!(out.log[4..].iter().any(|r| r.spatial != 0.0));
    }

    #[test]
    fn train_loss_decreases() {
        let data = synth_dataset(&spec()).unwrap();
        let scribbles = scribbled(&data, 1);
        let cfg = tiny_config(30).pce_only();
        let out = train(&data, &scribbles, &data, 4, &cfg).unwrap();
        assert!(out.log.last().unwrap().pce < out.log[0].pce * 0.9);
    }

    #[test]
    fn audit_pce_only_is_tight() {
        let small = SynthSpec {
            side: 32,
            count: 1,
            noise_sigma: 0.05,
            ..spec()
        };
        let sample = &synth_dataset(&small).unwrap()[0];
        // A 16x16 crop keeps the audit cheap.
        let mut img = Image::zeros(16, 16, 1);
        let mut gt = LabelMap::unlabeled(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                *img.at_mut(r, c, 0) = sample.image.at(r + 8, c + 8, 0);
                gt.set(r, c, sample.gt.at(r + 8, c + 8));
            }
        }
        let mut rng = SeededRng::new(5);
        let scribbles = generate(
            &gt,
            ScribbleForm::Points,
            &ScribbleBudget::uniform(4, 5),
            &mut rng,
        );
        let scribbles = match scribbles {
            Ok(s) => s,
            // Crop may miss a class; fall back to labeling a few pixels.
            Err(_) => {
                let mut s = LabelMap::unlabeled(16, 16);
                for (i, &l) in gt.labels.iter().enumerate().step_by(7) {
                    s.labels[i] = l;
                }
                s
            }
        };
        let mut model = PixelModel::zeros(6, 4);
        for (i, w) in model.weights.iter_mut().enumerate() {
            *w = (i as f64 * 0.13).sin() * 0.5;
        }
        let mut cfg = tiny_config(1);
        cfg.occlusion_side = 3;
        let report = finite_diff_audit(&model, &img, &scribbles, 4, &cfg).unwrap();
        assert!(report.pce < 1e-6, "pce audit error {}", report.pce);
        assert!(report.global < 1e-4, "global audit error {}", report.global);
        assert!(
            report.spatial < 1e-4,
            "spatial audit error {}",
            report.spatial
        );
        assert!(report.shape < 1e-4, "shape audit error {}", report.shape);
        assert!(report.total < 1e-4, "total audit error {}", report.total);
    }

    #[test]
    fn audit_without_labels_errors() {
        let img = Image::zeros(16, 16, 1);
        let scribbles = LabelMap::unlabeled(16, 16);
        let model = PixelModel::zeros(6, 4);
        let cfg = tiny_config(1);
        assert!(matches!(
            finite_diff_audit(&model, &img, &scribbles, 4, &cfg),
            Err(Error::NoSupervision)
        ));
    }
}
