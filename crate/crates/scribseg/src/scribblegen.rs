//! Scribble simulation: the four scribble forms generated from ground
//! truth under per-class pixel budgets, plus annotation statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{LabelMap, SeededRng, UNLABELED};
use crate::error::{Error, Result};
use crate::morphology::{skeletonize, BinaryMask};

/// The four scribble generation procedures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScribbleForm {
    Points,
    RandomWalk { step: usize },
    DirRandomWalk,
    Skeleton,
}

/// Per-class annotation budget in pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScribbleBudget {
    /// Labeled pixels allowed per class; index = class.
    pub per_class: Vec<usize>,
}

impl ScribbleBudget {
    pub fn uniform(m: usize, n_pix: usize) -> Self {
        Self {
            per_class: vec![n_pix; m],
        }
    }
}

/// Annotation statistics of a scribble map against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScribbleStats {
    /// Labeled pixels per class, n_l^k.
    pub labeled_per_class: Vec<usize>,
    /// True pixels per class, n_k.
    pub true_per_class: Vec<usize>,
    /// Annotation ratio per class, a_k = n_l^k / n_k (0 when n_k = 0).
    pub annotation_ratio: Vec<f64>,
    /// Class frequencies over labeled pixels, summing to 1.
    pub labeled_frequency: Vec<f64>,
}

impl ScribbleStats {
    pub fn total_labeled(&self) -> usize {
        self.labeled_per_class.iter().sum()
    }
}

/// Result of a budgeted generator; `truncated` flags walks that could
/// not reach their pixel budget before the restart limit.
#[derive(Debug, Clone)]
pub struct WalkOutcome {
    pub pixels: Vec<usize>,
    pub truncated: bool,
}

fn class_mask_indices(gt: &LabelMap, class: u16) -> Vec<usize> {
    gt.labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class)
        .map(|(i, _)| i)
        .collect()
}

fn present_classes(gt: &LabelMap) -> Vec<u16> {
    let mut seen = std::collections::BTreeSet::new();
    for &l in &gt.labels {
        if l != UNLABELED {
            seen.insert(l);
        }
    }
    seen.into_iter().collect()
}

/// Points form: per class, uniform sample without replacement from the
/// class mask.
pub fn gen_points(gt: &LabelMap, budget: &ScribbleBudget, rng: &mut SeededRng) -> Result<LabelMap> {
    let mut out = LabelMap::unlabeled(gt.height, gt.width);
    for &class in &present_classes(gt) {
        let mut idxs = class_mask_indices(gt, class);
        let n = *budget
            .per_class
            .get(class as usize)
            .ok_or(Error::ClassOutOfRange {
                label: class,
                m: budget.per_class.len(),
            })?;
        if n == 0 || n > idxs.len() {
            return Err(Error::BudgetExceedsMask {
                class,
                budget: n,
                mask: idxs.len(),
            });
        }
        // Partial Fisher-Yates: first n entries are the sample.
        for i in 0..n {
            let j = rng.gen_range(i..idxs.len());
            idxs.swap(i, j);
        }
        for &i in &idxs[..n] {
            out.labels[i] = class;
        }
    }
    Ok(out)
}

const DIRS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

const MAX_DIR_RETRIES: usize = 16;
const MAX_RESTARTS: usize = 200;

/// Random walk within a class mask: from a random mask pixel, each move
/// picks a uniform lattice direction and advances `step` pixels, labeling
/// the pixels along the way. A move whose path leaves the mask is
/// rejected and resampled; after bounded retries the walk restarts at a
/// fresh random mask pixel. Terminates once `n_pix` distinct pixels are
/// labeled or the restart limit is exhausted.
pub fn gen_random_walk(
    gt: &LabelMap,
    class: u16,
    n_pix: usize,
    step: usize,
    rng: &mut SeededRng,
) -> Result<WalkOutcome> {
    assert!(step >= 1, "step length must be >= 1");
    let mask = class_mask_indices(gt, class);
    if mask.is_empty() || n_pix == 0 || n_pix > mask.len() {
        return Err(Error::BudgetExceedsMask {
            class,
            budget: n_pix,
            mask: mask.len(),
        });
    }
    let w = gt.width as isize;
    let h = gt.height as isize;
    let in_mask = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && r < h && c < w && gt.labels[(r * w + c) as usize] == class
    };
    let mut labeled = vec![false; gt.n_pixels()];
    let mut count = 0usize;
    let mut restarts = 0usize;
    'outer: while count < n_pix && restarts < MAX_RESTARTS {
        restarts += 1;
        let start = mask[rng.gen_range(0..mask.len())];
        let (mut r, mut c) = ((start / gt.width) as isize, (start % gt.width) as isize);
        if !labeled[(r * w + c) as usize] {
            labeled[(r * w + c) as usize] = true;
            count += 1;
        }
        loop {
            if count >= n_pix {
                break 'outer;
            }
            let mut moved = false;
            for _ in 0..MAX_DIR_RETRIES {
                let (dr, dc) = DIRS[rng.gen_range(0..8)];
                // The whole l-pixel path must stay inside the mask.
                let ok = (1..=step as isize).all(|t| in_mask(r + dr * t, c + dc * t));
                if !ok {
                    continue;
                }
                for t in 1..=step as isize {
                    if count >= n_pix {
                        break; // budget reached mid-segment
                    }
                    let idx = ((r + dr * t) * w + (c + dc * t)) as usize;
                    if !labeled[idx] {
                        labeled[idx] = true;
                        count += 1;
                    }
                }
                r += dr * step as isize;
                c += dc * step as isize;
                moved = true;
                break;
            }
            if !moved {
                continue 'outer; // restart at a fresh mask pixel
            }
        }
    }
    let pixels = labeled
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    Ok(WalkOutcome {
        pixels,
        truncated: count < n_pix,
    })
}

/// Momentum kept from the previous step with this probability.
pub const P_MOMENTUM: f64 = 0.9;

/// Directional random walk (step length 1): the previous direction is
/// reused with probability [`P_MOMENTUM`]; when the next point falls
/// outside the mask the direction rotates to the nearest feasible angle,
/// trying +-45, +-90, +-135, 180 degrees in order of angular distance.
pub fn gen_dir_random_walk(
    gt: &LabelMap,
    class: u16,
    n_pix: usize,
    rng: &mut SeededRng,
) -> Result<WalkOutcome> {
    let mask = class_mask_indices(gt, class);
    if mask.is_empty() || n_pix == 0 || n_pix > mask.len() {
        return Err(Error::BudgetExceedsMask {
            class,
            budget: n_pix,
            mask: mask.len(),
        });
    }
    let w = gt.width as isize;
    let h = gt.height as isize;
    let in_mask = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && r < h && c < w && gt.labels[(r * w + c) as usize] == class
    };
    let mut labeled = vec![false; gt.n_pixels()];
    let mut count = 0usize;
    let mut restarts = 0usize;
    // Rotation offsets in order of angular distance (45-degree units).
    const ROTATIONS: [isize; 7] = [1, -1, 2, -2, 3, -3, 4];
    'outer: while count < n_pix && restarts < MAX_RESTARTS {
        restarts += 1;
        let start = mask[rng.gen_range(0..mask.len())];
        let (mut r, mut c) = ((start / gt.width) as isize, (start % gt.width) as isize);
        if !labeled[(r * w + c) as usize] {
            labeled[(r * w + c) as usize] = true;
            count += 1;
        }
        let mut dir = rng.gen_range(0..8usize);
        loop {
            if count >= n_pix {
                break 'outer;
            }
            if !rng.gen_bool(P_MOMENTUM) {
                dir = rng.gen_range(0..8);
            }
            let feasible = std::iter::once(0isize)
                .chain(ROTATIONS)
                .map(|rot| ((dir as isize + rot).rem_euclid(8)) as usize)
                .find(|&d| {
                    let (dr, dc) = DIRS[d];
                    in_mask(r + dr, c + dc)
                });
            let Some(d) = feasible else {
                continue 'outer; // isolated pixel, restart
            };
            dir = d;
            let (dr, dc) = DIRS[dir];
            r += dr;
            c += dc;
            let idx = (r * w + c) as usize;
            if !labeled[idx] {
                labeled[idx] = true;
                count += 1;
            }
        }
    }
    let pixels = labeled
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    Ok(WalkOutcome {
        pixels,
        truncated: count < n_pix,
    })
}

/// Skeleton form: each present class (including background) contributes
/// the Zhang-Suen skeleton of its mask; one draw per connected component.
pub fn gen_skeleton(gt: &LabelMap) -> LabelMap {
    let mut out = LabelMap::unlabeled(gt.height, gt.width);
    for &class in &present_classes(gt) {
        let mask = BinaryMask::of_class(gt, class);
        let skel = skeletonize(&mask);
        for (i, &b) in skel.bits.iter().enumerate() {
            if b {
                out.labels[i] = class;
            }
        }
    }
    out
}

/// Generate scribbles for every present class in one call.
pub fn generate(
    gt: &LabelMap,
    form: ScribbleForm,
    budget: &ScribbleBudget,
    rng: &mut SeededRng,
) -> Result<LabelMap> {
    match form {
        ScribbleForm::Points => gen_points(gt, budget, rng),
        ScribbleForm::Skeleton => Ok(gen_skeleton(gt)),
        ScribbleForm::RandomWalk { step } => {
            let mut out = LabelMap::unlabeled(gt.height, gt.width);
            for &class in &present_classes(gt) {
                let n = budget.per_class[class as usize];
                let walk = gen_random_walk(gt, class, n, step, rng)?;
                for &i in &walk.pixels {
                    out.labels[i] = class;
                }
            }
            Ok(out)
        }
        ScribbleForm::DirRandomWalk => {
            let mut out = LabelMap::unlabeled(gt.height, gt.width);
            for &class in &present_classes(gt) {
                let n = budget.per_class[class as usize];
                let walk = gen_dir_random_walk(gt, class, n, rng)?;
                for &i in &walk.pixels {
                    out.labels[i] = class;
                }
            }
            Ok(out)
        }
    }
}

/// Exact annotation statistics. Errors when a scribble label disagrees
/// with the ground truth at any pixel.
pub fn compute_stats(scribbles: &LabelMap, gt: &LabelMap, m: usize) -> Result<ScribbleStats> {
    if scribbles.height != gt.height || scribbles.width != gt.width {
        return Err(Error::ShapeMismatch);
    }
    let mut labeled = vec![0usize; m];
    let mut truth = vec![0usize; m];
    for (i, (&s, &g)) in scribbles.labels.iter().zip(&gt.labels).enumerate() {
        if g != UNLABELED {
            truth[g as usize] += 1;
        }
        if s != UNLABELED {
            if s != g {
                return Err(Error::InconsistentScribble { index: i });
            }
            labeled[s as usize] += 1;
        }
    }
    let total: usize = labeled.iter().sum();
    let annotation_ratio = labeled
        .iter()
        .zip(&truth)
        .map(|(&l, &t)| if t == 0 { 0.0 } else { l as f64 / t as f64 })
        .collect();
    let labeled_frequency = labeled
        .iter()
        .map(|&l| {
            if total == 0 {
                0.0
            } else {
                l as f64 / total as f64
            }
        })
        .collect();
    Ok(ScribbleStats {
        labeled_per_class: labeled,
        true_per_class: truth,
        annotation_ratio,
        labeled_frequency,
    })
}
