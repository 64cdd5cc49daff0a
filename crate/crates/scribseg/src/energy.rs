//! Local Gaussian spatial energy and the top-pi ranking that splits
//! unlabeled pixels into per-class positive/negative sets.

use serde::{Deserialize, Serialize};

use crate::core::{maybe_par_map, seq_map, Image, LabelMap, ProbMap, UNLABELED};
use crate::error::{Error, Result};

/// Gaussian kernel bandwidths and window radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Position bandwidth in pixels.
    pub sigma_p: f64,
    /// Intensity bandwidth in intensity units.
    pub sigma_o: f64,
    /// Chebyshev window radius in pixels.
    pub r: usize,
    /// Include the j == i self term. Off by default: the self term only
    /// adds y_i^2 and would shift the per-class ranking non-neutrally.
    pub include_self: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            sigma_p: 6.0,
            sigma_o: 0.1,
            r: 5,
            include_self: false,
        }
    }
}

/// Per-pixel per-class spatial energy values.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Positive/negative unlabeled pixel sets per class. Splits are
/// per-class and may overlap across classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassSplit {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Pairwise Gaussian affinity:
/// exp(-||p_i - p_j||^2 / (2 sigma_p^2) - ||o_i - o_j||^2 / (2 sigma_o^2))
/// with p the 2-D position and o the channel intensity vector.
pub fn gaussian_kernel(
    image: &Image,
    (ri, ci): (usize, usize),
    (rj, cj): (usize, usize),
    cfg: &EnergyConfig,
) -> f64 {
    let dp = (ri as f64 - rj as f64).powi(2) + (ci as f64 - cj as f64).powi(2);
    let mut d_o = 0.0;
    for ch in 0..image.channels {
        let d = image.at(ri, ci, ch) - image.at(rj, cj, ch);
        d_o += d * d;
    }
    (-dp / (2.0 * cfg.sigma_p * cfg.sigma_p) - d_o / (2.0 * cfg.sigma_o * cfg.sigma_o)).exp()
}

/// Precomputed window affinities of one image: for every pixel, the
/// kernel weight to each in-window neighbor plus that neighbor's index.
/// The training loop reuses this across epochs.
pub struct KernelCache {
    pub r: usize,
    /// Per pixel: (neighbor index, weight) pairs, raster order.
    pub windows: Vec<Vec<(u32, f64)>>,
}

pub fn precompute_kernel(image: &Image, cfg: &EnergyConfig) -> KernelCache {
    let (h, w) = (image.height, image.width);
    let r = cfg.r as isize;
    let windows = maybe_par_map(h, |row| {
        let mut per_row = Vec::with_capacity(w);
        for col in 0..w {
            let mut entries = Vec::new();
            for dr in -r..=r {
                let rr = row as isize + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -r..=r {
                    let cc = col as isize + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    if dr == 0 && dc == 0 && !cfg.include_self {
                        continue;
                    }
                    let g = gaussian_kernel(image, (row, col), (rr as usize, cc as usize), cfg);
                    entries.push(((rr as usize * w + cc as usize) as u32, g));
                }
            }
            per_row.push(entries);
        }
        per_row
    })
    .into_iter()
    .flatten()
    .collect();
    KernelCache { r: cfg.r, windows }
}

/// Spatial energy of one class with a precomputed kernel cache:
/// Phi_i = sum over in-window j of G_ij y_i^k y_j^k.
pub fn spatial_energy_cached(pred: &ProbMap, cache: &KernelCache, class: usize) -> EnergyMap {
    let (h, w, m) = (pred.height, pred.width, pred.m);
    let values = maybe_par_map(h, |row| {
        let mut out_row = Vec::with_capacity(w);
        for col in 0..w {
            let i = row * w + col;
            let yi = pred.probs[i * m + class];
            let mut sum = 0.0;
            for &(j, g) in &cache.windows[i] {
                sum += g * pred.probs[j as usize * m + class];
            }
            out_row.push(yi * sum);
        }
        out_row
    })
    .into_iter()
    .flatten()
    .collect();
    EnergyMap {
        height: h,
        width: w,
        values,
    }
}

/// Windowed spatial energy, O(N r^2). Parallel over rows when the
/// `parallel` feature is on.
pub fn spatial_energy(
    pred: &ProbMap,
    image: &Image,
    class: usize,
    cfg: &EnergyConfig,
) -> Result<EnergyMap> {
    spatial_energy_impl(pred, image, class, cfg, true)
}

/// Always-sequential variant for the bench suite.
pub fn spatial_energy_seq(
    pred: &ProbMap,
    image: &Image,
    class: usize,
    cfg: &EnergyConfig,
) -> Result<EnergyMap> {
    spatial_energy_impl(pred, image, class, cfg, false)
}

fn spatial_energy_impl(
    pred: &ProbMap,
    image: &Image,
    class: usize,
    cfg: &EnergyConfig,
    parallel: bool,
) -> Result<EnergyMap> {
    if pred.height != image.height || pred.width != image.width {
        return Err(Error::ShapeMismatch);
    }
    let (h, w, m) = (pred.height, pred.width, pred.m);
    let r = cfg.r as isize;
    let row_fn = |row: usize| {
        let mut out_row = Vec::with_capacity(w);
        for col in 0..w {
            let yi = pred.probs[(row * w + col) * m + class];
            let mut sum = 0.0;
            for dr in -r..=r {
                let rr = row as isize + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -r..=r {
                    let cc = col as isize + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    if dr == 0 && dc == 0 && !cfg.include_self {
                        continue;
                    }
                    let g = gaussian_kernel(image, (row, col), (rr as usize, cc as usize), cfg);
                    sum += g * pred.probs[(rr as usize * w + cc as usize) * m + class];
                }
            }
            out_row.push(yi * sum);
        }
        out_row
    };
    let rows = if parallel {
        maybe_par_map(h, row_fn)
    } else {
        seq_map(h, row_fn)
    };
    Ok(EnergyMap {
        height: h,
        width: w,
        values: rows.into_iter().flatten().collect(),
    })
}

/// Rank the unlabeled pixels by energy descending (ties broken by
/// ascending raster index) and split at round(pi_k * n_u), half-up.
pub fn rank_select(
    energy: &EnergyMap,
    unlabeled: &LabelMap,
    pi_k: f64,
) -> (Vec<usize>, Vec<usize>) {
    debug_assert!((0.0..=1.0).contains(&pi_k));
    let mut idxs: Vec<usize> = unlabeled
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == UNLABELED)
        .map(|(i, _)| i)
        .collect();
    idxs.sort_by(|&a, &b| {
        energy.values[b]
            .partial_cmp(&energy.values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let n_u = idxs.len();
    let cut = ((pi_k * n_u as f64) + 0.5).floor() as usize;
    let cut = cut.min(n_u);
    let negatives = idxs.split_off(cut);
    (idxs, negatives)
}
