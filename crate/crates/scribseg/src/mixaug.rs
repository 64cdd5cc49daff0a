//! Supervision augmentation: block saliency, smoothness-regularized
//! mix-mask optimization, Hungarian-solved block transport, mix
//! application, and random occlusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{Image, LabelMap, SeededRng, SoftLabelMap, BACKGROUND, UNLABELED};
use crate::error::{Error, Result};

/// Non-negative per-pixel saliency values.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Configuration of the block mix optimization.
///
/// The image is partitioned into `grid` x `grid` blocks. `beta_levels`
/// is the discrete set of allowed per-block mix weights and must contain
/// 0 and 1. `gamma1` weights label smoothness, `gamma2` image
/// smoothness, `gamma3` the mixing prior, `gamma4` the transport cost.
/// `prior` is the per-block probability of beta > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub grid: usize,
    pub beta_levels: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub prior: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            beta_levels: vec![0.0, 0.5, 1.0],
            gamma1: 0.5,
            gamma2: 0.5,
            gamma3: 0.1,
            gamma4: 0.15,
            prior: 0.5,
        }
    }
}

/// Rotated-square occlusion: center in pixel coordinates, side length,
/// rotation angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub center_row: f64,
    pub center_col: f64,
    pub side: usize,
    pub angle: f64,
}

/// Full transport/occlusion recipe. `perm1`/`perm2` map destination
/// block position -> source block, realizing the doubly-stochastic
/// transport constraint at its permutation extreme points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub grid: usize,
    pub beta: Vec<f64>,
    pub perm1: Vec<usize>,
    pub perm2: Vec<usize>,
    pub occlusion: Option<Occlusion>,
}

impl MixPlan {
    /// Identity plan: output equals the first image.
    pub fn identity(grid: usize) -> Self {
        let n = grid * grid;
        Self {
            grid,
            beta: vec![0.0; n],
            perm1: (0..n).collect(),
            perm2: (0..n).collect(),
            occlusion: None,
        }
    }
}

/// Per-pixel L2 norm of the central finite-difference spatial gradient,
/// summed over channels. Borders use replicate padding, which degrades
/// to one-sided differences there.
pub fn saliency_image_gradient(image: &Image) -> SaliencyMap {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let mut sq = 0.0;
            for ch in 0..c {
                let left = image.at(r, col.saturating_sub(1), ch);
                let right = image.at(r, (col + 1).min(w - 1), ch);
                let up = image.at(r.saturating_sub(1), col, ch);
                let down = image.at((r + 1).min(h - 1), col, ch);
                let dx = (right - left) / 2.0;
                let dy = (down - up) / 2.0;
                sq += dx * dx + dy * dy;
            }
            values[r * w + col] = sq.sqrt();
        }
    }
    SaliencyMap {
        height: h,
        width: w,
        values,
    }
}

/// Saliency from a precomputed input-gradient grid (one value per pixel
/// per channel): L2 norm over channels. The trainer supplies the
/// gradient of the partial cross entropy loss with respect to the input.
pub fn saliency_from_input_gradient(grad: &Image) -> SaliencyMap {
    let (h, w, c) = (grad.height, grad.width, grad.channels);
    let values = (0..h * w)
        .map(|i| {
            let mut sq = 0.0;
            for ch in 0..c {
                let g = grad.data[i * c + ch];
                sq += g * g;
            }
            sq.sqrt()
        })
        .collect();
    SaliencyMap {
        height: h,
        width: w,
        values,
    }
}

/// Per-block mean saliency, raster order of blocks.
pub fn block_saliency(s: &SaliencyMap, grid: usize) -> Result<Vec<f64>> {
    block_means(&s.values, s.height, s.width, grid)
}

/// Per-block mean intensity of an image (averaged over channels too).
pub fn block_mean_intensity(image: &Image, grid: usize) -> Result<Vec<f64>> {
    let per_pixel: Vec<f64> = (0..image.n_pixels())
        .map(|i| {
            image.data[i * image.channels..(i + 1) * image.channels]
                .iter()
                .sum::<f64>()
                / image.channels as f64
        })
        .collect();
    block_means(&per_pixel, image.height, image.width, grid)
}

fn block_means(values: &[f64], height: usize, width: usize, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || !height.is_multiple_of(grid) || !width.is_multiple_of(grid) {
        return Err(Error::GridMismatch {
            grid,
            height,
            width,
        });
    }
    let (bh, bw) = (height / grid, width / grid);
    let mut out = vec![0.0; grid * grid];
    for (b, v) in out.iter_mut().enumerate() {
        let (br, bc) = (b / grid, b % grid);
        let mut sum = 0.0;
        for r in br * bh..(br + 1) * bh {
            for c in bc * bw..(bc + 1) * bw {
                sum += values[r * width + c];
            }
        }
        *v = sum / (bh * bw) as f64;
    }
    Ok(out)
}

/// Objective of the block mix mask: negated retained saliency plus label
/// smoothness, gated image smoothness, and the mixing prior. Lower is
/// better. Adjacency is 4-neighborhood on the block grid, each unordered
/// pair counted once.
pub fn beta_objective(
    beta: &[f64],
    s1: &[f64],
    s2: &[f64],
    block_means: &[f64],
    cfg: &MixConfig,
) -> f64 {
    let grid = cfg.grid;
    let mut obj = 0.0;
    for i in 0..beta.len() {
        obj -= ((1.0 - beta[i]) * s1[i] + beta[i] * s2[i]).abs();
        let p = if beta[i] > 0.0 {
            cfg.prior
        } else {
            1.0 - cfg.prior
        };
        obj -= cfg.gamma3 * p.max(1e-12).ln();
    }
    for i in 0..beta.len() {
        let (r, c) = (i / grid, i % grid);
        for (dr, dc) in [(0usize, 1usize), (1, 0)] {
            let (rr, cc) = (r + dr, c + dc);
            if rr >= grid || cc >= grid {
                continue;
            }
            let j = rr * grid + cc;
            let d = beta[i] - beta[j];
            obj += cfg.gamma1 * d * d;
            if beta[i] != beta[j] {
                obj += cfg.gamma2 * (block_means[i] - block_means[j]).abs();
            }
        }
    }
    obj
}

/// Iterated-conditional-modes minimization of [`beta_objective`] over
/// `beta_levels^(grid^2)`, with deterministic multi-restart: one start
/// per constant level plus a unary-greedy start. Returns (beta,
/// objective).
pub fn optimize_beta(
    s1: &[f64],
    s2: &[f64],
    block_means: &[f64],
    cfg: &MixConfig,
) -> (Vec<f64>, f64) {
    let n = cfg.grid * cfg.grid;
    assert_eq!(s1.len(), n);
    assert_eq!(s2.len(), n);
    let mut starts: Vec<Vec<f64>> = cfg.beta_levels.iter().map(|&l| vec![l; n]).collect();
    // Greedy start: per-block level maximizing retained saliency.
    starts.push(
        (0..n)
            .map(|i| {
                *cfg.beta_levels
                    .iter()
                    .max_by(|&&a, &&b| {
                        let va = (1.0 - a) * s1[i] + a * s2[i];
                        let vb = (1.0 - b) * s1[i] + b * s2[i];
                        va.partial_cmp(&vb).unwrap()
                    })
                    .unwrap()
            })
            .collect(),
    );
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mut beta in starts {
        let mut obj = beta_objective(&beta, s1, s2, block_means, cfg);
        loop {
            let mut improved = false;
            for i in 0..n {
                let orig = beta[i];
                let mut local_best = (orig, obj);
                for &level in &cfg.beta_levels {
                    if level == orig {
                        continue;
                    }
                    beta[i] = level;
                    let o = beta_objective(&beta, s1, s2, block_means, cfg);
                    if o < local_best.1 - 1e-12 {
                        local_best = (level, o);
                    }
                }
                beta[i] = local_best.0;
                if local_best.0 != orig {
                    obj = local_best.1;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((beta, obj));
        }
    }
    best.unwrap()
}

/// Exhaustive enumeration of the mix-mask objective; exact optimum for
/// tiny grids (grid^2 <= 9 with a few levels stays well under 20k
/// states). Returns (beta, objective).
pub fn optimize_beta_exact(
    s1: &[f64],
    s2: &[f64],
    block_means: &[f64],
    cfg: &MixConfig,
) -> (Vec<f64>, f64) {
    let n = cfg.grid * cfg.grid;
    let levels = &cfg.beta_levels;
    let total = levels.len().pow(n as u32);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut beta = vec![levels[0]; n];
    for mut code in 0..total {
        for slot in beta.iter_mut() {
            *slot = levels[code % levels.len()];
            code /= levels.len();
        }
        let obj = beta_objective(&beta, s1, s2, block_means, cfg);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((beta.clone(), obj));
        }
    }
    best.unwrap()
}

/// Exact minimum-cost perfect assignment on a square cost matrix
/// (augmenting-path algorithm with dual potentials, O(n^3)). Returns the
/// permutation `perm` with row i assigned to column `perm[i]`, plus the
/// total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0
        || cost.iter().any(|row| row.len() != n)
        || cost.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(Error::BadCostMatrix);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // per column (1-based), 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        perm[assigned_row[j] - 1] = j - 1;
        total += cost[assigned_row[j] - 1][j - 1];
    }
    Ok((perm, total))
}

/// Squared Euclidean distance between block centers, in block units.
fn transport_cost(grid: usize, i: usize, j: usize) -> f64 {
    let (ri, ci) = ((i / grid) as f64, (i % grid) as f64);
    let (rj, cj) = ((j / grid) as f64, (j % grid) as f64);
    (ri - rj) * (ri - rj) + (ci - cj) * (ci - cj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportSide {
    First,
    Second,
}

/// Hungarian-solved block transport: the gain of placing source block i
/// at destination j is `(1 - beta*_j) * s_i` for the first image (or
/// `beta*_j * s_i` for the second), against the movement cost
/// `gamma4 * C_ij`. Returns a destination -> source mapping.
pub fn optimize_transport(
    s: &[f64],
    beta: &[f64],
    cfg: &MixConfig,
    side: TransportSide,
) -> Result<Vec<usize>> {
    let n = cfg.grid * cfg.grid;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let weight = match side {
                        TransportSide::First => 1.0 - beta[j],
                        TransportSide::Second => beta[j],
                    };
                    cfg.gamma4 * transport_cost(cfg.grid, i, j) - weight * s[i]
                })
                .collect()
        })
        .collect();
    let (perm, _) = hungarian(&cost)?;
    // perm maps source -> destination; invert to destination -> source.
    let mut dest_to_src = vec![0usize; n];
    for (src, &dst) in perm.iter().enumerate() {
        dest_to_src[dst] = src;
    }
    Ok(dest_to_src)
}

/// Blockwise mix of two image-scribble pairs:
/// block b of the output is `(1-beta_b) * x1[perm1[b]] + beta_b *
/// x2[perm2[b]]`. Scribble pixels contribute their class with weight
/// `(1-beta_b)` or `beta_b`; unlabeled source pixels contribute nothing.
pub fn apply_mix(
    x1: &Image,
    y1: &LabelMap,
    x2: &Image,
    y2: &LabelMap,
    plan: &MixPlan,
    m: usize,
) -> Result<(Image, SoftLabelMap)> {
    let (h, w, c) = (x1.height, x1.width, x1.channels);
    if x2.height != h
        || x2.width != w
        || x2.channels != c
        || y1.height != h
        || y1.width != w
        || y2.height != h
        || y2.width != w
    {
        return Err(Error::ShapeMismatch);
    }
    let grid = plan.grid;
    if h % grid != 0 || w % grid != 0 {
        return Err(Error::GridMismatch {
            grid,
            height: h,
            width: w,
        });
    }
    let (bh, bw) = (h / grid, w / grid);
    let mut image = Image::zeros(h, w, c);
    let mut labels = SoftLabelMap::zeros(h, w, m);
    for b in 0..grid * grid {
        let beta = plan.beta[b];
        let (dst_r, dst_c) = (b / grid * bh, b % grid * bw);
        let s1 = plan.perm1[b];
        let s2 = plan.perm2[b];
        let (s1_r, s1_c) = (s1 / grid * bh, s1 % grid * bw);
        let (s2_r, s2_c) = (s2 / grid * bh, s2 % grid * bw);
        for r in 0..bh {
            for col in 0..bw {
                for ch in 0..c {
                    let v1 = x1.at(s1_r + r, s1_c + col, ch);
                    let v2 = x2.at(s2_r + r, s2_c + col, ch);
                    *image.at_mut(dst_r + r, dst_c + col, ch) = (1.0 - beta) * v1 + beta * v2;
                }
                let dst_idx = (dst_r + r) * w + (dst_c + col);
                let l1 = y1.at(s1_r + r, s1_c + col);
                if l1 != UNLABELED {
                    labels.row_mut(dst_idx)[l1 as usize] += 1.0 - beta;
                }
                let l2 = y2.at(s2_r + r, s2_c + col);
                if l2 != UNLABELED {
                    labels.row_mut(dst_idx)[l2 as usize] += beta;
                }
            }
        }
    }
    Ok((image, labels))
}

/// Does pixel center (row, col) fall inside the rotated square?
pub fn occlusion_covers(occ: &Occlusion, row: usize, col: usize) -> bool {
    let dr = row as f64 + 0.5 - occ.center_row;
    let dc = col as f64 + 0.5 - occ.center_col;
    let (sin, cos) = occ.angle.sin_cos();
    // Rotate into the square's frame.
    let a = cos * dc + sin * dr;
    let b = -sin * dc + cos * dr;
    let half = occ.side as f64 / 2.0;
    a.abs() <= half && b.abs() <= half
}

/// Deterministic occlusion at given parameters: inside the rasterized
/// rotated square, image values become 0 and the label becomes hard
/// background.
pub fn occlude_at(x: &mut Image, y: &mut SoftLabelMap, occ: &Occlusion) -> Result<()> {
    let limit = x.height.min(x.width);
    if occ.side == 0 || occ.side > limit {
        return Err(Error::OcclusionTooLarge {
            side: occ.side,
            limit,
        });
    }
    if y.height != x.height || y.width != x.width {
        return Err(Error::ShapeMismatch);
    }
    for r in 0..x.height {
        for c in 0..x.width {
            if occlusion_covers(occ, r, c) {
                for ch in 0..x.channels {
                    *x.at_mut(r, c, ch) = 0.0;
                }
                let row = y.row_mut(r * x.width + c);
                row.fill(0.0);
                row[BACKGROUND as usize] = 1.0;
            }
        }
    }
    Ok(())
}

/// Sample a uniform-random center and rotation, then occlude.
pub fn occlude(
    x: &mut Image,
    y: &mut SoftLabelMap,
    side: usize,
    rng: &mut SeededRng,
) -> Result<Occlusion> {
    let occ = sample_occlusion(x.height, x.width, side, rng)?;
    occlude_at(x, y, &occ)?;
    Ok(occ)
}

pub fn sample_occlusion(
    height: usize,
    width: usize,
    side: usize,
    rng: &mut SeededRng,
) -> Result<Occlusion> {
    let limit = height.min(width);
    if side == 0 || side > limit {
        return Err(Error::OcclusionTooLarge { side, limit });
    }
    Ok(Occlusion {
        center_row: rng.gen_range(0.0..height as f64),
        center_col: rng.gen_range(0.0..width as f64),
        side,
        angle: rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
    })
}

/// Occlusion side scaled so the reference 32-on-192 ratio is preserved.
pub fn default_occlusion_side(image_side: usize) -> usize {
    ((32.0 / 192.0) * image_side as f64).round().max(1.0) as usize
}

/// Build a complete mix plan from two saliency maps: block saliency,
/// mix-mask optimization, both transports, and a sampled occlusion.
pub fn plan_mix_from_saliency(
    s1: &SaliencyMap,
    s2: &SaliencyMap,
    x1: &Image,
    x2: &Image,
    cfg: &MixConfig,
    occlusion_side: usize,
    rng: &mut SeededRng,
) -> Result<MixPlan> {
    let b1 = block_saliency(s1, cfg.grid)?;
    let b2 = block_saliency(s2, cfg.grid)?;
    let m1 = block_mean_intensity(x1, cfg.grid)?;
    let m2 = block_mean_intensity(x2, cfg.grid)?;
    let means: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| (a + b) / 2.0).collect();
    let (beta, _) = optimize_beta(&b1, &b2, &means, cfg);
    let perm1 = optimize_transport(&b1, &beta, cfg, TransportSide::First)?;
    let perm2 = optimize_transport(&b2, &beta, cfg, TransportSide::Second)?;
    let occlusion = Some(sample_occlusion(x1.height, x1.width, occlusion_side, rng)?);
    Ok(MixPlan {
        grid: cfg.grid,
        beta,
        perm1,
        perm2,
        occlusion,
    })
}

/// Image-gradient saliency variant of [`plan_mix_from_saliency`].
pub fn plan_mix(
    x1: &Image,
    x2: &Image,
    cfg: &MixConfig,
    occlusion_side: usize,
    rng: &mut SeededRng,
) -> Result<MixPlan> {
    let s1 = saliency_image_gradient(x1);
    let s2 = saliency_image_gradient(x2);
    plan_mix_from_saliency(&s1, &s2, x1, x2, cfg, occlusion_side, rng)
}
