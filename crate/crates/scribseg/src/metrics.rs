//! Per-class Dice score and Hausdorff distance between label maps.
//!
//! Hausdorff distances are reported in pixel units over boundary pixel
//! sets under the Euclidean metric. A boundary pixel is a mask pixel
//! with at least one 4-neighbor outside the mask (image edges count as
//! outside). The full (not percentile) Hausdorff distance is used.

use serde::{Deserialize, Serialize};

use crate::core::LabelMap;
use crate::error::{Error, Result};

/// Per-foreground-class metrics plus their means. A `None` Hausdorff
/// entry means exactly one of the two masks was empty (+inf sentinel);
/// such entries are excluded from `mean_hausdorff`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Foreground class labels, ascending (class 0 is background).
    pub classes: Vec<u16>,
    pub dice: Vec<f64>,
    pub hausdorff: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean over classes with a finite Hausdorff distance; `None` when
    /// no class has one.
    pub mean_hausdorff: Option<f64>,
}

/// Dice overlap of class `k`: 2|P∩G| / (|P|+|G|). Both masks empty
/// yields 1 by convention; exactly one empty yields 0.
pub fn dice(pred: &LabelMap, gt: &LabelMap, k: u16) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch);
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let in_p = p == k;
        let in_g = g == k;
        p_count += in_p as usize;
        g_count += in_g as usize;
        inter += (in_p && in_g) as usize;
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// Boundary pixels of the class-`k` mask: member pixels with a
/// 4-neighbor outside the mask or on the image edge.
fn boundary(map: &LabelMap, k: u16) -> Vec<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if map.at(r, c) != k {
                continue;
            }
            let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let interiorly_exposed = !edge
                && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                    .iter()
                    .any(|&(nr, nc)| map.at(nr, nc) != k);
            if edge || interiorly_exposed {
                out.push((r, c));
            }
        }
    }
    out
}

fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(r1, c1)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r1 as f64 - r2 as f64;
                    let dc = c1 as f64 - c2 as f64;
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the class-`k` boundaries of the
/// two maps, in pixels. `None` when exactly one mask is empty; 0 when
/// both are.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, k: u16) -> Result<Option<f64>> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch);
    }
    let bp = boundary(pred, k);
    let bg = boundary(gt, k);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => Ok(Some(0.0)),
        (true, false) | (false, true) => Ok(None),
        (false, false) => Ok(Some(
            directed_hausdorff(&bp, &bg).max(directed_hausdorff(&bg, &bp)),
        )),
    }
}

/// Evaluate every foreground class (labels 1..m-1) of `pred` against
/// `gt` and aggregate.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, m: usize) -> Result<MetricReport> {
    if m < 2 {
        return Err(Error::ShapeMismatch);
    }
    let classes: Vec<u16> = (1..m as u16).collect();
    let mut dices = Vec::with_capacity(classes.len());
    let mut hds = Vec::with_capacity(classes.len());
    for &k in &classes {
        dices.push(dice(pred, gt, k)?);
        hds.push(hausdorff(pred, gt, k)?);
    }
    let mean_dice = dices.iter().sum::<f64>() / dices.len() as f64;
    let finite: Vec<f64> = hds.iter().filter_map(|h| *h).collect();
    let mean_hausdorff = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Ok(MetricReport {
        classes,
        dice: dices,
        hausdorff: hds,
        mean_dice,
        mean_hausdorff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::SeededRng;
    use rand::Rng;

    fn map_of(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u16) -> LabelMap {
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                labels.push(f(r, c));
            }
        }
        LabelMap::new(h, w, labels).unwrap()
    }

    #[test]
    fn dice_identical_nonempty_is_one() {
        let a = map_of(5, 5, |r, _| if r < 2 { 1 } else { 0 });
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_is_zero() {
        let a = map_of(4, 4, |r, _| if r < 2 { 1 } else { 0 });
        let b = map_of(4, 4, |r, _| if r >= 2 { 1 } else { 0 });
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlapping_squares() {
        // Two 4x2 rectangles sharing a 4x1 column: 2*4/(8+8) = 0.5.
        let a = map_of(4, 4, |_, c| if c == 0 || c == 1 { 1 } else { 0 });
        let b = map_of(4, 4, |_, c| if c == 1 || c == 2 { 1 } else { 0 });
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_counting_oracle_random() {
        let mut rng = SeededRng::new(5);
        for _ in 0..30 {
            let a = map_of(8, 8, |_, _| 0);
            let mut a = a;
            let mut b = map_of(8, 8, |_, _| 0);
            for i in 0..64 {
                if rng.gen_bool(0.4) {
                    a.labels[i] = 1;
                }
                if rng.gen_bool(0.4) {
                    b.labels[i] = 1;
                }
            }
            let inter = a
                .labels
                .iter()
                .zip(&b.labels)
                .filter(|(&x, &y)| x == 1 && y == 1)
                .count();
            let pa = a.labels.iter().filter(|&&x| x == 1).count();
            let pb = b.labels.iter().filter(|&&x| x == 1).count();
            let want = if pa + pb == 0 {
                1.0
            } else {
                2.0 * inter as f64 / (pa + pb) as f64
            };
            assert_eq!(dice(&a, &b, 1).unwrap(), want);
        }
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = map_of(3, 3, |_, _| 0);
        let full = map_of(3, 3, |_, _| 1);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dice(&full, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_symmetric() {
        let mut rng = SeededRng::new(9);
        let a = map_of(6, 6, |_, _| rng.gen_range(0..3));
        let b = map_of(6, 6, |_, _| rng.gen_range(0..3));
        for k in 0..3 {
            assert_eq!(dice(&a, &b, k).unwrap(), dice(&b, &a, k).unwrap());
        }
    }

    #[test]
    fn hausdorff_identical_zero() {
        let a = map_of(8, 8, |r, c| {
            if (2..6).contains(&r) && (2..6).contains(&c) {
                1
            } else {
                0
            }
        });
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn hausdorff_three_four_five() {
        let a = map_of(6, 6, |r, c| (r == 0 && c == 0) as u16);
        let b = map_of(6, 6, |r, c| (r == 3 && c == 4) as u16);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), Some(5.0));
    }

    #[test]
    fn hausdorff_empty_conventions() {
        let empty = map_of(4, 4, |_, _| 0);
        let single = map_of(4, 4, |r, c| (r == 1 && c == 1) as u16);
        assert_eq!(hausdorff(&empty, &empty, 1).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&empty, &single, 1).unwrap(), None);
        assert_eq!(hausdorff(&single, &empty, 1).unwrap(), None);
    }

    /// Straight O(n^2) reimplementation over explicitly listed boundary
    /// pixels, used as the oracle for the geometric cases.
    fn brute_force_hd(a: &LabelMap, b: &LabelMap, k: u16) -> Option<f64> {
        let ba = boundary(a, k);
        let bb = boundary(b, k);
        if ba.is_empty() && bb.is_empty() {
            return Some(0.0);
        }
        if ba.is_empty() || bb.is_empty() {
            return None;
        }
        let dir = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            from.iter()
                .map(|&(r1, c1)| {
                    to.iter()
                        .map(|&(r2, c2)| {
                            ((r1 as f64 - r2 as f64).powi(2) + (c1 as f64 - c2 as f64).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0f64, f64::max)
        };
        Some(dir(&ba, &bb).max(dir(&bb, &ba)))
    }

    #[test]
    fn hausdorff_nested_squares_matches_brute_force() {
        // Outer 10x10 square vs centered inner 6x6 square.
        let outer = map_of(12, 12, |r, c| {
            ((1..11).contains(&r) && (1..11).contains(&c)) as u16
        });
        let inner = map_of(12, 12, |r, c| {
            ((3..9).contains(&r) && (3..9).contains(&c)) as u16
        });
        let got = hausdorff(&outer, &inner, 1).unwrap();
        let want = brute_force_hd(&outer, &inner, 1);
        assert_eq!(got, want);
        // Boundary rings at offset 2: corner-to-corner distance 2*sqrt(2).
        assert!((got.unwrap() - 8.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_random_matches_brute_force() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let a = map_of(10, 10, |_, _| rng.gen_bool(0.35) as u16);
            let b = map_of(10, 10, |_, _| rng.gen_bool(0.35) as u16);
            assert_eq!(hausdorff(&a, &b, 1).unwrap(), brute_force_hd(&a, &b, 1));
        }
    }

    #[test]
    fn hausdorff_symmetric_and_nonnegative() {
        let mut rng = SeededRng::new(23);
        let a = map_of(8, 8, |_, _| rng.gen_bool(0.4) as u16);
        let b = map_of(8, 8, |_, _| rng.gen_bool(0.4) as u16);
        let ab = hausdorff(&a, &b, 1).unwrap();
        let ba = hausdorff(&b, &a, 1).unwrap();
        assert_eq!(ab, ba);
        if let Some(d) = ab {
            assert!(d >= 0.0);
        }
    }

    #[test]
    fn boundary_includes_image_edge_pixels() {
        // A mask filling the whole image: every edge pixel is boundary,
        // interior pixels are not.
        let full = map_of(4, 4, |_, _| 1);
        let b = boundary(&full, 1);
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&(1, 1)));
        assert!(b.contains(&(0, 0)));
    }

    #[test]
    fn evaluate_aggregates_means() {
        let gt = map_of(8, 8, |r, c| {
            if (1..4).contains(&r) && (1..4).contains(&c) {
                1
            } else if (5..7).contains(&r) && (5..7).contains(&c) {
                2
            } else {
                0
            }
        });
        let report = evaluate(&gt, &gt, 3).unwrap();
        assert_eq!(report.classes, vec![1, 2]);
        assert_eq!(report.dice, vec![1.0, 1.0]);
        assert_eq!(report.mean_dice, 1.0);
        assert_eq!(report.mean_hausdorff, Some(0.0));
    }

    #[test]
    fn evaluate_skips_infinite_hd_in_mean() {
        let gt = map_of(4, 4, |r, c| (r == 1 && c == 1) as u16);
        let pred = map_of(4, 4, |_, _| 0u16);
        let report = evaluate(&pred, &gt, 3).unwrap();
        // Class 1: one empty mask -> None; class 2: both empty -> 0.
        assert_eq!(report.hausdorff, vec![None, Some(0.0)]);
        assert_eq!(report.mean_hausdorff, Some(0.0));
        assert_eq!(report.dice, vec![0.0, 1.0]);
    }
}
