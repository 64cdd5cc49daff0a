//! Binary-mask algorithms: connected-component labeling, largest
//! component extraction, and Zhang-Suen thinning.

use crate::core::LabelMap;
use crate::error::{Error, Result};

/// Dense boolean mask congruent with a [`LabelMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch);
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Mask of one class of a label map.
    pub fn of_class(labels: &LabelMap, class: u16) -> Self {
        Self {
            height: labels.height,
            width: labels.width,
            bits: labels.labels.iter().map(|&l| l == class).collect(),
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Component id per true pixel (dense from 0, assigned in raster order
/// of each component's first pixel) plus component sizes.
#[derive(Debug, Clone)]
pub struct Components {
    pub ids: Vec<Option<u32>>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn n_components(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    let (h, w) = (mask.height, mask.width);
    let mut ids: Vec<Option<u32>> = vec![None; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || ids[start].is_some() {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        stack.push(start);
        ids[start] = Some(id);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (r, c) = (idx / w, idx % w);
            let mut visit = |rr: isize, cc: isize| {
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    return;
                }
                let j = rr as usize * w + cc as usize;
                if mask.bits[j] && ids[j].is_none() {
                    ids[j] = Some(id);
                    stack.push(j);
                }
            };
            let (ri, ci) = (r as isize, c as isize);
            visit(ri - 1, ci);
            visit(ri + 1, ci);
            visit(ri, ci - 1);
            visit(ri, ci + 1);
            if connectivity == Connectivity::Eight {
                visit(ri - 1, ci - 1);
                visit(ri - 1, ci + 1);
                visit(ri + 1, ci - 1);
                visit(ri + 1, ci + 1);
            }
        }
        sizes.push(size);
    }
    Components { ids, sizes }
}

/// The component of maximal pixel count, ties broken by smallest
/// component id (raster order of first pixel). Empty in, empty out.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    largest_component_with(mask, Connectivity::Four)
}

pub fn largest_component_with(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let comps = connected_components(mask, connectivity);
    let mut out = BinaryMask::empty(mask.height, mask.width);
    let Some(best) = comps
        .sizes
        .iter()
        .enumerate()
        .max_by(|(ia, sa), (ib, sb)| sa.cmp(sb).then(ib.cmp(ia)))
        .map(|(i, _)| i as u32)
    else {
        return out;
    };
    for (i, id) in comps.ids.iter().enumerate() {
        if *id == Some(best) {
            out.bits[i] = true;
        }
    }
    out
}

/// Zhang-Suen iterative thinning.
///
/// Neighbours are numbered clockwise starting from the pixel above:
/// p2=N, p3=NE, p4=E, p5=SE, p6=S, p7=SW, p8=W, p9=NW. A pixel is
/// deleted in sub-iteration 1 when all of:
///   (a) 2 <= B(p) <= 6, with B the count of true neighbours,
///   (b) A(p) == 1, with A the number of 0->1 transitions in the cyclic
///       sequence p2 p3 ... p9 p2,
///   (c) p2*p4*p6 == 0,
///   (d) p4*p6*p8 == 0;
/// sub-iteration 2 swaps (c) and (d) for p2*p4*p8 and p2*p6*p8.
/// Pixels outside the image count as false. Iterates until neither
/// sub-cycle deletes a pixel.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut cur = mask.clone();
    let get = |m: &BinaryMask, r: isize, c: isize| -> bool {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            false
        } else {
            m.bits[r as usize * w + c as usize]
        }
    };
    loop {
        let mut changed = false;
        for sub in 0..2 {
            let mut to_delete = Vec::new();
            for r in 0..h as isize {
                for c in 0..w as isize {
                    if !get(&cur, r, c) {
                        continue;
                    }
                    let p = [
                        get(&cur, r - 1, c),     // p2
                        get(&cur, r - 1, c + 1), // p3
                        get(&cur, r, c + 1),     // p4
                        get(&cur, r + 1, c + 1), // p5
                        get(&cur, r + 1, c),     // p6
                        get(&cur, r + 1, c - 1), // p7
                        get(&cur, r, c - 1),     // p8
                        get(&cur, r - 1, c - 1), // p9
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (c1, c2) = if sub == 0 {
                        (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                    } else {
                        (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                    };
                    if !c1 && !c2 {
                        to_delete.push((r as usize, c as usize));
                    }
                }
            }
            if !to_delete.is_empty() {
                changed = true;
                for (r, c) in to_delete {
                    cur.set(r, c, false);
                }
            }
        }
        if !changed {
            break;
        }
    }
    // Thinning deletes 2x2 blocks outright, which would erase a whole
    // component; restore one representative pixel (first in raster
    // order) for any input component that vanished so the skeleton
    // keeps one connected piece per input component.
    let comps = connected_components(mask, Connectivity::Eight);
    let mut survives = vec![false; comps.n_components()];
    for (i, &id) in comps.ids.iter().enumerate() {
        if let Some(id) = id {
            if cur.bits[i] {
                survives[id as usize] = true;
            }
        }
    }
    for (i, &id) in comps.ids.iter().enumerate() {
        if let Some(id) = id {
            if !survives[id as usize] {
                cur.bits[i] = true;
                survives[id as usize] = true;
            }
        }
    }
    cur
}
