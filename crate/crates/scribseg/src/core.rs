//! Shared value types: dense grids for images, labels and per-pixel
//! probability simplices, plus seeded randomness and simplex math.
//!
//! All grids are row-major. Images are channel-innermost. All floating
//! math is f64 so finite-difference gradient checks have headroom.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel for pixels that carry no annotation. The maximum
/// representable label value, never a valid class index.
pub const UNLABELED: u16 = u16::MAX;

/// Background class. Occlusion turns pixels into this class.
pub const BACKGROUND: u16 = 0;

/// 2-D grid of per-pixel intensities, row-major, channel-innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != height * width * channels {
            return Err(Error::ShapeMismatch);
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f64 {
        &mut self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// 2-D grid of class indices with an explicit [`UNLABELED`] sentinel.
/// Houses both scribbles and ground-truth segmentations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch);
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![UNLABELED; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u16) {
        self.labels[row * self.width + col] = label;
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of pixels carrying a label.
    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

/// 2-D grid of per-pixel probability simplices over `m` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub m: usize,
    pub probs: Vec<f64>,
}

const SIMPLEX_TOL: f64 = 1e-9;

impl ProbMap {
    /// Validates every pixel row against the simplex invariant.
    pub fn new(height: usize, width: usize, m: usize, probs: Vec<f64>) -> Result<Self> {
        if m == 0 || probs.len() != height * width * m {
            return Err(Error::ShapeMismatch);
        }
        for (i, row) in probs.chunks_exact(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL
                || row.iter().any(|&p| !(0.0..=1.0 + SIMPLEX_TOL).contains(&p))
            {
                return Err(Error::InvalidSimplex { index: i });
            }
        }
        Ok(Self {
            height,
            width,
            m,
            probs,
        })
    }

    /// Skips the per-row validation. For internal construction where the
    /// rows come straight out of `softmax`.
    pub(crate) fn new_unchecked(height: usize, width: usize, m: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), height * width * m);
        Self {
            height,
            width,
            m,
            probs,
        }
    }

    pub fn uniform(height: usize, width: usize, m: usize) -> Self {
        Self {
            height,
            width,
            m,
            probs: vec![1.0 / m as f64; height * width * m],
        }
    }

    /// Probability row of one pixel (length `m`).
    #[inline]
    pub fn row(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.m..(idx + 1) * self.m]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, class: usize) -> f64 {
        self.probs[(row * self.width + col) * self.m + class]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax; ties broken by the smaller class index.
    pub fn argmax(&self) -> LabelMap {
        let labels = self
            .probs
            .chunks_exact(self.m)
            .map(|row| {
                let mut best = 0usize;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Per-pixel per-class soft label weights. Unlike [`ProbMap`], rows sum
/// to at most one: mixing two partially labeled sources leaves mass
/// missing wherever a source was unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelMap {
    pub height: usize,
    pub width: usize,
    pub m: usize,
    pub weights: Vec<f64>,
}

impl SoftLabelMap {
    pub fn zeros(height: usize, width: usize, m: usize) -> Self {
        Self {
            height,
            width,
            m,
            weights: vec![0.0; height * width * m],
        }
    }

    /// Hard scribbles as soft weights: labeled pixel k becomes e_k,
    /// unlabeled pixels get an all-zero row.
    pub fn from_labels(labels: &LabelMap, m: usize) -> Result<Self> {
        let mut out = Self::zeros(labels.height, labels.width, m);
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            if (l as usize) >= m {
                return Err(Error::ClassOutOfRange { label: l, m });
            }
            out.weights[i * m + l as usize] = 1.0;
        }
        Ok(out)
    }

    #[inline]
    pub fn row(&self, idx: usize) -> &[f64] {
        &self.weights[idx * self.m..(idx + 1) * self.m]
    }

    #[inline]
    pub fn row_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.weights[idx * self.m..(idx + 1) * self.m]
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Total class count plus the subset expected to be single-connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    pub m: usize,
    pub connected_classes: Vec<u16>,
}

impl ClassSet {
    pub fn new(m: usize, connected_classes: Vec<u16>) -> Result<Self> {
        if connected_classes
            .iter()
            .any(|&k| k == BACKGROUND || k as usize >= m)
        {
            return Err(Error::ClassOutOfRange {
                label: *connected_classes
                    .iter()
                    .find(|&&k| k == BACKGROUND || k as usize >= m)
                    .unwrap(),
                m,
            });
        }
        Ok(Self {
            m,
            connected_classes,
        })
    }
}

/// Deterministic seeded generator. ChaCha8 gives the same stream for the
/// same seed on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream for a labeled task (per-image seeds and the
    /// like). splitmix64 mixing keeps substreams decorrelated.
    pub fn derive(&self, label: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label)))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// One-hot encoding of a label map. UNLABELED pixels become the uniform
/// vector 1/m.
pub fn one_hot(labels: &LabelMap, m: usize) -> Result<ProbMap> {
    let mut probs = vec![0.0; labels.n_pixels() * m];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == UNLABELED {
            for k in 0..m {
                probs[i * m + k] = 1.0 / m as f64;
            }
        } else if (l as usize) < m {
            probs[i * m + l as usize] = 1.0;
        } else {
            return Err(Error::ClassOutOfRange { label: l, m });
        }
    }
    Ok(ProbMap::new_unchecked(
        labels.height,
        labels.width,
        m,
        probs,
    ))
}

/// Map over `0..n`, in parallel when the `parallel` feature is on.
/// Results are always in index order, so reductions stay deterministic.
pub fn maybe_par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Always-sequential counterpart of [`maybe_par_map`]; the bench suite
/// compares the two.
pub fn seq_map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
