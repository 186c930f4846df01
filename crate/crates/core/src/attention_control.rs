//! Edit masks from cross-attention.
//!
//! A word's map is the mean of its attention column over every captured step
//! from `T` down to `t`, divided by its maximum, then thresholded with a
//! strict `> τ`. The edit mask is the union of the source-word and
//! target-word masks.

use ndarray::Array2;

use crate::autoencoder::PATCH;
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.3;

/// One captured cross-attention map, `(h·w, L)` with softmax rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub timestep: usize,
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub map: Array2<f64>,
}

impl AttentionRecord {
    pub fn tokens(&self) -> usize {
        self.map.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedWordMap {
    /// `(h, w)`, max-normalized.
    pub map: Array2<f64>,
    pub word_index: usize,
    /// `(from, to)`: the highest and lowest timesteps averaged.
    pub step_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub mask: Array2<bool>,
}

impl BinaryMask {
    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self { mask: Array2::from_elem((h, w), value) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dim() == other.dim() && self.mask.iter().zip(other.mask.iter()).all(|(&a, &b)| !a || b)
    }

    /// Intersection over union; two empty masks count as a perfect match.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.mask.iter().zip(other.mask.iter()).filter(|(&a, &b)| a && b).count();
        let union = self.mask.iter().zip(other.mask.iter()).filter(|(&a, &b)| a || b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Mean of column `word_index` over the records at timesteps `≥ t`, reshaped
/// to `(h, w)` and divided by its maximum.
///
/// Each cell is summed over its values in sorted order, so the result does not
/// depend on record order.
pub fn average_word_map(records: &[AttentionRecord], word_index: usize, t: usize) -> Result<AveragedWordMap> {
    let selected: Vec<&AttentionRecord> = records.iter().filter(|r| r.timestep >= t).collect();
    let first = selected.first().ok_or_else(|| Error::Empty(format!("attention records at timestep >= {t}")))?;
    let (h, w) = (first.height, first.width);
    for r in &selected {
        if r.tokens() <= word_index {
            return Err(Error::WordIndexOutOfRange { index: word_index, len: r.tokens() });
        }
        if (r.height, r.width) != (h, w) || r.map.nrows() != h * w {
            return Err(Error::shape(&[h * w, r.tokens()], r.map.shape()));
        }
    }
    let n = selected.len() as f64;
    let mut cell = Vec::with_capacity(selected.len());
    let mut map = Array2::zeros((h, w));
    for site in 0..h * w {
        cell.clear();
        cell.extend(selected.iter().map(|r| r.map[[site, word_index]]));
        cell.sort_by(f64::total_cmp);
        map[[site / w, site % w]] = cell.iter().sum::<f64>() / n;
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument(format!("attention map of word {word_index} is all zero")));
    }
    map.mapv_inplace(|v| v / max);
    let from = selected.iter().map(|r| r.timestep).max().unwrap_or(t);
    let to = selected.iter().map(|r| r.timestep).min().unwrap_or(t);
    Ok(AveragedWordMap { map, word_index, step_range: (from, to) })
}

/// `B(x) := x > τ`, cellwise.
pub fn threshold_map(avg: &AveragedWordMap, tau: f64) -> Result<BinaryMask> {
    check_tau(tau)?;
    Ok(BinaryMask { mask: avg.map.mapv(|v| v > tau) })
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1), got {tau}")));
    }
    Ok(())
}

pub fn union_masks(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    if a.dim() != b.dim() {
        return Err(Error::shape(&[a.dim().0, a.dim().1], &[b.dim().0, b.dim().1]));
    }
    Ok(BinaryMask { mask: ndarray::Zip::from(&a.mask).and(&b.mask).map_collect(|&x, &y| x || y) })
}

/// 8×8 block reduction of an image-resolution mask; a cell is set iff any
/// pixel of its block is set.
pub fn resize_user_mask(mask: &Array2<bool>) -> Result<BinaryMask> {
    let (hh, ww) = mask.dim();
    if hh == 0 || ww == 0 || hh % PATCH != 0 || ww % PATCH != 0 {
        return Err(Error::InvalidArgument(format!("mask {hh}x{ww} is not a positive multiple of {PATCH}")));
    }
    let mut out = Array2::from_elem((hh / PATCH, ww / PATCH), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            out[[y / PATCH, x / PATCH]] = true;
        }
    }
    Ok(BinaryMask { mask: out })
}

/// The edit mask at step `t`: union over word pairs of the thresholded source
/// and target maps. `pairs` holds `(source position, target position)`.
pub fn attention_mask(
    source: &[AttentionRecord],
    target: &[AttentionRecord],
    pairs: &[(usize, usize)],
    t: usize,
    tau: f64,
) -> Result<BinaryMask> {
    check_tau(tau)?;
    let mut acc: Option<BinaryMask> = None;
    for &(src, tgt) in pairs {
        let a = threshold_map(&average_word_map(source, src, t)?, tau)?;
        let b = threshold_map(&average_word_map(target, tgt, t)?, tau)?;
        let m = union_masks(&a, &b)?;
        acc = Some(match acc {
            Some(prev) => union_masks(&prev, &m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| Error::Empty("edited word pairs".into()))
}
