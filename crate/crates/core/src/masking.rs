//! Random patch masking with shuffle/restore bookkeeping (MAE style).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Partition of `0..n_patches` into masked and visible patches.
///
/// `shuffle` lists visible patches first (in the order the encoder sees them)
/// followed by masked ones; `restore` is its inverse permutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    n_patches: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
    shuffle: Vec<usize>,
    restore: Vec<usize>,
}

/// Number of masked patches for `ratio` of `n` (round half away from zero).
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Samples a uniform random mask of `round(ratio · n)` patches.
pub fn sample_mask<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("mask_ratio", format!("{ratio} is outside [0, 1]")));
    }
    if n_patches == 0 {
        return Err(Error::config("n_patches", "must be at least 1"));
    }
    let n_masked = masked_count(n_patches, ratio);
    let mut shuffle: Vec<usize> = (0..n_patches).collect();
    shuffle.shuffle(rng);
    MaskPlan::from_shuffle(shuffle, n_patches - n_masked)
}

impl MaskPlan {
    /// Builds a plan whose first `n_visible` shuffle entries are visible.
    pub fn from_shuffle(shuffle: Vec<usize>, n_visible: usize) -> Result<Self> {
        let n = shuffle.len();
        if n_visible > n {
            return Err(Error::Contract(format!("{n_visible} visible of {n} patches")));
        }
        let mut restore = vec![usize::MAX; n];
        for (pos, &k) in shuffle.iter().enumerate() {
            if k >= n || restore[k] != usize::MAX {
                return Err(Error::Contract("shuffle is not a permutation".into()));
            }
            restore[k] = pos;
        }
        let mut visible = shuffle[..n_visible].to_vec();
        let mut masked = shuffle[n_visible..].to_vec();
        visible.sort_unstable();
        masked.sort_unstable();
        Ok(Self {
            n_patches: n,
            masked,
            visible,
            shuffle,
            restore,
        })
    }

    /// A plan with nothing masked, visible patches in natural order.
    pub fn unmasked(n_patches: usize) -> Self {
        Self::from_shuffle((0..n_patches).collect(), n_patches).expect("identity permutation")
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Masked patch indices, sorted.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Visible patch indices, sorted.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn shuffle(&self) -> &[usize] {
        &self.shuffle
    }

    pub fn restore(&self) -> &[usize] {
        &self.restore
    }

    pub fn n_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    /// Patch indices in the row order the encoder emits for the visible set.
    pub fn encoder_order(&self) -> &[usize] {
        &self.shuffle[..self.visible.len()]
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.restore[patch] >= self.visible.len()
    }
}
