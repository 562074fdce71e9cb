//! Blockwise patch masking and mask-token substitution.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Mat, Real};
use crate::rng::{self, tag};

/// Set of masked patch indices over a grid. The CLS token is never included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted, unique flat indices in `[0, grid_h * grid_w)`.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            masked: Vec::new(),
            seed: 0,
        }
    }

    pub fn full(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            masked: (0..grid_h * grid_w).collect(),
            seed: 0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// One flag per patch, true where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.num_cells()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// A rectangle placed by the generator and the cells it newly covered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub added: Vec<usize>,
}

/// Generator trace: placed blocks and the cells trimmed from the last one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskLog {
    pub blocks: Vec<MaskBlock>,
    pub trimmed: Vec<usize>,
}

/// Which masking scheme to use during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskingKind {
    Blockwise,
    /// Independent uniformly random cells; baseline only.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockwiseMasker {
    /// Smallest block area in cells.
    pub min_block: usize,
    /// Aspect ratios are drawn log-uniformly from `[min_aspect, 1/min_aspect]`.
    pub min_aspect: f64,
}

impl Default for BlockwiseMasker {
    fn default() -> Self {
        Self {
            min_block: 4,
            min_aspect: 0.3,
        }
    }
}

const MAX_STALLED_DRAWS: usize = 64;

impl BlockwiseMasker {
    pub fn generate(&self, grid_h: usize, grid_w: usize, target: usize, seed: u64) -> Result<MaskSpec> {
        Ok(self.generate_logged(grid_h, grid_w, target, seed)?.0)
    }

    /// Unions random rectangles until `target` cells are covered, then trims
    /// surplus cells from the last rectangle so the count is exact.
    pub fn generate_logged(&self, grid_h: usize, grid_w: usize, target: usize, seed: u64) -> Result<(MaskSpec, MaskLog)> {
        let total = grid_h * grid_w;
        if target > total {
            return Err(Error::range(format!(
                "cannot mask {target} cells on a {grid_h}x{grid_w} grid"
            )));
        }
        let mut r = rng::stream(seed, &[tag::MASK]);
        let mut mask = vec![false; total];
        let mut count = 0;
        let mut log = MaskLog::default();
        let (lo_aspect, hi_aspect) = (self.min_aspect.ln(), (1.0 / self.min_aspect).ln());
        let min_area = self.min_block.max(1) as f64;
        let mut stalled = 0;
        while count < target {
            let block = if stalled >= MAX_STALLED_DRAWS {
                // Only tiny holes remain; fill one directly.
                let free: Vec<usize> = (0..total).filter(|&i| !mask[i]).collect();
                let i = free[r.random_range(0..free.len())];
                (i / grid_w, i % grid_w, 1, 1)
            } else {
                let max_area = min_area.max((target - count) as f64);
                let area = if max_area > min_area {
                    r.random_range(min_area..max_area)
                } else {
                    min_area
                };
                let aspect = if hi_aspect > lo_aspect {
                    r.random_range(lo_aspect..hi_aspect).exp()
                } else {
                    1.0
                };
                let h = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
                let w = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
                // Anchors may overhang every edge so each cell is equally likely to be covered.
                let top = r.random_range(0..grid_h + h - 1) as isize - (h as isize - 1);
                let left = r.random_range(0..grid_w + w - 1) as isize - (w as isize - 1);
                let (y0, y1) = (top.max(0) as usize, ((top + h as isize) as usize).min(grid_h));
                let (x0, x1) = (left.max(0) as usize, ((left + w as isize) as usize).min(grid_w));
                (y0, x0, y1 - y0, x1 - x0)
            };
            let (top, left, h, w) = block;
            let mut added = Vec::new();
            for y in top..top + h {
                for x in left..left + w {
                    let i = y * grid_w + x;
                    if !mask[i] {
                        mask[i] = true;
                        added.push(i);
                    }
                }
            }
            if added.is_empty() {
                stalled += 1;
                continue;
            }
            stalled = 0;
            count += added.len();
            if count > target {
                let surplus = count - target;
                let mut pool = added.clone();
                pool.shuffle(&mut r);
                let mut trimmed: Vec<usize> = pool[..surplus].to_vec();
                trimmed.sort_unstable();
                for &i in &trimmed {
                    mask[i] = false;
                }
                count = target;
                log.trimmed = trimmed;
            }
            log.blocks.push(MaskBlock {
                top,
                left,
                height: h,
                width: w,
                added,
            });
        }
        let masked = (0..total).filter(|&i| mask[i]).collect();
        Ok((
            MaskSpec {
                grid_h,
                grid_w,
                masked,
                seed,
            },
            log,
        ))
    }
}

/// Blockwise mask with the default block constraints.
pub fn blockwise_mask(grid_h: usize, grid_w: usize, target: usize, seed: u64) -> Result<MaskSpec> {
    BlockwiseMasker::default().generate(grid_h, grid_w, target, seed)
}

/// Uniformly random cells, exactly `target` of them.
pub fn random_mask(grid_h: usize, grid_w: usize, target: usize, seed: u64) -> Result<MaskSpec> {
    let total = grid_h * grid_w;
    if target > total {
        return Err(Error::range(format!(
            "cannot mask {target} cells on a {grid_h}x{grid_w} grid"
        )));
    }
    let mut r = rng::stream(seed, &[tag::MASK]);
    let perm = rng::permutation(&mut r, total);
    let mut masked = perm[..target].to_vec();
    masked.sort_unstable();
    Ok(MaskSpec {
        grid_h,
        grid_w,
        masked,
        seed,
    })
}

/// Replaces masked patch tokens by `mask_embedding + pos_embed[row]`.
///
/// Row 0 (CLS) and unmasked rows are left untouched.
pub fn apply_mask<T: Real>(mut tokens: Mat<T>, spec: &MaskSpec, mask_embedding: &[T], pos_embed: &[T]) -> Result<Mat<T>> {
    let d = tokens.cols;
    if tokens.rows != spec.num_cells() + 1 {
        return Err(Error::contract(format!(
            "{} tokens do not match a {}x{} grid plus CLS",
            tokens.rows, spec.grid_h, spec.grid_w
        )));
    }
    if mask_embedding.len() != d {
        return Err(Error::contract(format!(
            "mask embedding width {} differs from token width {d}",
            mask_embedding.len()
        )));
    }
    if pos_embed.len() != tokens.rows * d {
        return Err(Error::contract("positional table does not match token count"));
    }
    for &m in &spec.masked {
        if m >= spec.num_cells() {
            return Err(Error::range(format!("masked index {m} outside grid")));
        }
        let row = m + 1;
        let pos = &pos_embed[row * d..(row + 1) * d];
        for (j, slot) in tokens.row_mut(row).iter_mut().enumerate() {
            *slot = mask_embedding[j] + pos[j];
        }
    }
    Ok(tokens)
}
