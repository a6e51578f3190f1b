//! Complementary patch masks, token removal and reinsertion, dual-branch
//! reconstruction composition, and masking-frequency statistics.

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{config_err, ComaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which of the two branches a mask belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Trained with gradients; sees `adaptive_mask`.
    Adaptive,
    /// Frozen copy; sees the complement.
    Evaluation,
}

/// Number of patches the adaptive branch keeps: `round(n·(1 − r))` clamped to
/// `[1, n − 1]` so both branches see at least one patch.
pub fn visible_count(n: usize, mask_ratio: f64) -> Result<usize> {
    if n < 2 {
        return Err(config_err!("complementary masking needs at least 2 patches, got {n}"));
    }
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(config_err!("mask ratio must lie in (0, 1), got {mask_ratio}"));
    }
    let kept = (n as f64 * (1.0 - mask_ratio)).round() as usize;
    Ok(kept.clamp(1, n - 1))
}

/// A pair of patch masks, `true` marking a preserved patch. The evaluation
/// mask is the exact complement of the adaptive one.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub mask_ratio: f64,
    adaptive: Vec<bool>,
    evaluation: Vec<bool>,
}

impl MaskPair {
    /// Builds the pair from the adaptive branch's mask.
    pub fn from_adaptive(adaptive: Vec<bool>, mask_ratio: f64) -> Result<Self> {
        let kept = adaptive.iter().filter(|&&b| b).count();
        if kept == 0 || kept == adaptive.len() {
            return Err(config_err!("both branches need at least one visible patch"));
        }
        let evaluation = adaptive.iter().map(|&b| !b).collect();
        Ok(Self { mask_ratio, adaptive, evaluation })
    }

    pub fn n_patches(&self) -> usize {
        self.adaptive.len()
    }

    pub fn adaptive_mask(&self) -> &[bool] {
        &self.adaptive
    }

    pub fn evaluation_mask(&self) -> &[bool] {
        &self.evaluation
    }

    pub fn mask(&self, branch: Branch) -> &[bool] {
        match branch {
            Branch::Adaptive => &self.adaptive,
            Branch::Evaluation => &self.evaluation,
        }
    }

    /// Sorted indices of the patches `branch` keeps.
    pub fn visible(&self, branch: Branch) -> Vec<usize> {
        indices_of(self.mask(branch))
    }
}

fn indices_of(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
}

/// Draws `k` distinct indices of `0..n` with a partial Fisher–Yates shuffle.
fn choose_visible(n: usize, k: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &perm[..k] {
        mask[i] = true;
    }
    mask
}

/// Samples a complementary pair. One permutation is split at the visible
/// count, so the complement never has to be sampled separately.
pub fn sample_mask_pair(n: usize, mask_ratio: f64, rng: &mut impl Rng) -> Result<MaskPair> {
    let k = visible_count(n, mask_ratio)?;
    MaskPair::from_adaptive(choose_visible(n, k, rng), mask_ratio)
}

/// A single uniformly random mask with the same visible-count rule, used to
/// compare against plain single-branch random masking.
pub fn sample_random_mask(n: usize, mask_ratio: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let k = visible_count(n, mask_ratio)?;
    Ok(choose_visible(n, k, rng))
}

/// Nearest-neighbour expansion of a patch mask to token granularity for
/// patch-major token order: every bit repeats `p²` times.
pub fn expand_mask(mask: &[bool], p: usize) -> Vec<bool> {
    mask.iter().flat_map(|&b| std::iter::repeat_n(b, p * p)).collect()
}

/// Row-major layout of patches over an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn square(side: usize) -> Self {
        Self { rows: side, cols: side }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Expands a patch mask over `grid` into a `channels × H × W` image of zeros
/// and ones, each patch covering `patch_px × patch_px` pixels.
pub fn mask_image<T: Scalar>(mask: &[bool], grid: PatchGrid, patch_px: usize, channels: usize) -> Result<Tensor<T>> {
    if mask.len() != grid.len() {
        return Err(config_err!(
            "mask of {} patches for a {}×{} grid",
            mask.len(),
            grid.rows,
            grid.cols
        ));
    }
    let (h, w) = (grid.rows * patch_px, grid.cols * patch_px);
    Ok(Tensor::from_fn([channels, h, w], |i| {
        let y = (i / w) % h;
        let x = i % w;
        if mask[(y / patch_px) * grid.cols + x / patch_px] {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// The visible part of a patch-major token sequence.
#[derive(Clone, Debug)]
pub struct TokenSet<R> {
    /// `indices.len() · p²` rows.
    pub tokens: R,
    /// Strictly increasing patch indices, all below `n`.
    pub indices: Vec<usize>,
    /// Side of each patch's token grid.
    pub p: usize,
    /// Total patch count.
    pub n: usize,
}

impl<R> TokenSet<R> {
    pub fn visible(&self) -> usize {
        self.indices.len()
    }

    pub fn with_tokens<S>(&self, tokens: S) -> TokenSet<S> {
        TokenSet { tokens, indices: self.indices.clone(), p: self.p, n: self.n }
    }
}

/// Keeps the token blocks of preserved patches, in order.
pub fn apply_mask<T: Scalar>(g: &Graph<T>, tokens: &Var<T>, mask: &[bool], p: usize) -> Result<TokenSet<Var<T>>> {
    let (rows, _) = tokens.value().dims2()?;
    let n = mask.len();
    let block = p * p;
    if rows != n * block {
        return Err(config_err!(
            "{rows} token rows do not match {n} patches of {p}×{p} tokens"
        ));
    }
    let indices = indices_of(mask);
    let row_idx: Vec<usize> = indices.iter().flat_map(|&i| i * block..(i + 1) * block).collect();
    let kept = if indices.len() == n { tokens.clone() } else { g.gather_rows(tokens, &row_idx)? };
    Ok(TokenSet { tokens: kept, indices, p, n })
}

/// Restores the full patch-major sequence of `n·p²` rows from the visible
/// blocks: removed positions get `mask_token`, then `pos_embed` is added
/// everywhere. At the last encoder stage of 32-pixel patches `p = 1`.
pub fn reassemble<T: Scalar>(
    g: &Graph<T>,
    set: &TokenSet<Var<T>>,
    mask_token: &Var<T>,
    pos_embed: &Tensor<T>,
) -> Result<Var<T>> {
    let block = set.p * set.p;
    let rows = set.n * block;
    if pos_embed.shape() != [rows, mask_token.value().numel()] {
        return Err(config_err!(
            "positional table {:?} for {rows} tokens of width {}",
            pos_embed.shape(),
            mask_token.value().numel()
        ));
    }
    if set.indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ComaError::Invariant("visible indices not strictly increasing".into()));
    }
    let row_idx: Vec<usize> = set.indices.iter().flat_map(|&i| i * block..(i + 1) * block).collect();
    let template = g.broadcast_rows(mask_token, rows)?;
    let full = g.scatter_rows(&set.tokens, &row_idx, &template)?;
    g.add(&full, &Var::constant(pos_embed.clone()))
}

/// `A∘M̄ + E∘M`: each pixel comes from the branch that did NOT see it.
/// `adaptive_out` and `evaluation_out` are `C×H×W` images tiled by `grid`.
pub fn compose_reconstruction<T: Scalar>(
    g: &Graph<T>,
    adaptive_out: &Var<T>,
    evaluation_out: &Var<T>,
    pair: &MaskPair,
    grid: PatchGrid,
) -> Result<Var<T>> {
    if adaptive_out.shape() != evaluation_out.shape() {
        return Err(config_err!(
            "branch outputs {:?} vs {:?}",
            adaptive_out.shape(),
            evaluation_out.shape()
        ));
    }
    let [c, h, w] = adaptive_out.shape()[..] else {
        return Err(config_err!("expected C×H×W reconstruction, got {:?}", adaptive_out.shape()));
    };
    if grid.is_empty() || h % grid.rows != 0 || w % grid.cols != 0 || h / grid.rows != w / grid.cols {
        return Err(config_err!(
            "{h}×{w} image does not tile into a {}×{} grid of square patches",
            grid.rows,
            grid.cols
        ));
    }
    let patch_px = h / grid.rows;
    let keep_a = mask_image::<T>(pair.adaptive_mask(), grid, patch_px, c)?;
    let keep_e = mask_image::<T>(pair.evaluation_mask(), grid, patch_px, c)?;
    let from_a = g.mul(adaptive_out, &Var::constant(keep_e))?;
    let from_e = g.mul(evaluation_out, &Var::constant(keep_a))?;
    g.add(&from_a, &from_e)
}

/// Per-patch masking frequencies accumulated over iterations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageStats {
    pub iterations: u64,
    /// Times each patch was removed from the adaptive (or only) branch.
    pub adaptive_counts: Vec<u64>,
    /// Times each patch was removed from at least one branch, i.e. received
    /// reconstruction supervision.
    pub union_counts: Vec<u64>,
}

impl CoverageStats {
    pub fn new(n: usize) -> Self {
        Self { iterations: 0, adaptive_counts: vec![0; n], union_counts: vec![0; n] }
    }

    pub fn accumulate(&mut self, pair: &MaskPair) -> Result<()> {
        self.check_len(pair.n_patches())?;
        for (i, (&a, &e)) in pair.adaptive_mask().iter().zip(pair.evaluation_mask()).enumerate() {
            if !a {
                self.adaptive_counts[i] += 1;
            }
            if !a || !e {
                self.union_counts[i] += 1;
            }
        }
        self.iterations += 1;
        Ok(())
    }

    /// Single-branch random masking: supervision only where that one mask removed a patch.
    pub fn accumulate_single(&mut self, mask: &[bool]) -> Result<()> {
        self.check_len(mask.len())?;
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                self.adaptive_counts[i] += 1;
                self.union_counts[i] += 1;
            }
        }
        self.iterations += 1;
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.adaptive_counts.len() {
            return Err(config_err!(
                "mask over {n} patches fed to stats over {}",
                self.adaptive_counts.len()
            ));
        }
        Ok(())
    }

    pub fn report(&self) -> CoverageReport {
        let n = self.adaptive_counts.len();
        let side = (n as f64).sqrt().round() as usize;
        let (rows, cols) = if side * side == n { (side, side) } else { (1, n) };
        let mut csv = String::from("patch_row,patch_col,adaptive_count,union_count\n");
        for i in 0..n {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                i / cols,
                i % cols,
                self.adaptive_counts[i],
                self.union_counts[i]
            );
        }
        CoverageReport {
            rows,
            cols,
            csv,
            adaptive_pgm: pgm(&self.adaptive_counts, rows, cols),
            union_pgm: pgm(&self.union_counts, rows, cols),
            adaptive: Moments::of(&self.adaptive_counts),
            union: Moments::of(&self.union_counts),
        }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(counts: &[u64]) -> Self {
        let n = counts.len() as f64;
        let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
        let ss = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>();
        let std = if counts.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug)]
pub struct CoverageReport {
    pub rows: usize,
    pub cols: usize,
    /// Columns `patch_row,patch_col,adaptive_count,union_count`.
    pub csv: String,
    pub adaptive_pgm: Vec<u8>,
    pub union_pgm: Vec<u8>,
    pub adaptive: Moments,
    pub union: Moments,
}

/// Binary greymap with counts min-max scaled to `[0, 255]`; a constant map is all 255.
fn pgm(counts: &[u64], rows: usize, cols: usize) -> Vec<u8> {
    let lo = counts.iter().copied().min().unwrap_or(0);
    let hi = counts.iter().copied().max().unwrap_or(0);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(counts.iter().map(|&c| {
        if hi == lo {
            255
        } else {
            ((c - lo) as f64 * 255.0 / (hi - lo) as f64).round() as u8
        }
    }));
    out
}
