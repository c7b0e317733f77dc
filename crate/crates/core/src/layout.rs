//! Block partitioning of latent grids and the interleaved sequence plan.
//!
//! A latent grid of `grid_h × grid_w` patches is cut into `ar_length` equal
//! rectangles visited in raster order. Inside a block, patches are also
//! linearized in raster order. The sequence plan lays out text tokens, the
//! begin/end-of-image delimiters and the clean and noisy copies of every block.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub block_h: usize,
    pub block_w: usize,
    /// Blocks along the row axis.
    pub blocks_y: usize,
    /// Blocks along the column axis.
    pub blocks_x: usize,
    pub ar_length: usize,
    /// `(block_row, block_col)` per block, raster order.
    pub block_order: Vec<(usize, usize)>,
}

/// Partitions a `grid_h × grid_w` patch grid into `ar_length` equal blocks.
///
/// Among the factorizations `ar_length = blocks_y · blocks_x` that tile the
/// grid, the one with the squarest block wins; ties go to more block rows.
pub fn build_block_layout(grid_h: usize, grid_w: usize, ar_length: usize) -> Result<BlockLayout> {
    let err = Error::NonDivisibleGrid {
        grid_h,
        grid_w,
        ar_length,
    };
    if grid_h == 0 || grid_w == 0 || ar_length == 0 {
        return Err(err);
    }
    let mut best: Option<(usize, usize, usize)> = None;
    for blocks_y in (1..=ar_length).filter(|d| ar_length.is_multiple_of(*d)) {
        let blocks_x = ar_length / blocks_y;
        if !grid_h.is_multiple_of(blocks_y) || !grid_w.is_multiple_of(blocks_x) {
            continue;
        }
        let skew = (grid_h / blocks_y).abs_diff(grid_w / blocks_x);
        if best.is_none_or(|(s, _, _)| skew <= s) {
            best = Some((skew, blocks_y, blocks_x));
        }
    }
    let (_, blocks_y, blocks_x) = best.ok_or(err)?;
    let block_order = (0..blocks_y).flat_map(|r| (0..blocks_x).map(move |c| (r, c))).collect();
    Ok(BlockLayout {
        grid_h,
        grid_w,
        block_h: grid_h / blocks_y,
        block_w: grid_w / blocks_x,
        blocks_y,
        blocks_x,
        ar_length,
        block_order,
    })
}

impl BlockLayout {
    pub fn tokens_per_block(&self) -> usize {
        self.block_h * self.block_w
    }

    /// Top-left patch `(row, col)` of block `i`.
    pub fn block_origin(&self, i: usize) -> (usize, usize) {
        let (br, bc) = self.block_order[i];
        (br * self.block_h, bc * self.block_w)
    }

    /// Patch coordinates covered by block `i`, raster order.
    pub fn block_patches(&self, i: usize) -> Vec<(usize, usize)> {
        let (r0, c0) = self.block_origin(i);
        (0..self.block_h)
            .flat_map(|dr| (0..self.block_w).map(move |dc| (r0 + dr, c0 + dc)))
            .collect()
    }
}

/// A `height × width × channels` latent, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn patch(&self, r: usize, c: usize) -> &[f64] {
        let o = (r * self.width + c) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn patch_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let o = (r * self.width + c) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// One block's patches as a `(block_h·block_w) × channels` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub values: Matrix,
    pub block_index: usize,
}

pub fn split_blocks(grid: &LatentGrid, layout: &BlockLayout) -> Result<Vec<LatentBlock>> {
    if (grid.height, grid.width) != (layout.grid_h, layout.grid_w) {
        return Err(shape_err(
            "split_blocks grid",
            (layout.grid_h, layout.grid_w),
            (grid.height, grid.width),
        ));
    }
    Ok((0..layout.ar_length)
        .map(|i| {
            let mut values = Matrix::zeros(layout.tokens_per_block(), grid.channels);
            for (t, (r, c)) in layout.block_patches(i).into_iter().enumerate() {
                values.row_mut(t).copy_from_slice(grid.patch(r, c));
            }
            LatentBlock { values, block_index: i }
        })
        .collect())
}

pub fn join_blocks(blocks: &[LatentBlock], layout: &BlockLayout) -> Result<LatentGrid> {
    if blocks.len() != layout.ar_length {
        return Err(shape_err("join_blocks count", layout.ar_length, blocks.len()));
    }
    let channels = blocks.first().map_or(0, |b| b.values.cols);
    let mut grid = LatentGrid::zeros(layout.grid_h, layout.grid_w, channels);
    for block in blocks {
        if block.values.shape() != (layout.tokens_per_block(), channels) || block.block_index >= layout.ar_length {
            return Err(shape_err(
                "join_blocks block",
                (layout.tokens_per_block(), channels),
                block.values.shape(),
            ));
        }
        for (t, (r, c)) in layout.block_patches(block.block_index).into_iter().enumerate() {
            grid.patch_mut(r, c).copy_from_slice(block.values.row(t));
        }
    }
    Ok(grid)
}

/// Role of a plan entry (and of every token inside it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Text,
    Boi,
    CleanBlock(usize),
    NoisyBlock(usize),
    Eoi,
}

impl Role {
    /// Text, BOI and EOI all follow next-token semantics.
    pub fn is_text_like(self) -> bool {
        matches!(self, Role::Text | Role::Boi | Role::Eoi)
    }
}

/// Rotary coordinates: `(row, col)` for image patches, `(index, 0)` for text.
pub type Coord = (i64, i64);

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub role: Role,
    pub token_count: usize,
    pub coords: Vec<Coord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePlan {
    pub entries: Vec<PlanEntry>,
    pub text_len: usize,
    pub clean_blocks: bool,
    pub ar_length: usize,
    pub tokens_per_block: usize,
    roles: Vec<Role>,
    coords: Vec<Coord>,
}

/// Builds `[TEXT×n, BOI, CLEAN(0..l)?, NOISY(0..l), EOI]`.
pub fn plan_sequence(layout: &BlockLayout, text_len: usize, clean_blocks: bool) -> SequencePlan {
    let mut entries = Vec::new();
    if text_len > 0 {
        entries.push(PlanEntry {
            role: Role::Text,
            token_count: text_len,
            coords: (0..text_len as i64).map(|i| (i, 0)).collect(),
        });
    }
    entries.push(PlanEntry {
        role: Role::Boi,
        token_count: 1,
        coords: vec![(text_len as i64, 0)],
    });
    let block_coords = |i: usize| -> Vec<Coord> {
        layout
            .block_patches(i)
            .into_iter()
            .map(|(r, c)| (r as i64, c as i64))
            .collect()
    };
    if clean_blocks {
        for i in 0..layout.ar_length {
            entries.push(PlanEntry {
                role: Role::CleanBlock(i),
                token_count: layout.tokens_per_block(),
                coords: block_coords(i),
            });
        }
    }
    for i in 0..layout.ar_length {
        entries.push(PlanEntry {
            role: Role::NoisyBlock(i),
            token_count: layout.tokens_per_block(),
            coords: block_coords(i),
        });
    }
    entries.push(PlanEntry {
        role: Role::Eoi,
        token_count: 1,
        coords: vec![(text_len as i64 + 1, 0)],
    });
    SequencePlan::from_entries(
        entries,
        text_len,
        clean_blocks,
        layout.ar_length,
        layout.tokens_per_block(),
    )
}

impl SequencePlan {
    /// Causal text with no delimiters and no image blocks.
    pub fn text_only(text_len: usize) -> Self {
        let entries = if text_len == 0 {
            Vec::new()
        } else {
            vec![PlanEntry {
                role: Role::Text,
                token_count: text_len,
                coords: (0..text_len as i64).map(|i| (i, 0)).collect(),
            }]
        };
        Self::from_entries(entries, text_len, false, 0, 0)
    }

    fn from_entries(
        entries: Vec<PlanEntry>,
        text_len: usize,
        clean_blocks: bool,
        ar_length: usize,
        tokens_per_block: usize,
    ) -> Self {
        let mut roles = Vec::new();
        let mut coords = Vec::new();
        for e in &entries {
            roles.extend(core::iter::repeat_n(e.role, e.token_count));
            coords.extend_from_slice(&e.coords);
        }
        Self {
            entries,
            text_len,
            clean_blocks,
            ar_length,
            tokens_per_block,
            roles,
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, token: usize) -> Role {
        self.roles[token]
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn boi(&self) -> usize {
        self.text_len
    }

    pub fn eoi(&self) -> usize {
        self.len() - 1
    }

    pub fn text_positions(&self) -> Range<usize> {
        0..self.text_len
    }

    fn first_image(&self) -> usize {
        self.text_len + 1
    }

    pub fn clean_positions(&self, block: usize) -> Option<Range<usize>> {
        self.clean_blocks.then(|| {
            let s = self.first_image() + block * self.tokens_per_block;
            s..s + self.tokens_per_block
        })
    }

    pub fn noisy_positions(&self, block: usize) -> Range<usize> {
        let clean = if self.clean_blocks { self.ar_length } else { 0 };
        let s = self.first_image() + (clean + block) * self.tokens_per_block;
        s..s + self.tokens_per_block
    }

    /// The same plan with every noisy block relabeled as a clean block. The
    /// autoregressive stage uses this view when no clean prefix exists and
    /// the noisy slots carry block content instead.
    pub fn content_view(&self) -> SequencePlan {
        let entries = self
            .entries
            .iter()
            .map(|e| PlanEntry {
                role: match e.role {
                    Role::NoisyBlock(i) => Role::CleanBlock(i),
                    r => r,
                },
                ..e.clone()
            })
            .collect();
        SequencePlan::from_entries(entries, self.text_len, true, self.ar_length, self.tokens_per_block)
    }

    /// Token positions whose content feeds the autoregressive stage, in order:
    /// text, BOI, then each block's content rows. With clean blocks these are
    /// the clean rows; without, the noisy slots (see [`Self::content_view`]).
    pub fn content_block_positions(&self, block: usize) -> Range<usize> {
        self.clean_positions(block)
            .unwrap_or_else(|| self.noisy_positions(block))
    }
}
