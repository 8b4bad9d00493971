use crate::error::Result;
use crate::pyramid::validate_sides;

/// Row-major boolean attention mask; `allowed(i, j)` means query `i` may
/// attend to key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    n: usize,
    cells: Vec<bool>,
}

impl BlockMask {
    pub fn from_blocks(blocks: &[usize]) -> Self {
        let n = blocks.len();
        let mut cells = Vec::with_capacity(n * n);
        for &bi in blocks {
            cells.extend(blocks.iter().map(|&bj| bj <= bi));
        }
        Self { n, cells }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

/// Mask over `[s]` followed by the flattened maps of `scale_sides`: the
/// start token is block 0 and scale `k` is block `k + 1`.
pub fn block_causal_mask(scale_sides: &[usize]) -> Result<BlockMask> {
    if !scale_sides.is_empty() {
        validate_sides(scale_sides)?;
    }
    let mut blocks = vec![0];
    for (k, s) in scale_sides.iter().enumerate() {
        blocks.extend(std::iter::repeat_n(k + 1, s * s));
    }
    Ok(BlockMask::from_blocks(&blocks))
}

/// Scale index of every flattened position.
pub fn position_scales(scale_sides: &[usize]) -> Vec<usize> {
    scale_sides
        .iter()
        .enumerate()
        .flat_map(|(k, s)| std::iter::repeat_n(k, s * s))
        .collect()
}
