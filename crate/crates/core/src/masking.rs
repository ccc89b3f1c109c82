//! Bottleneck-aligned block masks.
//!
//! A [`MaskGrid`] lives at the network's bottleneck resolution. Every other
//! resolution (each encoder stage and the input) sees the same mask through
//! nearest-neighbour block upsampling, so a masked bottleneck cell always
//! corresponds to a whole non-overlapping block of input voxels.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many cells to mask per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioSpec {
    Static(f64),
    /// A fresh ratio `r ~ U[lo, hi]` for every sampled mask.
    Dynamic { lo: f64, hi: f64 },
}

impl RatioSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RatioSpec::Static(r) => r > 0.0 && r < 1.0,
            RatioSpec::Dynamic { lo, hi } => lo > 0.0 && lo <= hi && hi < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("masking ratio must lie in (0, 1): {self:?}")))
        }
    }

    pub fn expected(&self) -> f64 {
        match *self {
            RatioSpec::Static(r) => r,
            RatioSpec::Dynamic { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    grid_shape: [usize; 3],
    /// `true` = masked, z-major order.
    cells: Vec<bool>,
    ratio_spec: RatioSpec,
    sampled_ratio: f64,
}

/// Round-half-up of `r * n`.
pub fn masked_count(r: f64, n: usize) -> usize {
    ((r * n as f64) + 0.5).floor() as usize
}

/// Draws a mask with exactly `round(r * N)` masked cells, uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(grid_shape: [usize; 3], ratio: RatioSpec, rng: &mut R) -> Result<MaskGrid> {
    if grid_shape.contains(&0) {
        return Err(Error::Invalid(format!("degenerate mask grid {grid_shape:?}")));
    }
    ratio.validate()?;
    let r = match ratio {
        RatioSpec::Static(r) => r,
        RatioSpec::Dynamic { lo, hi } => {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
    };
    let n: usize = grid_shape.iter().product();
    let k = masked_count(r, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let (chosen, _) = order.partial_shuffle(rng, k);
    let mut cells = vec![false; n];
    for &i in chosen.iter() {
        cells[i] = true;
    }
    Ok(MaskGrid {
        grid_shape,
        cells,
        ratio_spec: ratio,
        sampled_ratio: r,
    })
}

impl MaskGrid {
    pub fn from_cells(grid_shape: [usize; 3], cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid_shape.iter().product::<usize>() || grid_shape.contains(&0) {
            return Err(Error::shape("MaskGrid::from_cells", format!("{grid_shape:?}"), cells.len()));
        }
        let r = cells.iter().filter(|&&c| c).count() as f64 / cells.len() as f64;
        Ok(MaskGrid {
            grid_shape,
            cells,
            ratio_spec: RatioSpec::Static(r),
            sampled_ratio: r,
        })
    }

    pub fn empty(grid_shape: [usize; 3]) -> Self {
        let n = grid_shape.iter().product();
        MaskGrid {
            grid_shape,
            cells: vec![false; n],
            ratio_spec: RatioSpec::Static(0.0),
            sampled_ratio: 0.0,
        }
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        self.grid_shape
    }
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
    pub fn ratio_spec(&self) -> RatioSpec {
        self.ratio_spec
    }
    pub fn sampled_ratio(&self) -> f64 {
        self.sampled_ratio
    }
    pub fn masked_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
    pub fn realized_ratio(&self) -> f64 {
        self.masked_cells() as f64 / self.cells.len() as f64
    }
    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }
}

/// Nearest-neighbour block upsampling of a grid to `target` (z, y, x).
pub fn rescale_mask(mask: &MaskGrid, target: [usize; 3]) -> Result<Vec<bool>> {
    let g = mask.grid_shape;
    if (0..3).any(|a| target[a] == 0 || target[a] % g[a] != 0) {
        return Err(Error::shape(
            "rescale_mask",
            format!("multiples of {g:?}"),
            format!("{target:?}"),
        ));
    }
    let f = [target[0] / g[0], target[1] / g[1], target[2] / g[2]];
    let mut out = Vec::with_capacity(target.iter().product());
    for z in 0..target[0] {
        for y in 0..target[1] {
            let row = ((z / f[0]) * g[1] + y / f[1]) * g[2];
            out.extend((0..target[2]).map(|x| mask.cells[row + x / f[2]]));
        }
    }
    Ok(out)
}

/// Inverse of [`rescale_mask`] for block-constant inputs: a cell is masked iff its whole block is.
pub fn block_downsample_all(voxels: &[bool], dims: [usize; 3], grid: [usize; 3]) -> Result<Vec<bool>> {
    if (0..3).any(|a| grid[a] == 0 || dims[a] % grid[a] != 0) || voxels.len() != dims.iter().product::<usize>() {
        return Err(Error::shape("block_downsample_all", format!("{grid:?}"), format!("{dims:?}")));
    }
    let f = [dims[0] / grid[0], dims[1] / grid[1], dims[2] / grid[2]];
    let mut out = vec![true; grid.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let cell = ((z / f[0]) * grid[1] + y / f[1]) * grid[2] + x / f[2];
                out[cell] &= voxels[(z * dims[1] + y) * dims[2] + x];
            }
        }
    }
    Ok(out)
}

/// Per-sample voxel masks for a batch at one resolution (`true` = masked).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMask {
    batch: usize,
    dims: [usize; 3],
    data: Vec<bool>,
}

impl VoxelMask {
    pub fn new(batch: usize, dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != batch * dims.iter().product::<usize>() {
            return Err(Error::shape("VoxelMask::new", batch * dims.iter().product::<usize>(), data.len()));
        }
        Ok(VoxelMask { batch, dims, data })
    }

    pub fn empty(batch: usize, dims: [usize; 3]) -> Self {
        VoxelMask {
            batch,
            dims,
            data: vec![false; batch * dims.iter().product::<usize>()],
        }
    }

    pub fn full(batch: usize, dims: [usize; 3]) -> Self {
        VoxelMask {
            batch,
            dims,
            data: vec![true; batch * dims.iter().product::<usize>()],
        }
    }

    /// Rescales one grid per batch item to `dims`.
    pub fn from_grids(grids: &[MaskGrid], dims: [usize; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(grids.len() * dims.iter().product::<usize>());
        for g in grids {
            data.extend(rescale_mask(g, dims)?);
        }
        Ok(VoxelMask {
            batch: grids.len(),
            dims,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    pub fn plane(&self, b: usize) -> &[bool] {
        let n = self.dims.iter().product::<usize>();
        &self.data[b * n..(b + 1) * n]
    }
    pub fn masked_count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    pub(crate) fn check(&self, op: &'static str, batch: usize, dims: [usize; 3]) -> Result<()> {
        if self.batch != batch || self.dims != dims {
            return Err(Error::shape(
                op,
                format!("mask {}x{:?}", batch, dims),
                format!("{}x{:?}", self.batch, self.dims),
            ));
        }
        Ok(())
    }
}
