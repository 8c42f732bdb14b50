use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned voxel block `[start, start + size)` owned by one ROI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasBlock {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

impl AtlasBlock {
    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| v[a] >= self.start[a] && v[a] < self.start[a] + self.size[a])
    }
}

/// Synthetic parcellation: ROI `k` occupies `blocks[k]` of the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasLayout {
    pub grid: [usize; 3],
    pub blocks: Vec<AtlasBlock>,
}

impl AtlasLayout {
    /// Regular tiling with `per_axis` blocks along each axis. ROI indices run
    /// row-major over the block grid (x slowest, z fastest).
    pub fn regular(grid: [usize; 3], per_axis: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if per_axis[a] == 0 || grid[a] % per_axis[a] != 0 {
                return Err(Error::Config(format!(
                    "grid {grid:?} not divisible into {per_axis:?} blocks"
                )));
            }
        }
        let size = [grid[0] / per_axis[0], grid[1] / per_axis[1], grid[2] / per_axis[2]];
        let mut blocks = Vec::with_capacity(per_axis.iter().product());
        for bx in 0..per_axis[0] {
            for by in 0..per_axis[1] {
                for bz in 0..per_axis[2] {
                    blocks.push(AtlasBlock {
                        start: [bx * size[0], by * size[1], bz * size[2]],
                        size,
                    });
                }
            }
        }
        Ok(Self { grid, blocks })
    }

    pub fn n_rois(&self) -> usize {
        self.blocks.len()
    }

    /// Checks that blocks lie inside the grid and do not overlap.
    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) {
            return Err(Error::Config(format!("empty atlas grid {:?}", self.grid)));
        }
        let mut owner = vec![false; self.grid.iter().product()];
        for (k, b) in self.blocks.iter().enumerate() {
            for a in 0..3 {
                if b.size[a] == 0 || b.start[a] + b.size[a] > self.grid[a] {
                    return Err(Error::Config(format!("atlas block {k} outside grid")));
                }
            }
            for x in b.start[0]..b.start[0] + b.size[0] {
                for y in b.start[1]..b.start[1] + b.size[1] {
                    for z in b.start[2]..b.start[2] + b.size[2] {
                        let i = (x * self.grid[1] + y) * self.grid[2] + z;
                        if owner[i] {
                            return Err(Error::Config(format!("atlas block {k} overlaps another block")));
                        }
                        owner[i] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Voxel mask (row-major) of the union of the given ROI blocks.
    pub fn mask(&self, rois: &[usize]) -> Vec<bool> {
        let [_, ny, nz] = self.grid;
        let mut mask = vec![false; self.grid.iter().product()];
        for &k in rois {
            let b = &self.blocks[k];
            for x in b.start[0]..b.start[0] + b.size[0] {
                for y in b.start[1]..b.start[1] + b.size[1] {
                    for z in b.start[2]..b.start[2] + b.size[2] {
                        mask[(x * ny + y) * nz + z] = true;
                    }
                }
            }
        }
        mask
    }
}
