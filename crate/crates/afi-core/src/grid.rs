//! Axis-aligned voxel grid over the reachable workspace.
//!
//! The grid is cubic: `resolution` voxels per axis, uniform `voxel_size`.
//! Flat storage is x-fastest (`i + g*(j + g*k)`), which is also the order
//! used by the binary field dump in the companion crate.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridError {
    /// voxel_size must be positive and finite.
    BadVoxelSize,
    /// resolution must be at least 2 per axis.
    BadResolution,
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::BadVoxelSize => write!(f, "voxel size must be positive and finite"),
            GridError::BadResolution => write!(f, "grid resolution must be at least 2"),
        }
    }
}

impl core::error::Error for GridError {}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkspaceGrid {
    origin: Vec3,
    voxel_size: f64,
    resolution: usize,
}

impl WorkspaceGrid {
    pub fn new(origin: Vec3, voxel_size: f64, resolution: usize) -> Result<Self, GridError> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(GridError::BadVoxelSize);
        }
        if resolution < 2 {
            return Err(GridError::BadResolution);
        }
        Ok(WorkspaceGrid { origin, voxel_size, resolution })
    }

    /// Grid covering `[min, max]` cubically: the voxel size is chosen from
    /// the largest axis extent so the whole box fits.
    pub fn from_bounds(min: Vec3, max: Vec3, resolution: usize) -> Result<Self, GridError> {
        let extent = (max.x - min.x).max(max.y - min.y).max(max.z - min.z);
        WorkspaceGrid::new(min, extent / resolution as f64, resolution)
    }

    #[inline]
    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    #[inline]
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Voxels per axis.
    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Total voxel count.
    #[inline]
    pub fn len(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical diagonal of the whole grid.
    pub fn diagonal(&self) -> f64 {
        self.voxel_size * self.resolution as f64 * libm::sqrt(3.0)
    }

    /// Flat index, x-fastest.
    #[inline]
    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.resolution && j < self.resolution && k < self.resolution);
        i + self.resolution * (j + self.resolution * k)
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let g = self.resolution;
        [idx % g, (idx / g) % g, idx / (g * g)]
    }

    /// Center of voxel `(i, j, k)`.
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (i as f64 + 0.5) * self.voxel_size,
                (j as f64 + 0.5) * self.voxel_size,
                (k as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let rel = (p - self.origin) / self.voxel_size;
        let g = self.resolution as f64;
        if rel.x < 0.0 || rel.y < 0.0 || rel.z < 0.0 || rel.x >= g || rel.y >= g || rel.z >= g {
            return None;
        }
        Some([
            libm::floor(rel.x) as usize,
            libm::floor(rel.y) as usize,
            libm::floor(rel.z) as usize,
        ])
    }
}

/// Boolean occupancy over a [`WorkspaceGrid`], stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMask {
    grid: WorkspaceGrid,
    occupied: Vec<bool>,
}

impl OccupancyMask {
    pub fn empty(grid: WorkspaceGrid) -> Self {
        OccupancyMask { occupied: vec![false; grid.len()], grid }
    }

    /// Marks the voxel of every in-grid point; points outside are ignored.
    /// Re-marking an occupied voxel is a no-op, so this is idempotent.
    pub fn from_points(grid: WorkspaceGrid, points: &[Vec3]) -> Self {
        let mut mask = OccupancyMask::empty(grid);
        mask.insert_points(points);
        mask
    }

    pub fn insert_points(&mut self, points: &[Vec3]) {
        for &p in points {
            if let Some([i, j, k]) = self.grid.voxel_of(p) {
                self.occupied[self.grid.flat(i, j, k)] = true;
            }
        }
    }

    #[inline]
    pub fn grid(&self) -> &WorkspaceGrid {
        &self.grid
    }

    #[inline]
    pub fn is_occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupied[self.grid.flat(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.grid.flat(i, j, k);
        self.occupied[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.occupied
    }

    /// Copy with every occupied voxel whose center lies within `radius` of
    /// `p` cleared.
    pub fn cleared_near(&self, p: Vec3, radius: f64) -> OccupancyMask {
        let mut out = self.clone();
        out.clear_near(p, radius);
        out
    }

    pub fn clear_near(&mut self, p: Vec3, radius: f64) {
        let r2 = radius * radius;
        let g = self.grid.resolution;
        // Only the bounding box of the ball needs scanning.
        let lo = self.grid.voxel_of(p - Vec3::new(radius, radius, radius));
        let hi = self.grid.voxel_of(p + Vec3::new(radius, radius, radius));
        let (lo, hi) = match (lo, hi) {
            (Some(lo), Some(hi)) => (lo, hi),
            // Ball may straddle the boundary; fall back to a clamped box.
            _ => {
                let clamp = |v: f64| -> usize {
                    let idx = libm::floor((v - 0.5).max(0.0)) as usize;
                    idx.min(g - 1)
                };
                let rel_lo = (p - Vec3::new(radius, radius, radius) - self.grid.origin)
                    / self.grid.voxel_size;
                let rel_hi = (p + Vec3::new(radius, radius, radius) - self.grid.origin)
                    / self.grid.voxel_size;
                (
                    [clamp(rel_lo.x + 0.5), clamp(rel_lo.y + 0.5), clamp(rel_lo.z + 0.5)],
                    [clamp(rel_hi.x + 0.5), clamp(rel_hi.y + 0.5), clamp(rel_hi.z + 0.5)],
                )
            }
        };
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    if (self.grid.center(i, j, k) - p).norm_squared() <= r2 {
                        self.occupied[self.grid.flat(i, j, k)] = false;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> WorkspaceGrid {
        WorkspaceGrid::new(Vec3::new(-0.4, -0.4, -0.05), 0.0125, 64).unwrap()
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert_eq!(
            WorkspaceGrid::new(Vec3::ZERO, 0.0, 8).unwrap_err(),
            GridError::BadVoxelSize
        );
        assert_eq!(
            WorkspaceGrid::new(Vec3::ZERO, 0.1, 1).unwrap_err(),
            GridError::BadResolution
        );
    }

    #[test]
    fn flat_index_is_x_fastest() {
        let g = grid();
        assert_eq!(g.flat(1, 0, 0), 1);
        assert_eq!(g.flat(0, 1, 0), 64);
        assert_eq!(g.flat(0, 0, 1), 64 * 64);
        for idx in [0usize, 1, 63, 64, 4095, 4096, 64 * 64 * 64 - 1] {
            let [i, j, k] = g.unflatten(idx);
            assert_eq!(g.flat(i, j, k), idx);
        }
    }

    #[test]
    fn voxel_of_matches_floor_arithmetic_on_random_points() {
        // Oracle: componentwise floor((p - origin) / voxel_size), bounds-checked.
        let g = grid();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let p = Vec3::new(next() * 1.2 - 0.6, next() * 1.2 - 0.6, next() * 1.2 - 0.65);
            let rel = (p - g.origin()) / g.voxel_size();
            let expect = {
                let (i, j, k) = (
                    libm::floor(rel.x) as i64,
                    libm::floor(rel.y) as i64,
                    libm::floor(rel.z) as i64,
                );
                if [i, j, k].iter().all(|&v| (0..64).contains(&v)) {
                    Some([i as usize, j as usize, k as usize])
                } else {
                    None
                }
            };
            assert_eq!(g.voxel_of(p), expect);
        }
    }

    #[test]
    fn points_on_upper_boundary_are_outside() {
        let g = grid();
        let max = g.origin() + Vec3::new(0.8, 0.8, 0.8);
        assert_eq!(g.voxel_of(max), None);
        assert!(g.voxel_of(max - Vec3::new(1e-9, 1e-9, 1e-9)).is_some());
    }

    #[test]
    fn voxelize_ignores_outside_points_and_is_idempotent() {
        let g = grid();
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(5.0, 5.0, 5.0),
        ];
        let mask = OccupancyMask::from_points(g, &pts);
        assert_eq!(mask.count(), 1);
        let again = OccupancyMask::from_points(g, &pts);
        assert_eq!(mask, again);
    }

    #[test]
    fn clear_near_removes_ball_only() {
        let g = WorkspaceGrid::new(Vec3::ZERO, 0.05, 8).unwrap();
        let mut mask = OccupancyMask::empty(g);
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    mask.set(i, j, k, true);
                }
            }
        }
        let p = g.center(4, 4, 4);
        mask.clear_near(p, 0.08);
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let inside = (g.center(i, j, k) - p).norm() <= 0.08;
                    assert_eq!(mask.is_occupied(i, j, k), !inside);
                }
            }
        }
    }
}
