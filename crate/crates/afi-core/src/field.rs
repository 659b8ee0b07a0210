//! Spatial affordance cost fields.
//!
//! A field assigns every voxel a cost in `[0, 1]`, lower meaning more
//! favorable for the end-effector. The full pipeline is:
//!
//! 1. `target_field`: distance to the target centroid (attraction),
//! 2. `obstacle_field`: occupancy -> exemptions -> distance transform ->
//!    linear repulsion,
//! 3. `fuse`: weighted sum of the two,
//! 4. `gaussian_smooth`: separable blur so costs vary smoothly,
//!
//! with min-max normalization after every stage. A field that comes out
//! constant normalizes to all zeros rather than dividing by zero.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::grid::{OccupancyMask, WorkspaceGrid};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldError {
    /// Operands live on different grids.
    GridMismatch,
    /// A snapshot needs at least one target point to define a centroid.
    EmptyTarget,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldError::GridMismatch => write!(f, "fields are defined on different grids"),
            FieldError::EmptyTarget => write!(f, "snapshot has no target points"),
        }
    }
}

impl core::error::Error for FieldError {}

/// Fusion weights for the target and obstacle subfields.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FieldWeights {
    pub target: f64,
    pub obstacle: f64,
}

impl Default for FieldWeights {
    fn default() -> Self {
        FieldWeights { target: 0.7, obstacle: 0.3 }
    }
}

/// Construction parameters shared by the field pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FieldParams {
    /// Gaussian sigma in voxel units.
    pub sigma_voxels: f64,
    /// Occupied voxels this close to the end-effector are not obstacles:
    /// the sensor sees the gripper itself.
    pub eef_exempt_radius: f64,
    /// Occupied voxels this close to any target point are not obstacles,
    /// otherwise the target would repel its own approach.
    pub target_buffer_radius: f64,
    /// Obstacle repulsion reaches this many voxels before decaying to zero.
    pub influence_voxels: f64,
}

impl Default for FieldParams {
    fn default() -> Self {
        FieldParams {
            sigma_voxels: 1.0,
            eef_exempt_radius: 0.04,
            target_buffer_radius: 0.05,
            influence_voxels: 6.0,
        }
    }
}

/// One perception frame: everything the field builder consumes.
///
/// `target_centroid` is always the arithmetic mean of `target_points`;
/// construction enforces it.
#[derive(Clone, Debug)]
pub struct SceneSnapshot {
    pub scene_points: Vec<Vec3>,
    pub target_points: Vec<Vec3>,
    pub target_centroid: Vec3,
    pub eef_position: Vec3,
    pub timestamp: f64,
}

impl SceneSnapshot {
    pub fn new(
        scene_points: Vec<Vec3>,
        target_points: Vec<Vec3>,
        eef_position: Vec3,
        timestamp: f64,
    ) -> Result<Self, FieldError> {
        if target_points.is_empty() {
            return Err(FieldError::EmptyTarget);
        }
        let mut sum = Vec3::ZERO;
        for &p in &target_points {
            sum += p;
        }
        let target_centroid = sum / target_points.len() as f64;
        Ok(SceneSnapshot { scene_points, target_points, target_centroid, eef_position, timestamp })
    }
}

/// Scalar cost per voxel, stored x-fastest like the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: WorkspaceGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn constant(grid: WorkspaceGrid, value: f64) -> Self {
        ScalarField { values: vec![value; grid.len()], grid }
    }

    pub fn from_values(grid: WorkspaceGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &WorkspaceGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.flat(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Flat index of the minimum value; ties resolve to the lowest index.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (idx, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = idx;
            }
        }
        best
    }

    /// Min-max normalization to `[0, 1]`; a constant field becomes zeros.
    pub fn normalized(&self) -> ScalarField {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        ScalarField { grid: self.grid, values }
    }

    /// Trilinear interpolation over the eight surrounding voxel centers.
    /// Outside the voxel-center hull the cost is pinned to 1.0, the worst
    /// value, so queries never reward leaving the workspace.
    pub fn query(&self, p: Vec3) -> f64 {
        let g = self.grid.resolution();
        let vs = self.grid.voxel_size();
        let u = (p - self.grid.origin()) / vs - Vec3::new(0.5, 0.5, 0.5);
        let max = (g - 1) as f64;
        if !(u.x >= 0.0 && u.y >= 0.0 && u.z >= 0.0 && u.x <= max && u.y <= max && u.z <= max) {
            return 1.0;
        }
        let cell = |v: f64| -> (usize, f64) {
            let i = (libm::floor(v) as usize).min(g - 2);
            (i, v - i as f64)
        };
        let (i0, fx) = cell(u.x);
        let (j0, fy) = cell(u.y);
        let (k0, fz) = cell(u.z);
        let mut acc = 0.0;
        for dk in 0..2 {
            let wz = if dk == 0 { 1.0 - fz } else { fz };
            for dj in 0..2 {
                let wy = if dj == 0 { 1.0 - fy } else { fy };
                for di in 0..2 {
                    let wx = if di == 0 { 1.0 - fx } else { fx };
                    acc += wx * wy * wz * self.get(i0 + di, j0 + dj, k0 + dk);
                }
            }
        }
        acc
    }
}

/// Per-voxel Euclidean distance to the target centroid, normalized.
pub fn target_field(grid: &WorkspaceGrid, centroid: Vec3) -> ScalarField {
    let g = grid.resolution();
    let mut values = Vec::with_capacity(grid.len());
    for k in 0..g {
        for j in 0..g {
            for i in 0..g {
                values.push(grid.center(i, j, k).distance(centroid));
            }
        }
    }
    ScalarField { grid: *grid, values }.normalized()
}

const EDT_INF: f64 = 1e20;

/// Exact Euclidean distance (meters) from each voxel center to the nearest
/// occupied voxel center. Occupied voxels get 0; an empty mask yields the
/// grid diagonal everywhere.
///
/// Separable lower-envelope transform on squared voxel distances; all
/// intermediate quantities for reachable cells are integers representable
/// in f64, so the result matches a brute-force nearest-occupied scan bit
/// for bit.
pub fn distance_transform(mask: &OccupancyMask) -> ScalarField {
    let grid = *mask.grid();
    let g = grid.resolution();
    if mask.count() == 0 {
        return ScalarField::constant(grid, grid.diagonal());
    }

    let mut d: Vec<f64> = mask
        .as_slice()
        .iter()
        .map(|&o| if o { 0.0 } else { EDT_INF })
        .collect();

    let mut line = vec![0.0; g];
    let mut out = vec![0.0; g];
    let mut v = vec![0usize; g];
    let mut z = vec![0.0f64; g + 1];

    // x, then y, then z; strides select the axis.
    for stride in [1usize, g, g * g] {
        for a in 0..g {
            for b in 0..g {
                // Base offset of this 1D line.
                let base = match stride {
                    1 => a * g + b * g * g,
                    s if s == g => a + b * g * g,
                    _ => a + b * g,
                };
                for (q, item) in line.iter_mut().enumerate() {
                    *item = d[base + q * stride];
                }
                dt_1d(&line, &mut out, &mut v, &mut z);
                for (q, &val) in out.iter().enumerate() {
                    d[base + q * stride] = val;
                }
            }
        }
    }

    let vs = grid.voxel_size();
    let values = d
        .into_iter()
        .map(|d2| {
            if d2 >= EDT_INF {
                grid.diagonal()
            } else {
                libm::sqrt(d2) * vs
            }
        })
        .collect();
    ScalarField { grid, values }
}

/// 1D squared-distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= z[k] {
                if k == 0 {
                    // Degenerate only when f values are infinite duplicates.
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        d[q] = diff * diff + f[p];
    }
}

/// Obstacle repulsion. Occupied voxels near the end-effector or near any
/// target point are exempted, the rest repel linearly out to
/// `influence_voxels` voxels: `max(0, 1 - dt/d_influence)`, then
/// normalization. An empty post-exemption mask yields all zeros.
pub fn obstacle_field(
    scene: &OccupancyMask,
    eef_position: Vec3,
    target_points: &[Vec3],
    params: &FieldParams,
) -> ScalarField {
    let grid = *scene.grid();
    let mut mask = scene.cleared_near(eef_position, params.eef_exempt_radius);
    for &t in target_points {
        mask.clear_near(t, params.target_buffer_radius);
    }
    if mask.count() == 0 {
        return ScalarField::constant(grid, 0.0);
    }
    let dt = distance_transform(&mask);
    let d_influence = params.influence_voxels * grid.voxel_size();
    let values = dt
        .values()
        .iter()
        .map(|&d| (1.0 - d / d_influence).max(0.0))
        .collect();
    ScalarField { grid, values }.normalized()
}

/// Separable Gaussian blur, kernel truncated at three sigma, edges
/// replicated. No normalization: the raw blur is a convex combination per
/// voxel, so the global maximum can only shrink.
pub fn gaussian_smooth_raw(field: &ScalarField, sigma_voxels: f64) -> ScalarField {
    let grid = field.grid;
    let g = grid.resolution();
    if sigma_voxels <= 0.0 {
        return field.clone();
    }
    let radius = libm::ceil(3.0 * sigma_voxels) as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for t in -radius..=radius {
        let w = libm::exp(-((t * t) as f64) / (2.0 * sigma_voxels * sigma_voxels));
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }

    let mut src = field.values.clone();
    let mut dst = vec![0.0; src.len()];
    for stride in [1usize, g, g * g] {
        for base_k in 0..g {
            for base_j in 0..g {
                let base = match stride {
                    1 => base_j * g + base_k * g * g,
                    s if s == g => base_j + base_k * g * g,
                    _ => base_j + base_k * g,
                };
                for q in 0..g {
                    let mut acc = 0.0;
                    for (ti, &w) in kernel.iter().enumerate() {
                        let t = ti as isize - radius;
                        // Edge replication keeps boundary costs honest.
                        let s = (q as isize + t).clamp(0, g as isize - 1) as usize;
                        acc += w * src[base + s * stride];
                    }
                    dst[base + q * stride] = acc;
                }
            }
        }
        core::mem::swap(&mut src, &mut dst);
    }
    ScalarField { grid, values: src }
}

/// Gaussian blur followed by re-normalization to `[0, 1]`.
pub fn gaussian_smooth(field: &ScalarField, sigma_voxels: f64) -> ScalarField {
    gaussian_smooth_raw(field, sigma_voxels).normalized()
}

/// Weighted fusion of the two subfields, normalized.
pub fn fuse(
    target: &ScalarField,
    obstacle: &ScalarField,
    weights: FieldWeights,
) -> Result<ScalarField, FieldError> {
    if target.grid != obstacle.grid {
        return Err(FieldError::GridMismatch);
    }
    let values = target
        .values
        .iter()
        .zip(&obstacle.values)
        .map(|(&t, &o)| weights.target * t + weights.obstacle * o)
        .collect();
    Ok(ScalarField { grid: target.grid, values }.normalized())
}

/// Full pipeline from one perception snapshot to the fused, smoothed field.
pub fn build_field(
    snapshot: &SceneSnapshot,
    grid: &WorkspaceGrid,
    weights: FieldWeights,
    params: &FieldParams,
) -> ScalarField {
    let scene = OccupancyMask::from_points(*grid, &snapshot.scene_points);
    let target = target_field(grid, snapshot.target_centroid);
    let obstacle = obstacle_field(&scene, snapshot.eef_position, &snapshot.target_points, params);
    let fused = fuse(&target, &obstacle, weights).expect("subfields share the grid");
    gaussian_smooth(&fused, params.sigma_voxels)
}
