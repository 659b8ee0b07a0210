//! Cross-cutting invariants of the field pipeline: smoothness of the
//! interpolated cost surface, range preservation, and bit-level
//! reproducibility of the whole construction.

use afi_core::field::{build_field, FieldParams, FieldWeights, ScalarField, SceneSnapshot};
use afi_core::{Vec3, WorkspaceGrid};

struct TestRng(u64);
impl TestRng {
    fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
    fn in_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }
}

fn random_scene(rng: &mut TestRng, grid: &WorkspaceGrid) -> SceneSnapshot {
    let extent = grid.voxel_size() * grid.resolution() as f64;
    let point = |rng: &mut TestRng| {
        grid.origin()
            + Vec3::new(
                rng.in_range(0.0, extent),
                rng.in_range(0.0, extent),
                rng.in_range(0.0, extent),
            )
    };
    let scene: Vec<Vec3> = (0..40).map(|_| point(rng)).collect();
    let target: Vec<Vec3> = (0..5).map(|_| point(rng)).collect();
    let eef = point(rng);
    SceneSnapshot::new(scene, target, eef, 0.0).unwrap()
}

#[test]
fn interpolated_cost_is_lipschitz_inside_the_hull() {
    // Trilinear interpolation of a field with values in [lo, hi] changes
    // by at most (hi - lo) / voxel_size per axis, so 3x that bounds the
    // Euclidean rate. The pipeline output is normalized, making the bound
    // 3 / voxel_size.
    let mut rng = TestRng(0xfede_fede_0101_2323);
    for _ in 0..20 {
        let grid = WorkspaceGrid::new(Vec3::new(-0.1, -0.1, 0.0), 0.04, 12).unwrap();
        let snapshot = random_scene(&mut rng, &grid);
        let field = build_field(&snapshot, &grid, FieldWeights::default(), &FieldParams::default());
        let (lo, hi) = field.min_max();
        let rate = 3.0 * (hi - lo) / grid.voxel_size();
        // Points strictly inside the voxel-center hull.
        let inner = |rng: &mut TestRng| {
            let margin = grid.voxel_size();
            let extent = grid.voxel_size() * grid.resolution() as f64 - 2.0 * margin;
            grid.origin()
                + Vec3::new(
                    margin + rng.in_range(0.0, extent),
                    margin + rng.in_range(0.0, extent),
                    margin + rng.in_range(0.0, extent),
                )
        };
        for _ in 0..200 {
            let p = inner(&mut rng);
            let step = Vec3::new(
                rng.in_range(-0.01, 0.01),
                rng.in_range(-0.01, 0.01),
                rng.in_range(-0.01, 0.01),
            );
            let q = p + step;
            let dv = (field.query(p) - field.query(q)).abs();
            assert!(
                dv <= rate * step.norm() + 1e-12,
                "jump {dv} over {} exceeds rate {rate}",
                step.norm()
            );
        }
    }
}

#[test]
fn queries_inside_hull_stay_within_value_range() {
    let mut rng = TestRng(0x5555_aaaa_5555_aaaa);
    let grid = WorkspaceGrid::new(Vec3::ZERO, 0.05, 10).unwrap();
    let snapshot = random_scene(&mut rng, &grid);
    let field = build_field(&snapshot, &grid, FieldWeights::default(), &FieldParams::default());
    let (lo, hi) = field.min_max();
    assert!(lo == 0.0 && hi == 1.0);
    let extent = grid.voxel_size() * grid.resolution() as f64;
    for _ in 0..1000 {
        let p = grid.origin()
            + Vec3::new(
                rng.in_range(-0.1, extent + 0.1),
                rng.in_range(-0.1, extent + 0.1),
                rng.in_range(-0.1, extent + 0.1),
            );
        let v = field.query(p);
        assert!((0.0..=1.0).contains(&v), "query {v} out of range");
    }
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let grid = WorkspaceGrid::new(Vec3::new(-0.2, -0.05, 0.0), 0.03, 14).unwrap();
    let mut rng = TestRng(0x1111_2222_3333_4444);
    let snapshot = random_scene(&mut rng, &grid);
    let a = build_field(&snapshot, &grid, FieldWeights::default(), &FieldParams::default());
    let b = build_field(&snapshot, &grid, FieldWeights::default(), &FieldParams::default());
    assert_eq!(a.values(), b.values());
}

#[test]
fn worse_weights_on_obstacles_raise_cost_near_obstacles() {
    // Sanity on the weighted fusion: increasing the obstacle weight cannot
    // make a voxel adjacent to an obstacle cheaper relative to free space.
    let grid = WorkspaceGrid::new(Vec3::ZERO, 0.04, 12).unwrap();
    let obstacle = grid.center(3, 3, 3);
    let target = grid.center(9, 9, 6);
    let snapshot = SceneSnapshot::new(vec![obstacle], vec![target], grid.center(6, 6, 10), 0.0)
        .unwrap();
    let params = FieldParams::default();
    let light = build_field(&snapshot, &grid, FieldWeights { target: 0.9, obstacle: 0.1 }, &params);
    let heavy = build_field(&snapshot, &grid, FieldWeights { target: 0.1, obstacle: 0.9 }, &params);
    // Relative cost of the obstacle voxel versus a free voxel at similar
    // target distance grows with the obstacle weight.
    let free = grid.center(3, 9, 3);
    let rel_light = light.query(obstacle) - light.query(free);
    let rel_heavy = heavy.query(obstacle) - heavy.query(free);
    assert!(rel_heavy > rel_light);
}

#[test]
fn field_values_can_round_trip_through_reconstruction() {
    // from_values + values() is lossless, the contract the file dump in
    // the companion crate depends on.
    let grid = WorkspaceGrid::new(Vec3::ZERO, 0.05, 6).unwrap();
    let mut rng = TestRng(3);
    let values: Vec<f64> = (0..grid.len()).map(|_| rng.next_f64()).collect();
    let f = ScalarField::from_values(grid, values.clone());
    assert_eq!(f.values(), values.as_slice());
}
