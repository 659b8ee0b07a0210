//! Pinhole camera used for the point-cloud sensor.
//!
//! Convention: camera frame has +z forward, +x right, +y down, so image v
//! grows downward. Integer pixel coordinates are exact sample points, not
//! cell centers with a half-pixel offset. Depth is the camera-frame z of
//! the hit, which equals the ray parameter when the ray direction is left
//! unnormalized as `(dx, dy, 1)`.

use crate::math::{Iso3, Mat3, Vec3};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world transform.
    pub pose: Iso3,
}

impl CameraModel {
    /// Place the camera at `position` looking toward `target`, with
    /// `up` fixing the roll. `up` must not be parallel to the view axis.
    pub fn look_at(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        position: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Self {
        let z_c = (target - position).normalized().expect("camera target coincides with position");
        let x_c = z_c.cross(up).normalized().expect("camera up is parallel to the view axis");
        let y_c = z_c.cross(x_c);
        let pose = Iso3::new(Mat3::from_columns(x_c, y_c, z_c), position);
        CameraModel { width, height, fx, fy, cx, cy, pose }
    }

    /// World point to `(u, v, depth)`. Points at or behind the camera
    /// plane project to `None`.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.pose.inverse().apply(p);
        if c.z <= 0.0 {
            return None;
        }
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        Some((u, v, c.z))
    }

    /// Pixel plus depth back to a world point.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        );
        self.pose.apply(c)
    }

    /// World-frame ray through a pixel. The direction is the rotated
    /// `(dx, dy, 1)`, deliberately unnormalized: a hit at parameter `s`
    /// has camera depth exactly `s`, so renderers can store the parameter
    /// directly into the depth image.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let dir_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.pose.translation, self.pose.rotation.mul_vec(dir_cam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> CameraModel {
        CameraModel::look_at(
            160,
            160,
            135.0,
            135.0,
            80.0,
            80.0,
            Vec3::new(0.0, 0.55, 0.45),
            Vec3::new(0.0, 0.05, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        )
    }

    #[test]
    fn look_at_axes_are_orthonormal_and_right_handed() {
        let cam = test_camera();
        let r = cam.pose.rotation;
        let x = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        let y = r.mul_vec(Vec3::new(0.0, 1.0, 0.0));
        let z = r.mul_vec(Vec3::new(0.0, 0.0, 1.0));
        assert!((x.norm() - 1.0).abs() < 1e-12);
        assert!(x.dot(y).abs() < 1e-12);
        assert!(x.dot(z).abs() < 1e-12);
        assert!((x.cross(y) - z).norm() < 1e-12);
        // Forward points from the camera toward the scene.
        let fwd = (Vec3::new(0.0, 0.05, 0.0) - cam.pose.translation).normalized().unwrap();
        assert!((z - fwd).norm() < 1e-12);
        // Image-down maps to world-down-ish: y has negative world z.
        assert!(y.z < 0.0);
    }

    #[test]
    fn target_projects_to_principal_point() {
        let cam = test_camera();
        let (u, v, depth) = cam.project(Vec3::new(0.0, 0.05, 0.0)).unwrap();
        assert!((u - cam.cx).abs() < 1e-9);
        assert!((v - cam.cy).abs() < 1e-9);
        let dist = (Vec3::new(0.0, 0.05, 0.0) - cam.pose.translation).norm();
        assert!((depth - dist).abs() < 1e-12);
    }

    #[test]
    fn principal_pixel_backprojects_along_forward() {
        let cam = test_camera();
        let p = cam.backproject(cam.cx, cam.cy, 0.3);
        let fwd = cam.pose.rotation.mul_vec(Vec3::new(0.0, 0.0, 1.0));
        assert!((p - (cam.pose.translation + fwd * 0.3)).norm() < 1e-12);
    }

    #[test]
    fn project_backproject_round_trip() {
        let cam = test_camera();
        let mut state = 0x8f3a_11d9_02c4_77e1u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut seen = 0;
        for _ in 0..200 {
            let p = Vec3::new(next() * 0.6 - 0.3, next() * 0.6 - 0.3, next() * 0.4);
            let Some((u, v, depth)) = cam.project(p) else { continue };
            let q = cam.backproject(u, v, depth);
            assert!((p - q).norm() < 1e-6, "{p:?} vs {q:?}");
            seen += 1;
        }
        assert!(seen > 100);
    }

    #[test]
    fn behind_camera_does_not_project() {
        let cam = test_camera();
        let behind = cam.pose.translation + cam.pose.rotation.mul_vec(Vec3::new(0.0, 0.0, -0.5));
        assert_eq!(cam.project(behind), None);
    }

    #[test]
    fn pixel_ray_depth_equals_parameter() {
        let cam = test_camera();
        let (origin, dir) = cam.pixel_ray(100.0, 60.0);
        let s = 0.42;
        let world = origin + dir * s;
        let (_, _, depth) = cam.project(world).unwrap();
        assert!((depth - s).abs() < 1e-12);
        let back = cam.backproject(100.0, 60.0, s);
        assert!((back - world).norm() < 1e-12);
    }
}
