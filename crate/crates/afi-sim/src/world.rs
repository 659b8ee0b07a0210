//! Kinematic desk world: rigid shapes on a table, a single arm, and a
//! depth/label camera.
//!
//! There are no dynamics. The arm teleports through joint space subject to
//! per-step rate caps, grasping is proximity attachment, and released
//! objects settle straight down onto whatever supports them. That is enough
//! to reproduce the manipulation failure modes of interest (stale replay,
//! blocked approaches) while keeping every episode exactly reproducible.

use afi_core::camera::CameraModel;
use afi_core::kinematics::{ActionStep, ArmModel, GripperCommand};
use afi_core::Vec3;
use serde::{Deserialize, Serialize};

/// Solids are axis-aligned; cylinders stand on the z axis. The desk corpus
/// needs nothing richer and analytic ray tests stay exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Box { half_extents: Vec3 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn top_offset(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => half_extents.z,
            Shape::Cylinder { half_height, .. } => *half_height,
        }
    }

    pub fn bottom_offset(&self) -> f64 {
        -self.top_offset()
    }

    /// Radius of the smallest z-axis-aligned bounding cylinder, used for
    /// footprint overlap tests.
    pub fn footprint_radius(&self) -> f64 {
        match self {
            Shape::Box { half_extents } => libm::sqrt(
                half_extents.x * half_extents.x + half_extents.y * half_extents.y,
            ),
            Shape::Cylinder { radius, .. } => *radius,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Object {
    pub name: String,
    pub shape: Shape,
    /// Center of the shape in world coordinates.
    pub position: Vec3,
    pub graspable: bool,
}

impl Object {
    pub fn top_z(&self) -> f64 {
        self.position.z + self.shape.top_offset()
    }

    pub fn bottom_z(&self) -> f64 {
        self.position.z + self.shape.bottom_offset()
    }

    /// Exact distance from a point to the object's surface (zero inside).
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let d = p - self.position;
        match &self.shape {
            Shape::Box { half_extents } => {
                let qx = libm::fabs(d.x) - half_extents.x;
                let qy = libm::fabs(d.y) - half_extents.y;
                let qz = libm::fabs(d.z) - half_extents.z;
                let ox = qx.max(0.0);
                let oy = qy.max(0.0);
                let oz = qz.max(0.0);
                let outside = libm::sqrt(ox * ox + oy * oy + oz * oz);
                let inside = qx.max(qy).max(qz).min(0.0);
                outside + inside
            }
            Shape::Cylinder { radius, half_height } => {
                let qr = libm::sqrt(d.x * d.x + d.y * d.y) - radius;
                let qz = libm::fabs(d.z) - half_height;
                let or = qr.max(0.0);
                let oz = qz.max(0.0);
                let outside = libm::sqrt(or * or + oz * oz);
                let inside = qr.max(qz).min(0.0);
                outside + inside
            }
        }
    }

    /// True when the xy footprint of `self` covers `point` (with slack),
    /// i.e. an object released above can rest on this one.
    fn footprint_contains(&self, point: Vec3, slack: f64) -> bool {
        let dx = point.x - self.position.x;
        let dy = point.y - self.position.y;
        match &self.shape {
            Shape::Box { half_extents } => {
                libm::fabs(dx) <= half_extents.x + slack && libm::fabs(dy) <= half_extents.y + slack
            }
            Shape::Cylinder { radius, .. } => {
                libm::sqrt(dx * dx + dy * dy) <= radius + slack
            }
        }
    }
}

/// Rate and proximity limits applied by `step`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlParams {
    /// Simulated seconds per control step.
    pub dt: f64,
    /// Per-joint speed cap, rad/s.
    pub max_joint_speed: f64,
    /// Cap on end-effector displacement per step, m.
    pub max_eef_step: f64,
    /// Center distance within which a close command attaches an object.
    pub grasp_radius: f64,
    /// Symmetric joint travel limit, rad.
    pub joint_limit: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            dt: 0.05,
            max_joint_speed: 1.5,
            max_eef_step: 0.01,
            grasp_radius: 0.02,
            joint_limit: 3.2,
        }
    }
}

/// Footprint slack for settling: an object may rest on a support whose
/// footprint misses its center by up to this much.
const SETTLE_SLACK: f64 = 0.005;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepResult {
    pub eef: Vec3,
    pub grasped: Option<usize>,
    pub released: Option<usize>,
    /// A joint command hit the travel limit and was clamped.
    pub clamped: bool,
}

#[derive(Clone, Debug)]
pub struct World {
    pub arm: ArmModel,
    pub joints: Vec<f64>,
    pub gripper_closed: bool,
    objects: Vec<Object>,
    /// Attached object index plus its fixed offset from the end effector.
    attached: Option<(usize, Vec3)>,
    pub control: ControlParams,
    pub time: f64,
    steps: u64,
}

impl World {
    pub fn new(arm: ArmModel, home: Vec<f64>, objects: Vec<Object>, control: ControlParams) -> Self {
        assert_eq!(home.len(), arm.dof());
        World {
            arm,
            joints: home,
            gripper_closed: false,
            objects,
            attached: None,
            control,
            time: 0.0,
            steps: 0,
        }
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    #[cfg(test)]
    pub(crate) fn object_mut(&mut self, idx: usize) -> &mut Object {
        &mut self.objects[idx]
    }

    pub fn object_by_name(&self, name: &str) -> Option<&Object> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn attached_index(&self) -> Option<usize> {
        self.attached.map(|(i, _)| i)
    }

    pub fn attached_object_name(&self) -> Option<&str> {
        self.attached.map(|(i, _)| self.objects[i].name.as_str())
    }

    pub fn eef_position(&self) -> Vec3 {
        self.arm.eef_position(&self.joints)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Apply one control step: clamp the joint command to travel and rate
    /// limits, scale the whole motion down if the end effector would move
    /// farther than `max_eef_step`, then update grasp state.
    ///
    /// Commands are absolute joint targets. Proximity attachment happens
    /// only on an open-to-closed transition, so a gripper that is already
    /// closed never picks up objects it brushes past.
    pub fn step(&mut self, action: &ActionStep) -> StepResult {
        assert_eq!(action.joints.len(), self.joints.len());
        let mut clamped = false;
        let max_delta = self.control.max_joint_speed * self.control.dt;
        let mut target: Vec<f64> = Vec::with_capacity(self.joints.len());
        for (i, &q) in action.joints.iter().enumerate() {
            let mut q = q;
            if libm::fabs(q) > self.control.joint_limit {
                q = q.clamp(-self.control.joint_limit, self.control.joint_limit);
                clamped = true;
            }
            let delta = (q - self.joints[i]).clamp(-max_delta, max_delta);
            target.push(self.joints[i] + delta);
        }

        // Scale the joint motion down until the eef displacement obeys the
        // cap. Proportional backoff converges in one or two rounds when the
        // map is locally linear; the extra halving guard makes the scale
        // strictly decrease even across a fold, so a legal scale is always
        // reached and the step never silently drops to zero motion.
        let before = self.eef_position();
        let mut scale = 1.0;
        for _ in 0..24 {
            let trial: Vec<f64> = self
                .joints
                .iter()
                .zip(&target)
                .map(|(&q, &t)| q + (t - q) * scale)
                .collect();
            let moved = (self.arm.eef_position(&trial) - before).norm();
            if moved <= self.control.max_eef_step * (1.0 + 1e-9) || moved == 0.0 {
                self.joints = trial;
                break;
            }
            scale *= (self.control.max_eef_step / moved).min(0.5);
        }

        let eef = self.eef_position();
        if let Some((idx, offset)) = self.attached {
            self.objects[idx].position = eef + offset;
        }

        let mut grasped = None;
        let mut released = None;
        match action.gripper {
            GripperCommand::Close if !self.gripper_closed => {
                self.gripper_closed = true;
                if self.attached.is_none() {
                    if let Some(idx) = self.nearest_graspable(eef) {
                        let offset = self.objects[idx].position - eef;
                        self.attached = Some((idx, offset));
                        grasped = Some(idx);
                    }
                }
            }
            GripperCommand::Open if self.gripper_closed => {
                self.gripper_closed = false;
                if let Some((idx, _)) = self.attached.take() {
                    self.settle(idx);
                    released = Some(idx);
                }
            }
            _ => {}
        }

        self.time += self.control.dt;
        self.steps += 1;
        StepResult { eef, grasped, released, clamped }
    }

    fn nearest_graspable(&self, eef: Vec3) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if !obj.graspable {
                continue;
            }
            let d = (obj.position - eef).norm();
            if d <= self.control.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Drop the object straight down onto the highest support whose
    /// footprint contains its center, or onto the floor (z = 0 is the desk
    /// surface provided by the table object itself).
    pub fn settle(&mut self, idx: usize) {
        let center = self.objects[idx].position;
        let mut rest_top: f64 = f64::NEG_INFINITY;
        for (j, support) in self.objects.iter().enumerate() {
            if j == idx {
                continue;
            }
            let top = support.top_z();
            // Supports act as solid columns: anything released over one
            // rests on its top, even if the carry had sunk the object
            // into the column's body.
            if support.footprint_contains(center, SETTLE_SLACK) && top > rest_top {
                rest_top = top;
            }
        }
        if rest_top.is_finite() {
            self.objects[idx].position.z = rest_top - self.objects[idx].shape.bottom_offset();
        }
    }

    /// Shift an object in the plane and let it re-settle. Used by
    /// perturbations; fails if the object is unknown.
    pub fn shift_object(&mut self, name: &str, dx: f64, dy: f64) -> Result<(), String> {
        let idx = self
            .object_index(name)
            .ok_or_else(|| format!("unknown object {name:?}"))?;
        self.objects[idx].position.x += dx;
        self.objects[idx].position.y += dy;
        self.settle(idx);
        Ok(())
    }

    /// Swap the shapes (not the poses) of two objects, then re-settle both.
    pub fn swap_shapes(&mut self, a: &str, b: &str) -> Result<(), String> {
        let ia = self.object_index(a).ok_or_else(|| format!("unknown object {a:?}"))?;
        let ib = self.object_index(b).ok_or_else(|| format!("unknown object {b:?}"))?;
        if ia == ib {
            return Err(format!("cannot swap {a:?} with itself"));
        }
        let sa = self.objects[ia].shape.clone();
        let sb = self.objects[ib].shape.clone();
        self.objects[ia].shape = sb;
        self.objects[ib].shape = sa;
        self.settle(ia);
        self.settle(ib);
        Ok(())
    }

    pub fn add_object(&mut self, object: Object) {
        self.objects.push(object);
        let idx = self.objects.len() - 1;
        self.settle(idx);
    }

    /// Conservative pairwise collision check on bounding cylinders. Resting
    /// contact (touching z intervals or footprints) is allowed; interiors
    /// must not intersect.
    pub fn find_overlap(&self) -> Option<(&str, &str)> {
        for i in 0..self.objects.len() {
            for j in (i + 1)..self.objects.len() {
                let a = &self.objects[i];
                let b = &self.objects[j];
                let dz_lo = a.bottom_z().max(b.bottom_z());
                let dz_hi = a.top_z().min(b.top_z());
                if dz_hi - dz_lo <= 1e-9 {
                    continue;
                }
                if planar_separation(a, b) < -1e-9 {
                    return Some((a.name.as_str(), b.name.as_str()));
                }
            }
        }
        None
    }

    /// Check every object's center against an axis-aligned workspace box.
    pub fn find_out_of_bounds(&self, lo: Vec3, hi: Vec3) -> Option<&str> {
        self.objects
            .iter()
            .find(|o| {
                o.position.x < lo.x
                    || o.position.y < lo.y
                    || o.position.z < lo.z
                    || o.position.x > hi.x
                    || o.position.y > hi.y
                    || o.position.z > hi.z
            })
            .map(|o| o.name.as_str())
    }

    /// Render depth and per-pixel object labels. Labels are 1-based object
    /// indices; background pixels get label 0 at the far-plane depth. The
    /// arm itself is not rendered: perception sees the scene, proprioception
    /// sees the arm.
    pub fn render(&self, camera: &CameraModel, far: f64) -> RenderedView {
        let w = camera.width;
        let h = camera.height;
        let mut depth = vec![far; w * h];
        let mut labels = vec![0u16; w * h];
        for v in 0..h {
            for u in 0..w {
                let (origin, dir) = camera.pixel_ray(u as f64, v as f64);
                let mut best = far;
                let mut label = 0u16;
                for (i, obj) in self.objects.iter().enumerate() {
                    if let Some(t) = ray_hit(origin, dir, obj) {
                        if t > 0.0 && t < best {
                            best = t;
                            label = (i + 1) as u16;
                        }
                    }
                }
                depth[v * w + u] = best;
                labels[v * w + u] = label;
            }
        }
        RenderedView { width: w, height: h, depth, labels }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Ray parameter per pixel, equal to camera-frame z (see `pixel_ray`).
    pub depth: Vec<f64>,
    pub labels: Vec<u16>,
}

impl RenderedView {
    /// Backproject labeled pixels into world points, one bucket per object
    /// label (index 0 of the result is label 1, and so on).
    pub fn point_clouds(&self, camera: &CameraModel, n_objects: usize) -> Vec<Vec<Vec3>> {
        let mut clouds = vec![Vec::new(); n_objects];
        for v in 0..self.height {
            for u in 0..self.width {
                let label = self.labels[v * self.width + u] as usize;
                if label == 0 || label > n_objects {
                    continue;
                }
                let d = self.depth[v * self.width + u];
                clouds[label - 1].push(camera.backproject(u as f64, v as f64, d));
            }
        }
        clouds
    }
}

/// Signed planar separation between two footprints, exact for the
/// axis-aligned shapes in play. Negative means interpenetration; zero is
/// touching, which is legal.
fn planar_separation(a: &Object, b: &Object) -> f64 {
    let dx = b.position.x - a.position.x;
    let dy = b.position.y - a.position.y;
    match (&a.shape, &b.shape) {
        (Shape::Box { half_extents: ha }, Shape::Box { half_extents: hb }) => {
            let gx = libm::fabs(dx) - (ha.x + hb.x);
            let gy = libm::fabs(dy) - (ha.y + hb.y);
            gx.max(gy)
        }
        (Shape::Cylinder { radius: ra, .. }, Shape::Cylinder { radius: rb, .. }) => {
            libm::sqrt(dx * dx + dy * dy) - (ra + rb)
        }
        (Shape::Box { half_extents }, Shape::Cylinder { radius, .. })
        | (Shape::Cylinder { radius, .. }, Shape::Box { half_extents }) => {
            let qx = (libm::fabs(dx) - half_extents.x).max(0.0);
            let qy = (libm::fabs(dy) - half_extents.y).max(0.0);
            libm::sqrt(qx * qx + qy * qy) - radius
        }
    }
}

/// Smallest positive ray parameter hitting the object, if any. Rays use the
/// unnormalized camera convention, so the returned parameter is camera z.
fn ray_hit(origin: Vec3, dir: Vec3, obj: &Object) -> Option<f64> {
    match &obj.shape {
        Shape::Box { half_extents } => {
            ray_box(origin - obj.position, dir, *half_extents)
        }
        Shape::Cylinder { radius, half_height } => {
            ray_cylinder(origin - obj.position, dir, *radius, *half_height)
        }
    }
}

/// Slab test against an origin-centered box.
fn ray_box(o: Vec3, d: Vec3, he: Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for (oc, dc, h) in [(o.x, d.x, he.x), (o.y, d.y, he.y), (o.z, d.z, he.z)] {
        if libm::fabs(dc) < 1e-15 {
            if libm::fabs(oc) > h {
                return None;
            }
            continue;
        }
        let t1 = (-h - oc) / dc;
        let t2 = (h - oc) / dc;
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    Some(if t_near > 0.0 { t_near } else { t_far })
}

/// Quadratic side-wall test plus the two cap disks, origin-centered.
fn ray_cylinder(o: Vec3, d: Vec3, radius: f64, half_height: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };

    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - radius * radius;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let root = libm::sqrt(disc);
            for t in [(-b - root) / a, (-b + root) / a] {
                let z = o.z + t * d.z;
                if libm::fabs(z) <= half_height {
                    consider(t);
                }
            }
        }
    }

    if libm::fabs(d.z) > 1e-15 {
        for cap in [half_height, -half_height] {
            let t = (cap - o.z) / d.z;
            let x = o.x + t * d.x;
            let y = o.y + t * d.y;
            if x * x + y * y <= radius * radius {
                consider(t);
            }
        }
    }
    best
}
