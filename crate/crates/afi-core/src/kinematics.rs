//! Serial-arm kinematics and the action-chunk vocabulary.
//!
//! Each joint rotates about a fixed local axis and then translates by a
//! fixed link offset, so the end-effector pose is
//! `base * prod_i (R(axis_i, q_i) * T(offset_i))`. Inverse kinematics is
//! position-only damped least squares with a numeric Jacobian; the default
//! arm has four revolute joints, enough redundancy for a desk workspace.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math::{Iso3, Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GripperCommand {
    Hold,
    Open,
    Close,
}

/// One control tick: absolute joint targets plus a gripper command.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActionStep {
    pub joints: Vec<f64>,
    pub gripper: GripperCommand,
}

/// A short horizon of action steps emitted in one policy call.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActionChunk {
    pub steps: Vec<ActionStep>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Joint {
    /// Unit rotation axis in the local frame.
    pub axis: Vec3,
    /// Link offset applied after the rotation.
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArmModel {
    pub base: Iso3,
    pub joints: Vec<Joint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IkError {
    /// Iteration budget exhausted; carries the final position residual.
    NoConverge { residual: f64 },
    WrongDofCount,
}

impl fmt::Display for IkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IkError::NoConverge { residual } => {
                write!(f, "inverse kinematics did not converge (residual {residual:.2e})")
            }
            IkError::WrongDofCount => write!(f, "joint vector length does not match the arm"),
        }
    }
}

impl core::error::Error for IkError {}

const IK_DAMPING: f64 = 0.05;
const IK_TOLERANCE: f64 = 1e-4;
const IK_MAX_ITERS: usize = 400;
const IK_STEP_CAP: f64 = 0.2;
const JACOBIAN_EPS: f64 = 1e-6;

impl ArmModel {
    /// Four-DOF desk arm: yaw about z, then three pitch joints, links of
    /// 0.25 m, base behind the workspace.
    pub fn default_desk() -> Self {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        ArmModel {
            base: Iso3::from_translation(Vec3::new(0.0, -0.45, 0.0)),
            joints: vec![
                Joint { axis: z, offset: Vec3::new(0.0, 0.0, 0.25) },
                Joint { axis: y, offset: Vec3::new(0.25, 0.0, 0.0) },
                Joint { axis: y, offset: Vec3::new(0.25, 0.0, 0.0) },
                Joint { axis: y, offset: Vec3::new(0.25, 0.0, 0.0) },
            ],
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn forward(&self, q: &[f64]) -> Iso3 {
        assert_eq!(q.len(), self.joints.len());
        let mut pose = self.base;
        for (joint, &angle) in self.joints.iter().zip(q) {
            let rot = Mat3::rotation(joint.axis, angle);
            pose = pose.compose(&Iso3::new(rot, rot.mul_vec(joint.offset)));
        }
        pose
    }

    pub fn eef_position(&self, q: &[f64]) -> Vec3 {
        self.forward(q).translation
    }

    /// Position Jacobian columns by central differences.
    pub fn jacobian(&self, q: &[f64]) -> Vec<Vec3> {
        let mut probe = q.to_vec();
        let mut cols = Vec::with_capacity(q.len());
        for i in 0..q.len() {
            probe[i] = q[i] + JACOBIAN_EPS;
            let plus = self.eef_position(&probe);
            probe[i] = q[i] - JACOBIAN_EPS;
            let minus = self.eef_position(&probe);
            probe[i] = q[i];
            cols.push((plus - minus) / (2.0 * JACOBIAN_EPS));
        }
        cols
    }

    /// Damped least-squares inverse kinematics for the end-effector
    /// position, seeded from `q0`. `dq = J^T (J J^T + lambda^2 I)^-1 e`,
    /// step norm capped so the iteration cannot jump across the workspace.
    ///
    /// Near-singular targets (on the yaw axis, at full extension) can
    /// stall the descent, so a failed attempt restarts from a few fixed
    /// perturbations of the seed before giving up. The ladder is
    /// deterministic: same inputs, same answer.
    pub fn inverse(&self, target: Vec3, q0: &[f64]) -> Result<Vec<f64>, IkError> {
        if q0.len() != self.joints.len() {
            return Err(IkError::WrongDofCount);
        }
        let mut best_residual = f64::INFINITY;
        let mut seed = q0.to_vec();
        for attempt in 0..4u64 {
            if attempt > 0 {
                for (i, s) in seed.iter_mut().enumerate() {
                    let bits = crate::math::mix_seed(attempt, i as u64);
                    let offset = (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
                    *s = q0[i] + offset;
                }
            }
            match self.solve_dls(target, &seed) {
                Ok(q) => return Ok(q),
                Err(IkError::NoConverge { residual }) => {
                    best_residual = best_residual.min(residual);
                }
                Err(other) => return Err(other),
            }
        }
        Err(IkError::NoConverge { residual: best_residual })
    }

    fn solve_dls(&self, target: Vec3, q0: &[f64]) -> Result<Vec<f64>, IkError> {
        let mut q = q0.to_vec();
        let mut residual = f64::INFINITY;
        for _ in 0..IK_MAX_ITERS {
            let e = target - self.eef_position(&q);
            residual = e.norm();
            if residual < IK_TOLERANCE {
                return Ok(q);
            }
            let cols = self.jacobian(&q);
            let mut a = [[0.0f64; 3]; 3];
            for c in &cols {
                let v = [c.x, c.y, c.z];
                for (r, row) in a.iter_mut().enumerate() {
                    for (s, cell) in row.iter_mut().enumerate() {
                        *cell += v[r] * v[s];
                    }
                }
            }
            for (r, row) in a.iter_mut().enumerate() {
                row[r] += IK_DAMPING * IK_DAMPING;
            }
            // The damped normal matrix is positive definite, so the solve
            // cannot fail for a finite Jacobian.
            let y = solve3(a, e).ok_or(IkError::NoConverge { residual })?;
            let mut dq: Vec<f64> = cols.iter().map(|c| c.dot(y)).collect();
            let norm = libm::sqrt(dq.iter().map(|d| d * d).sum());
            if norm > IK_STEP_CAP {
                for d in &mut dq {
                    *d *= IK_STEP_CAP / norm;
                }
            }
            for (qi, di) in q.iter_mut().zip(&dq) {
                *qi += di;
            }
        }
        Err(IkError::NoConverge { residual })
    }

    /// End-effector positions along a chunk, for cost scoring.
    pub fn chunk_path(&self, chunk: &ActionChunk) -> Vec<Vec3> {
        chunk.steps.iter().map(|s| self.eef_position(&s.joints)).collect()
    }
}

/// 3x3 linear solve, Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], b: Vec3) -> Option<Vec3> {
    let mut x = [b.x, b.y, b.z];
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        x.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..3).rev() {
        for row in 0..col {
            let f = a[row][col] / a[col][col];
            x[row] -= f * x[col];
        }
        x[col] /= a[col][col];
    }
    Some(Vec3::new(x[0], x[1], x[2]))
}
