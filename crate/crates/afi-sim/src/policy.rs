//! The memorizing policy: a stand-in for a fine-tuned visuomotor model
//! that has overfit its training scene.
//!
//! An expert demonstration is recorded once per scenario in the canonical
//! (unperturbed) layout. At run time the policy replays the demonstration
//! by progress matching: find the nominal end-effector point nearest the
//! current one within the active stage and emit the next `horizon` steps.
//! That reproduces the characteristic failure of memorized policies under
//! layout shift: the replay walks confidently to where the object used to
//! be and dwells there.
//!
//! Residual visual competence is modeled as a capture servo: when the
//! perceived target centroid is within `capture_radius` of the gripper,
//! proposals blend toward it instead of the stale nominal. Conditioning
//! degradation (the stand-in for color and background shifts) gates that
//! servo per proposal call: with probability `conditioning_degradation`
//! the call ignores the perceived target entirely. One draw per call, not
//! per candidate, because grounding is a property of the conditioning
//! state the candidates share.
//!
//! Stochasticity is one zero-mean joint offset per candidate, scaled by
//! `temperature` and added to every step of that candidate. A constant
//! offset (rather than per-step noise) matches how sampled trajectories
//! from one conditioning vector differ: coherent variations, not jitter.

use std::sync::Arc;

use afi_core::intervention::{Observation, Policy};
use afi_core::kinematics::{ActionChunk, ActionStep, ArmModel, GripperCommand};
use afi_core::math::mix_seed;
use afi_core::Vec3;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::task::{Predicate, StageTracker};
use crate::world::World;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Steps per proposed chunk.
    pub horizon: usize,
    /// Scale of the per-candidate joint offset, rad.
    pub temperature: f64,
    /// Servo activates when the perceived target is this close to the eef.
    pub capture_radius: f64,
    /// Probability that a proposal call loses visual grounding.
    pub conditioning_degradation: f64,
    /// Eef travel per servo step, m.
    pub servo_step: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            horizon: 50,
            temperature: 0.05,
            capture_radius: 0.06,
            conditioning_degradation: 0.0,
            servo_step: 0.01,
        }
    }
}

/// One stage of the recorded demonstration.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub name: String,
    pub steps: Vec<ActionStep>,
    /// Eef position after each step, same length as `steps`.
    pub eef: Vec<Vec3>,
    /// Grasp stages admit the capture servo; placement stages replay only.
    pub capture_eligible: bool,
}

#[derive(Clone, Debug)]
pub struct NominalTrajectory {
    pub stages: Vec<StageTrace>,
}

/// Scripted operations the expert recorder executes per stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertOp {
    /// Drive the eef to a point in a straight joint-space track.
    Move(Vec3),
    Gripper(String),
    /// Hold position for n steps.
    Dwell(usize),
}

const EXPERT_ARRIVAL_TOL: f64 = 0.004;
const EXPERT_MOVE_CAP: usize = 800;

/// Execute the per-stage scripts in the given world and record the joint
/// trajectory, split at stage-predicate advances. The world must be the
/// canonical layout; the task must complete, otherwise the script (or the
/// scene) is wrong and the scenario is rejected.
pub fn record_expert(
    world: &mut World,
    tracker: &mut StageTracker,
    scripts: &[Vec<ExpertOp>],
) -> Result<NominalTrajectory, String> {
    let n_stages = tracker.task().stages.len();
    if scripts.len() != n_stages {
        return Err(format!(
            "expert script has {} stages, task has {n_stages}",
            scripts.len()
        ));
    }
    let mut stages: Vec<StageTrace> = tracker
        .task()
        .stages
        .iter()
        .map(|s| StageTrace {
            name: s.name.clone(),
            steps: Vec::new(),
            eef: Vec::new(),
            capture_eligible: matches!(s.success, Predicate::Grasped { .. }),
        })
        .collect();

    let mut record = |world: &mut World, tracker: &mut StageTracker, action: ActionStep| {
        // The step belongs to the stage that was active when it was
        // commanded, so a grasp stage ends exactly at its close.
        let stage_at = tracker.stage_index().min(n_stages - 1);
        let result = world.step(&action);
        tracker.update(world);
        stages[stage_at].steps.push(action);
        stages[stage_at].eef.push(result.eef);
    };

    for script in scripts {
        for op in script {
            match op {
                ExpertOp::Move(target) => {
                    let mut arrived = false;
                    for _ in 0..EXPERT_MOVE_CAP {
                        let pos = world.eef_position();
                        let to_target = *target - pos;
                        let dist = to_target.norm();
                        if dist < EXPERT_ARRIVAL_TOL {
                            arrived = true;
                            break;
                        }
                        // Track the straight line in half-cap hops.
                        // Solving IK at the far goal directly flips
                        // between elbow branches under the step caps;
                        // and a demonstration recorded at the full cap
                        // leaves replay no slack to close a lag, so any
                        // start offset persists across a whole chunk.
                        let reach = dist.min(0.5 * world.control.max_eef_step);
                        let sub = pos + to_target * (reach / dist);
                        let q = world
                            .arm
                            .inverse(sub, &world.joints)
                            .map_err(|e| format!("expert ik failed toward {target:?}: {e}"))?;
                        let grip = if world.gripper_closed {
                            GripperCommand::Close
                        } else {
                            GripperCommand::Open
                        };
                        record(world, tracker, ActionStep { joints: q, gripper: grip });
                    }
                    if !arrived {
                        return Err(format!("expert move to {target:?} did not converge"));
                    }
                }
                ExpertOp::Gripper(cmd) => {
                    let grip = match cmd.as_str() {
                        "open" => GripperCommand::Open,
                        "close" => GripperCommand::Close,
                        other => return Err(format!("unknown gripper op {other:?}")),
                    };
                    record(world, tracker, ActionStep { joints: world.joints.clone(), gripper: grip });
                }
                ExpertOp::Dwell(n) => {
                    for _ in 0..*n {
                        let grip = if world.gripper_closed {
                            GripperCommand::Close
                        } else {
                            GripperCommand::Open
                        };
                        record(world, tracker, ActionStep { joints: world.joints.clone(), gripper: grip });
                    }
                }
            }
        }
    }

    if !tracker.complete() {
        return Err(format!(
            "expert script finished at stage {} of {n_stages}",
            tracker.stage_index()
        ));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.steps.is_empty() {
            return Err(format!("stage {i} recorded no steps"));
        }
    }
    Ok(NominalTrajectory { stages })
}

pub struct MemorizingPolicy {
    nominal: Arc<NominalTrajectory>,
    arm: ArmModel,
    cfg: PolicyConfig,
}

/// Uniform in [0, 1) from the top 53 bits.
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller; u1 is kept strictly positive.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

impl MemorizingPolicy {
    pub fn new(nominal: Arc<NominalTrajectory>, arm: ArmModel, cfg: PolicyConfig) -> Self {
        assert!(cfg.horizon > 0);
        MemorizingPolicy { nominal, arm, cfg }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    fn stage(&self, index: usize) -> &StageTrace {
        let idx = index.min(self.nominal.stages.len() - 1);
        &self.nominal.stages[idx]
    }

    /// Progress matching: nearest nominal eef point in the active stage
    /// (earliest on ties), then the next `horizon` steps, padded with the
    /// last step when the demonstration runs out.
    fn replay_steps(&self, obs: &Observation) -> Vec<ActionStep> {
        let stage = self.stage(obs.stage_index);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &p) in stage.eef.iter().enumerate() {
            let d = (p - obs.eef_position).norm();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        for i in 0..self.cfg.horizon {
            let idx = (best + 1 + i).min(stage.steps.len() - 1);
            steps.push(stage.steps[idx].clone());
        }
        steps
    }

    /// Capture servo: straight eef track from the current pose to the
    /// perceived target, opening first and closing once parked within
    /// grasp range for two consecutive steps.
    fn servo_steps(&self, obs: &Observation, aim: Vec3) -> Vec<ActionStep> {
        let mut q = obs.joints.clone();
        let mut pos = obs.eef_position;
        let mut near_streak = 0u32;
        let mut closed = false;
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        for _ in 0..self.cfg.horizon {
            let to_aim = aim - pos;
            let dist = to_aim.norm();
            if !closed && dist > 1e-6 {
                let reach = dist.min(self.cfg.servo_step);
                let target = pos + to_aim * (reach / dist);
                if let Ok(next) = self.arm.inverse(target, &q) {
                    q = next;
                    pos = self.arm.eef_position(&q);
                }
            }
            if !closed {
                if (pos - aim).norm() < 0.01 {
                    near_streak += 1;
                } else {
                    near_streak = 0;
                }
                if near_streak >= 2 {
                    closed = true;
                }
            }
            let grip = if closed { GripperCommand::Close } else { GripperCommand::Open };
            steps.push(ActionStep { joints: q.clone(), gripper: grip });
        }
        steps
    }
}

impl Policy for MemorizingPolicy {
    fn propose(&self, obs: &Observation, k: usize, seed: u64) -> Vec<ActionChunk> {
        // One grounding draw per call: all candidates share the
        // conditioning state.
        let mut ground_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let grounded = uniform(&mut ground_rng) >= self.cfg.conditioning_degradation;

        let capture_aim = if grounded && self.stage(obs.stage_index).capture_eligible {
            obs.target_centroid
                .filter(|c| (*c - obs.eef_position).norm() <= self.cfg.capture_radius)
        } else {
            None
        };

        let base = match capture_aim {
            Some(aim) => self.servo_steps(obs, aim),
            None => self.replay_steps(obs),
        };

        let mut chunks = Vec::with_capacity(k);
        for cand in 0..k {
            let mut steps = base.clone();
            if self.cfg.temperature > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1 + cand as u64));
                let offset: Vec<f64> = (0..self.arm.dof())
                    .map(|_| normal(&mut rng) * self.cfg.temperature)
                    .collect();
                for step in &mut steps {
                    for (qj, oj) in step.joints.iter_mut().zip(&offset) {
                        *qj += oj;
                    }
                }
            }
            chunks.push(ActionChunk { steps });
        }
        chunks
    }
}

/// Concatenates candidate pools from several policies; downstream selection
/// sees one pool indexed in registration order.
pub struct EnsemblePolicy {
    members: Vec<Box<dyn Policy>>,
}

impl EnsemblePolicy {
    pub fn new(members: Vec<Box<dyn Policy>>) -> Self {
        assert!(!members.is_empty());
        EnsemblePolicy { members }
    }
}

impl Policy for EnsemblePolicy {
    fn propose(&self, obs: &Observation, k: usize, seed: u64) -> Vec<ActionChunk> {
        let mut pool = Vec::new();
        for (i, member) in self.members.iter().enumerate() {
            pool.extend(member.propose(obs, k, mix_seed(seed, 0x1000 + i as u64)));
        }
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_nominal(arm: &ArmModel) -> Arc<NominalTrajectory> {
        // A short straight descent recorded by hand: enough structure for
        // progress matching without running a full scenario.
        let mut steps = Vec::new();
        let mut eef = Vec::new();
        let mut q = vec![0.0, -0.6, 1.1, -0.5];
        for i in 0..30 {
            let target = Vec3::new(0.0, 0.10, 0.20 - 0.005 * i as f64);
            q = arm.inverse(target, &q).unwrap();
            steps.push(ActionStep { joints: q.clone(), gripper: GripperCommand::Open });
            eef.push(arm.eef_position(&q));
        }
        Arc::new(NominalTrajectory {
            stages: vec![StageTrace {
                name: "pick".into(),
                steps,
                eef,
                capture_eligible: true,
            }],
        })
    }

    fn obs_at(arm: &ArmModel, q: &[f64], centroid: Option<Vec3>) -> Observation {
        Observation {
            eef_position: arm.eef_position(q),
            joints: q.to_vec(),
            stage_index: 0,
            target_centroid: centroid,
        }
    }

    #[test]
    fn propose_is_pure() {
        let arm = ArmModel::default_desk();
        let policy = MemorizingPolicy::new(
            toy_nominal(&arm),
            arm.clone(),
            PolicyConfig { temperature: 0.02, ..PolicyConfig::default() },
        );
        let obs = obs_at(&arm, &[0.1, -0.5, 1.0, -0.4], None);
        let a = policy.propose(&obs, 8, 42);
        let b = policy.propose(&obs, 8, 42);
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            for (sx, sy) in x.steps.iter().zip(&y.steps) {
                assert_eq!(sx.joints, sy.joints);
                assert_eq!(sx.gripper, sy.gripper);
            }
        }
    }

    #[test]
    fn zero_temperature_collapses_candidates() {
        let arm = ArmModel::default_desk();
        let policy = MemorizingPolicy::new(
            toy_nominal(&arm),
            arm.clone(),
            PolicyConfig { temperature: 0.0, ..PolicyConfig::default() },
        );
        let obs = obs_at(&arm, &[0.0, -0.6, 1.1, -0.5], None);
        let chunks = policy.propose(&obs, 5, 7);
        for c in &chunks[1..] {
            assert_eq!(c.steps[0].joints, chunks[0].steps[0].joints);
            assert_eq!(c.steps.last().unwrap().joints, chunks[0].steps.last().unwrap().joints);
        }
    }

    #[test]
    fn positive_temperature_separates_candidates() {
        let arm = ArmModel::default_desk();
        let policy = MemorizingPolicy::new(
            toy_nominal(&arm),
            arm.clone(),
            PolicyConfig { temperature: 0.01, ..PolicyConfig::default() },
        );
        let obs = obs_at(&arm, &[0.0, -0.6, 1.1, -0.5], None);
        let chunks = policy.propose(&obs, 6, 3);
        for i in 0..chunks.len() {
            for j in (i + 1)..chunks.len() {
                assert_ne!(
                    chunks[i].steps[0].joints, chunks[j].steps[0].joints,
                    "candidates {i} and {j} identical"
                );
            }
        }
    }

    #[test]
    fn replay_continues_from_nearest_progress() {
        let arm = ArmModel::default_desk();
        let nominal = toy_nominal(&arm);
        let policy =
            MemorizingPolicy::new(nominal.clone(), arm.clone(), PolicyConfig {
                temperature: 0.0,
                ..PolicyConfig::default()
            });
        // Stand exactly at nominal step 10: the first proposed step must be
        // nominal step 11.
        let q10 = nominal.stages[0].steps[10].joints.clone();
        let obs = obs_at(&arm, &q10, None);
        let chunks = policy.propose(&obs, 1, 0);
        assert_eq!(chunks[0].steps[0].joints, nominal.stages[0].steps[11].joints);
    }

    #[test]
    fn replay_pads_at_trajectory_end() {
        let arm = ArmModel::default_desk();
        let nominal = toy_nominal(&arm);
        let policy =
            MemorizingPolicy::new(nominal.clone(), arm.clone(), PolicyConfig {
                temperature: 0.0,
                ..PolicyConfig::default()
            });
        let q_last = nominal.stages[0].steps.last().unwrap().joints.clone();
        let obs = obs_at(&arm, &q_last, None);
        let chunks = policy.propose(&obs, 1, 0);
        let last = nominal.stages[0].steps.last().unwrap();
        for step in &chunks[0].steps {
            assert_eq!(step.joints, last.joints);
        }
    }

    #[test]
    fn capture_servo_converges_on_perceived_target() {
        let arm = ArmModel::default_desk();
        let policy = MemorizingPolicy::new(
            toy_nominal(&arm),
            arm.clone(),
            PolicyConfig { temperature: 0.0, conditioning_degradation: 0.0, ..PolicyConfig::default() },
        );
        let q = arm.inverse(Vec3::new(0.08, 0.08, 0.06), &[0.0, -0.6, 1.1, -0.5]).unwrap();
        let aim = Vec3::new(0.10, 0.10, 0.02); // within capture_radius
        let obs = obs_at(&arm, &q, Some(aim));
        let chunks = policy.propose(&obs, 1, 9);
        let terminal = arm.eef_position(&chunks[0].steps.last().unwrap().joints);
        assert!((terminal - aim).norm() < 0.005, "servo missed: {:?}", terminal);
        // The servo must close after arriving and keep holding.
        let grips: Vec<_> = chunks[0].steps.iter().map(|s| s.gripper).collect();
        assert_eq!(grips[0], GripperCommand::Open);
        assert_eq!(*grips.last().unwrap(), GripperCommand::Close);
    }

    #[test]
    fn degradation_gates_capture_deterministically() {
        let arm = ArmModel::default_desk();
        let policy = MemorizingPolicy::new(
            toy_nominal(&arm),
            arm.clone(),
            PolicyConfig { temperature: 0.0, conditioning_degradation: 0.5, ..PolicyConfig::default() },
        );
        let q = arm.inverse(Vec3::new(0.08, 0.08, 0.06), &[0.0, -0.6, 1.1, -0.5]).unwrap();
        let aim = Vec3::new(0.10, 0.10, 0.02);
        let obs = obs_at(&arm, &q, Some(aim));
        // Across many seeds roughly half the calls must servo (terminal near
        // aim) and half must replay (terminal far from aim).
        let mut captured = 0;
        for seed in 0..200 {
            let chunks = policy.propose(&obs, 1, seed);
            let terminal = arm.eef_position(&chunks[0].steps.last().unwrap().joints);
            if (terminal - aim).norm() < 0.01 {
                captured += 1;
            }
        }
        assert!((60..=140).contains(&captured), "captured {captured}/200");
        // And the same seed always decides the same way.
        let a = policy.propose(&obs, 1, 11);
        let b = policy.propose(&obs, 1, 11);
        assert_eq!(a[0].steps.last().unwrap().joints, b[0].steps.last().unwrap().joints);
    }

    #[test]
    fn ensemble_concatenates_pools_in_order() {
        let arm = ArmModel::default_desk();
        let p1 = MemorizingPolicy::new(toy_nominal(&arm), arm.clone(), PolicyConfig {
            temperature: 0.0,
            ..PolicyConfig::default()
        });
        let p2 = MemorizingPolicy::new(toy_nominal(&arm), arm.clone(), PolicyConfig {
            temperature: 0.01,
            ..PolicyConfig::default()
        });
        let solo1 = p1.propose(&obs_at(&arm, &[0.0, -0.6, 1.1, -0.5], None), 3, mix_seed(5, 0x1000));
        let ensemble = EnsemblePolicy::new(vec![Box::new(p1), Box::new(p2)]);
        let pool = ensemble.propose(&obs_at(&arm, &[0.0, -0.6, 1.1, -0.5], None), 3, 5);
        assert_eq!(pool.len(), 6);
        assert_eq!(pool[0].steps[0].joints, solo1[0].steps[0].joints);
    }
}
