//! Closed-loop episode execution.
//!
//! The loop runs at the control rate: pop one action from the pending
//! chunk, step the world, re-evaluate the stage tracker, feed the trap
//! detector, and rebuild the field on its cadence (plus immediately on
//! stage transitions, so the cost landscape switches targets the moment
//! the task does). Chunks are re-requested when exhausted or when a stage
//! advances. A firing trap hands control to the intervention routine; its
//! selected chunk replaces the pending one.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use afi_core::field::ScalarField;
use afi_core::intervention::{
    run_intervention, Clock, DriveError, Executor, FieldSource, HistoryBuffer, HistoryEntry,
    InterventionConfig, InterventionOutcome, Observation, Policy,
};
use afi_core::kinematics::{ActionStep, ArmModel, GripperCommand};
use afi_core::math::mix_seed;
use afi_core::trap::{TrapConfig, TrapDetector, TrapEvent};
use afi_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::builder::{FieldBuilder, FieldPublisher};
use crate::policy::MemorizingPolicy;
use crate::task::StageTracker;
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Afi,
    AfiNoRollback,
    /// Forced intervention at a fixed step index, detector bypassed.
    FixedStep(u64),
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Baseline => "baseline".into(),
            Mode::Afi => "afi".into(),
            Mode::AfiNoRollback => "afi_no_rollback".into(),
            Mode::FixedStep(t) => format!("fixed_step:{t}"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "afi" => Ok(Mode::Afi),
            "afi_no_rollback" | "no_rollback" => Ok(Mode::AfiNoRollback),
            other => {
                if let Some(t) = other.strip_prefix("fixed_step:") {
                    t.parse::<u64>()
                        .map(Mode::FixedStep)
                        .map_err(|_| format!("bad fixed_step index in {other:?}"))
                } else {
                    Err(format!(
                        "unknown mode {other:?} (expected baseline, afi, afi_no_rollback, fixed_step:N)"
                    ))
                }
            }
        }
    }
}

/// Straight-segment admission test parameters for commanded drives.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveParams {
    /// Minimum allowed distance from a path sample to obstacle surfaces.
    pub clearance: f64,
    pub sample_spacing: f64,
    /// Samples this close to the segment start are not checked; departing
    /// a tight spot must stay legal.
    pub start_exempt: f64,
    /// Samples this close to the stage target's surface are not checked;
    /// the final approach necessarily enters the contact zone.
    pub target_exempt: f64,
    pub arrival_tol: f64,
    pub max_steps: usize,
}

impl Default for DriveParams {
    fn default() -> Self {
        DriveParams {
            clearance: 0.012,
            sample_spacing: 0.005,
            start_exempt: 0.04,
            target_exempt: 0.04,
            arrival_tol: 0.005,
            max_steps: 600,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: f64,
    pub eef: Vec3,
    pub stage: usize,
    /// Cost of the published field at the end-effector.
    pub cost: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub t: f64,
    pub step: u64,
    pub forced: bool,
    pub trap_displacement: f64,
    pub trap_distance: f64,
    pub rollback_index: Option<usize>,
    pub rollback_cost: Option<f64>,
    pub waypoints: usize,
    pub visited: usize,
    pub skipped: usize,
    pub selected_waypoint: Option<usize>,
    pub selected_cost: Option<f64>,
    pub failure: Option<String>,
    pub rollback_us: u64,
    pub travel_us: u64,
    pub scoring_us: u64,
    pub total_us: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario: String,
    pub task: String,
    pub mode: String,
    pub condition: String,
    pub seed: u64,
    pub success: bool,
    pub steps: u64,
    pub sim_time: f64,
    pub final_stage: usize,
    pub stage_count: usize,
    /// Step index at which each completed stage's predicate first held.
    pub stage_transitions: Vec<u64>,
    pub trap_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trap_events: Vec<TrapEvent>,
    pub interventions: Vec<InterventionSummary>,
    pub rebuild_count: usize,
    /// Wall-clock rebuild durations; excluded from deterministic outputs.
    pub rebuild_us: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_log: Vec<StepRecord>,
    /// Set when the episode could not run at all (for example a
    /// perturbation that produced an illegal layout). Counted as a plain
    /// failure by the suite fold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { epoch: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }
}

/// Owns the world and every per-episode subsystem; implements the executor
/// surface interventions drive through. Every world step, however caused,
/// funnels through `apply` so history, logging, stage tracking, budget
/// accounting, and the rebuild cadence stay consistent.
pub struct EpisodeEngine {
    pub world: World,
    pub tracker: StageTracker,
    pub builder: FieldBuilder,
    pub publisher: Arc<FieldPublisher>,
    pub history: HistoryBuffer,
    pub drive: DriveParams,
    pub rebuild_every: u64,
    pub budget: u64,
    pub step_log: Vec<StepRecord>,
    pub log_steps: bool,
    pub rebuild_count: usize,
    stage_transitions: Vec<u64>,
}

impl EpisodeEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world: World,
        tracker: StageTracker,
        builder: FieldBuilder,
        publisher: Arc<FieldPublisher>,
        history_capacity: usize,
        drive: DriveParams,
        rebuild_every: u64,
        budget: u64,
        log_steps: bool,
    ) -> Self {
        EpisodeEngine {
            world,
            tracker,
            builder,
            publisher,
            history: HistoryBuffer::new(history_capacity),
            drive,
            rebuild_every,
            budget,
            step_log: Vec::new(),
            log_steps,
            rebuild_count: 0,
            stage_transitions: Vec::new(),
        }
    }

    pub fn budget_left(&self) -> bool {
        self.world.steps_taken() < self.budget
    }

    pub fn rebuild_now(&mut self) {
        let target = self.tracker.current_stage().target.clone();
        let stats = self.builder.rebuild(&self.world, &target, &self.publisher);
        if stats.rebuilt {
            self.rebuild_count += 1;
        }
    }

    /// Distance from the eef to the last perceived target centroid.
    pub fn distance_to_target(&self) -> Option<f64> {
        self.builder
            .last_centroid
            .map(|c| (c - self.world.eef_position()).norm())
    }

    /// Step the world once and run all bookkeeping. Returns whether the
    /// stage advanced.
    pub fn apply(&mut self, action: &ActionStep) -> bool {
        let result = self.world.step(action);
        let advanced = self.tracker.update(&self.world);
        if advanced {
            self.stage_transitions.push(self.world.steps_taken());
        }
        self.history.push(HistoryEntry {
            t: self.world.time,
            position: result.eef,
            joints: self.world.joints.clone(),
        });
        if advanced || self.world.steps_taken() % self.rebuild_every == 0 {
            self.rebuild_now();
        }
        if self.log_steps {
            let cost = self.publisher.latest().query(result.eef);
            self.step_log.push(StepRecord {
                step: self.world.steps_taken(),
                t: self.world.time,
                eef: result.eef,
                stage: self.tracker.stage_index(),
                cost,
            });
        }
        advanced
    }

    /// Command the gripper's current state, so drives never toggle it.
    fn holding_gripper(&self) -> GripperCommand {
        if self.world.gripper_closed {
            GripperCommand::Close
        } else {
            GripperCommand::Open
        }
    }

    /// Straight-segment admission check. Returns the first offending
    /// sample, if any. The active stage's target and any attached object
    /// are never obstacles; see `DriveParams` for the exemption zones.
    fn first_blocked_sample(&self, from: Vec3, to: Vec3) -> Option<Vec3> {
        let target_idx = self.world.object_index(&self.tracker.current_stage().target);
        let attached = self.world.attached_index();
        let span = to - from;
        let length = span.norm();
        let n = (length / self.drive.sample_spacing).ceil().max(1.0) as usize;
        for i in 0..=n {
            let sample = from + span * (i as f64 / n as f64);
            if (sample - from).norm() <= self.drive.start_exempt {
                continue;
            }
            let near_target = target_idx
                .map(|ti| self.world.objects()[ti].surface_distance(sample) <= self.drive.target_exempt)
                .unwrap_or(false);
            if near_target {
                continue;
            }
            for (idx, obj) in self.world.objects().iter().enumerate() {
                if Some(idx) == target_idx || Some(idx) == attached {
                    continue;
                }
                if obj.surface_distance(sample) < self.drive.clearance {
                    return Some(sample);
                }
            }
        }
        None
    }
}

impl Executor for EpisodeEngine {
    fn observation(&self) -> Observation {
        Observation {
            eef_position: self.world.eef_position(),
            joints: self.world.joints.clone(),
            stage_index: self.tracker.stage_index(),
            target_centroid: self.builder.last_centroid,
        }
    }

    fn drive_to(&mut self, target: Vec3) -> Result<Observation, DriveError> {
        let from = self.world.eef_position();
        if let Some(at) = self.first_blocked_sample(from, target) {
            return Err(DriveError::Blocked { at });
        }
        let grip = self.holding_gripper();
        for _ in 0..self.drive.max_steps {
            let pos = self.world.eef_position();
            let to_target = target - pos;
            let dist = to_target.norm();
            if dist <= self.drive.arrival_tol {
                return Ok(self.observation());
            }
            if !self.budget_left() {
                return Err(DriveError::Unreachable);
            }
            // Track the admitted straight segment in half-cap hops;
            // solving IK at the far goal each step flips between elbow
            // branches under the step caps and can stall shy of arrival.
            let reach = dist.min(0.5 * self.world.control.max_eef_step);
            let sub = pos + to_target * (reach / dist);
            let q = self
                .world
                .arm
                .inverse(sub, &self.world.joints)
                .map_err(|_| DriveError::Unreachable)?;
            self.apply(&ActionStep { joints: q, gripper: grip });
        }
        Err(DriveError::Unreachable)
    }

    fn retrace(&mut self, path: &[HistoryEntry]) -> Observation {
        let grip = self.holding_gripper();
        for entry in path {
            if !self.budget_left() {
                break;
            }
            self.apply(&ActionStep { joints: entry.joints.clone(), gripper: grip });
        }
        self.observation()
    }

    fn preview_at(&self, position: Vec3) -> Option<Observation> {
        let q = self.world.arm.inverse(position, &self.world.joints).ok()?;
        Some(Observation {
            eef_position: self.world.arm.eef_position(&q),
            joints: q,
            stage_index: self.tracker.stage_index(),
            target_centroid: self.builder.last_centroid,
        })
    }

    fn arm(&self) -> &ArmModel {
        &self.world.arm
    }
}

/// Everything `run_episode` needs besides mode and seed.
pub struct EpisodeSetup {
    pub scenario_name: String,
    pub task_name: String,
    pub condition: String,
    pub world: World,
    pub tracker: StageTracker,
    pub builder: FieldBuilder,
    pub policy: MemorizingPolicy,
    pub trap_config: TrapConfig,
    pub intervention: InterventionConfig,
    pub history_capacity: usize,
    pub drive: DriveParams,
    pub rebuild_every: u64,
    pub budget: u64,
    pub log_steps: bool,
}

pub fn run_episode(setup: EpisodeSetup, mode: Mode, seed: u64) -> EpisodeRecord {
    run_episode_watching(setup, mode, seed, None).0
}

/// Like `run_episode`, but also hands back the field publisher and stops
/// early once sim time reaches `stop_at`. Lets tooling dump the exact
/// field the policy saw at a chosen moment.
pub fn run_episode_watching(
    setup: EpisodeSetup,
    mode: Mode,
    seed: u64,
    stop_at: Option<f64>,
) -> (EpisodeRecord, Arc<FieldPublisher>) {
    let grid = *setup.builder.grid();
    let publisher = Arc::new(FieldPublisher::new(ScalarField::constant(grid, 1.0)));
    let stage_count = setup.tracker.task().stages.len();
    let mut engine = EpisodeEngine::new(
        setup.world,
        setup.tracker,
        setup.builder,
        publisher.clone(),
        setup.history_capacity,
        setup.drive,
        setup.rebuild_every,
        setup.budget,
        setup.log_steps,
    );
    engine.rebuild_now();

    let policy = setup.policy;
    let mut detector = TrapDetector::new(setup.trap_config);
    let clock = WallClock::new();

    let mut pending: VecDeque<ActionStep> = VecDeque::new();
    let mut query_count: u64 = 0;
    let mut fixed_fired = false;
    let mut trap_count = 0usize;
    let mut trap_events: Vec<TrapEvent> = Vec::new();
    let mut summaries: Vec<InterventionSummary> = Vec::new();

    while !engine.tracker.complete() && engine.budget_left() {
        if stop_at.is_some_and(|t| engine.world.time >= t) {
            break;
        }
        if pending.is_empty() {
            let obs = engine.observation();
            let chunks = policy.propose(&obs, 1, mix_seed(seed, query_count));
            query_count += 1;
            pending.extend(chunks.into_iter().next().map(|c| c.steps).unwrap_or_default());
            if pending.is_empty() {
                break;
            }
        }

        let action = pending.pop_front().unwrap();
        let advanced = engine.apply(&action);
        if advanced {
            // Re-query against the new stage; the detector keeps its
            // samples (stillness is stillness) and its per-episode cap.
            pending.clear();
            continue;
        }

        let now = engine.world.time;
        let eef = engine.world.eef_position();
        let trap: Option<TrapEvent> = match mode {
            Mode::FixedStep(t) => {
                if !fixed_fired && engine.world.steps_taken() >= t {
                    fixed_fired = true;
                    let dist = engine.distance_to_target().unwrap_or(f64::INFINITY);
                    Some(TrapEvent::forced(now, eef, dist))
                } else {
                    None
                }
            }
            Mode::Baseline | Mode::Afi | Mode::AfiNoRollback => {
                detector.observe(now, eef);
                engine
                    .distance_to_target()
                    .and_then(|dist| detector.check(now, dist))
            }
        };

        let Some(event) = trap else { continue };
        if matches!(mode, Mode::Baseline | Mode::Afi | Mode::AfiNoRollback) {
            detector.mark_triggered(event.t);
        }
        trap_count += 1;
        trap_events.push(event);
        if mode == Mode::Baseline {
            // The baseline logs the trap and keeps replaying; only the
            // recovery modes act on it.
            continue;
        }
        pending.clear();

        let snapshot = match mode {
            Mode::AfiNoRollback => {
                // Ablation: recovery may not move before searching, so the
                // buffer shrinks to the present state.
                let mut h = HistoryBuffer::new(1);
                if let Some(last) = engine.history.get(engine.history.len().wrapping_sub(1)) {
                    h.push(last.clone());
                }
                h
            }
            _ => engine.history.clone(),
        };

        let outcome = run_intervention(
            &event,
            &snapshot,
            &policy,
            &*publisher,
            &mut engine,
            &setup.intervention,
            &clock,
            mix_seed(seed, 0x5000 + trap_count as u64),
        );
        summaries.push(summarize(&outcome, engine.world.steps_taken()));
        if let Some(selected) = outcome.selected {
            pending.extend(selected.chunk.steps);
        }
    }

    let success = engine.tracker.complete();
    let record = EpisodeRecord {
        scenario: setup.scenario_name,
        task: setup.task_name,
        mode: mode.label(),
        condition: setup.condition,
        seed,
        success,
        steps: engine.world.steps_taken(),
        sim_time: engine.world.time,
        final_stage: engine.tracker.stage_index(),
        stage_count,
        stage_transitions: engine.stage_transitions.clone(),
        trap_count,
        trap_events,
        interventions: summaries,
        rebuild_count: engine.rebuild_count,
        rebuild_us: engine.builder.rebuild_log_us.clone(),
        step_log: engine.step_log,
        error: None,
    };
    (record, publisher)
}

fn summarize(outcome: &InterventionOutcome, step: u64) -> InterventionSummary {
    InterventionSummary {
        t: outcome.event.t,
        step,
        forced: outcome.event.forced,
        trap_displacement: outcome.event.displacement,
        trap_distance: outcome.event.distance_to_target,
        rollback_index: outcome.rollback.map(|r| r.index),
        rollback_cost: outcome.rollback.map(|r| r.cost),
        waypoints: outcome.waypoints.len(),
        visited: outcome.visited.len(),
        skipped: outcome.skipped.len(),
        selected_waypoint: outcome.selected.as_ref().map(|s| s.waypoint),
        selected_cost: outcome.selected.as_ref().map(|s| s.cost),
        failure: outcome.failure.map(|f| format!("{f:?}")),
        rollback_us: outcome.timings.rollback_us,
        travel_us: outcome.timings.travel_us,
        scoring_us: outcome.timings.scoring_us,
        total_us: outcome.timings.total_us,
    }
}
