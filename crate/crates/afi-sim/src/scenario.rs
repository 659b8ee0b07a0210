//! Scenario files: one TOML document describes the desk layout, the arm,
//! the camera, the task script, and every pipeline tunable. Loading
//! validates eagerly so a bad file fails before any episode runs.

use std::path::Path;
use std::sync::Arc;

use afi_core::camera::CameraModel;
use afi_core::field::{FieldParams, FieldWeights};
use afi_core::intervention::{InterventionConfig, ScoringMode};
use afi_core::kinematics::{ArmModel, Joint};
use afi_core::math::Iso3;
use afi_core::trap::TrapConfig;
use afi_core::{Vec3, WorkspaceGrid};
use serde::{Deserialize, Serialize};

use crate::builder::FieldBuilder;
use crate::episode::{DriveParams, EpisodeSetup};
use crate::policy::{record_expert, ExpertOp, MemorizingPolicy, NominalTrajectory, PolicyConfig};
use crate::task::{Anchor, Predicate, Region, StageSpec, StageTracker, TaskSpec};
use crate::world::{ControlParams, Object, Shape, World};

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub resolution: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub w_target: f64,
    pub w_obstacle: f64,
    pub sigma_voxels: f64,
    pub eef_exempt_radius: f64,
    pub target_buffer_radius: f64,
    pub influence_voxels: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        let w = FieldWeights::default();
        let p = FieldParams::default();
        FieldConfig {
            w_target: w.target,
            w_obstacle: w.obstacle,
            sigma_voxels: p.sigma_voxels,
            eef_exempt_radius: p.eef_exempt_radius,
            target_buffer_radius: p.target_buffer_radius,
            influence_voxels: p.influence_voxels,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub eps_stuck: f64,
    pub eps_far: f64,
    pub window: f64,
    pub cooldown: f64,
    pub max_interventions: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let t = TrapConfig::default();
        DetectorConfig {
            eps_stuck: t.eps_stuck,
            eps_far: t.eps_far,
            window: t.window,
            cooldown: t.cooldown,
            max_interventions: t.max_interventions,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionFileConfig {
    pub waypoint_count: usize,
    pub waypoint_radius: f64,
    pub candidates_per_waypoint: usize,
    /// "visit_all" or "preview_at_rollback".
    pub scoring: String,
}

impl Default for InterventionFileConfig {
    fn default() -> Self {
        let c = InterventionConfig::default();
        InterventionFileConfig {
            waypoint_count: c.waypoint_count,
            waypoint_radius: c.waypoint_radius,
            candidates_per_waypoint: c.candidates_per_waypoint,
            scoring: "visit_all".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlFileConfig {
    pub dt: f64,
    pub max_joint_speed: f64,
    pub max_eef_step: f64,
    pub grasp_radius: f64,
    pub joint_limit: f64,
    pub step_budget: u64,
    pub rebuild_every_steps: u64,
}

impl Default for ControlFileConfig {
    fn default() -> Self {
        let c = ControlParams::default();
        ControlFileConfig {
            dt: c.dt,
            max_joint_speed: c.max_joint_speed,
            max_eef_step: c.max_eef_step,
            grasp_radius: c.grasp_radius,
            joint_limit: c.joint_limit,
            step_budget: 1500,
            rebuild_every_steps: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointConfig {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    pub base: [f64; 3],
    pub home: Vec<f64>,
    pub joints: Vec<JointConfig>,
}

impl Default for ArmConfig {
    fn default() -> Self {
        let desk = ArmModel::default_desk();
        ArmConfig {
            base: {
                let t = desk.base.apply(Vec3::new(0.0, 0.0, 0.0));
                [t.x, t.y, t.z]
            },
            home: vec![0.0, -0.6, 1.1, -0.5],
            joints: desk
                .joints
                .iter()
                .map(|j| JointConfig {
                    axis: [j.axis.x, j.axis.y, j.axis.z],
                    offset: [j.offset.x, j.offset.y, j.offset.z],
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_far() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub half_extents: Option<[f64; 3]>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub half_height: Option<f64>,
    pub position: [f64; 3],
    #[serde(default)]
    pub graspable: bool,
}

impl ObjectConfig {
    fn build(&self) -> Result<Object, String> {
        let shape = match self.kind.as_str() {
            "box" => Shape::Box {
                half_extents: vec3(self.half_extents.ok_or_else(|| {
                    format!("object {:?}: box needs half_extents", self.name)
                })?),
            },
            "cylinder" => Shape::Cylinder {
                radius: self
                    .radius
                    .ok_or_else(|| format!("object {:?}: cylinder needs radius", self.name))?,
                half_height: self.half_height.ok_or_else(|| {
                    format!("object {:?}: cylinder needs half_height", self.name)
                })?,
            },
            other => return Err(format!("object {:?}: unknown kind {other:?}", self.name)),
        };
        Ok(Object {
            name: self.name.clone(),
            shape,
            position: vec3(self.position),
            graspable: self.graspable,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionConfig {
    pub name: String,
    #[serde(default)]
    pub anchor_object: Option<String>,
    #[serde(default)]
    pub anchor_fixed: Option<[f64; 3]>,
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WithinConfig {
    pub object: String,
    pub region: String,
}

/// Exactly one of the fields must be set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuccessConfig {
    #[serde(default)]
    pub grasped: Option<String>,
    #[serde(default)]
    pub within: Option<WithinConfig>,
}

/// One expert script operation; exactly one field per entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScriptOp {
    #[serde(default, rename = "move")]
    pub move_to: Option<[f64; 3]>,
    #[serde(default)]
    pub gripper: Option<String>,
    #[serde(default)]
    pub dwell: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageFileConfig {
    pub name: String,
    pub target: String,
    pub success: SuccessConfig,
    pub expert: Vec<ScriptOp>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFileConfig {
    pub name: String,
    pub stages: Vec<StageFileConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PerturbationSpec {
    #[default]
    None,
    /// Planar shift of one object (default: the first stage's target),
    /// which then re-settles onto whatever is below.
    PositionShift {
        #[serde(default)]
        object: Option<String>,
        dx: f64,
        dy: f64,
    },
    /// Exchange the shapes of two named objects.
    ObjectSwap { a: String, b: String },
    /// Insert an extra object into the scene.
    DistractorAdd { object: ObjectConfig },
}

impl PerturbationSpec {
    pub fn label(&self) -> String {
        match self {
            PerturbationSpec::None => "none".into(),
            PerturbationSpec::PositionShift { dx, dy, .. } => {
                format!("shift({dx:+.2},{dy:+.2})")
            }
            PerturbationSpec::ObjectSwap { a, b } => format!("swap({a},{b})"),
            PerturbationSpec::DistractorAdd { object } => format!("distractor({})", object.name),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub workspace: WorkspaceConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub intervention: InterventionFileConfig,
    #[serde(default = "default_history_capacity")]
    pub history_capacity: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub control: ControlFileConfig,
    #[serde(default)]
    pub drive: DriveParams,
    #[serde(default)]
    pub arm: ArmConfig,
    pub camera: CameraConfig,
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub regions: Vec<RegionConfig>,
    pub task: TaskFileConfig,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

fn default_history_capacity() -> usize {
    200
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let config: ScenarioConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workspace.resolution < 2 {
            return Err("workspace resolution must be at least 2".into());
        }
        if self.task.stages.is_empty() {
            return Err("task needs at least one stage".into());
        }
        let object_names: Vec<&str> = self.objects.iter().map(|o| o.name.as_str()).collect();
        for stage in &self.task.stages {
            if !object_names.contains(&stage.target.as_str()) {
                return Err(format!(
                    "stage {:?} targets unknown object {:?}",
                    stage.name, stage.target
                ));
            }
            let set = usize::from(stage.success.grasped.is_some())
                + usize::from(stage.success.within.is_some());
            if set != 1 {
                return Err(format!(
                    "stage {:?}: success must set exactly one of grasped/within",
                    stage.name
                ));
            }
            if let Some(w) = &stage.success.within {
                if !self.regions.iter().any(|r| r.name == w.region) {
                    return Err(format!(
                        "stage {:?} references unknown region {:?}",
                        stage.name, w.region
                    ));
                }
            }
            for (i, op) in stage.expert.iter().enumerate() {
                let set = usize::from(op.move_to.is_some())
                    + usize::from(op.gripper.is_some())
                    + usize::from(op.dwell.is_some());
                if set != 1 {
                    return Err(format!(
                        "stage {:?} expert op {i}: exactly one of move/gripper/dwell",
                        stage.name
                    ));
                }
            }
        }
        for region in &self.regions {
            let set = usize::from(region.anchor_object.is_some())
                + usize::from(region.anchor_fixed.is_some());
            if set != 1 {
                return Err(format!(
                    "region {:?}: exactly one of anchor_object/anchor_fixed",
                    region.name
                ));
            }
        }
        if self.arm.home.len() != self.arm.joints.len() {
            return Err("arm home must list one angle per joint".into());
        }
        for obj in &self.objects {
            obj.build()?;
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<WorkspaceGrid, String> {
        WorkspaceGrid::new(
            vec3(self.workspace.origin),
            self.workspace.voxel_size,
            self.workspace.resolution,
        )
        .map_err(|e| format!("workspace: {e:?}"))
    }

    pub fn build_camera(&self) -> CameraModel {
        CameraModel::look_at(
            self.camera.width,
            self.camera.height,
            self.camera.fx,
            self.camera.fy,
            self.camera.width as f64 / 2.0,
            self.camera.height as f64 / 2.0,
            vec3(self.camera.position),
            vec3(self.camera.look_at),
            vec3(self.camera.up),
        )
    }

    pub fn build_arm(&self) -> ArmModel {
        ArmModel {
            base: Iso3::from_translation(vec3(self.arm.base)),
            joints: self
                .arm
                .joints
                .iter()
                .map(|j| Joint { axis: vec3(j.axis), offset: vec3(j.offset) })
                .collect(),
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            dt: self.control.dt,
            max_joint_speed: self.control.max_joint_speed,
            max_eef_step: self.control.max_eef_step,
            grasp_radius: self.control.grasp_radius,
            joint_limit: self.control.joint_limit,
        }
    }

    /// Canonical world: the unperturbed layout the expert is recorded in.
    pub fn build_world(&self) -> Result<World, String> {
        let objects: Result<Vec<Object>, String> =
            self.objects.iter().map(|o| o.build()).collect();
        Ok(World::new(
            self.build_arm(),
            self.arm.home.clone(),
            objects?,
            self.control_params(),
        ))
    }

    pub fn build_task(&self) -> TaskSpec {
        TaskSpec {
            name: self.task.name.clone(),
            stages: self
                .task
                .stages
                .iter()
                .map(|s| StageSpec {
                    name: s.name.clone(),
                    target: s.target.clone(),
                    success: if let Some(obj) = &s.success.grasped {
                        Predicate::Grasped { object: obj.clone() }
                    } else {
                        let w = s.success.within.as_ref().expect("validated");
                        Predicate::Within { object: w.object.clone(), region: w.region.clone() }
                    },
                })
                .collect(),
            regions: self
                .regions
                .iter()
                .map(|r| Region {
                    name: r.name.clone(),
                    anchor: if let Some(obj) = &r.anchor_object {
                        Anchor::Object(obj.clone())
                    } else {
                        Anchor::Fixed(vec3(r.anchor_fixed.expect("validated")))
                    },
                    radius: r.radius,
                    z_min: r.z_min,
                    z_max: r.z_max,
                })
                .collect(),
        }
    }

    pub fn expert_scripts(&self) -> Result<Vec<Vec<ExpertOp>>, String> {
        self.task
            .stages
            .iter()
            .map(|stage| {
                stage
                    .expert
                    .iter()
                    .map(|op| {
                        if let Some(p) = op.move_to {
                            Ok(ExpertOp::Move(vec3(p)))
                        } else if let Some(g) = &op.gripper {
                            Ok(ExpertOp::Gripper(g.clone()))
                        } else if let Some(n) = op.dwell {
                            Ok(ExpertOp::Dwell(n))
                        } else {
                            Err("empty expert op".to_string())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn field_weights(&self) -> FieldWeights {
        FieldWeights { target: self.field.w_target, obstacle: self.field.w_obstacle }
    }

    pub fn field_params(&self) -> FieldParams {
        FieldParams {
            sigma_voxels: self.field.sigma_voxels,
            eef_exempt_radius: self.field.eef_exempt_radius,
            target_buffer_radius: self.field.target_buffer_radius,
            influence_voxels: self.field.influence_voxels,
        }
    }

    pub fn trap_config(&self) -> TrapConfig {
        TrapConfig {
            eps_stuck: self.detector.eps_stuck,
            eps_far: self.detector.eps_far,
            window: self.detector.window,
            cooldown: self.detector.cooldown,
            max_interventions: self.detector.max_interventions,
        }
    }

    pub fn intervention_config(&self) -> Result<InterventionConfig, String> {
        let scoring = match self.intervention.scoring.as_str() {
            "visit_all" => ScoringMode::VisitAll,
            "preview_at_rollback" => ScoringMode::PreviewAtRollback,
            other => return Err(format!("unknown scoring mode {other:?}")),
        };
        Ok(InterventionConfig {
            waypoint_count: self.intervention.waypoint_count,
            waypoint_radius: self.intervention.waypoint_radius,
            candidates_per_waypoint: self.intervention.candidates_per_waypoint,
            scoring,
        })
    }

    /// Apply a perturbation to a built world, then check that every object
    /// center stays inside the workspace and nothing interpenetrates.
    pub fn apply_perturbation(
        &self,
        world: &mut World,
        spec: &PerturbationSpec,
    ) -> Result<(), String> {
        match spec {
            PerturbationSpec::None => {}
            PerturbationSpec::PositionShift { object, dx, dy } => {
                let name = object
                    .clone()
                    .unwrap_or_else(|| self.task.stages[0].target.clone());
                world.shift_object(&name, *dx, *dy)?;
            }
            PerturbationSpec::ObjectSwap { a, b } => {
                world.swap_shapes(a, b)?;
            }
            PerturbationSpec::DistractorAdd { object } => {
                if world.object_index(&object.name).is_some() {
                    return Err(format!("distractor {:?} name collides", object.name));
                }
                world.add_object(object.build()?);
            }
        }
        let grid = self.build_grid()?;
        let lo = grid.origin();
        let side = grid.voxel_size() * grid.resolution() as f64;
        let hi = lo + Vec3::new(side, side, side);
        if let Some(name) = world.find_out_of_bounds(lo, hi) {
            return Err(format!("perturbation pushed {name:?} out of the workspace"));
        }
        if let Some((a, b)) = world.find_overlap() {
            return Err(format!("perturbation made {a:?} and {b:?} interpenetrate"));
        }
        Ok(())
    }
}

/// A scenario with its expert demonstration recorded, ready to spawn
/// episode setups. Recording happens once; episodes share the trajectory.
pub struct Prepared {
    pub config: ScenarioConfig,
    pub nominal: Arc<NominalTrajectory>,
}

pub fn prepare(config: ScenarioConfig) -> Result<Prepared, String> {
    let mut world = config.build_world()?;
    // The canonical layout must itself be legal.
    config.apply_perturbation(&mut world, &PerturbationSpec::None)?;
    let mut tracker = StageTracker::new(config.build_task());
    let scripts = config.expert_scripts()?;
    let nominal = record_expert(&mut world, &mut tracker, &scripts)
        .map_err(|e| format!("scenario {:?}: {e}", config.name))?;
    Ok(Prepared { config, nominal: Arc::new(nominal) })
}

impl Prepared {
    /// Build one episode's setup. `condition` overrides the scenario's own
    /// perturbation when present (suite cells vary it); `label` overrides
    /// the condition label recorded in outputs.
    pub fn setup(
        &self,
        condition: Option<&PerturbationSpec>,
        label: Option<&str>,
        log_steps: bool,
    ) -> Result<EpisodeSetup, String> {
        let cfg = &self.config;
        let perturbation = condition.unwrap_or(&cfg.perturbation);
        let mut world = cfg.build_world()?;
        cfg.apply_perturbation(&mut world, perturbation)?;

        let grid = cfg.build_grid()?;
        let builder = FieldBuilder::new(
            grid,
            cfg.field_weights(),
            cfg.field_params(),
            cfg.build_camera(),
            cfg.camera.far,
        );
        let policy =
            MemorizingPolicy::new(self.nominal.clone(), cfg.build_arm(), cfg.policy);

        Ok(EpisodeSetup {
            scenario_name: cfg.name.clone(),
            task_name: cfg.task.name.clone(),
            condition: label.map(str::to_owned).unwrap_or_else(|| perturbation.label()),
            world,
            tracker: StageTracker::new(cfg.build_task()),
            builder,
            policy,
            trap_config: cfg.trap_config(),
            intervention: cfg.intervention_config()?,
            history_capacity: cfg.history_capacity,
            drive: cfg.drive,
            rebuild_every: cfg.control.rebuild_every_steps,
            budget: cfg.control.step_budget,
            log_steps,
        })
    }
}
