//! Task definitions: staged goals with geometric success predicates.
//!
//! A task is an ordered list of stages. Each stage names the object that
//! perception should treat as the target and a predicate that, once true,
//! advances to the next stage. The episode succeeds when the final stage's
//! predicate holds.

use afi_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::world::World;

/// Cylindrical goal region, optionally anchored to a (movable) object.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub anchor: Anchor,
    pub radius: f64,
    /// Vertical band relative to the anchor point.
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Fixed(Vec3),
    Object(String),
}

impl Region {
    pub fn anchor_point(&self, world: &World) -> Option<Vec3> {
        match &self.anchor {
            Anchor::Fixed(p) => Some(*p),
            Anchor::Object(name) => world.object_by_name(name).map(|o| o.position),
        }
    }

    pub fn contains(&self, point: Vec3, world: &World) -> bool {
        let Some(anchor) = self.anchor_point(world) else { return false };
        let dx = point.x - anchor.x;
        let dy = point.y - anchor.y;
        let dz = point.z - anchor.z;
        dx * dx + dy * dy <= self.radius * self.radius && (self.z_min..=self.z_max).contains(&dz)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    /// The named object is currently attached to the gripper.
    Grasped { object: String },
    /// The named object is released and inside the named region.
    Within { object: String, region: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Object perception treats as the target during this stage.
    pub target: String,
    pub success: Predicate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub stages: Vec<StageSpec>,
    pub regions: Vec<Region>,
}

impl TaskSpec {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn predicate_holds(&self, predicate: &Predicate, world: &World) -> bool {
        match predicate {
            Predicate::Grasped { object } => world.attached_object_name() == Some(object.as_str()),
            Predicate::Within { object, region } => {
                if world.attached_object_name() == Some(object.as_str()) {
                    return false;
                }
                let Some(obj) = world.object_by_name(object) else { return false };
                let Some(region) = self.region(region) else { return false };
                region.contains(obj.position, world)
            }
        }
    }
}

/// Walks the stage list as predicates come true. Advancing is monotone;
/// completed tasks stay completed.
#[derive(Clone, Debug)]
pub struct StageTracker {
    task: TaskSpec,
    stage: usize,
}

impl StageTracker {
    pub fn new(task: TaskSpec) -> Self {
        assert!(!task.stages.is_empty());
        StageTracker { task, stage: 0 }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn stage_index(&self) -> usize {
        self.stage
    }

    pub fn complete(&self) -> bool {
        self.stage >= self.task.stages.len()
    }

    /// Spec of the active stage; the final stage's spec once complete,
    /// so perception keeps a target after success.
    pub fn current_stage(&self) -> &StageSpec {
        let idx = self.stage.min(self.task.stages.len() - 1);
        &self.task.stages[idx]
    }

    /// Re-evaluate after a world step. Advances through every stage whose
    /// predicate already holds (a single step can complete a stage).
    pub fn update(&mut self, world: &World) -> bool {
        let mut advanced = false;
        while self.stage < self.task.stages.len() {
            let predicate = &self.task.stages[self.stage].success;
            if self.task.predicate_holds(predicate, world) {
                self.stage += 1;
                advanced = true;
            } else {
                break;
            }
        }
        advanced
    }
}
