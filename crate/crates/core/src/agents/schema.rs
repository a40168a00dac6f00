//! Structured payloads sent to each role and the replies each role must
//! return. Replies reject unknown fields; anything that fails to parse is a
//! schema violation.

use serde::{Deserialize, Serialize};

use crate::simulator::ObjectState;
use crate::state::{
    ActuationResult, AtomicInstruction, GeometryClass, GraspPoint3D, MemoryTag, ObjectNode,
    Placement, Relation, Stage, Verdict,
};

/// Why a stage is being re-queried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feedback {
    pub failing_stage: Stage,
    pub explanation: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposerPayload {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedSubtask {
    pub verb: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub target: String,
    #[serde(default)]
    pub memory_tags: Vec<MemoryTag>,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposerReply {
    pub subtasks: Vec<PlannedSubtask>,
}

/// What the describer can see of one object: appearance plus its footprint
/// in the image and what it rests on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibleObject {
    pub id: String,
    pub label: String,
    pub color: String,
    pub geometry_class: GeometryClass,
    pub size_class: String,
    pub centroid_px: [f64; 2],
    pub bbox_px: [f64; 4],
    #[serde(default)]
    pub supported_by: Option<String>,
    #[serde(default)]
    pub contained_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorPayload {
    pub image_width: usize,
    pub image_height: usize,
    pub visible_objects: Vec<VisibleObject>,
    #[serde(default)]
    pub feedback: Option<Feedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorReply {
    #[serde(default)]
    pub nodes: Vec<ObjectNode>,
    #[serde(default)]
    pub edges: Vec<Relation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeView {
    pub id: String,
    pub label: String,
    pub geometry_class: GeometryClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptorPayload {
    pub subtask: AtomicInstruction,
    pub scene_objects: Vec<NodeView>,
    #[serde(default)]
    pub feedback: Option<Feedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptorReply {
    pub object_of_interest: String,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub not_object_of_interest: Vec<String>,
    #[serde(default)]
    pub all_objects: Vec<String>,
    /// Overrides the scene graph's geometry class for grasp extraction.
    #[serde(default)]
    pub grasp_strategy: Option<GeometryClass>,
}

/// Physical metadata the planner needs for the stacking height rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub id: String,
    pub label: String,
    pub height: f64,
    /// Floor height above the base for containers, zero otherwise.
    pub floor_offset: f64,
    pub is_container: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinkerPayload {
    pub subtask: AtomicInstruction,
    pub object_of_interest: String,
    #[serde(default)]
    pub target: Option<String>,
    pub grasp_points: Vec<GraspPoint3D>,
    pub relations: Vec<Relation>,
    pub object_metadata: Vec<ObjectMeta>,
    #[serde(default)]
    pub feedback: Option<Feedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlaceTarget {
    /// Scene-graph node id of the support or container.
    Object(String),
    /// World point on the supporting surface.
    Position([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThinkerReply {
    /// Node id of the object to grasp.
    #[serde(default)]
    pub pick: Option<String>,
    #[serde(default)]
    pub place: Option<PlaceTarget>,
    #[serde(default)]
    pub relation: Option<Placement>,
    /// Planar offset from the target reference point, meters.
    #[serde(default)]
    pub offset: [f64; 2],
    /// Rotation in degrees: absolute for rotate, relative otherwise.
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectorPayload {
    pub subtask: AtomicInstruction,
    pub object_of_interest: String,
    #[serde(default)]
    pub target: Option<String>,
    pub before: Vec<ObjectState>,
    pub after: Vec<ObjectState>,
    pub gripper_after: [f64; 3],
    pub actuation: ActuationResult,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectorReply {
    pub verdict: Verdict,
    pub failing_stage: Stage,
    #[serde(default)]
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleAgentPayload {
    pub prompt: String,
    pub objects: Vec<ObjectState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedAction {
    pub verb: String,
    /// `[x, y, z, yaw]`
    pub pick: [f64; 4],
    pub place: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleAgentReply {
    pub actions: Vec<PlannedAction>,
}
