//! Shared task state and the domain types exchanged between agents.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::geometry::CameraModel;
use crate::simulator::Observation;

pub type SubtaskId = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("invalid memory tag: {0}")]
    InvalidTag(String),
    #[error("scene graph: {0}")]
    SceneGraph(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("invalid reflection: {0}")]
    InvalidReflection(String),
    #[error("camera: {0}")]
    Camera(#[from] crate::geometry::GeometryError),
    #[error("state invariant violated: {0}")]
    Invariant(String),
}

/// Subtask ids are `s<index>` in decomposition order.
pub fn subtask_id(index: usize) -> SubtaskId {
    format!("s{index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    PickPlace,
    Move,
    Reach,
    Push,
    Rotate,
}

impl Verb {
    pub const ALL: [Verb; 5] = [
        Verb::PickPlace,
        Verb::Move,
        Verb::Reach,
        Verb::Push,
        Verb::Rotate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::PickPlace => "pick_place",
            Verb::Move => "move",
            Verb::Reach => "reach",
            Verb::Push => "push",
            Verb::Rotate => "rotate",
        }
    }
}

impl FromStr for Verb {
    type Err = StateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| StateError::UnknownVerb(s.to_string()))
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryTagKind {
    ObjectRef,
    PositionRef,
    ContextRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMemoryTag")]
pub struct MemoryTag {
    pub key: String,
    pub kind: MemoryTagKind,
    pub value: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMemoryTag {
    key: String,
    kind: MemoryTagKind,
    value: String,
}

impl TryFrom<RawMemoryTag> for MemoryTag {
    type Error = StateError;

    fn try_from(r: RawMemoryTag) -> Result<Self, Self::Error> {
        MemoryTag::new(r.key, r.kind, r.value)
    }
}

impl MemoryTag {
    pub fn new(
        key: impl Into<String>,
        kind: MemoryTagKind,
        value: impl Into<String>,
    ) -> Result<Self, StateError> {
        let key = key.into();
        if key.trim().is_empty() {
            return Err(StateError::InvalidTag("empty key".into()));
        }
        let tag = Self {
            key,
            kind,
            value: value.into(),
        };
        if kind == MemoryTagKind::PositionRef {
            tag.position()?;
        }
        Ok(tag)
    }

    /// Parses a position tag of the form `"(x, y, z)"` or `"x, y, z"`.
    pub fn position(&self) -> Result<[f64; 3], StateError> {
        let inner = self
            .value
            .trim()
            .trim_start_matches('(')
            .trim_end_matches(')');
        let parts: Vec<f64> = inner
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| StateError::InvalidTag(format!("bad position {:?}", self.value)))?;
        match parts.as_slice() {
            [x, y, z] if parts.iter().all(|v| v.is_finite()) => Ok([*x, *y, *z]),
            [x, y] if parts.iter().all(|v| v.is_finite()) => Ok([*x, *y, 0.0]),
            _ => Err(StateError::InvalidTag(format!(
                "bad position {:?}",
                self.value
            ))),
        }
    }
}

/// Where a placed object should end up relative to its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    OnTopOf,
    Inside,
}

/// One primitive subtask executable by the actor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstruction")]
pub struct AtomicInstruction {
    pub id: SubtaskId,
    pub verb: Verb,
    pub object_query: String,
    #[serde(default)]
    pub target_query: String,
    #[serde(default)]
    pub memory_tags: Vec<MemoryTag>,
    #[serde(default)]
    pub raw_text: String,
}

#[derive(Deserialize)]
struct RawInstruction {
    id: SubtaskId,
    verb: String,
    object_query: String,
    #[serde(default)]
    target_query: String,
    #[serde(default)]
    memory_tags: Vec<MemoryTag>,
    #[serde(default)]
    raw_text: String,
}

impl TryFrom<RawInstruction> for AtomicInstruction {
    type Error = StateError;

    fn try_from(r: RawInstruction) -> Result<Self, Self::Error> {
        AtomicInstruction::new(
            r.id,
            &r.verb,
            r.object_query,
            r.target_query,
            r.memory_tags,
            r.raw_text,
        )
    }
}

impl AtomicInstruction {
    pub fn new(
        id: impl Into<SubtaskId>,
        verb: &str,
        object_query: impl Into<String>,
        target_query: impl Into<String>,
        memory_tags: Vec<MemoryTag>,
        raw_text: impl Into<String>,
    ) -> Result<Self, StateError> {
        let verb: Verb = verb.parse()?;
        let object_query = object_query.into();
        if verb == Verb::PickPlace && object_query.trim().is_empty() {
            return Err(StateError::InvalidInput(
                "pick_place needs an object query".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            verb,
            object_query,
            target_query: target_query.into(),
            memory_tags,
            raw_text: raw_text.into(),
        })
    }

    pub fn tag(&self, key: &str) -> Option<&MemoryTag> {
        self.memory_tags.iter().find(|t| t.key == key)
    }

    pub fn tags_of(&self, kind: MemoryTagKind) -> impl Iterator<Item = &MemoryTag> {
        self.memory_tags.iter().filter(move |t| t.kind == kind)
    }

    /// First position reference carried by the subtask.
    pub fn position_ref(&self) -> Option<[f64; 3]> {
        self.tags_of(MemoryTagKind::PositionRef)
            .find_map(|t| t.position().ok())
    }

    pub fn placement(&self) -> Placement {
        match self.tag("relation").map(|t| t.value.as_str()) {
            Some("inside") => Placement::Inside,
            _ => Placement::OnTopOf,
        }
    }

    /// Requested yaw in radians for rotate subtasks (`yaw_deg` context tag).
    pub fn yaw_target(&self) -> Option<f64> {
        self.tag("yaw_deg")
            .and_then(|t| t.value.trim().parse::<f64>().ok())
            .map(f64::to_radians)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryClass {
    Round,
    Rimmed,
    Flat,
    Irregular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    LeftOf,
    RightOf,
    Above,
    Below,
    OnTopOf,
    Inside,
    Near,
}

impl RelationKind {
    /// Relation implied in the opposite direction, if the vocabulary has one.
    pub fn converse(self) -> Option<RelationKind> {
        match self {
            RelationKind::LeftOf => Some(RelationKind::RightOf),
            RelationKind::RightOf => Some(RelationKind::LeftOf),
            RelationKind::Above => Some(RelationKind::Below),
            RelationKind::Below => Some(RelationKind::Above),
            RelationKind::Near => Some(RelationKind::Near),
            RelationKind::OnTopOf | RelationKind::Inside => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub color: String,
    #[serde(default)]
    pub size_class: String,
    pub geometry_class: GeometryClass,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject_id: String,
    pub relation: RelationKind,
    pub object_id: String,
}

/// Objects plus pairwise spatial relations. Converse relations are always stored.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawSceneGraph")]
pub struct SceneGraph {
    nodes: Vec<ObjectNode>,
    edges: Vec<Relation>,
}

#[derive(Deserialize)]
struct RawSceneGraph {
    #[serde(default)]
    nodes: Vec<ObjectNode>,
    #[serde(default)]
    edges: Vec<Relation>,
}

impl TryFrom<RawSceneGraph> for SceneGraph {
    type Error = StateError;

    fn try_from(r: RawSceneGraph) -> Result<Self, Self::Error> {
        SceneGraph::from_parts(r.nodes, r.edges)
    }
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph, adding converse edges for every supplied relation.
    pub fn from_parts(nodes: Vec<ObjectNode>, edges: Vec<Relation>) -> Result<Self, StateError> {
        let mut g = SceneGraph::new();
        for n in nodes {
            g.add_node(n)?;
        }
        for e in edges {
            g.add_relation(&e.subject_id, e.relation, &e.object_id)?;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Relation] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add_node(&mut self, node: ObjectNode) -> Result<(), StateError> {
        if node.id.trim().is_empty() {
            return Err(StateError::SceneGraph("empty node id".into()));
        }
        if self.node(&node.id).is_some() {
            return Err(StateError::SceneGraph(format!(
                "duplicate node id {:?}",
                node.id
            )));
        }
        if self.node_by_label(&node.label).is_some() {
            return Err(StateError::SceneGraph(format!(
                "duplicate node label {:?}",
                node.label
            )));
        }
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_relation(
        &mut self,
        subject: &str,
        relation: RelationKind,
        object: &str,
    ) -> Result<(), StateError> {
        if subject == object {
            return Err(StateError::SceneGraph(format!(
                "self relation on {subject:?}"
            )));
        }
        for id in [subject, object] {
            if self.node(id).is_none() {
                return Err(StateError::SceneGraph(format!(
                    "edge references unknown node {id:?}"
                )));
            }
        }
        self.insert_edge(Relation {
            subject_id: subject.into(),
            relation,
            object_id: object.into(),
        });
        if let Some(c) = relation.converse() {
            self.insert_edge(Relation {
                subject_id: object.into(),
                relation: c,
                object_id: subject.into(),
            });
        }
        Ok(())
    }

    fn insert_edge(&mut self, e: Relation) {
        if !self.edges.contains(&e) {
            self.edges.push(e);
        }
    }

    pub fn node(&self, id: &str) -> Option<&ObjectNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_by_label(&self, label: &str) -> Option<&ObjectNode> {
        let want = label.trim().to_lowercase();
        self.nodes.iter().find(|n| n.label.to_lowercase() == want)
    }

    /// Resolves either a node id or a label.
    pub fn resolve(&self, query: &str) -> Option<&ObjectNode> {
        self.node(query).or_else(|| self.node_by_label(query))
    }

    pub fn relations_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Relation> + 'a {
        self.edges
            .iter()
            .filter(move |e| e.subject_id == id || e.object_id == id)
    }

    pub fn has(&self, subject: &str, relation: RelationKind, object: &str) -> bool {
        self.edges
            .iter()
            .any(|e| e.subject_id == subject && e.relation == relation && e.object_id == object)
    }

    /// Checks every structural invariant; used on graphs built outside `add_*`.
    pub fn validate(&self) -> Result<(), StateError> {
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        if ids.len() != self.nodes.len() {
            return Err(StateError::SceneGraph("duplicate node ids".into()));
        }
        for e in &self.edges {
            if e.subject_id == e.object_id {
                return Err(StateError::SceneGraph("self relation".into()));
            }
            if !ids.contains(e.subject_id.as_str()) || !ids.contains(e.object_id.as_str()) {
                return Err(StateError::SceneGraph("dangling edge".into()));
            }
            if let Some(c) = e.relation.converse() {
                if !self.has(&e.object_id, c, &e.subject_id) {
                    return Err(StateError::SceneGraph(format!("missing converse of {e:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Axis-aligned pixel box with `u_min < u_max`, `v_min < v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self, StateError> {
        let b = Self {
            u_min,
            v_min,
            u_max,
            v_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), StateError> {
        let finite = [self.u_min, self.v_min, self.u_max, self.v_max]
            .iter()
            .all(|x| x.is_finite());
        if !finite || !(self.u_min < self.u_max) || !(self.v_min < self.v_max) {
            return Err(StateError::InvalidDetection(format!(
                "degenerate bbox {self:?}"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    pub fn centroid(&self) -> (f64, f64) {
        (
            (self.u_min + self.u_max) / 2.0,
            (self.v_min + self.v_max) / 2.0,
        )
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.u_max.min(o.u_max) - self.u_min.max(o.u_min);
        let h = self.v_max.min(o.v_max) - self.v_min.max(o.v_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, o: &BBox) -> BBox {
        BBox {
            u_min: self.u_min.min(o.u_min),
            v_min: self.v_min.min(o.v_min),
            u_max: self.u_max.max(o.u_max),
            v_max: self.v_max.max(o.v_max),
        }
    }

    pub fn contains_box(&self, o: &BBox) -> bool {
        const EPS: f64 = 1e-9;
        o.u_min >= self.u_min - EPS
            && o.v_min >= self.v_min - EPS
            && o.u_max <= self.u_max + EPS
            && o.v_max <= self.v_max + EPS
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub label: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub source: String,
}

#[derive(Deserialize)]
struct RawDetection {
    label: String,
    bbox: BBox,
    confidence: f64,
    source: String,
}

impl TryFrom<RawDetection> for Detection {
    type Error = StateError;

    fn try_from(r: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(r.label, r.bbox, r.confidence, r.source)
    }
}

impl Detection {
    pub fn new(
        label: impl Into<String>,
        bbox: BBox,
        confidence: f64,
        source: impl Into<String>,
    ) -> Result<Self, StateError> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(StateError::InvalidDetection(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            label: label.into(),
            bbox,
            confidence,
            source: source.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint2D {
    pub u: f64,
    pub v: f64,
    pub object_id: String,
    pub on_mask: bool,
}

/// World grasp target on the object's visible top surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPoint3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub object_id: String,
    pub yaw: f64,
    /// Mask centroid lifted at the grasp depth; the object's reference point.
    pub center: [f64; 3],
}

impl GraspPoint3D {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self { x, y, z, yaw }
    }

    pub fn planar_distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub subtask_id: SubtaskId,
    pub primitive: Verb,
    pub pick_pose: Pose,
    pub place_pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationResult {
    pub subtask_id: SubtaskId,
    pub executed: bool,
    pub dropped: bool,
    /// Where the manipulated grasp point ended up, if an object was moved.
    pub final_object_pose: Option<Pose>,
    #[serde(default)]
    pub moved_object: Option<String>,
}

/// Pipeline stages a failure can be charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decomposer,
    Descriptor,
    Perceptor,
    Grounder,
    Projector,
    Thinker,
    Actor,
    Reflector,
    None,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Decomposer => "decomposer",
            Stage::Descriptor => "descriptor",
            Stage::Perceptor => "perceptor",
            Stage::Grounder => "grounder",
            Stage::Projector => "projector",
            Stage::Thinker => "thinker",
            Stage::Actor => "actor",
            Stage::Reflector => "reflector",
            Stage::None => "none",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawReflection")]
pub struct ReflectionResult {
    pub subtask_id: SubtaskId,
    pub verdict: Verdict,
    pub failing_stage: Stage,
    pub explanation: String,
}

#[derive(Deserialize)]
struct RawReflection {
    subtask_id: SubtaskId,
    verdict: Verdict,
    failing_stage: Stage,
    #[serde(default)]
    explanation: String,
}

impl TryFrom<RawReflection> for ReflectionResult {
    type Error = StateError;

    fn try_from(r: RawReflection) -> Result<Self, Self::Error> {
        ReflectionResult::new(r.subtask_id, r.verdict, r.failing_stage, r.explanation)
    }
}

impl ReflectionResult {
    pub fn new(
        subtask_id: impl Into<SubtaskId>,
        verdict: Verdict,
        failing_stage: Stage,
        explanation: impl Into<String>,
    ) -> Result<Self, StateError> {
        let explanation = explanation.into();
        match verdict {
            Verdict::Success if failing_stage != Stage::None => {
                return Err(StateError::InvalidReflection(
                    "success must name no failing stage".into(),
                ))
            }
            Verdict::Failure if failing_stage == Stage::None => {
                return Err(StateError::InvalidReflection(
                    "failure must name a stage".into(),
                ))
            }
            Verdict::Failure if explanation.trim().is_empty() => {
                return Err(StateError::InvalidReflection(
                    "failure needs an explanation".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            subtask_id: subtask_id.into(),
            verdict,
            failing_stage,
            explanation,
        })
    }

    pub fn success(subtask_id: impl Into<SubtaskId>) -> Self {
        Self {
            subtask_id: subtask_id.into(),
            verdict: Verdict::Success,
            failing_stage: Stage::None,
            explanation: String::new(),
        }
    }

    /// Failure charged to `stage`; `stage` must not be [`Stage::None`].
    pub fn failure(
        subtask_id: impl Into<SubtaskId>,
        stage: Stage,
        explanation: impl Into<String>,
    ) -> Self {
        debug_assert_ne!(stage, Stage::None);
        let mut explanation = explanation.into();
        if explanation.trim().is_empty() {
            explanation = format!("{stage} failed");
        }
        Self {
            subtask_id: subtask_id.into(),
            verdict: Verdict::Failure,
            failing_stage: stage,
            explanation,
        }
    }

    pub fn is_success(&self) -> bool {
        self.verdict == Verdict::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "stage")]
pub enum RecoveryAction {
    RetrySubtask,
    Reactivate(Stage),
    RescanScene,
    TerminateFailure,
}

impl RecoveryAction {
    /// Position on the escalation ladder; never decreases for one subtask.
    pub fn rung(&self) -> u8 {
        match self {
            RecoveryAction::RetrySubtask => 0,
            RecoveryAction::Reactivate(_) => 1,
            RecoveryAction::RescanScene => 2,
            RecoveryAction::TerminateFailure => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RecoveryAction::RetrySubtask => "retry_subtask",
            RecoveryAction::Reactivate(_) => "reactivate",
            RecoveryAction::RescanScene => "rescan_scene",
            RecoveryAction::TerminateFailure => "terminate_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskOutcome {
    Success,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskRecord {
    pub id: SubtaskId,
    pub attempts: u32,
    pub outcome: SubtaskOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_stage: Option<Stage>,
}

/// Reactivation and rescan budget usage for one subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LadderCounters {
    pub reactivations: u32,
    pub rescans: u32,
}

/// The blackboard every agent reads from and writes to during one task run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task_name: String,
    pub original_prompt: String,
    pub initial_decomposition_done: bool,
    pub decomposed_prompts: Vec<AtomicInstruction>,
    pub queue: Vec<AtomicInstruction>,
    pub current: Option<AtomicInstruction>,
    pub should_terminate: bool,
    pub multi_object: bool,
    pub object_of_interest: String,
    pub not_object_of_interest: Vec<String>,
    pub all_objects: Vec<String>,
    pub scene_graph: Option<SceneGraph>,
    pub observation: Option<Observation>,
    pub camera: CameraModel,
    pub grounder_output: Vec<Detection>,
    pub grasp_points_2d: Vec<GraspPoint2D>,
    pub grasp_points_3d: Vec<GraspPoint3D>,
    pub thinker_output: BTreeMap<SubtaskId, ActionPlan>,
    pub actor_output: BTreeMap<SubtaskId, ActuationResult>,
    pub reflection_output: BTreeMap<SubtaskId, ReflectionResult>,
    pub attempt_counts: BTreeMap<SubtaskId, u32>,
    pub ladder: BTreeMap<SubtaskId, LadderCounters>,
    /// Total scene rescans performed during the run.
    pub rescan_count: u32,
    pub results: BTreeMap<SubtaskId, SubtaskRecord>,
}

impl TaskState {
    pub fn new(
        task_name: impl Into<String>,
        prompt: impl Into<String>,
        camera: CameraModel,
    ) -> Result<Self, StateError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(StateError::InvalidInput("empty prompt".into()));
        }
        Ok(Self {
            task_name: task_name.into(),
            original_prompt: prompt,
            initial_decomposition_done: false,
            decomposed_prompts: Vec::new(),
            queue: Vec::new(),
            current: None,
            should_terminate: false,
            multi_object: false,
            object_of_interest: String::new(),
            not_object_of_interest: Vec::new(),
            all_objects: Vec::new(),
            scene_graph: None,
            observation: None,
            camera,
            grounder_output: Vec::new(),
            grasp_points_2d: Vec::new(),
            grasp_points_3d: Vec::new(),
            thinker_output: BTreeMap::new(),
            actor_output: BTreeMap::new(),
            reflection_output: BTreeMap::new(),
            attempt_counts: BTreeMap::new(),
            ladder: BTreeMap::new(),
            rescan_count: 0,
            results: BTreeMap::new(),
        })
    }

    pub fn attempts(&self, id: &str) -> u32 {
        self.attempt_counts.get(id).copied().unwrap_or(0)
    }

    pub fn counters(&self, id: &str) -> LadderCounters {
        self.ladder.get(id).copied().unwrap_or_default()
    }

    /// Copy without the raster observation, for compact trace snapshots.
    pub fn snapshot(&self) -> TaskState {
        TaskState {
            observation: None,
            ..self.clone()
        }
    }

    /// Checks the structural invariants against a per-subtask attempt budget.
    pub fn check_invariants(&self, attempt_budget: u32) -> Result<(), StateError> {
        if self.initial_decomposition_done == self.decomposed_prompts.is_empty() {
            return Err(StateError::Invariant(
                "initial_decomposition_done must be true exactly when a plan exists".into(),
            ));
        }
        let all: BTreeSet<&str> = self
            .decomposed_prompts
            .iter()
            .map(|s| s.id.as_str())
            .collect();
        if all.len() != self.decomposed_prompts.len() {
            return Err(StateError::Invariant(
                "duplicate subtask ids in plan".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        let parts = self
            .queue
            .iter()
            .map(|s| s.id.as_str())
            .chain(self.current.iter().map(|s| s.id.as_str()))
            .chain(self.results.keys().map(String::as_str));
        for id in parts {
            if !seen.insert(id) {
                return Err(StateError::Invariant(format!("subtask {id} appears twice")));
            }
        }
        if seen != all {
            return Err(StateError::Invariant(
                "queue, current and results do not partition the plan".into(),
            ));
        }
        if let Some((id, n)) = self
            .attempt_counts
            .iter()
            .find(|(_, n)| **n > attempt_budget)
        {
            return Err(StateError::Invariant(format!(
                "subtask {id} used {n} attempts, budget {attempt_budget}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::with_identity_pose(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn node(id: &str) -> ObjectNode {
        ObjectNode {
            id: id.into(),
            label: id.replace('_', " "),
            color: String::new(),
            size_class: "small".into(),
            geometry_class: GeometryClass::Flat,
        }
    }

    #[test]
    fn new_state_is_empty() {
        let s = TaskState::new("stack", "stack the blocks", cam()).unwrap();
        assert!(s.queue.is_empty() && !s.should_terminate && !s.initial_decomposition_done);
        assert!(s.results.is_empty() && s.attempt_counts.is_empty() && s.thinker_output.is_empty());
    }

    #[test]
    fn empty_prompt_rejected() {
        assert!(matches!(
            TaskState::new("x", "  ", cam()),
            Err(StateError::InvalidInput(_))
        ));
    }

    #[test]
    fn non_orthonormal_camera_rejected() {
        let mut p = cam().params();
        p.rotation[1][0] = 0.3;
        let r: Result<TaskState, StateError> = CameraModel::new(p)
            .map_err(StateError::from)
            .and_then(|c| TaskState::new("t", "p", c));
        assert!(matches!(r, Err(StateError::Camera(_))));
    }

    #[test]
    fn unknown_verb_rejected() {
        let e = AtomicInstruction::new("s0", "teleport", "block", "", vec![], "").unwrap_err();
        assert_eq!(e, StateError::UnknownVerb("teleport".into()));
        let json = r#"{"id":"s0","verb":"teleport","object_query":"a"}"#;
        assert!(serde_json::from_str::<AtomicInstruction>(json).is_err());
    }

    #[test]
    fn pick_place_needs_object() {
        assert!(AtomicInstruction::new("s0", "pick_place", "", "pad", vec![], "").is_err());
        assert!(AtomicInstruction::new("s0", "move", "", "", vec![], "").is_ok());
    }

    #[test]
    fn position_tags_parse() {
        let t = MemoryTag::new("target", MemoryTagKind::PositionRef, "(0.5, 0.0, 0.02)").unwrap();
        assert_eq!(t.position().unwrap(), [0.5, 0.0, 0.02]);
        assert!(MemoryTag::new("target", MemoryTagKind::PositionRef, "(a, b)").is_err());
        assert!(MemoryTag::new("", MemoryTagKind::ContextRef, "x").is_err());
    }

    #[test]
    fn graph_stores_converse_relations() {
        let mut g = SceneGraph::new();
        g.add_node(node("red_block")).unwrap();
        g.add_node(node("green_pad")).unwrap();
        g.add_relation("red_block", RelationKind::LeftOf, "green_pad")
            .unwrap();
        assert!(g.has("green_pad", RelationKind::RightOf, "red_block"));
        assert_eq!(g.edges().len(), 2);
        g.add_relation("green_pad", RelationKind::RightOf, "red_block")
            .unwrap();
        assert_eq!(g.edges().len(), 2);
        g.validate().unwrap();
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let mut g = SceneGraph::new();
        g.add_node(node("a")).unwrap();
        assert!(g.add_relation("a", RelationKind::Near, "a").is_err());
        assert!(g.add_relation("a", RelationKind::Near, "ghost").is_err());
        assert!(g.add_node(node("a")).is_err());
    }

    #[test]
    fn reflection_invariants() {
        assert!(ReflectionResult::new("s0", Verdict::Success, Stage::Actor, "").is_err());
        assert!(ReflectionResult::new("s0", Verdict::Failure, Stage::None, "x").is_err());
        assert!(ReflectionResult::new("s0", Verdict::Failure, Stage::Actor, "").is_err());
        assert!(ReflectionResult::new("s0", Verdict::Failure, Stage::Actor, "unmoved").is_ok());
    }

    #[test]
    fn detection_invariants() {
        assert!(BBox::new(5.0, 0.0, 5.0, 2.0).is_err());
        let b = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert!(Detection::new("a", b, 1.2, "s").is_err());
        assert!(Detection::new("a", b, 0.5, "s").is_ok());
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(PI / 2.0) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_action_serde_shape() {
        let a = RecoveryAction::Reactivate(Stage::Grounder);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"action":"reactivate","stage":"grounder"}"#);
        assert_eq!(serde_json::from_str::<RecoveryAction>(&s).unwrap(), a);
    }
}
