//! Agent roles as structured-I/O contracts over a model backend, plus the
//! deterministic grounding, projection and planning steps between them.

pub mod fusion;
mod prompts;
mod request;
pub mod schema;

pub use fusion::{consistency_score, fuse_detections, merge_cluster, NEAR_FRACTION, TAU_MATCH};
pub use prompts::{Prompt, PromptLibrary, DEFAULT_VERSION};
pub use request::{extract_json, AgentRequest, AgentResponse, ImageAttachment, Role};

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::backends::{canonical_request_hash, Backend, BackendError};
use crate::detection::{detect_all, DetectionProvider, ProviderFault};
use crate::geometry::{grasp_point_2d, grasp_point_3d, CameraModel, GeometryError};
use crate::simulator::{mask_bbox, ActionCommand, ObjectState, Observation, Z_TOLERANCE};
use crate::state::{
    subtask_id, wrap_angle, ActionPlan, ActuationResult, AtomicInstruction, Detection,
    GeometryClass, GraspPoint2D, GraspPoint3D, MemoryTagKind, Placement, Pose, ReflectionResult,
    SceneGraph, Stage, Verb,
};
use schema::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{role} reply violates its schema: {message}")]
    Schema { role: Role, message: String },
    #[error("{role} backend: {error}")]
    Backend { role: Role, error: BackendError },
    #[error("decomposition: {0}")]
    Decomposition(String),
    #[error("descriptor: {0}")]
    Descriptor(String),
    #[error("perception miss: {0}")]
    PerceptionMiss(String),
    #[error("grounding: {0}")]
    Grounding(String),
    #[error("projection: {message}")]
    Projection { stage: Stage, message: String },
    #[error("thinker: {0}")]
    Thinker(String),
}

pub fn role_stage(role: Role) -> Stage {
    match role {
        Role::Decomposer => Stage::Decomposer,
        Role::Descriptor => Stage::Descriptor,
        Role::Perceptor => Stage::Perceptor,
        Role::Thinker | Role::SingleAgent => Stage::Thinker,
        Role::Reflector => Stage::Reflector,
    }
}

impl AgentError {
    /// Stage the failure is charged to.
    pub fn stage(&self) -> Stage {
        match self {
            AgentError::Schema { role, .. } | AgentError::Backend { role, .. } => role_stage(*role),
            AgentError::Decomposition(_) => Stage::Decomposer,
            AgentError::Descriptor(_) => Stage::Descriptor,
            AgentError::PerceptionMiss(_) => Stage::Perceptor,
            AgentError::Grounding(_) => Stage::Grounder,
            AgentError::Projection { stage, .. } => *stage,
            AgentError::Thinker(_) => Stage::Thinker,
        }
    }

    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            AgentError::Backend { error, .. } => Some(error),
            _ => None,
        }
    }
}

/// Record of one model exchange, for traces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCall {
    pub role: Role,
    pub request_hash: String,
    pub response: AgentResponse,
}

/// Backend plus instruction texts.
#[derive(Clone)]
pub struct Models {
    pub backend: Arc<dyn Backend>,
    pub prompts: PromptLibrary,
}

impl Models {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            prompts: PromptLibrary::bundled(),
        }
    }

    pub fn wants_images(&self) -> bool {
        self.backend.wants_images()
    }

    /// PNG of the frame if the backend takes images.
    pub fn image_for(&self, obs: &Observation) -> Option<ImageAttachment> {
        if !self.wants_images() {
            return None;
        }
        obs.rgb.to_png().ok().map(ImageAttachment::from_png)
    }

    pub fn request(
        &self,
        role: Role,
        payload: &impl Serialize,
        image: Option<ImageAttachment>,
    ) -> AgentRequest {
        let p = self.prompts.get(role);
        AgentRequest {
            role,
            version: p.version.clone(),
            system_instruction: p.text.clone(),
            user_payload: serde_json::to_value(payload).expect("payload serializes"),
            image,
        }
    }

    /// One model exchange with a single immediate retry on transport failure;
    /// the reply must parse as `R`.
    pub fn call<R: DeserializeOwned>(
        &self,
        role: Role,
        payload: &impl Serialize,
        image: Option<ImageAttachment>,
    ) -> Result<(R, ModelCall), AgentError> {
        let req = self.request(role, payload, image);
        let resp = match self.backend.complete(&req) {
            Err(BackendError::Unavailable(first)) => {
                log::warn!("{role} backend unavailable ({first}); retrying once");
                self.backend.complete(&req)
            }
            other => other,
        }
        .map_err(|error| AgentError::Backend { role, error })?;
        let call = ModelCall {
            role,
            request_hash: canonical_request_hash(&req),
            response: resp,
        };
        let parsed: R = serde_json::from_value(call.response.parsed.clone()).map_err(|e| {
            AgentError::Schema {
                role,
                message: e.to_string(),
            }
        })?;
        Ok((parsed, call))
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub subtasks: Vec<AtomicInstruction>,
    pub multi_object: bool,
}

pub fn decompose(models: &Models, prompt: &str) -> Result<(Decomposition, ModelCall), AgentError> {
    if prompt.trim().is_empty() {
        return Err(AgentError::Decomposition("empty prompt".into()));
    }
    let (reply, call): (DecomposerReply, _) = models.call(
        Role::Decomposer,
        &DecomposerPayload {
            prompt: prompt.into(),
        },
        None,
    )?;
    let subtasks = reply
        .subtasks
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            AtomicInstruction::new(
                subtask_id(i),
                &s.verb,
                s.object,
                s.target,
                s.memory_tags,
                s.text,
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| AgentError::Schema {
            role: Role::Decomposer,
            message: e.to_string(),
        })?;
    if subtasks.is_empty() {
        return Err(AgentError::Decomposition("empty plan".into()));
    }
    let mut queries: Vec<String> = subtasks
        .iter()
        .map(|s| s.object_query.trim().to_lowercase())
        .collect();
    queries.sort();
    queries.dedup();
    Ok((
        Decomposition {
            multi_object: queries.len() > 1,
            subtasks,
        },
        call,
    ))
}

fn size_class(size: f64) -> &'static str {
    if size < 0.045 {
        "small"
    } else if size < 0.1 {
        "medium"
    } else {
        "large"
    }
}

/// What the describer sees: every object with a visible mask, its pixel
/// footprint, and what it rests on or sits in.
pub fn visible_inventory(obs: &Observation) -> DescriptorPayload {
    let visible_objects = obs
        .objects
        .iter()
        .filter_map(|o| {
            let mask = obs.masks.get(&o.id)?;
            let (cu, cv) = mask.centroid().ok()?;
            let b = mask_bbox(mask)?;
            let contained_by = obs
                .objects
                .iter()
                .find(|s| {
                    s.id != o.id
                        && s.is_container()
                        && s.footprint_contains(o.pose.x, o.pose.y)
                        && (o.pose.z - s.floor_z()).abs() <= Z_TOLERANCE
                })
                .map(|s| s.id.clone());
            let supported_by = obs
                .objects
                .iter()
                .find(|s| s.id != o.id && o.rests_on(s))
                .map(|s| s.id.clone());
            Some(VisibleObject {
                id: o.id.clone(),
                label: o.label.clone(),
                color: o.color.clone(),
                geometry_class: o.geometry_class,
                size_class: size_class(o.size).into(),
                centroid_px: [cu, cv],
                bbox_px: b.as_array(),
                supported_by,
                contained_by,
            })
        })
        .collect();
    DescriptorPayload {
        image_width: obs.width(),
        image_height: obs.height(),
        visible_objects,
        feedback: None,
    }
}

pub fn describe(
    models: &Models,
    obs: &Observation,
    feedback: Option<Feedback>,
) -> Result<(SceneGraph, ModelCall), AgentError> {
    let payload = DescriptorPayload {
        feedback,
        ..visible_inventory(obs)
    };
    let (reply, call): (DescriptorReply, _) =
        models.call(Role::Descriptor, &payload, models.image_for(obs))?;
    let graph = SceneGraph::from_parts(reply.nodes, reply.edges)
        .map_err(|e| AgentError::Descriptor(e.to_string()))?;
    Ok((graph, call))
}

/// Labels the perceptor selected for one subtask.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PerceptionTargets {
    pub object_of_interest: String,
    pub target: Option<String>,
    pub not_object_of_interest: Vec<String>,
    pub all_objects: Vec<String>,
    pub grasp_strategy: Option<GeometryClass>,
}

impl PerceptionTargets {
    /// Labels to ground, interest and target first.
    pub fn query_labels(&self) -> Vec<String> {
        let mut labels = vec![self.object_of_interest.clone()];
        labels.extend(self.target.iter().cloned());
        labels.extend(self.all_objects.iter().cloned());
        labels
    }
}

pub fn perceive(
    models: &Models,
    subtask: &AtomicInstruction,
    graph: &SceneGraph,
    feedback: Option<Feedback>,
) -> Result<(PerceptionTargets, ModelCall), AgentError> {
    let scene_objects = graph
        .nodes()
        .iter()
        .map(|n| NodeView {
            id: n.id.clone(),
            label: n.label.clone(),
            geometry_class: n.geometry_class,
        })
        .collect();
    let payload = PerceptorPayload {
        subtask: subtask.clone(),
        scene_objects,
        feedback,
    };
    let (reply, call): (PerceptorReply, _) = models.call(Role::Perceptor, &payload, None)?;
    let interest = graph
        .node_by_label(&reply.object_of_interest)
        .ok_or_else(|| {
            AgentError::PerceptionMiss(format!(
                "{:?} is not in the scene",
                reply.object_of_interest
            ))
        })?
        .label
        .clone();
    let target = match &reply.target {
        Some(t) => Some(
            graph
                .node_by_label(t)
                .ok_or_else(|| {
                    AgentError::PerceptionMiss(format!("target {t:?} is not in the scene"))
                })?
                .label
                .clone(),
        ),
        None => None,
    };
    if reply
        .not_object_of_interest
        .iter()
        .any(|l| l.eq_ignore_ascii_case(&interest))
    {
        return Err(AgentError::Schema {
            role: Role::Perceptor,
            message: "object of interest also listed as not of interest".into(),
        });
    }
    let all_objects = if reply.all_objects.is_empty() {
        graph.nodes().iter().map(|n| n.label.clone()).collect()
    } else {
        reply.all_objects
    };
    let targets = PerceptionTargets {
        object_of_interest: interest,
        target,
        not_object_of_interest: reply.not_object_of_interest,
        all_objects,
        grasp_strategy: reply.grasp_strategy,
    };
    Ok((targets, call))
}

pub struct Grounding {
    pub fused: Vec<Detection>,
    pub per_source: Vec<Vec<Detection>>,
    pub faults: Vec<ProviderFault>,
}

/// Localizes the perceptor's labels with every provider and fuses the
/// results. Fails when the object of interest (or target) is not found.
pub fn ground(
    providers: &[Box<dyn DetectionProvider>],
    obs: &Observation,
    targets: &PerceptionTargets,
    graph: &SceneGraph,
    nonce: u64,
) -> Result<Grounding, AgentError> {
    let (per_source, faults) = detect_all(providers, &targets.query_labels(), obs, nonce)
        .map_err(|e| AgentError::Grounding(e.to_string()))?;
    let fused = fuse_detections(&per_source, Some(graph), (obs.width(), obs.height()));
    for label in std::iter::once(&targets.object_of_interest).chain(targets.target.iter()) {
        if !fused.iter().any(|d| d.label.eq_ignore_ascii_case(label)) {
            return Err(AgentError::Grounding(format!(
                "no detections for {label:?}"
            )));
        }
    }
    Ok(Grounding {
        fused,
        per_source,
        faults,
    })
}

fn geometry_stage(e: &GeometryError) -> Stage {
    match e {
        // The chosen grasp strategy does not fit the shape.
        GeometryError::RayMiss(_) | GeometryError::GraspOffMask { .. } => Stage::Perceptor,
        _ => Stage::Projector,
    }
}

/// Minimum IoU between a detection and the mask it selects.
pub const MASK_MATCH_IOU: f64 = 0.3;

/// Whether a projected label is the object to grasp or the place target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectRole {
    Interest,
    Target,
}

/// Segments one grounded label (the rendered mask best matching its box),
/// extracts a verified grasp pixel and lifts it to 3D. The reference centre
/// is the mask centroid lifted at the grasp depth.
#[allow(clippy::too_many_arguments)]
pub fn project_label(
    obs: &Observation,
    camera: &CameraModel,
    fused: &[Detection],
    label: &str,
    role: ProjectRole,
    strategy: Option<GeometryClass>,
    graph: &SceneGraph,
    seed: u64,
) -> Result<(GraspPoint2D, GraspPoint3D), AgentError> {
    let node = graph
        .node_by_label(label)
        .ok_or_else(|| AgentError::Projection {
            stage: Stage::Perceptor,
            message: format!("{label:?} not in graph"),
        })?;
    let det = fused
        .iter()
        .find(|d| d.label.eq_ignore_ascii_case(label))
        .ok_or_else(|| AgentError::Projection {
            stage: Stage::Grounder,
            message: format!("{label:?} not grounded"),
        })?;
    let mask = obs
        .masks
        .values()
        .filter_map(|m| mask_bbox(m).map(|b| (b.iou(&det.bbox), m)))
        .filter(|(iou, _)| *iou >= MASK_MATCH_IOU)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, m)| m)
        .ok_or_else(|| AgentError::Projection {
            stage: Stage::Projector,
            message: format!("no segment matches the box for {label:?}"),
        })?;
    let class = strategy.unwrap_or(node.geometry_class);
    let err = |e: GeometryError| AgentError::Projection {
        stage: geometry_stage(&e),
        message: format!("{label}: {e}"),
    };
    let mg = match grasp_point_2d(mask, class, seed) {
        // A support or container only has to supply its centre; when the
        // visible part is a ring around something resting on it, fall back
        // to the boundary sweep.
        Err(GeometryError::GraspOffMask { .. }) if role == ProjectRole::Target => {
            grasp_point_2d(mask, GeometryClass::Rimmed, seed).map_err(err)?
        }
        other => other.map_err(err)?,
    };
    let gp = GraspPoint2D {
        u: mg.u,
        v: mg.v,
        object_id: node.id.clone(),
        on_mask: true,
    };
    let mut gp3 = grasp_point_3d(&gp, &obs.depth, camera).map_err(err)?;
    let z_axial = camera.to_camera(gp3.position()).z;
    let (cu, cv) = mask.centroid().map_err(err)?;
    gp3.center = camera.backproject(cu, cv, z_axial).map_err(err)?;
    Ok((gp, gp3))
}

/// Projects the object of interest (with the perceptor's grasp strategy)
/// and the target, if any.
pub fn project(
    obs: &Observation,
    camera: &CameraModel,
    fused: &[Detection],
    targets: &PerceptionTargets,
    graph: &SceneGraph,
    seed: u64,
) -> Result<(Vec<GraspPoint2D>, Vec<GraspPoint3D>), AgentError> {
    let mut g2 = Vec::new();
    let mut g3 = Vec::new();
    let (a2, a3) = project_label(
        obs,
        camera,
        fused,
        &targets.object_of_interest,
        ProjectRole::Interest,
        targets.grasp_strategy,
        graph,
        seed,
    )?;
    g2.push(a2);
    g3.push(a3);
    if let Some(t) = &targets.target {
        let (b2, b3) = project_label(
            obs,
            camera,
            fused,
            t,
            ProjectRole::Target,
            None,
            graph,
            seed.wrapping_add(1),
        )?;
        g2.push(b2);
        g3.push(b3);
    }
    Ok((g2, g3))
}

/// Simulator metadata for every object, used by the stacking height rule.
pub fn object_catalog(objects: &[ObjectState]) -> Vec<ObjectMeta> {
    objects
        .iter()
        .map(|o| ObjectMeta {
            id: o.id.clone(),
            label: o.label.clone(),
            height: o.height(),
            floor_offset: o.wall(),
            is_container: o.is_container(),
        })
        .collect()
}

fn meta_for<'a>(
    catalog: &'a [ObjectMeta],
    graph: &SceneGraph,
    node_id: &str,
) -> Option<&'a ObjectMeta> {
    let label = graph.node(node_id).map(|n| n.label.as_str());
    catalog
        .iter()
        .find(|m| label.is_some_and(|l| m.label.eq_ignore_ascii_case(l)))
        .or_else(|| catalog.iter().find(|m| m.id == node_id))
}

/// Turns the thinker's semantic choice into poses. Pick is the object's grasp
/// point; place keeps the grasp offset from the object's centre, lands on the
/// target centre (plus any offset), and sits at support height plus object
/// height.
pub fn plan_action(
    subtask: &AtomicInstruction,
    reply: &ThinkerReply,
    grasps: &[GraspPoint3D],
    catalog: &[ObjectMeta],
    graph: &SceneGraph,
) -> Result<ActionPlan, AgentError> {
    let terr = |m: String| AgentError::Thinker(m);
    let grasp = |id: &str| {
        grasps
            .iter()
            .find(|g| g.object_id == id)
            .ok_or_else(|| terr(format!("missing grasp point for {id:?}")))
    };
    let pose = |g: &GraspPoint3D, yaw: f64| Pose::new(g.x, g.y, g.z, yaw);
    let plan = |pick: Pose, place: Pose| ActionPlan {
        subtask_id: subtask.id.clone(),
        primitive: subtask.verb,
        pick_pose: Pose {
            yaw: wrap_angle(pick.yaw),
            ..pick
        },
        place_pose: Pose {
            yaw: wrap_angle(place.yaw),
            ..place
        },
    };
    let [ox, oy] = reply.offset;
    let yaw = reply.yaw_deg.to_radians();
    if !(ox.is_finite() && oy.is_finite() && yaw.is_finite()) {
        return Err(terr("non-finite offset or yaw".into()));
    }
    match subtask.verb {
        Verb::PickPlace | Verb::Push => {
            let pick_id = reply
                .pick
                .as_deref()
                .ok_or_else(|| terr("no object to pick".into()))?;
            let g = grasp(pick_id)?;
            let m = meta_for(catalog, graph, pick_id)
                .ok_or_else(|| terr(format!("no metadata for {pick_id:?}")))?;
            let (gx, gy) = (g.x - g.center[0], g.y - g.center[1]);
            let (tx, ty, support) = match reply
                .place
                .as_ref()
                .ok_or_else(|| terr("no place target".into()))?
            {
                PlaceTarget::Position(p) => {
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(terr("non-finite place position".into()));
                    }
                    (p[0], p[1], p[2])
                }
                PlaceTarget::Object(tid) => {
                    let t = grasp(tid)?;
                    let tm = meta_for(catalog, graph, tid)
                        .ok_or_else(|| terr(format!("no metadata for {tid:?}")))?;
                    let support = match reply.relation.unwrap_or_else(|| subtask.placement()) {
                        Placement::OnTopOf => t.center[2],
                        Placement::Inside => t.center[2] - tm.height + tm.floor_offset,
                    };
                    (t.center[0], t.center[1], support)
                }
            };
            let (px, py) = (tx + ox + gx, ty + oy + gy);
            if subtask.verb == Verb::Push {
                return Ok(plan(pose(g, g.yaw), Pose::new(px, py, g.z, g.yaw)));
            }
            Ok(plan(
                pose(g, g.yaw),
                Pose::new(px, py, support + m.height, g.yaw + yaw),
            ))
        }
        Verb::Rotate => {
            let id = reply
                .pick
                .as_deref()
                .ok_or_else(|| terr("no object to rotate".into()))?;
            let g = grasp(id)?;
            let p = pose(g, yaw);
            Ok(plan(p, p))
        }
        Verb::Move | Verb::Reach => {
            let p = match reply
                .place
                .as_ref()
                .ok_or_else(|| terr("no destination".into()))?
            {
                PlaceTarget::Position(p) => Pose::new(p[0] + ox, p[1] + oy, p[2], yaw),
                PlaceTarget::Object(tid) => {
                    let t = grasp(tid)?;
                    Pose::new(t.center[0] + ox, t.center[1] + oy, t.center[2], yaw)
                }
            };
            Ok(plan(p, p))
        }
    }
}

/// Every object reference tag must name a scene-graph node.
pub fn check_memory_tags(
    subtask: &AtomicInstruction,
    graph: &SceneGraph,
) -> Result<(), AgentError> {
    for t in subtask.tags_of(MemoryTagKind::ObjectRef) {
        if graph.resolve(&t.value).is_none() {
            return Err(AgentError::Thinker(format!(
                "memory tag {}={:?} does not resolve",
                t.key, t.value
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn think(
    models: &Models,
    subtask: &AtomicInstruction,
    targets: &PerceptionTargets,
    grasps: &[GraspPoint3D],
    graph: &SceneGraph,
    catalog: &[ObjectMeta],
    feedback: Option<Feedback>,
) -> Result<(ThinkerReply, ModelCall), AgentError> {
    check_memory_tags(subtask, graph)?;
    let interest_id = graph
        .node_by_label(&targets.object_of_interest)
        .map(|n| n.id.clone())
        .unwrap_or_default();
    let relations = graph.relations_of(&interest_id).cloned().collect();
    let object_metadata = graph
        .nodes()
        .iter()
        .filter_map(|n| {
            meta_for(catalog, graph, &n.id).map(|m| ObjectMeta {
                id: n.id.clone(),
                ..m.clone()
            })
        })
        .collect();
    let payload = ThinkerPayload {
        subtask: subtask.clone(),
        object_of_interest: targets.object_of_interest.clone(),
        target: targets.target.clone(),
        grasp_points: grasps.to_vec(),
        relations,
        object_metadata,
        feedback,
    };
    models.call(Role::Thinker, &payload, None)
}

#[allow(clippy::too_many_arguments)]
pub fn reflect(
    models: &Models,
    before: &Observation,
    after: &Observation,
    subtask: &AtomicInstruction,
    targets: Option<&PerceptionTargets>,
    actuation: &ActuationResult,
    tolerance: f64,
) -> Result<(ReflectionResult, ModelCall), AgentError> {
    let payload = ReflectorPayload {
        subtask: subtask.clone(),
        object_of_interest: targets
            .map(|t| t.object_of_interest.clone())
            .unwrap_or_else(|| subtask.object_query.clone()),
        target: targets.and_then(|t| t.target.clone()),
        before: before.objects.clone(),
        after: after.objects.clone(),
        gripper_after: after.gripper,
        actuation: actuation.clone(),
        tolerance,
    };
    let (reply, call): (ReflectorReply, _) =
        models.call(Role::Reflector, &payload, models.image_for(after))?;
    let result = ReflectionResult::new(
        subtask.id.clone(),
        reply.verdict,
        reply.failing_stage,
        reply.explanation,
    )
    .map_err(|e| AgentError::Schema {
        role: Role::Reflector,
        message: e.to_string(),
    })?;
    Ok((result, call))
}

/// One call that plans every action of the task up front.
pub fn plan_single_agent(
    models: &Models,
    prompt: &str,
    obs: &Observation,
) -> Result<(Vec<ActionCommand>, ModelCall), AgentError> {
    let payload = SingleAgentPayload {
        prompt: prompt.into(),
        objects: obs.objects.clone(),
    };
    let (reply, call): (SingleAgentReply, _) =
        models.call(Role::SingleAgent, &payload, models.image_for(obs))?;
    let schema = |m: String| AgentError::Schema {
        role: Role::SingleAgent,
        message: m,
    };
    let cmds = reply
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let verb: Verb = a
                .verb
                .parse()
                .map_err(|e: crate::state::StateError| schema(e.to_string()))?;
            if a.pick.iter().chain(a.place.iter()).any(|v| !v.is_finite()) {
                return Err(schema(format!("action {i} has non-finite poses")));
            }
            let p = |v: [f64; 4]| Pose::new(v[0], v[1], v[2], wrap_angle(v[3]));
            Ok(ActionCommand {
                subtask_id: subtask_id(i),
                primitive: verb,
                pick: p(a.pick),
                place: p(a.place),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if cmds.is_empty() {
        return Err(schema("no actions".into()));
    }
    Ok((cmds, call))
}
