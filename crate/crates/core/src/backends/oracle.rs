//! Deterministic rule-based stand-in for a model server. It knows the
//! scenario's goal, so it can decompose the prompt and pick container slots;
//! every other answer is derived from the request payload alone.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{Backend, BackendError, BackendKind};
use crate::agents::schema::*;
use crate::agents::{AgentRequest, AgentResponse, Role};
use crate::simulator::{evaluate_subtask, GoalAtom, ObjectState, Scenario};
use crate::state::{
    GeometryClass, MemoryTag, MemoryTagKind, ObjectNode, Placement, Relation, RelationKind, Stage,
    Verb, Verdict,
};

/// Pixel margin before two centroids count as left/right or above/below.
pub const RELATION_MARGIN_PX: f64 = 3.0;
/// Spacing between neighbouring slots inside a shared container.
const SLOT_SPACING: f64 = 0.085;

pub struct OracleBackend {
    scenario: Scenario,
}

fn fmt_pos(p: [f64; 3]) -> String {
    format!("({}, {}, {})", p[0], p[1], p[2])
}

impl OracleBackend {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn label_of(&self, id: &str) -> String {
        self.scenario
            .object(id)
            .map(|o| o.label.clone())
            .unwrap_or_else(|| id.to_string())
    }

    /// Answers one request; errors describe unreadable payloads.
    pub fn respond(&self, role: Role, payload: &Value) -> Result<String, String> {
        match role {
            Role::Decomposer => self.reply(payload, |p: DecomposerPayload| self.decompose(&p)),
            Role::Descriptor => self.reply(payload, |p: DescriptorPayload| describe(&p)),
            Role::Perceptor => self.reply(payload, |p: PerceptorPayload| perceive(&p)),
            Role::Thinker => self.reply(payload, |p: ThinkerPayload| self.think(&p)),
            Role::Reflector => self.reply(payload, |p: ReflectorPayload| reflect(&p)),
            Role::SingleAgent => self.reply(payload, |p: SingleAgentPayload| self.single_agent(&p)),
        }
    }

    fn reply<P: DeserializeOwned, R: Serialize>(
        &self,
        payload: &Value,
        f: impl FnOnce(P) -> R,
    ) -> Result<String, String> {
        let p: P = serde_json::from_value(payload.clone()).map_err(|e| e.to_string())?;
        Ok(serde_json::to_string(&f(p)).expect("reply serializes"))
    }

    fn decompose(&self, _p: &DecomposerPayload) -> DecomposerReply {
        let tag = |key: &str, kind, value: String| {
            MemoryTag::new(key, kind, value).expect("oracle tags are valid")
        };
        let subtasks = self
            .scenario
            .goal
            .iter()
            .map(|atom| match atom {
                GoalAtom::OnTopOf(a, b) | GoalAtom::Inside(a, b) => {
                    let rel = if matches!(atom, GoalAtom::Inside(..)) {
                        "inside"
                    } else {
                        "on_top_of"
                    };
                    let (la, lb) = (self.label_of(a), self.label_of(b));
                    PlannedSubtask {
                        verb: Verb::PickPlace.as_str().into(),
                        object: la.clone(),
                        target: lb.clone(),
                        memory_tags: vec![
                            tag("object", MemoryTagKind::ObjectRef, a.clone()),
                            tag("target", MemoryTagKind::ObjectRef, b.clone()),
                            tag("relation", MemoryTagKind::ContextRef, rel.into()),
                        ],
                        text: format!(
                            "pick the {la} and place it {} the {lb}",
                            rel.replace('_', " ")
                        ),
                    }
                }
                GoalAtom::AtPosition { object, position } => {
                    let la = self.label_of(object);
                    PlannedSubtask {
                        verb: Verb::PickPlace.as_str().into(),
                        object: la.clone(),
                        target: String::new(),
                        memory_tags: vec![
                            tag("object", MemoryTagKind::ObjectRef, object.clone()),
                            tag("position", MemoryTagKind::PositionRef, fmt_pos(*position)),
                        ],
                        text: format!("move the {la} to {}", fmt_pos(*position)),
                    }
                }
            })
            .collect();
        DecomposerReply { subtasks }
    }

    /// Slot offset for `object` when several goal atoms share its container.
    fn slot_offset(&self, object_id: &str) -> [f64; 2] {
        let Some(container) = self.scenario.goal.iter().find_map(|g| match g {
            GoalAtom::Inside(a, b) if a == object_id => Some(b),
            _ => None,
        }) else {
            return [0.0, 0.0];
        };
        let sharing: Vec<&str> = self
            .scenario
            .goal
            .iter()
            .filter_map(|g| match g {
                GoalAtom::Inside(a, b) if b == container => Some(a.as_str()),
                _ => None,
            })
            .collect();
        let n = sharing.len();
        let k = sharing.iter().position(|a| *a == object_id).unwrap_or(0);
        if n < 2 {
            return [0.0, 0.0];
        }
        [(k as f64 - (n as f64 - 1.0) / 2.0) * SLOT_SPACING, 0.0]
    }

    fn think(&self, p: &ThinkerPayload) -> ThinkerReply {
        let st = &p.subtask;
        let interest = p
            .grasp_points
            .iter()
            .find(|g| label_matches(&p.object_metadata, &g.object_id, &p.object_of_interest));
        let pick = interest.map(|g| g.object_id.clone());
        let target_id = p.target.as_ref().and_then(|t| {
            p.object_metadata
                .iter()
                .find(|m| m.label.eq_ignore_ascii_case(t))
                .map(|m| m.id.clone())
        });
        let place = match st.verb {
            Verb::Rotate => None,
            _ => match st.position_ref() {
                Some(pos) => Some(PlaceTarget::Position(pos)),
                None => target_id.clone().map(PlaceTarget::Object),
            },
        };
        let offset = match (&pick, st.placement()) {
            (Some(id), Placement::Inside) => self.slot_offset(id),
            _ => [0.0, 0.0],
        };
        ThinkerReply {
            pick,
            place,
            relation: (st.verb == Verb::PickPlace).then(|| st.placement()),
            offset,
            yaw_deg: st.yaw_target().map(f64::to_degrees).unwrap_or(0.0),
        }
    }

    /// Open-loop plan for the whole goal from the initial readout.
    fn single_agent(&self, p: &SingleAgentPayload) -> SingleAgentReply {
        let mut planned: BTreeMap<String, ObjectState> = p
            .objects
            .iter()
            .map(|o| (o.id.clone(), o.clone()))
            .collect();
        let mut actions = Vec::new();
        for atom in &self.scenario.goal {
            let id = atom.object();
            let Some(a) = planned.get(id).cloned() else {
                continue;
            };
            let pick = [a.pose.x, a.pose.y, a.top_z(), a.pose.yaw];
            let (x, y, base) = match atom {
                GoalAtom::OnTopOf(_, b) => match planned.get(b) {
                    Some(b) => (b.pose.x, b.pose.y, b.top_z()),
                    None => continue,
                },
                GoalAtom::Inside(_, b) => match planned.get(b) {
                    Some(b) => {
                        let off = self.slot_offset(id);
                        (b.pose.x + off[0], b.pose.y + off[1], b.floor_z())
                    }
                    None => continue,
                },
                GoalAtom::AtPosition { position, .. } => (position[0], position[1], position[2]),
            };
            actions.push(PlannedAction {
                verb: Verb::PickPlace.as_str().into(),
                pick,
                place: [x, y, base + a.height(), a.pose.yaw],
            });
            let moved = planned.get_mut(id).expect("present");
            moved.pose.x = x;
            moved.pose.y = y;
            moved.pose.z = base;
        }
        SingleAgentReply { actions }
    }
}

fn label_matches(meta: &[ObjectMeta], id: &str, label: &str) -> bool {
    meta.iter()
        .any(|m| m.id == id && m.label.eq_ignore_ascii_case(label))
}

/// Scene graph from what is visible: left/right and above/below from mask
/// centroids (with a small margin), near from centroid distance, support and
/// containment from contact.
pub fn describe(p: &DescriptorPayload) -> DescriptorReply {
    let diag = (p.image_width as f64).hypot(p.image_height as f64);
    let nodes = p
        .visible_objects
        .iter()
        .map(|o| ObjectNode {
            id: o.id.clone(),
            label: o.label.clone(),
            color: o.color.clone(),
            size_class: o.size_class.clone(),
            geometry_class: o.geometry_class,
        })
        .collect();
    let mut edges = Vec::new();
    let rel = |s: &str, r, o: &str| Relation {
        subject_id: s.into(),
        relation: r,
        object_id: o.into(),
    };
    let objs = &p.visible_objects;
    for (i, a) in objs.iter().enumerate() {
        for b in &objs[i + 1..] {
            let (du, dv) = (
                b.centroid_px[0] - a.centroid_px[0],
                b.centroid_px[1] - a.centroid_px[1],
            );
            if du > RELATION_MARGIN_PX {
                edges.push(rel(&a.id, RelationKind::LeftOf, &b.id));
            } else if du < -RELATION_MARGIN_PX {
                edges.push(rel(&b.id, RelationKind::LeftOf, &a.id));
            }
            if dv > RELATION_MARGIN_PX {
                edges.push(rel(&a.id, RelationKind::Above, &b.id));
            } else if dv < -RELATION_MARGIN_PX {
                edges.push(rel(&b.id, RelationKind::Above, &a.id));
            }
            if du.hypot(dv) < 0.2 * diag {
                edges.push(rel(&a.id, RelationKind::Near, &b.id));
            }
        }
    }
    for o in objs {
        if let Some(s) = o
            .supported_by
            .as_ref()
            .filter(|s| objs.iter().any(|x| &x.id == *s))
        {
            edges.push(rel(&o.id, RelationKind::OnTopOf, s));
        }
        if let Some(c) = o
            .contained_by
            .as_ref()
            .filter(|c| objs.iter().any(|x| &x.id == *c))
        {
            edges.push(rel(&o.id, RelationKind::Inside, c));
        }
    }
    DescriptorReply { nodes, edges }
}

/// Picks the target labels from the graph; after a perceptor-charged failure
/// it switches to the boundary-seeking grasp strategy.
pub fn perceive(p: &PerceptorPayload) -> PerceptorReply {
    let find = |q: &str| {
        p.scene_objects
            .iter()
            .find(|n| n.label.eq_ignore_ascii_case(q.trim()) || n.id == q)
    };
    let interest = find(&p.subtask.object_query)
        .map(|n| n.label.clone())
        .unwrap_or_else(|| p.subtask.object_query.clone());
    let target = if p.subtask.target_query.trim().is_empty() {
        None
    } else {
        Some(
            find(&p.subtask.target_query)
                .map(|n| n.label.clone())
                .unwrap_or_else(|| p.subtask.target_query.clone()),
        )
    };
    let all: Vec<String> = p.scene_objects.iter().map(|n| n.label.clone()).collect();
    let others = all
        .iter()
        .filter(|l| {
            !l.eq_ignore_ascii_case(&interest)
                && target.as_ref().is_none_or(|t| !l.eq_ignore_ascii_case(t))
        })
        .cloned()
        .collect();
    let switch = p
        .feedback
        .as_ref()
        .is_some_and(|f| f.failing_stage == Stage::Perceptor);
    PerceptorReply {
        object_of_interest: interest,
        target,
        not_object_of_interest: others,
        all_objects: all,
        grasp_strategy: switch.then_some(GeometryClass::Rimmed),
    }
}

/// Verdict from the after-state; failures are attributed by comparing the
/// before and after readouts.
pub fn reflect(p: &ReflectorPayload) -> ReflectorReply {
    let gt = evaluate_subtask(&p.subtask, &p.after, p.gripper_after, p.tolerance);
    match gt {
        Ok(true) => {
            return ReflectorReply {
                verdict: Verdict::Success,
                failing_stage: Stage::None,
                explanation: String::new(),
            }
        }
        Err(e) => {
            return ReflectorReply {
                verdict: Verdict::Failure,
                failing_stage: Stage::Perceptor,
                explanation: format!("cannot evaluate subtask: {e}"),
            }
        }
        Ok(false) => {}
    }
    let fail = |stage, msg: String| ReflectorReply {
        verdict: Verdict::Failure,
        failing_stage: stage,
        explanation: msg,
    };
    let find = |objs: &[ObjectState], q: &str| {
        objs.iter()
            .find(|o| o.label.eq_ignore_ascii_case(q.trim()) || o.id == q)
            .cloned()
    };
    let a = &p.actuation;
    if !a.executed {
        return fail(
            Stage::Actor,
            "the gripper closed on nothing; no object was moved".into(),
        );
    }
    if a.dropped {
        return fail(
            Stage::Actor,
            "the object slipped out of the gripper during transport".into(),
        );
    }
    let intended = find(&p.after, &p.subtask.object_query);
    let intended_id = intended.as_ref().map(|o| o.id.clone());
    if a.moved_object.is_some() && a.moved_object != intended_id {
        return fail(
            Stage::Grounder,
            format!(
                "moved {} instead of the {}",
                a.moved_object.as_deref().unwrap_or("?"),
                p.subtask.object_query
            ),
        );
    }
    let (Some(after), Some(before)) = (intended, find(&p.before, &p.subtask.object_query)) else {
        return fail(
            Stage::Perceptor,
            format!("the {} is not in the scene", p.subtask.object_query),
        );
    };
    if after.pose == before.pose && p.subtask.verb != Verb::Move && p.subtask.verb != Verb::Reach {
        return fail(
            Stage::Actor,
            format!("the {} did not move", p.subtask.object_query),
        );
    }
    if p.subtask.verb == Verb::PickPlace && p.subtask.position_ref().is_none() {
        if let Some(target) = find(&p.after, &p.subtask.target_query) {
            let wrong_support = p.after.iter().find(|s| {
                s.id != after.id
                    && s.id != target.id
                    && (after.rests_on(s)
                        || (s.is_container()
                            && s.footprint_contains(after.pose.x, after.pose.y)
                            && (after.pose.z - s.floor_z()).abs() < 2e-3))
            });
            if let Some(s) = wrong_support {
                return fail(
                    Stage::Grounder,
                    format!(
                        "the {} was placed on the {} instead of the {}",
                        after.label, s.label, target.label
                    ),
                );
            }
            let d = after.pose.planar_distance(&target.pose);
            return fail(
                Stage::Thinker,
                format!(
                    "the {} ended {:.1} cm from the {} centre or at the wrong height",
                    after.label,
                    d * 100.0,
                    target.label
                ),
            );
        }
    }
    fail(
        Stage::Thinker,
        format!("the {} did not reach the commanded pose", after.label),
    )
}

impl Backend for OracleBackend {
    fn complete(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        let text = match self.respond(req.role, &req.user_payload) {
            Ok(t) => t,
            Err(e) => serde_json::json!({ "error": e }).to_string(),
        };
        Ok(AgentResponse::from_raw(text))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }
}
