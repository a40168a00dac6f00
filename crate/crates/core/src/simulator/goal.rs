//! Ground-truth predicates over world state.

use super::scenario::GoalAtom;
use super::world::{ObjectState, Z_TOLERANCE};
use super::SimError;
use crate::state::{wrap_angle, AtomicInstruction, Placement, Verb};

/// Yaw tolerance for rotate subtasks.
pub const YAW_TOLERANCE: f64 = 2.0 * std::f64::consts::PI / 180.0;

fn find<'a>(objects: &'a [ObjectState], id: &str) -> Result<&'a ObjectState, SimError> {
    objects
        .iter()
        .find(|o| o.id == id)
        .ok_or_else(|| SimError::Goal(format!("unknown object {id:?}")))
}

fn find_label<'a>(objects: &'a [ObjectState], query: &str) -> Result<&'a ObjectState, SimError> {
    let q = query.trim().to_lowercase();
    objects
        .iter()
        .find(|o| o.label.to_lowercase() == q || o.id == query)
        .ok_or_else(|| SimError::Goal(format!("no object matches {query:?}")))
}

/// `a` is centred on `b` within `tol` and rests on its top surface.
pub fn on_top_of(a: &ObjectState, b: &ObjectState, tol: f64) -> bool {
    a.pose.planar_distance(&b.pose) <= tol && (a.pose.z - b.top_z()).abs() <= Z_TOLERANCE
}

/// `a` sits on the floor of container `b` with its footprint inside the wall
/// (up to `tol`).
pub fn inside(a: &ObjectState, b: &ObjectState, tol: f64) -> bool {
    b.is_container()
        && a.pose.planar_distance(&b.pose) + a.bounding_radius() <= b.inner_radius() + tol
        && (a.pose.z - b.floor_z()).abs() <= Z_TOLERANCE
}

pub fn at_position(a: &ObjectState, p: [f64; 3], tol: f64) -> bool {
    (a.pose.x - p[0]).hypot(a.pose.y - p[1]) <= tol && (a.pose.z - p[2]).abs() <= Z_TOLERANCE
}

pub fn atom_holds(objects: &[ObjectState], atom: &GoalAtom, tol: f64) -> Result<bool, SimError> {
    Ok(match atom {
        GoalAtom::OnTopOf(a, b) => on_top_of(find(objects, a)?, find(objects, b)?, tol),
        GoalAtom::Inside(a, b) => inside(find(objects, a)?, find(objects, b)?, tol),
        GoalAtom::AtPosition { object, position } => {
            at_position(find(objects, object)?, *position, tol)
        }
    })
}

/// Conjunction of all atoms; unknown ids are an error.
pub fn check_goal(objects: &[ObjectState], goal: &[GoalAtom], tol: f64) -> Result<bool, SimError> {
    let mut all = true;
    for atom in goal {
        all &= atom_holds(objects, atom, tol)?;
    }
    Ok(all)
}

/// Whether the world satisfies the intent of one subtask. Shared by the
/// environment's ground truth and the oracle reflector.
pub fn evaluate_subtask(
    instr: &AtomicInstruction,
    objects: &[ObjectState],
    gripper: [f64; 3],
    tol: f64,
) -> Result<bool, SimError> {
    match instr.verb {
        Verb::PickPlace => {
            let a = find_label(objects, &instr.object_query)?;
            if let Some(p) = instr.position_ref() {
                return Ok(at_position(a, p, tol));
            }
            let b = find_label(objects, &instr.target_query)?;
            Ok(match instr.placement() {
                Placement::OnTopOf => on_top_of(a, b, tol),
                Placement::Inside => inside(a, b, tol),
            })
        }
        Verb::Push => {
            let a = find_label(objects, &instr.object_query)?;
            let p = instr
                .position_ref()
                .ok_or_else(|| SimError::Goal("push needs a position reference".into()))?;
            Ok((a.pose.x - p[0]).hypot(a.pose.y - p[1]) <= tol)
        }
        Verb::Move | Verb::Reach => {
            let p = match instr.position_ref() {
                Some(p) => p,
                None => {
                    let query = if instr.target_query.is_empty() {
                        &instr.object_query
                    } else {
                        &instr.target_query
                    };
                    let t = find_label(objects, query)?;
                    [t.pose.x, t.pose.y, t.top_z()]
                }
            };
            let d = [gripper[0] - p[0], gripper[1] - p[1], gripper[2] - p[2]];
            Ok((d[0] * d[0] + d[1] * d[1]).sqrt() <= tol && d[2].abs() <= tol)
        }
        Verb::Rotate => {
            let a = find_label(objects, &instr.object_query)?;
            let target = instr
                .yaw_target()
                .ok_or_else(|| SimError::Goal("rotate needs yaw_deg".into()))?;
            Ok(wrap_angle(a.pose.yaw - target).abs() <= YAW_TOLERANCE)
        }
    }
}
