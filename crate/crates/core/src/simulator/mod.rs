//! Deterministic 2.5D tabletop world: rendering, the actor API, seeded
//! failure injection and ground-truth checks.

mod detect;
mod goal;
mod scenario;
mod world;

pub use detect::{clamp_to_image, mask_bbox, mix_seed, oracle_detect, DetectorNoise};
pub use goal::{
    at_position, atom_holds, check_goal, evaluate_subtask, inside, on_top_of, YAW_TOLERANCE,
};
pub use scenario::{
    default_detectors, FailureInjection, GoalAtom, ImageSpec, ObjectSpec, Scenario,
    SimDetectorSpec, DEFAULT_TOLERANCE, WORKSPACE,
};
pub use world::{
    color_rgb, render, ObjectState, RayTable, Rendered, Shape, DEPTH_QUANTUM, PAD_HEIGHT,
    Z_TOLERANCE,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::raster::RgbRaster;
use crate::geometry::{BinaryMask, CameraModel, DepthMap};
use crate::state::{ActionPlan, ActuationResult, AtomicInstruction, Pose, SubtaskId, Verb};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("pose {0:?} is outside the workspace")]
    OutOfWorkspace([f64; 3]),
    #[error("goal: {0}")]
    Goal(String),
}

/// Gripper rest position.
pub const GRIPPER_HOME: [f64; 3] = [0.5, 0.0, 0.4];

/// Region where dropped objects come to rest.
const DROP_REGION: [[f64; 2]; 2] = [[0.2, 0.8], [-0.2, 0.2]];

/// One rendered frame plus the ground-truth readouts oracles need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rgb: RgbRaster,
    pub depth: DepthMap,
    pub masks: BTreeMap<String, BinaryMask>,
    pub step_index: u64,
    pub episode_seed: u64,
    pub objects: Vec<ObjectState>,
    pub gripper: [f64; 3],
}

impl Observation {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_by_label(&self, label: &str) -> Option<&ObjectState> {
        let want = label.trim().to_lowercase();
        self.objects.iter().find(|o| o.label.to_lowercase() == want)
    }
}

/// What the actor sends to the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCommand {
    pub subtask_id: SubtaskId,
    pub primitive: Verb,
    pub pick: Pose,
    pub place: Pose,
}

impl From<&ActionPlan> for ActionCommand {
    fn from(p: &ActionPlan) -> Self {
        Self {
            subtask_id: p.subtask_id.clone(),
            primitive: p.primitive,
            pick: p.pick_pose,
            place: p.place_pose,
        }
    }
}

/// The actor-facing API of a world.
pub trait Environment: Send {
    fn reset(&mut self) -> Observation;
    fn observe(&self) -> Observation;
    fn execute(&mut self, cmd: &ActionCommand) -> Result<(Observation, ActuationResult), SimError>;
    fn camera(&self) -> &CameraModel;
    /// Ground-truth evaluation of one subtask on the current world.
    fn subtask_satisfied(&self, instr: &AtomicInstruction) -> Result<bool, SimError>;
    fn check_goal(&self) -> Result<bool, SimError>;
    /// Goal tolerance δ in meters.
    fn tolerance(&self) -> f64 {
        DEFAULT_TOLERANCE
    }
}

pub struct Simulator {
    scenario: Scenario,
    camera: CameraModel,
    rays: Arc<RayTable>,
    episode_seed: u64,
    objects: Vec<ObjectState>,
    gripper: [f64; 3],
    step_index: u64,
    rng: ChaCha8Rng,
}

impl Simulator {
    /// Builds a world for one episode. The RNG stream depends on both the
    /// scenario seed and `episode_seed`.
    pub fn new(scenario: Scenario, episode_seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let camera = scenario.camera()?;
        let rays = Arc::new(RayTable::new(
            &camera,
            scenario.image.width,
            scenario.image.height,
        ));
        Ok(Self::with_rays(scenario, camera, rays, episode_seed))
    }

    /// Reuses a precomputed ray table; `rays` must match the scenario camera.
    pub fn with_rays(
        scenario: Scenario,
        camera: CameraModel,
        rays: Arc<RayTable>,
        episode_seed: u64,
    ) -> Self {
        let mut sim = Self {
            objects: Vec::new(),
            gripper: GRIPPER_HOME,
            step_index: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            scenario,
            camera,
            rays,
            episode_seed,
        };
        sim.reset();
        sim
    }

    pub fn rays(&self) -> Arc<RayTable> {
        self.rays.clone()
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn objects(&self) -> &[ObjectState] {
        &self.objects
    }

    pub fn gripper(&self) -> [f64; 3] {
        self.gripper
    }

    /// Overrides the world state directly; test helper for staged scenes.
    pub fn set_objects(&mut self, objects: Vec<ObjectState>) {
        self.objects = objects;
    }

    fn check_workspace(p: &Pose) -> Result<(), SimError> {
        let xyz = [p.x, p.y, p.z];
        let ok = xyz
            .iter()
            .zip(WORKSPACE.iter())
            .all(|(v, [lo, hi])| v.is_finite() && *v >= *lo && *v <= *hi)
            && p.yaw.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::OutOfWorkspace(xyz))
        }
    }

    /// Index of the highest object graspable at `(x, y)`.
    pub fn topmost_at(&self, x: f64, y: f64) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.graspable_at(x, y))
            .max_by(|(_, a), (_, b)| a.top_z().total_cmp(&b.top_z()))
            .map(|(i, _)| i)
    }

    fn random_free_pose(&mut self, idx: usize) -> Pose {
        let mut candidate = self.objects[idx].clone();
        let r = candidate.bounding_radius();
        for _ in 0..200 {
            let x = self
                .rng
                .random_range(DROP_REGION[0][0] + r..DROP_REGION[0][1] - r);
            let y = self
                .rng
                .random_range(DROP_REGION[1][0] + r..DROP_REGION[1][1] - r);
            let yaw = self
                .rng
                .random_range(-std::f64::consts::PI..std::f64::consts::PI);
            candidate.pose = Pose::new(x, y, 0.0, yaw);
            let clear = self
                .objects
                .iter()
                .enumerate()
                .all(|(j, o)| j == idx || !candidate.footprint_overlaps(o));
            if clear {
                break;
            }
        }
        candidate.pose
    }

    fn planar_noise(&mut self) -> (f64, f64) {
        let sigma = self.scenario.failure_injection.displacement_sigma;
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            (n.sample(&mut self.rng), n.sample(&mut self.rng))
        } else {
            (0.0, 0.0)
        }
    }

    fn pick_place(&mut self, cmd: &ActionCommand) -> ActuationResult {
        let mut res = ActuationResult {
            subtask_id: cmd.subtask_id.clone(),
            executed: false,
            dropped: false,
            final_object_pose: None,
            moved_object: None,
        };
        let Some(idx) = self.topmost_at(cmd.pick.x, cmd.pick.y) else {
            return res;
        };
        res.executed = true;
        res.moved_object = Some(self.objects[idx].id.clone());
        self.gripper = [cmd.place.x, cmd.place.y, cmd.place.z];
        let p_drop = self.scenario.failure_injection.p_drop;
        if p_drop > 0.0 && self.rng.random::<f64>() < p_drop {
            let pose = self.random_free_pose(idx);
            self.objects[idx].pose = pose;
            res.dropped = true;
            res.final_object_pose = Some(pose);
            return res;
        }
        let (nx, ny) = self.planar_noise();
        let obj = &mut self.objects[idx];
        let delta = cmd.place.yaw - cmd.pick.yaw;
        // Grasp offset relative to the object's reference point, carried
        // through the commanded rotation.
        let (ox, oy) = (obj.pose.x - cmd.pick.x, obj.pose.y - cmd.pick.y);
        let (s, c) = delta.sin_cos();
        let grasp_height = cmd.pick.z - obj.pose.z;
        let (gx, gy) = (cmd.place.x + nx, cmd.place.y + ny);
        obj.pose = Pose::new(
            gx + c * ox - s * oy,
            gy + s * ox + c * oy,
            cmd.place.z - grasp_height,
            crate::state::wrap_angle(obj.pose.yaw + delta),
        );
        res.final_object_pose = Some(Pose::new(gx, gy, cmd.place.z, cmd.place.yaw));
        res
    }

    fn push(&mut self, cmd: &ActionCommand) -> ActuationResult {
        let mut res = ActuationResult {
            subtask_id: cmd.subtask_id.clone(),
            executed: false,
            dropped: false,
            final_object_pose: None,
            moved_object: None,
        };
        let Some(idx) = self.topmost_at(cmd.pick.x, cmd.pick.y) else {
            return res;
        };
        let (nx, ny) = self.planar_noise();
        let obj = &mut self.objects[idx];
        obj.pose.x += cmd.place.x - cmd.pick.x + nx;
        obj.pose.y += cmd.place.y - cmd.pick.y + ny;
        self.gripper = [cmd.place.x + nx, cmd.place.y + ny, cmd.place.z];
        res.executed = true;
        res.moved_object = Some(obj.id.clone());
        res.final_object_pose = Some(obj.pose);
        res
    }

    fn rotate(&mut self, cmd: &ActionCommand) -> ActuationResult {
        let mut res = ActuationResult {
            subtask_id: cmd.subtask_id.clone(),
            executed: false,
            dropped: false,
            final_object_pose: None,
            moved_object: None,
        };
        let Some(idx) = self.topmost_at(cmd.pick.x, cmd.pick.y) else {
            return res;
        };
        let obj = &mut self.objects[idx];
        obj.pose.yaw = crate::state::wrap_angle(cmd.place.yaw);
        self.gripper = [cmd.pick.x, cmd.pick.y, cmd.pick.z];
        res.executed = true;
        res.moved_object = Some(obj.id.clone());
        res.final_object_pose = Some(obj.pose);
        res
    }

    pub fn render_world(&self) -> Observation {
        let r = render(&self.objects, &self.camera, &self.rays);
        Observation {
            rgb: r.rgb,
            depth: r.depth,
            masks: r.masks,
            step_index: self.step_index,
            episode_seed: self.episode_seed,
            objects: self.objects.clone(),
            gripper: self.gripper,
        }
    }
}

impl Environment for Simulator {
    fn reset(&mut self) -> Observation {
        self.objects = self.scenario.initial_objects();
        self.gripper = GRIPPER_HOME;
        self.step_index = 0;
        self.rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.scenario.seed, self.episode_seed]));
        self.render_world()
    }

    fn observe(&self) -> Observation {
        self.render_world()
    }

    fn execute(&mut self, cmd: &ActionCommand) -> Result<(Observation, ActuationResult), SimError> {
        Self::check_workspace(&cmd.pick)?;
        Self::check_workspace(&cmd.place)?;
        let res = match cmd.primitive {
            Verb::PickPlace => self.pick_place(cmd),
            Verb::Push => self.push(cmd),
            Verb::Rotate => self.rotate(cmd),
            Verb::Move | Verb::Reach => {
                self.gripper = [cmd.place.x, cmd.place.y, cmd.place.z];
                ActuationResult {
                    subtask_id: cmd.subtask_id.clone(),
                    executed: true,
                    dropped: false,
                    final_object_pose: None,
                    moved_object: None,
                }
            }
        };
        self.step_index += 1;
        Ok((self.render_world(), res))
    }

    fn camera(&self) -> &CameraModel {
        &self.camera
    }

    fn subtask_satisfied(&self, instr: &AtomicInstruction) -> Result<bool, SimError> {
        evaluate_subtask(instr, &self.objects, self.gripper, self.scenario.tolerance)
    }

    fn check_goal(&self) -> Result<bool, SimError> {
        check_goal(&self.objects, &self.scenario.goal, self.scenario.tolerance)
    }

    fn tolerance(&self) -> f64 {
        self.scenario.tolerance
    }
}
