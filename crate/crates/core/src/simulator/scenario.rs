use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detect::DetectorNoise;
use super::world::{ObjectState, Shape};
use super::SimError;
use crate::geometry::CameraModel;
use crate::state::{GeometryClass, Pose};

pub const DEFAULT_TOLERANCE: f64 = 0.01;

/// Table region the actor may command, `[x_min, x_max] × [y_min, y_max] × [z_min, z_max]`.
pub const WORKSPACE: [[f64; 2]; 3] = [[0.05, 0.95], [-0.4, 0.4], [-0.01, 0.6]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub color: String,
    pub shape: Shape,
    /// Characteristic size in meters (side length or diameter).
    pub size: f64,
    /// `[x, y, base_z, yaw]`.
    pub pose: [f64; 4],
    pub geometry_class: GeometryClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalAtom {
    /// `(object, support)`
    OnTopOf(String, String),
    /// `(object, container)`
    Inside(String, String),
    AtPosition {
        object: String,
        position: [f64; 3],
    },
}

impl GoalAtom {
    pub fn object(&self) -> &str {
        match self {
            GoalAtom::OnTopOf(a, _) | GoalAtom::Inside(a, _) => a,
            GoalAtom::AtPosition { object, .. } => object,
        }
    }

    pub fn referenced_ids(&self) -> Vec<&str> {
        match self {
            GoalAtom::OnTopOf(a, b) | GoalAtom::Inside(a, b) => vec![a, b],
            GoalAtom::AtPosition { object, .. } => vec![object],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FailureInjection {
    #[serde(default)]
    pub p_drop: f64,
    /// Standard deviation of planar placement noise, meters per axis.
    #[serde(default)]
    pub displacement_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels for the default overhead camera.
    #[serde(default = "default_focal")]
    pub focal: f64,
    /// Height of the default overhead camera above the table, meters.
    #[serde(default = "default_camera_height")]
    pub camera_height: f64,
}

fn default_focal() -> f64 {
    300.0
}

fn default_camera_height() -> f64 {
    1.0
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            width: 224,
            height: 168,
            focal: default_focal(),
            camera_height: default_camera_height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDetectorSpec {
    pub source_id: String,
    #[serde(default)]
    pub noise: DetectorNoise,
    #[serde(default)]
    pub seed: u64,
}

/// The two default synthetic detectors, standing in for a pair of
/// open-vocabulary models with independent noise.
pub fn default_detectors() -> Vec<SimDetectorSpec> {
    let noise = DetectorNoise {
        bbox_jitter: 1.5,
        ..DetectorNoise::default()
    };
    vec![
        SimDetectorSpec {
            source_id: "detector_a".into(),
            noise,
            seed: 0xA11CE,
        },
        SimDetectorSpec {
            source_id: "detector_b".into(),
            noise,
            seed: 0xB0B,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub prompt: String,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub goal: Vec<GoalAtom>,
    #[serde(default)]
    pub failure_injection: FailureInjection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub image: ImageSpec,
    #[serde(default)]
    pub camera: Option<CameraModel>,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<SimDetectorSpec>,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

const SHIPPED: [(&str, &str); 5] = [
    (
        "stack_blocks",
        include_str!("../../assets/scenarios/stack_blocks.json"),
    ),
    (
        "stack_cups",
        include_str!("../../assets/scenarios/stack_cups.json"),
    ),
    (
        "place_food",
        include_str!("../../assets/scenarios/place_food.json"),
    ),
    (
        "rearrange_objects",
        include_str!("../../assets/scenarios/rearrange_objects.json"),
    ),
    (
        "shopping_list",
        include_str!("../../assets/scenarios/shopping_list.json"),
    ),
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Names of the scenario families bundled with the crate.
    pub fn shipped_names() -> impl Iterator<Item = &'static str> {
        SHIPPED.iter().map(|(n, _)| *n)
    }

    pub fn shipped(name: &str) -> Option<Self> {
        SHIPPED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("bundled scenario is valid"))
    }

    pub fn camera(&self) -> Result<CameraModel, SimError> {
        match &self.camera {
            Some(c) => Ok(c.clone()),
            None => CameraModel::overhead(
                self.image.focal,
                self.image.width,
                self.image.height,
                0.5,
                0.0,
                self.image.camera_height,
            )
            .map_err(|e| SimError::Scenario(e.to_string())),
        }
    }

    pub fn initial_objects(&self) -> Vec<ObjectState> {
        self.objects
            .iter()
            .map(|o| ObjectState {
                id: o.id.clone(),
                label: o.label.clone(),
                color: o.color.clone(),
                shape: o.shape,
                geometry_class: o.geometry_class,
                size: o.size,
                pose: Pose::new(o.pose[0], o.pose[1], o.pose[2], o.pose[3]),
            })
            .collect()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.prompt.trim().is_empty() {
            return bad("empty prompt".into());
        }
        let mut ids = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate object id {:?}", o.id));
            }
            if !labels.insert(o.label.to_lowercase()) {
                return bad(format!("duplicate object label {:?}", o.label));
            }
            if !(o.size > 0.0) || !o.pose.iter().all(|v| v.is_finite()) {
                return bad(format!("object {:?} has invalid size or pose", o.id));
            }
        }
        let fi = self.failure_injection;
        if !(0.0..=1.0).contains(&fi.p_drop) {
            return bad(format!("p_drop {} outside [0, 1]", fi.p_drop));
        }
        if !(fi.displacement_sigma >= 0.0) {
            return bad("displacement_sigma must be >= 0".into());
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be > 0".into());
        }
        if self.image.width == 0 || self.image.height == 0 {
            return bad("image dimensions must be positive".into());
        }
        for atom in &self.goal {
            for id in atom.referenced_ids() {
                if !ids.contains(id) {
                    return bad(format!("goal references unknown object {id:?}"));
                }
            }
        }
        let objs = self.initial_objects();
        for (i, a) in objs.iter().enumerate() {
            for b in &objs[i + 1..] {
                if a.footprint_overlaps(b) {
                    return bad(format!(
                        "initial poses of {:?} and {:?} overlap",
                        a.id, b.id
                    ));
                }
            }
        }
        for d in &self.detectors {
            d.noise.validate().map_err(SimError::Scenario)?;
        }
        Ok(())
    }
}
