//! Object geometry and the 2.5D z-buffer renderer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::raster::RgbRaster;
use crate::geometry::{BinaryMask, CameraModel, DepthMap};
use crate::state::{GeometryClass, Pose};

pub const PAD_HEIGHT: f64 = 0.01;
/// Meters per stored depth step.
pub const DEPTH_QUANTUM: f64 = 1e-4;
/// Vertical slack when deciding that one object rests on another.
pub const Z_TOLERANCE: f64 = 2e-3;

const TABLE_RGB: [u8; 3] = [128, 128, 120];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Block,
    Cup,
    Pad,
    Bowl,
}

/// Ground-truth state of one object. `pose.z` is the base height, `(x, y)` the
/// footprint centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: String,
    pub label: String,
    pub color: String,
    pub shape: Shape,
    pub geometry_class: GeometryClass,
    pub size: f64,
    pub pose: Pose,
}

impl ObjectState {
    pub fn height(&self) -> f64 {
        match self.shape {
            Shape::Block | Shape::Cup => self.size,
            Shape::Pad => PAD_HEIGHT,
            Shape::Bowl => self.size * 0.5,
        }
    }

    pub fn top_z(&self) -> f64 {
        self.pose.z + self.height()
    }

    pub fn is_container(&self) -> bool {
        matches!(self.shape, Shape::Cup | Shape::Bowl)
    }

    pub fn wall(&self) -> f64 {
        match self.shape {
            Shape::Cup => 0.006,
            Shape::Bowl => 0.008,
            _ => 0.0,
        }
    }

    /// Height of the inner floor of a container (base for solids).
    pub fn floor_z(&self) -> f64 {
        self.pose.z + self.wall()
    }

    pub fn half_extent(&self) -> f64 {
        self.size / 2.0
    }

    pub fn inner_radius(&self) -> f64 {
        (self.half_extent() - self.wall()).max(0.0)
    }

    /// Radius of the smallest circle about the centre containing the footprint.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Block | Shape::Pad => self.half_extent() * std::f64::consts::SQRT_2,
            Shape::Cup | Shape::Bowl => self.half_extent(),
        }
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.pose.x, y - self.pose.y);
        let (s, c) = self.pose.yaw.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.local(x, y);
        let h = self.half_extent();
        match self.shape {
            Shape::Block | Shape::Pad => lx.abs() <= h && ly.abs() <= h,
            Shape::Cup | Shape::Bowl => lx * lx + ly * ly <= h * h,
        }
    }

    /// Whether a gripper closing at `(x, y)` would hold this object. Containers
    /// are only held by the wall; the cavity is open.
    pub fn graspable_at(&self, x: f64, y: f64) -> bool {
        if !self.footprint_contains(x, y) {
            return false;
        }
        !self.is_container()
            || (x - self.pose.x).hypot(y - self.pose.y) >= self.inner_radius() - 1e-3
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let h = self.half_extent();
        let (s, c) = self.pose.yaw.sin_cos();
        [(-h, -h), (h, -h), (h, h), (-h, h)]
            .map(|(lx, ly)| (self.pose.x + c * lx - s * ly, self.pose.y + s * lx + c * ly))
    }

    /// Whether the planar footprints share interior area.
    pub fn footprint_overlaps(&self, other: &ObjectState) -> bool {
        const EPS: f64 = 1e-9;
        let d = (self.pose.x - other.pose.x).hypot(self.pose.y - other.pose.y);
        if d >= self.bounding_radius() + other.bounding_radius() - EPS {
            return false;
        }
        match (self.is_round(), other.is_round()) {
            (true, true) => d < self.half_extent() + other.half_extent() - EPS,
            (false, true) => other.circle_hits_square(self),
            (true, false) => self.circle_hits_square(other),
            (false, false) => squares_overlap(self, other),
        }
    }

    fn is_round(&self) -> bool {
        matches!(self.shape, Shape::Cup | Shape::Bowl)
    }

    fn circle_hits_square(&self, square: &ObjectState) -> bool {
        let (lx, ly) = square.local(self.pose.x, self.pose.y);
        let h = square.half_extent();
        let (cx, cy) = (lx.clamp(-h, h), ly.clamp(-h, h));
        (lx - cx).hypot(ly - cy) < self.half_extent() - 1e-9
    }

    /// Whether `self` rests on `support`.
    pub fn rests_on(&self, support: &ObjectState) -> bool {
        (self.pose.z - support.top_z()).abs() <= Z_TOLERANCE && self.footprint_overlaps(support)
    }
}

fn squares_overlap(a: &ObjectState, b: &ObjectState) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    let axes = [
        a.pose.yaw,
        a.pose.yaw + std::f64::consts::FRAC_PI_2,
        b.pose.yaw,
        b.pose.yaw + std::f64::consts::FRAC_PI_2,
    ];
    axes.iter().all(|ang| {
        let (s, c) = ang.sin_cos();
        let proj = |pts: &[(f64, f64); 4]| {
            pts.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| {
                    let p = x * c + y * s;
                    (lo.min(p), hi.max(p))
                })
        };
        let (a0, a1) = proj(&ca);
        let (b0, b1) = proj(&cb);
        a1 - b0 > 1e-9 && b1 - a0 > 1e-9
    })
}

pub fn color_rgb(name: &str) -> [u8; 3] {
    match name.to_lowercase().as_str() {
        "red" => [200, 30, 30],
        "green" => [30, 160, 60],
        "blue" => [30, 60, 200],
        "yellow" => [230, 210, 40],
        "orange" => [240, 140, 20],
        "purple" => [130, 40, 170],
        "pink" => [240, 130, 180],
        "white" => [240, 240, 240],
        "black" => [20, 20, 20],
        "brown" | "wooden" | "wood" => [150, 100, 55],
        "gray" | "grey" => [90, 90, 90],
        other => {
            let h = other
                .bytes()
                .fold(2166136261u32, |h, b| (h ^ b as u32).wrapping_mul(16777619));
            [(h >> 16) as u8, (h >> 8) as u8, h as u8]
        }
    }
}

/// Per-pixel world rays for a fixed camera and image size.
#[derive(Debug, Clone)]
pub struct RayTable {
    width: usize,
    height: usize,
    origin: [f64; 3],
    dirs: Vec<[f64; 3]>,
}

impl RayTable {
    pub fn new(camera: &CameraModel, width: usize, height: usize) -> Self {
        let (o, _) = camera.world_ray(0.0, 0.0);
        let mut dirs = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                let (_, d) = camera.world_ray(u as f64, v as f64);
                dirs.push([d.x, d.y, d.z]);
            }
        }
        Self {
            width,
            height,
            origin: [o.x, o.y, o.z],
            dirs,
        }
    }

    /// Axial depth and planar hit point of pixel `i` on the plane `Z = z`.
    #[inline]
    fn hit(&self, i: usize, z: f64) -> Option<(f64, f64, f64)> {
        let d = self.dirs[i];
        if d[2].abs() < 1e-12 {
            return None;
        }
        let s = (z - self.origin[2]) / d[2];
        (s > 0.0).then(|| (s, self.origin[0] + s * d[0], self.origin[1] + s * d[1]))
    }
}

#[derive(Clone, Copy)]
enum Region {
    Solid,
    Rim(f64),
    Floor(f64),
}

pub struct Rendered {
    pub rgb: RgbRaster,
    pub depth: DepthMap,
    pub masks: BTreeMap<String, BinaryMask>,
}

/// Top-down z-buffer render: for every pixel the highest surface hit by its
/// ray wins. Solid tops and container rims are part of the object's mask;
/// container floors are not.
pub fn render(objects: &[ObjectState], camera: &CameraModel, rays: &RayTable) -> Rendered {
    let (w, h) = (rays.width, rays.height);
    let n = w * h;
    let mut zbuf = vec![f64::NEG_INFINITY; n];
    let mut owner: Vec<i32> = vec![-1; n];
    let mut rgb = RgbRaster::filled(w, h, TABLE_RGB);
    let mut depth = DepthMap::new(w, h, DEPTH_QUANTUM);
    let mut axial = vec![0.0f64; n];

    for i in 0..n {
        if let Some((s, _, _)) = rays.hit(i, 0.0) {
            zbuf[i] = 0.0;
            axial[i] = s;
        }
    }

    for (k, obj) in objects.iter().enumerate() {
        let base_rgb = color_rgb(&obj.color);
        let floor_rgb = base_rgb.map(|c| (c as f64 * 0.55) as u8);
        let mut surfaces = vec![];
        if obj.is_container() {
            surfaces.push((obj.top_z(), Region::Rim(obj.inner_radius()), true, base_rgb));
            surfaces.push((
                obj.floor_z(),
                Region::Floor(obj.inner_radius()),
                false,
                floor_rgb,
            ));
        } else {
            surfaces.push((obj.top_z(), Region::Solid, true, base_rgb));
        }
        for (z, region, in_mask, color) in surfaces {
            let Some((u0, v0, u1, v1)) = pixel_window(obj, z, camera, w, h) else {
                continue;
            };
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let i = v * w + u;
                    if z <= zbuf[i] {
                        continue;
                    }
                    let Some((s, x, y)) = rays.hit(i, z) else {
                        continue;
                    };
                    let inside = match region {
                        Region::Solid => obj.footprint_contains(x, y),
                        Region::Rim(r_in) => {
                            obj.footprint_contains(x, y)
                                && (x - obj.pose.x).hypot(y - obj.pose.y) >= r_in
                        }
                        Region::Floor(r_in) => (x - obj.pose.x).hypot(y - obj.pose.y) < r_in,
                    };
                    if inside {
                        zbuf[i] = z;
                        axial[i] = s;
                        owner[i] = if in_mask { k as i32 } else { -1 };
                        rgb.put(u, v, color);
                    }
                }
            }
        }
    }

    for (i, s) in axial.iter().enumerate() {
        if *s > 0.0 {
            depth.set_meters(i % w, i / w, *s);
        }
    }
    let mut masks = BTreeMap::new();
    for (k, obj) in objects.iter().enumerate() {
        let bits: Vec<bool> = owner.iter().map(|o| *o == k as i32).collect();
        if bits.iter().any(|b| *b) {
            masks.insert(
                obj.id.clone(),
                BinaryMask::from_bits(w, h, bits).expect("raster dims"),
            );
        }
    }
    Rendered { rgb, depth, masks }
}

/// Pixel window covering the object's bounding circle at height `z`.
fn pixel_window(
    obj: &ObjectState,
    z: f64,
    camera: &CameraModel,
    w: usize,
    h: usize,
) -> Option<(usize, usize, usize, usize)> {
    let r = obj.bounding_radius();
    let (mut umin, mut vmin, mut umax, mut vmax) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for (dx, dy) in [(-r, -r), (r, -r), (r, r), (-r, r)] {
        let p = camera
            .project_to_pixel([obj.pose.x + dx, obj.pose.y + dy, z])
            .ok()?;
        umin = umin.min(p.u);
        vmin = vmin.min(p.v);
        umax = umax.max(p.u);
        vmax = vmax.max(p.v);
    }
    let clamp = |x: f64, hi: usize| (x.max(0.0) as usize).min(hi - 1);
    if umax < 0.0 || vmax < 0.0 || umin > (w - 1) as f64 || vmin > (h - 1) as f64 {
        return None;
    }
    Some((
        clamp(umin.floor() - 1.0, w),
        clamp(vmin.floor() - 1.0, h),
        clamp(umax.ceil() + 1.0, w),
        clamp(vmax.ceil() + 1.0, h),
    ))
}
