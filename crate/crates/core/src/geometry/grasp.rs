use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest_pixel, BinaryMask, CameraModel, DepthSource, GeometryError};
use crate::state::{GeometryClass, GraspPoint2D, GraspPoint3D};

/// Radial step of the ray march, in pixels.
pub const RAY_STEP: f64 = 0.5;
/// Fresh angles tried before an irregular grasp gives up.
pub const N_THETA: usize = 16;
/// Angular resolution of the boundary sweep used for rimmed objects.
const SWEEP_ANGLES: usize = 720;

/// A grasp location on a mask together with the march radius that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGrasp {
    pub u: f64,
    pub v: f64,
    /// `r*` of the ray march; zero for centroid-based classes.
    pub radius: f64,
}

/// Walks `r = 0, Δr, 2Δr, …` from `(cx, cy)` along `theta` and returns the first
/// nearest-pixel hit as `(x, y, r)`, or `None` once the ray leaves the raster.
pub fn march_ray(mask: &BinaryMask, cx: f64, cy: f64, theta: f64) -> Option<(i64, i64, f64)> {
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut step = 0u32;
    loop {
        let r = step as f64 * RAY_STEP;
        let (px, py) = nearest_pixel(cx + r * dx, cy + r * dy);
        if !mask.in_bounds(px, py) {
            return None;
        }
        if mask.get_signed(px, py) {
            return Some((px, py, r));
        }
        step += 1;
    }
}

/// Picks the 2D grasp location for a mask according to its geometry class.
///
/// * `irregular`: seeded `θ ~ U(0, 2π)`, then the smallest march radius `r*`
///   with `mask[C + r*(cos θ, sin θ)] = 1`; up to [`N_THETA`] angles.
/// * `rimmed`: minimum of the march radius over a full θ sweep, i.e. the set
///   pixel nearest to the centroid.
/// * `round`, `flat`: the centroid itself.
///
/// The result is verified to lie on a set pixel.
pub fn grasp_point_2d(
    mask: &BinaryMask,
    class: GeometryClass,
    seed: u64,
) -> Result<MaskGrasp, GeometryError> {
    let (cx, cy) = mask.centroid()?;
    let grasp = match class {
        GeometryClass::Round | GeometryClass::Flat => MaskGrasp {
            u: cx,
            v: cy,
            radius: 0.0,
        },
        GeometryClass::Irregular => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hit = None;
            for _ in 0..N_THETA {
                let theta = rng.random_range(0.0..TAU);
                if let Some(h) = march_ray(mask, cx, cy, theta) {
                    hit = Some(h);
                    break;
                }
            }
            let (x, y, r) = hit.ok_or(GeometryError::RayMiss(N_THETA))?;
            MaskGrasp {
                u: x as f64,
                v: y as f64,
                radius: r,
            }
        }
        GeometryClass::Rimmed => {
            let best = (0..SWEEP_ANGLES)
                .filter_map(|k| march_ray(mask, cx, cy, TAU * k as f64 / SWEEP_ANGLES as f64))
                .fold(None, |best: Option<(i64, i64, f64)>, h| match best {
                    Some(b) if b.2 <= h.2 => Some(b),
                    _ => Some(h),
                });
            let (x, y, r) = best.ok_or(GeometryError::RayMiss(SWEEP_ANGLES))?;
            MaskGrasp {
                u: x as f64,
                v: y as f64,
                radius: r,
            }
        }
    };
    let (px, py) = nearest_pixel(grasp.u, grasp.v);
    if !mask.get_signed(px, py) {
        return Err(GeometryError::GraspOffMask {
            u: grasp.u,
            v: grasp.v,
        });
    }
    Ok(grasp)
}

/// Lifts a 2D grasp to world coordinates using the depth at its nearest pixel.
pub fn grasp_point_3d(
    gp: &GraspPoint2D,
    depth: &dyn DepthSource,
    cam: &CameraModel,
) -> Result<GraspPoint3D, GeometryError> {
    let (px, py) = nearest_pixel(gp.u, gp.v);
    let z = if px < 0 || py < 0 {
        None
    } else {
        depth.depth_at(px as usize, py as usize)
    };
    let z = match z {
        Some(z) if z > 0.0 && z.is_finite() => z,
        _ => return Err(GeometryError::DepthHole { u: px, v: py }),
    };
    let [x, y, zw] = cam.backproject(gp.u, gp.v, z)?;
    Ok(GraspPoint3D {
        x,
        y,
        z: zw,
        object_id: gp.object_id.clone(),
        yaw: 0.0,
        center: [x, y, zw],
    })
}
