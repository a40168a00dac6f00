use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Calibrated pinhole camera: intrinsics `K = [[fu, alpha, u0], [0, fv, v0], [0, 0, 1]]`,
/// world-to-camera rotation `R` and translation `t`, and the stereo baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraParams", into = "CameraParams")]
pub struct CameraModel {
    fu: f64,
    fv: f64,
    alpha: f64,
    u0: f64,
    v0: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    baseline: f64,
    rotation_inv: Matrix3<f64>,
}

/// Plain serialized form of [`CameraModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraParams {
    pub fu: f64,
    pub fv: f64,
    #[serde(default)]
    pub alpha: f64,
    pub u0: f64,
    pub v0: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub z_axial: f64,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl CameraModel {
    pub fn new(params: CameraParams) -> Result<Self, GeometryError> {
        let CameraParams {
            fu,
            fv,
            alpha,
            u0,
            v0,
            rotation,
            translation,
            baseline,
        } = params;
        let finite = [fu, fv, alpha, u0, v0, baseline]
            .iter()
            .chain(rotation.iter().flatten())
            .chain(translation.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        if fu <= 0.0 || fv <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fu={fu}, fv={fv})"
            )));
        }
        if baseline <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "baseline must be positive, got {baseline}"
            )));
        }
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let deviation = (r.transpose() * r - Matrix3::identity()).abs().max();
        if deviation >= ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not orthonormal (max |R^T R - I| = {deviation:e})"
            )));
        }
        let rotation_inv = r
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("rotation is singular".into()))?;
        Ok(Self {
            fu,
            fv,
            alpha,
            u0,
            v0,
            rotation: r,
            translation: Vector3::from(translation),
            baseline,
            rotation_inv,
        })
    }

    /// Camera with identity extrinsics, zero skew and a 10 cm baseline.
    pub fn with_identity_pose(fu: f64, fv: f64, u0: f64, v0: f64) -> Result<Self, GeometryError> {
        Self::new(CameraParams {
            fu,
            fv,
            alpha: 0.0,
            u0,
            v0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            baseline: 0.1,
        })
    }

    /// Camera looking straight down at the table from `height` meters above
    /// `(center_x, center_y)`. Image u grows with world X, v grows with -Y.
    pub fn overhead(
        focal: f64,
        width: usize,
        height_px: usize,
        center_x: f64,
        center_y: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let rotation = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        // t = -R * C for camera centre C = (cx, cy, h).
        let translation = [-center_x, center_y, height];
        Self::new(CameraParams {
            fu: focal,
            fv: focal,
            alpha: 0.0,
            u0: (width as f64 - 1.0) / 2.0,
            v0: (height_px as f64 - 1.0) / 2.0,
            rotation,
            translation,
            baseline: 0.06,
        })
    }

    pub fn params(&self) -> CameraParams {
        self.clone().into()
    }

    pub fn fu(&self) -> f64 {
        self.fu
    }

    pub fn fv(&self) -> f64 {
        self.fv
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fu, self.alpha, self.u0, 0.0, self.fv, self.v0, 0.0, 0.0, 1.0,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World point to camera coordinates, `R·p + t`.
    pub fn to_camera(&self, world: [f64; 3]) -> Vector3<f64> {
        self.rotation * Vector3::from(world) + self.translation
    }

    /// `z·[u, v, 1]ᵀ = K·(R·p + t)`, dehomogenized.
    pub fn project_to_pixel(&self, world: [f64; 3]) -> Result<PixelProjection, GeometryError> {
        let pc = self.to_camera(world);
        let z = pc.z;
        if !(z > 0.0) {
            return Err(GeometryError::BehindCamera(z));
        }
        let x = pc.x / z;
        let y = pc.y / z;
        Ok(PixelProjection {
            u: self.fu * x + self.alpha * y + self.u0,
            v: self.fv * y + self.v0,
            z_axial: z,
        })
    }

    /// Normalized ray `K⁻¹·[u, v, 1]ᵀ` in camera coordinates.
    pub fn normalized_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let y = (v - self.v0) / self.fv;
        let x = (u - self.u0 - self.alpha * y) / self.fu;
        Vector3::new(x, y, 1.0)
    }

    /// `p = R⁻¹·(z·K⁻¹·[u, v, 1]ᵀ − t)`.
    pub fn backproject(&self, u: f64, v: f64, z_axial: f64) -> Result<[f64; 3], GeometryError> {
        if !(z_axial > 0.0) || !z_axial.is_finite() {
            return Err(GeometryError::InvalidDepth(z_axial));
        }
        let pc = self.normalized_ray(u, v) * z_axial;
        let w = self.rotation_inv * (pc - self.translation);
        Ok([w.x, w.y, w.z])
    }

    /// World-frame origin and direction of the ray through pixel `(u, v)`,
    /// parameterized by axial depth: `p(z) = origin + z·direction`.
    pub fn world_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let origin = -(self.rotation_inv * self.translation);
        let dir = self.rotation_inv * self.normalized_ray(u, v);
        (origin, dir)
    }
}

impl TryFrom<CameraParams> for CameraModel {
    type Error = GeometryError;

    fn try_from(p: CameraParams) -> Result<Self, Self::Error> {
        CameraModel::new(p)
    }
}

impl From<CameraModel> for CameraParams {
    fn from(c: CameraModel) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = c.rotation[(i, j)];
            }
        }
        CameraParams {
            fu: c.fu,
            fv: c.fv,
            alpha: c.alpha,
            u0: c.u0,
            v0: c.v0,
            rotation,
            translation: [c.translation.x, c.translation.y, c.translation.z],
            baseline: c.baseline,
        }
    }
}

/// Axial depth from stereo disparity: `z = B·f / d`.
pub fn stereo_depth(baseline: f64, focal: f64, disparity: f64) -> Result<f64, GeometryError> {
    if !(disparity > 0.0) || !disparity.is_finite() {
        return Err(GeometryError::InvalidDisparity(disparity));
    }
    Ok(baseline * focal / disparity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam() -> CameraModel {
        CameraModel::with_identity_pose(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let p = identity_cam().project_to_pixel([0.0, 0.0, 2.0]).unwrap();
        assert_eq!((p.u, p.v, p.z_axial), (320.0, 240.0, 2.0));
    }

    #[test]
    fn projection_matches_matrix_multiply() {
        let cam = identity_cam();
        // Independent route: full K·[R|t] product on homogeneous coordinates.
        let k = cam.intrinsic_matrix();
        let h = k * (cam.rotation() * Vector3::new(0.2, 0.0, 2.0) + cam.translation());
        let (u, v) = (h.x / h.z, h.y / h.z);
        assert_eq!((u, v), (370.0, 240.0));
        let p = cam.project_to_pixel([0.2, 0.0, 2.0]).unwrap();
        assert!((p.u - u).abs() < 1e-12 && (p.v - v).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = identity_cam()
            .project_to_pixel([0.0, 0.0, -1.0])
            .unwrap_err();
        assert!(matches!(err, GeometryError::BehindCamera(_)));
        assert!(identity_cam().project_to_pixel([0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn backproject_inverts_projection_example() {
        let w = identity_cam().backproject(370.0, 240.0, 2.0).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12 && w[1].abs() < 1e-12 && (w[2] - 2.0).abs() < 1e-12);
        for z in [0.1, 1.0, 7.5] {
            assert_eq!(
                identity_cam().backproject(320.0, 240.0, z).unwrap(),
                [0.0, 0.0, z]
            );
        }
        assert!(identity_cam().backproject(320.0, 240.0, 0.0).is_err());
    }

    #[test]
    fn stereo_depth_direct_substitution() {
        assert_eq!(stereo_depth(0.1, 500.0, 50.0).unwrap(), 1.0);
        assert!((stereo_depth(0.064, 400.0, 32.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            stereo_depth(0.1, 500.0, 0.0),
            Err(GeometryError::InvalidDisparity(_))
        ));
        assert!(stereo_depth(0.1, 500.0, -3.0).is_err());
    }

    #[test]
    fn camera_invariants_are_enforced() {
        let mut p = identity_cam().params();
        p.rotation[0][0] = 1.01;
        assert!(matches!(
            CameraModel::new(p),
            Err(GeometryError::InvalidCamera(_))
        ));
        let mut p = identity_cam().params();
        p.fu = 0.0;
        assert!(CameraModel::new(p).is_err());
        let mut p = identity_cam().params();
        p.baseline = 0.0;
        assert!(CameraModel::new(p).is_err());
    }

    #[test]
    fn overhead_camera_looks_down() {
        let cam = CameraModel::overhead(300.0, 224, 168, 0.5, 0.0, 1.0).unwrap();
        let p = cam.project_to_pixel([0.5, 0.0, 0.0]).unwrap();
        assert!((p.u - 111.5).abs() < 1e-12 && (p.v - 83.5).abs() < 1e-12);
        assert!((p.z_axial - 1.0).abs() < 1e-12);
        let q = cam.project_to_pixel([0.6, 0.1, 0.04]).unwrap();
        assert!(q.u > p.u && q.v < p.v);
        assert!((q.z_axial - 0.96).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_preserves_camera() {
        let cam = CameraModel::overhead(300.0, 224, 168, 0.5, 0.0, 1.0).unwrap();
        let text = serde_json::to_string(&cam).unwrap();
        let back: CameraModel = serde_json::from_str(&text).unwrap();
        assert_eq!(cam, back);
    }
}
