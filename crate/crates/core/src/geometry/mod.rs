//! Pixel/world geometry: pinhole projection, stereo depth, binary masks and
//! grasp-point extraction, plus the raster file format used for dumps.

mod camera;
mod grasp;
mod mask;
pub mod raster;

pub use camera::{stereo_depth, CameraModel, CameraParams, PixelProjection};
pub use grasp::{grasp_point_2d, grasp_point_3d, march_ray, MaskGrasp, N_THETA, RAY_STEP};
pub use mask::{nearest_pixel, BinaryMask};
pub use raster::{DepthMap, DepthSource, RgbRaster, StereoDisparity};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point is behind the camera (z_axial = {0})")]
    BehindCamera(f64),
    #[error("invalid disparity {0}: must be > 0")]
    InvalidDisparity(f64),
    #[error("invalid axial depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("mask dimensions must be positive, got {width}x{height}")]
    InvalidMaskSize { width: usize, height: usize },
    #[error("ray from centroid missed the mask after {0} angles")]
    RayMiss(usize),
    #[error("grasp point ({u:.2}, {v:.2}) does not lie on the mask")]
    GraspOffMask { u: f64, v: f64 },
    #[error("no valid depth at pixel ({u}, {v})")]
    DepthHole { u: i64, v: i64 },
    #[error("raster io: {0}")]
    Raster(String),
}
