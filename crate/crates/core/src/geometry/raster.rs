//! Dense rasters (depth, colour) and their on-disk form: a PNG image plus a
//! JSON sidecar with dimensions, units and optional camera parameters.
//!
//! Masks are 8-bit grayscale (0 / 255), depth is 16-bit grayscale holding
//! integer multiples of `quantum` meters (0 = no reading), colour is RGB8.
//! All three round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{stereo_depth, BinaryMask, CameraModel, GeometryError};

/// Anything that can report an axial depth (meters) for a pixel.
pub trait DepthSource {
    fn depth_at(&self, x: usize, y: usize) -> Option<f64>;
}

/// Quantized depth raster. A stored value of 0 marks a missing reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PackedDepth", into = "PackedDepth")]
pub struct DepthMap {
    width: usize,
    height: usize,
    quantum: f64,
    data: Vec<u16>,
}

#[derive(Serialize, Deserialize)]
struct PackedDepth {
    width: usize,
    height: usize,
    quantum: f64,
    /// Base64 of little-endian u16 samples.
    data: String,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, quantum: f64) -> Self {
        Self {
            width,
            height,
            quantum,
            data: vec![0; width * height],
        }
    }

    pub fn from_raw(
        width: usize,
        height: usize,
        quantum: f64,
        data: Vec<u16>,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || data.len() != width * height || !(quantum > 0.0) {
            return Err(GeometryError::Raster(format!(
                "bad depth raster {width}x{height}, {} samples, quantum {quantum}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            quantum,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn quantum(&self) -> f64 {
        self.quantum
    }

    pub fn raw(&self) -> &[u16] {
        &self.data
    }

    pub fn quantize(&self, meters: f64) -> u16 {
        (meters / self.quantum).round().clamp(1.0, u16::MAX as f64) as u16
    }

    pub fn set_meters(&mut self, x: usize, y: usize, meters: f64) {
        let q = self.quantize(meters);
        self.data[y * self.width + x] = q;
    }

    pub fn set_raw(&mut self, x: usize, y: usize, raw: u16) {
        self.data[y * self.width + x] = raw;
    }

    pub fn meters_at(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        match self.data[y * self.width + x] {
            0 => None,
            q => Some(q as f64 * self.quantum),
        }
    }
}

impl DepthSource for DepthMap {
    fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        self.meters_at(x, y)
    }
}

impl From<DepthMap> for PackedDepth {
    fn from(d: DepthMap) -> Self {
        let bytes: Vec<u8> = d.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        PackedDepth {
            width: d.width,
            height: d.height,
            quantum: d.quantum,
            data: STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<PackedDepth> for DepthMap {
    type Error = GeometryError;

    fn try_from(p: PackedDepth) -> Result<Self, Self::Error> {
        let bytes = STANDARD
            .decode(p.data.as_bytes())
            .map_err(|e| GeometryError::Raster(format!("depth data: {e}")))?;
        if bytes.len() % 2 != 0 {
            return Err(GeometryError::Raster("odd depth byte count".into()));
        }
        let data = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        DepthMap::from_raw(p.width, p.height, p.quantum, data)
    }
}

/// Disparity raster turned into depth through `z = B·f / d`.
#[derive(Debug, Clone)]
pub struct StereoDisparity {
    pub width: usize,
    pub height: usize,
    pub disparity: Vec<f64>,
    pub baseline: f64,
    pub focal: f64,
}

impl DepthSource for StereoDisparity {
    fn depth_at(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        stereo_depth(
            self.baseline,
            self.focal,
            self.disparity[y * self.width + x],
        )
        .ok()
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PackedRgb", into = "PackedRgb")]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct PackedRgb {
    width: usize,
    height: usize,
    data: String,
}

impl RgbRaster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png(&self) -> Result<Vec<u8>, GeometryError> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| GeometryError::Raster("rgb buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(raster_err)?;
        Ok(out.into_inner())
    }
}

impl From<RgbRaster> for PackedRgb {
    fn from(r: RgbRaster) -> Self {
        PackedRgb {
            width: r.width,
            height: r.height,
            data: STANDARD.encode(&r.data),
        }
    }
}

impl TryFrom<PackedRgb> for RgbRaster {
    type Error = GeometryError;

    fn try_from(p: PackedRgb) -> Result<Self, Self::Error> {
        let data = STANDARD
            .decode(p.data.as_bytes())
            .map_err(|e| GeometryError::Raster(format!("rgb data: {e}")))?;
        if data.len() != p.width * p.height * 3 {
            return Err(GeometryError::Raster("rgb buffer size mismatch".into()));
        }
        Ok(RgbRaster {
            width: p.width,
            height: p.height,
            data,
        })
    }
}

/// Sidecar document stored next to each raster image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub kind: RasterKind,
    pub width: usize,
    pub height: usize,
    /// Physical units of a sample: "binary", "meters", "srgb".
    pub units: String,
    /// Meters per stored depth step; depth rasters only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Mask,
    Depth,
    Rgb,
}

/// `foo.png` → `foo.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

fn raster_err(e: impl std::fmt::Display) -> GeometryError {
    GeometryError::Raster(e.to_string())
}

fn write_meta(image: &Path, meta: &RasterMeta) -> Result<(), GeometryError> {
    let text = serde_json::to_string_pretty(meta).map_err(raster_err)?;
    fs::write(sidecar_path(image), text).map_err(raster_err)
}

fn read_meta(image: &Path, kind: RasterKind) -> Result<RasterMeta, GeometryError> {
    let text = fs::read_to_string(sidecar_path(image)).map_err(raster_err)?;
    let meta: RasterMeta = serde_json::from_str(&text).map_err(raster_err)?;
    if meta.kind != kind {
        return Err(GeometryError::Raster(format!(
            "expected {kind:?} raster, sidecar says {:?}",
            meta.kind
        )));
    }
    Ok(meta)
}

fn check_dims(meta: &RasterMeta, w: u32, h: u32) -> Result<(), GeometryError> {
    if meta.width != w as usize || meta.height != h as usize {
        return Err(GeometryError::Raster(format!(
            "sidecar says {}x{}, image is {w}x{h}",
            meta.width, meta.height
        )));
    }
    Ok(())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), GeometryError> {
    let pixels = mask
        .bits()
        .iter()
        .map(|b| if *b { 255u8 } else { 0 })
        .collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| GeometryError::Raster("mask buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(raster_err)?;
    write_meta(
        path,
        &RasterMeta {
            kind: RasterKind::Mask,
            width: mask.width(),
            height: mask.height(),
            units: "binary".into(),
            quantum: None,
            camera: None,
        },
    )
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, GeometryError> {
    let meta = read_meta(path, RasterKind::Mask)?;
    let img = image::open(path).map_err(raster_err)?.into_luma8();
    check_dims(&meta, img.width(), img.height())?;
    let bits = img.into_raw().into_iter().map(|p| p >= 128).collect();
    BinaryMask::from_bits(meta.width, meta.height, bits)
}

pub fn save_depth(
    path: &Path,
    depth: &DepthMap,
    camera: Option<&CameraModel>,
) -> Result<(), GeometryError> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        depth.raw().to_vec(),
    )
    .ok_or_else(|| GeometryError::Raster("depth buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(raster_err)?;
    write_meta(
        path,
        &RasterMeta {
            kind: RasterKind::Depth,
            width: depth.width(),
            height: depth.height(),
            units: "meters".into(),
            quantum: Some(depth.quantum()),
            camera: camera.cloned(),
        },
    )
}

/// Loads a depth raster and the camera recorded in its sidecar, if any.
pub fn load_depth(path: &Path) -> Result<(DepthMap, Option<CameraModel>), GeometryError> {
    let meta = read_meta(path, RasterKind::Depth)?;
    let img = image::open(path).map_err(raster_err)?.into_luma16();
    check_dims(&meta, img.width(), img.height())?;
    let quantum = meta
        .quantum
        .ok_or_else(|| GeometryError::Raster("depth sidecar lacks quantum".into()))?;
    let depth = DepthMap::from_raw(meta.width, meta.height, quantum, img.into_raw())?;
    Ok((depth, meta.camera))
}

pub fn save_rgb(path: &Path, rgb: &RgbRaster) -> Result<(), GeometryError> {
    fs::write(path, rgb.to_png()?).map_err(raster_err)?;
    write_meta(
        path,
        &RasterMeta {
            kind: RasterKind::Rgb,
            width: rgb.width,
            height: rgb.height,
            units: "srgb".into(),
            quantum: None,
            camera: None,
        },
    )
}

pub fn load_rgb(path: &Path) -> Result<RgbRaster, GeometryError> {
    let meta = read_meta(path, RasterKind::Rgb)?;
    let img = image::open(path).map_err(raster_err)?.into_rgb8();
    check_dims(&meta, img.width(), img.height())?;
    Ok(RgbRaster {
        width: meta.width,
        height: meta.height,
        data: img.into_raw(),
    })
}
