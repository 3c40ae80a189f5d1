//! Pinhole lifting and a closed-form top-down grasp from an instance mask.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` in continuous image
//! coordinates, the same convention [`Mask::contains_point`] uses.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::Mask;

pub const DEFAULT_GRIPPER_MAX_WIDTH_M: f64 = 0.085;
/// Fewest valid-depth pixels a mask needs before a pose is attempted.
pub const MIN_VALID_PIXELS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("camera intrinsics are missing")]
    MissingIntrinsics,
    #[error("depth must be positive, got {0}")]
    NonpositiveDepth(f64),
    #[error("mask has {valid} pixels with valid depth, need at least {required}")]
    DegenerateMask { valid: usize, required: usize },
    #[error("mask is {mask_w}x{mask_h} but depth image is {depth_w}x{depth_h}")]
    DimensionMismatch { mask_w: usize, mask_h: usize, depth_w: usize, depth_h: usize },
    #[error("failed to read depth image {path}: {message}")]
    DepthRead { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Unit focal length at the origin, so metric and pixel coordinates
    /// coincide at depth 1. Used when a scene carries no calibration.
    pub fn nominal() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }
}

pub fn lift_point(u: f64, v: f64, z: f64, intrinsics: Option<&Intrinsics>) -> Result<[f64; 3], GeometryError> {
    let k = intrinsics.ok_or(GeometryError::MissingIntrinsics)?;
    if !(z > 0.0) {
        return Err(GeometryError::NonpositiveDepth(z));
    }
    Ok([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])
}

/// Inverse of [`lift_point`]: camera-frame point to pixel coordinates.
pub fn project_point(p: [f64; 3], k: &Intrinsics) -> Result<(f64, f64), GeometryError> {
    let [x, y, z] = p;
    if !(z > 0.0) {
        return Err(GeometryError::NonpositiveDepth(z));
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}

/// Single-channel depth image; a raw value of 0 means no reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    raw: Vec<u16>,
    scale_mm: f64,
}

impl DepthImage {
    /// `raw` is row-major.
    pub fn new(width: usize, height: usize, raw: Vec<u16>, scale_mm: f64) -> Self {
        assert_eq!(raw.len(), width * height, "depth buffer size");
        Self { width, height, raw, scale_mm }
    }

    /// Constant depth everywhere, in meters.
    pub fn flat(width: usize, height: usize, meters: f64) -> Self {
        let raw = (meters * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16;
        Self::new(width, height, vec![raw; width * height], 1.0)
    }

    pub fn load(path: &Path, scale_mm: f64) -> Result<Self, GeometryError> {
        let err = |message: String| GeometryError::DepthRead { path: path.display().to_string(), message };
        let img = image::open(path).map_err(|e| err(e.to_string()))?.into_luma16();
        let (w, h) = img.dimensions();
        Ok(Self::new(w as usize, h as usize, img.into_raw(), scale_mm))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn meters(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        match self.raw[y * self.width + x] {
            0 => None,
            r => Some(r as f64 * self.scale_mm / 1000.0),
        }
    }

    pub fn set_raw(&mut self, x: usize, y: usize, raw: u16) {
        self.raw[y * self.width + x] = raw;
    }
}

/// Top-down parallel-jaw grasp in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub position: [f64; 3],
    /// Closing direction about the optical axis, in (-pi/2, pi/2].
    pub yaw: f64,
    pub width: f64,
    pub confidence: f64,
}

impl GraspPose {
    /// Pixel the grasp point projects to.
    pub fn image_point(&self, k: &Intrinsics) -> Result<(f64, f64), GeometryError> {
        project_point(self.position, k)
    }
}

fn normalize_yaw(mut a: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    while a > FRAC_PI_2 {
        a -= PI;
    }
    while a <= -FRAC_PI_2 {
        a += PI;
    }
    a
}

/// Angle of the minor principal axis of the mask's pixel distribution.
/// Isotropic masks return 0.
pub fn minor_axis_angle(mask: &Mask) -> f64 {
    let n = mask.area() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut su, mut sv) = (0.0, 0.0);
    for (x, y) in mask.pixels() {
        su += x as f64 + 0.5;
        sv += y as f64 + 0.5;
    }
    let (mu, mv) = (su / n, sv / n);
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for (x, y) in mask.pixels() {
        let (du, dv) = (x as f64 + 0.5 - mu, y as f64 + 0.5 - mv);
        m20 += du * du;
        m02 += dv * dv;
        m11 += du * dv;
    }
    let scale = (m20 + m02).max(f64::MIN_POSITIVE);
    if (m20 - m02).abs() <= 1e-9 * scale && m11.abs() <= 1e-9 * scale {
        return 0.0;
    }
    let major = 0.5 * (2.0 * m11).atan2(m20 - m02);
    normalize_yaw(major + std::f64::consts::FRAC_PI_2)
}

/// Grasp at the mask centroid, closing across the mask's narrow extent.
pub fn grasp_proxy(
    mask: &Mask,
    depth: &DepthImage,
    intrinsics: Option<&Intrinsics>,
    gripper_max: f64,
) -> Result<GraspPose, GeometryError> {
    let k = intrinsics.ok_or(GeometryError::MissingIntrinsics)?;
    if mask.width() != depth.width || mask.height() != depth.height {
        return Err(GeometryError::DimensionMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            depth_w: depth.width,
            depth_h: depth.height,
        });
    }
    let area = mask.area();
    let mut depths: Vec<f64> = mask.pixels().filter_map(|(x, y)| depth.meters(x, y)).collect();
    if depths.len() < MIN_VALID_PIXELS {
        return Err(GeometryError::DegenerateMask { valid: depths.len(), required: MIN_VALID_PIXELS });
    }
    depths.sort_by(f64::total_cmp);
    let mid = depths.len() / 2;
    let z = if depths.len() % 2 == 0 { 0.5 * (depths[mid - 1] + depths[mid]) } else { depths[mid] };

    let (mut su, mut sv) = (0.0, 0.0);
    for (x, y) in mask.pixels() {
        su += x as f64 + 0.5;
        sv += y as f64 + 0.5;
    }
    let (cu, cv) = (su / area as f64, sv / area as f64);
    let position = lift_point(cu, cv, z, Some(k))?;

    let yaw = minor_axis_angle(mask);
    let (c, s) = (yaw.cos(), yaw.sin());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in mask.pixels() {
        let t = (x as f64 + 0.5) * c + (y as f64 + 0.5) * s;
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let extent_px = hi - lo + 1.0;
    let width = extent_px * z * ((c / k.fx).powi(2) + (s / k.fy).powi(2)).sqrt();

    Ok(GraspPose { position, yaw, width: width.min(gripper_max), confidence: depths.len() as f64 / area as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    const K: Intrinsics = Intrinsics { fx: 600.0, fy: 600.0, cx: 640.0, cy: 360.0 };

    #[test]
    fn lift_examples() {
        assert_eq!(lift_point(640.0, 360.0, 1.0, Some(&K)).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(lift_point(1240.0, 360.0, 1.0, Some(&K)).unwrap(), [1.0, 0.0, 1.0]);
        // (340 - 640) * 0.5 / 600
        assert_eq!(lift_point(340.0, 360.0, 0.5, Some(&K)).unwrap()[0], -0.25);
        assert_eq!(lift_point(1.0, 1.0, 1.0, None), Err(GeometryError::MissingIntrinsics));
        assert_eq!(lift_point(1.0, 1.0, 0.0, Some(&K)), Err(GeometryError::NonpositiveDepth(0.0)));
    }

    #[test]
    fn rectangle_closes_across_short_side() {
        let mask = Mask::rect(60, 140, 20, 20, 120, 40);
        let depth = DepthImage::flat(140, 60, 0.6);
        let k = Intrinsics { fx: 500.0, fy: 500.0, cx: 70.0, cy: 30.0 };
        let pose = grasp_proxy(&mask, &depth, Some(&k), 1.0).unwrap();
        assert!((pose.yaw - FRAC_PI_2).abs() < 1e-12);
        // 20 px at 0.6 m with f = 500
        assert!((pose.width - 20.0 * 0.6 / 500.0).abs() < 1e-12);
        assert_eq!(pose.confidence, 1.0);
        let (u, v) = pose.image_point(&k).unwrap();
        assert!((u - 70.0).abs() < 1e-9 && (v - 30.0).abs() < 1e-9);

        let tall = Mask::rect(140, 60, 20, 20, 40, 120);
        let pose = grasp_proxy(&tall, &DepthImage::flat(60, 140, 0.6), Some(&k), 1.0).unwrap();
        assert!(pose.yaw.abs() < 1e-12);
    }

    #[test]
    fn width_clamped_to_gripper() {
        let mask = Mask::rect(60, 140, 0, 0, 140, 60);
        let pose = grasp_proxy(&mask, &DepthImage::flat(140, 60, 1.0), Some(&Intrinsics::nominal()), 0.085).unwrap();
        assert_eq!(pose.width, 0.085);
    }

    #[test]
    fn circle_breaks_tie_to_zero() {
        let mask = Mask::from_fn(41, 41, |x, y| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 20.0);
            dx * dx + dy * dy <= 225.0
        });
        let pose = grasp_proxy(&mask, &DepthImage::flat(41, 41, 0.5), Some(&Intrinsics::nominal()), 1.0).unwrap();
        assert_eq!(pose.yaw, 0.0);
    }

    #[test]
    fn missing_depth_is_degenerate() {
        let mask = Mask::rect(20, 20, 2, 2, 10, 10);
        let mut depth = DepthImage::flat(20, 20, 0.5);
        for (x, y) in mask.pixels().collect::<Vec<_>>() {
            if x != 2 {
                depth.set_raw(x, y, 0);
            }
        }
        // only the 8 pixels of column 2 keep a reading
        assert_eq!(
            grasp_proxy(&mask, &depth, Some(&Intrinsics::nominal()), 1.0),
            Err(GeometryError::DegenerateMask { valid: 8, required: 10 })
        );
        assert_eq!(
            grasp_proxy(&mask, &DepthImage::flat(20, 20, 0.5), None, 1.0),
            Err(GeometryError::MissingIntrinsics)
        );
    }

    #[test]
    fn median_depth_ignores_outliers() {
        let mask = Mask::rect(10, 10, 0, 0, 5, 5);
        let mut depth = DepthImage::flat(10, 10, 0.5);
        depth.set_raw(0, 0, 9000);
        let pose = grasp_proxy(&mask, &depth, Some(&Intrinsics::nominal()), 1.0).unwrap();
        assert_eq!(pose.position[2], 0.5);
        assert_eq!(pose.confidence, 1.0);
    }

    fn rotate90(m: &Mask) -> Mask {
        // (x, y) -> (h - 1 - y, x)
        let (h, w) = (m.height(), m.width());
        Mask::from_fn(w, h, |x, y| m.get(y, h - 1 - x))
    }

    proptest! {
        #[test]
        fn lift_roundtrips(u in 0.0f64..1280.0, v in 0.0f64..720.0, z in 0.05f64..3.0) {
            let p = lift_point(u, v, z, Some(&K)).unwrap();
            let (u2, v2) = project_point(p, &K).unwrap();
            let back = lift_point(u2, v2, z, Some(&K)).unwrap();
            for i in 0..3 {
                prop_assert!((back[i] - p[i]).abs() < 1e-9);
            }
            let p2 = lift_point(u, v, 2.0 * z, Some(&K)).unwrap();
            prop_assert!((p2[0] - 2.0 * p[0]).abs() < 1e-9);
        }

        #[test]
        fn rotation_shifts_yaw_by_quarter_turn(x0 in 0usize..10, y0 in 0usize..10, w in 3usize..20, h in 3usize..20, shear in 0usize..4) {
            prop_assume!(w != h);
            let mask = Mask::from_fn(32, 32, |x, y| {
                y >= y0 && y < y0 + h && x >= x0 + (y - y0.min(y)) * shear / 4 && x < x0 + w + (y - y0.min(y)) * shear / 4
            });
            prop_assume!(mask.area() >= 10);
            let a = minor_axis_angle(&mask);
            let b = minor_axis_angle(&rotate90(&mask));
            let diff = normalize_yaw(b - a - FRAC_PI_2);
            prop_assert!(diff.abs() < 1e-9, "yaw {a} rotated {b}");
        }

        #[test]
        fn grasp_point_inside_bounding_box(x0 in 0usize..20, y0 in 0usize..20, w in 4usize..20, h in 4usize..20) {
            let mask = Mask::rect(48, 48, x0, y0, x0 + w, y0 + h);
            let k = Intrinsics { fx: 300.0, fy: 310.0, cx: 24.0, cy: 24.0 };
            let pose = grasp_proxy(&mask, &DepthImage::flat(48, 48, 0.7), Some(&k), 1.0).unwrap();
            let (u, v) = pose.image_point(&k).unwrap();
            let (bx0, by0, bx1, by1) = mask.bounding_box().unwrap();
            prop_assert!(u >= bx0 as f64 && u <= (bx1 + 1) as f64);
            prop_assert!(v >= by0 as f64 && v <= (by1 + 1) as f64);
        }
    }
}
