use alloc::vec::Vec;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics; `depth_scale` converts stored depth units to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.depth_scale > 0.0) {
            return Err(Error::Config("intrinsics need fx, fy, depth_scale > 0".into()));
        }
        Ok(())
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point of pixel `(u, v)` at depth `z` meters.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Row-major `height x width` image of raw depth units; 0 marks invalid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Precondition(alloc::format!(
                "depth image {width}x{height} with {} pixels",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn at(&self, u: usize, v: usize) -> u16 {
        self.data[v * self.width + u]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Precondition(alloc::format!(
                "mask {width}x{height} with {} pixels",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: alloc::vec![true; width * height] }
    }
}

/// Lifts every masked pixel with nonzero depth into the camera frame,
/// scanning rows top to bottom.
pub fn backproject(depth: &DepthImage, mask: &Mask, k: &CameraIntrinsics) -> Result<PointCloud> {
    k.validate()?;
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::Precondition("depth image and mask differ in size".into()));
    }
    let mut pts = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if d == 0 || !mask.data[v * mask.width + u] {
                continue;
            }
            let z = f64::from(d) * k.depth_scale;
            pts.push(k.unproject(u as f64, v as f64, z));
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn intr(f: f64, c: f64, scale: f64) -> CameraIntrinsics {
        CameraIntrinsics { fx: f, fy: f, cx: c, cy: c, depth_scale: scale }
    }

    #[test]
    fn principal_point_lies_on_axis() {
        let mut d = DepthImage::new(5, 5, vec![0; 25]).unwrap();
        d.data[2 * 5 + 2] = 1000;
        let pc = backproject(&d, &Mask::full(5, 5), &intr(100.0, 2.0, 1e-3)).unwrap();
        assert_eq!(pc.points(), &[Vector3::new(0.0, 0.0, 1.0)]);
    }

    #[test]
    fn off_axis_pixel() {
        // fx = 500, cx = cy = 320, pixel (820, 320), z = 2 -> x = 500 * 2 / 500 = 2
        let k = intr(500.0, 320.0, 1e-3);
        let p = k.unproject(820.0, 320.0, 2.0);
        assert_eq!(p, Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn empty_mask_is_error() {
        let d = DepthImage::new(3, 2, vec![500; 6]).unwrap();
        let m = Mask::new(3, 2, vec![false; 6]).unwrap();
        assert_eq!(backproject(&d, &m, &intr(100.0, 1.0, 1e-3)).err(), Some(Error::EmptyCloud));
    }

    #[test]
    fn reprojection_recovers_pixels() {
        let (w, h) = (40, 30);
        let data: Vec<u16> = (0..w * h).map(|i| 700 + (i % 97) as u16 * 13).collect();
        let d = DepthImage::new(w, h, data).unwrap();
        let k = CameraIntrinsics { fx: 525.0, fy: 519.5, cx: 19.3, cy: 14.8, depth_scale: 1e-3 };
        let pc = backproject(&d, &Mask::full(w, h), &k).unwrap();
        let mut i = 0;
        for v in 0..h {
            for u in 0..w {
                let (pu, pv) = k.project(&pc.points()[i]);
                assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
                i += 1;
            }
        }
    }
}
