//! Depth and mask images stored as binary PGM.

use std::path::Path;

use geopose_core::geometry::{DepthImage, Mask};
use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })
}

/// 16-bit (or 8-bit) grayscale depth in sensor units; 0 marks no reading.
pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let img = open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(DepthImage::new(w as usize, h as usize, img.into_raw())?)
}

/// Any nonzero pixel is part of the object.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Mask::new(w as usize, h as usize, img.into_raw().into_iter().map(|v| v != 0).collect())?)
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width as u32, depth.height as u32, depth.data.clone())
        .ok_or_else(|| Error::Image { path: path.into(), msg: "buffer size mismatch".into() })?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Pnm).map_err(|e| Error::Image { path: path.into(), msg: e.to_string() })?;
    crate::fsutil::write_atomic(path, &out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_round_trip_keeps_sixteen_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        let d = DepthImage::new(3, 2, vec![0, 1, 255, 256, 40000, 65535]).unwrap();
        write_depth(&p, &d).unwrap();
        assert_eq!(read_depth(&p).unwrap(), d);
        let m = read_mask(&p).unwrap();
        assert_eq!(m.data, vec![false, true, true, true, true, true]);
    }

    #[test]
    fn garbage_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        std::fs::write(&p, b"P5\n2 2\n").unwrap();
        assert!(matches!(read_depth(&p), Err(Error::Image { .. })));
        assert!(matches!(read_depth(&dir.path().join("none.pgm")), Err(Error::Io { .. })));
    }
}
