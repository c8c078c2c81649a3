use std::path::Path;

use image::GrayImage;

use super::types::{BinaryMask, Frame};
use super::DataError;

fn open_gray(path: &Path) -> Result<GrayImage, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

fn save_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let img = GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| DataError::Schema(format!("{}: buffer does not match {width}x{height}", path.display())))?;
    img.save(path).map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::io(path, e),
        source => DataError::Image { path: path.to_path_buf(), source },
    })
}

/// Reads an 8-bit grayscale PNG (colour images are converted to luma).
pub fn read_frame(path: &Path) -> Result<Frame, DataError> {
    let img = open_gray(path)?;
    let (w, h) = img.dimensions();
    Frame::new(h as usize, w as usize, img.into_raw())
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), DataError> {
    save_gray(path, frame.width, frame.height, frame.pixels.clone())
}

/// Reads a mask image; any pixel above 127 is foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask, DataError> {
    let img = open_gray(path)?;
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, img.into_raw().into_iter().map(|p| p > 127).collect())
}

/// Writes a mask with values {0, 255}.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    let pixels = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray(path, mask.width, mask.height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(3, 5, (0..15).map(|i| (i * 17) as u8).collect()).unwrap();
        let mask = BinaryMask::new(3, 5, (0..15).map(|i| i % 3 == 0).collect()).unwrap();
        let fp = dir.path().join("a/00000.png");
        let mp = dir.path().join("a/00000_LV.png");
        write_frame(&fp, &frame).unwrap();
        write_mask(&mp, &mask).unwrap();
        assert_eq!(read_frame(&fp).unwrap(), frame);
        assert_eq!(read_mask(&mp).unwrap(), mask);
        let raw = image::open(&mp).unwrap().into_luma8().into_raw();
        assert!(raw.iter().all(|&p| p == 0 || p == 255));
    }

    #[test]
    fn missing_image_is_named() {
        let err = read_frame(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(p) if p.ends_with("x.png")));
    }
}
