use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::Rng;

use crate::data::{BinaryMask, Frame};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    /// Resize, then a random crop.
    Train,
    /// Resize, then the center crop.
    Eval,
}

/// Square resize followed by a square crop at `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub resize: usize,
    pub crop: usize,
    pub y: usize,
    pub x: usize,
}

impl CropWindow {
    pub fn new<R: Rng + ?Sized>(mode: AugmentMode, resize: usize, crop: usize, rng: &mut R) -> Result<Self> {
        let center = Self::center(resize, crop)?;
        match mode {
            AugmentMode::Eval => Ok(center),
            AugmentMode::Train => {
                let slack = resize - crop;
                Ok(Self { y: rng.random_range(0..=slack), x: rng.random_range(0..=slack), ..center })
            }
        }
    }

    pub fn center(resize: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > resize {
            return Err(Error::Argument(format!("crop {crop} must be in 1..={resize}")));
        }
        let offset = (resize - crop) / 2;
        Ok(Self { resize, crop, y: offset, x: offset })
    }

    fn apply(&self, img: GrayImage, filter: FilterType) -> GrayImage {
        let size = self.resize as u32;
        let resized =
            if img.width() == size && img.height() == size { img } else { imageops::resize(&img, size, size, filter) };
        imageops::crop_imm(&resized, self.x as u32, self.y as u32, self.crop as u32, self.crop as u32).to_image()
    }

    /// Bilinear resize and crop of an intensity frame.
    pub fn frame(&self, frame: &Frame) -> Frame {
        let img = GrayImage::from_raw(frame.width as u32, frame.height as u32, frame.pixels.clone())
            .expect("frame buffer matches its size");
        let out = self.apply(img, FilterType::Triangle);
        Frame { height: self.crop, width: self.crop, pixels: out.into_raw() }
    }

    /// Nearest-neighbour resize and crop of a mask.
    pub fn mask(&self, mask: &BinaryMask) -> BinaryMask {
        let raw = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img =
            GrayImage::from_raw(mask.width as u32, mask.height as u32, raw).expect("mask buffer matches its size");
        let out = self.apply(img, FilterType::Nearest);
        BinaryMask { height: self.crop, width: self.crop, bits: out.into_raw().into_iter().map(|v| v > 127).collect() }
    }
}

/// Applies one window to a frame and its masks.
pub fn augment<R: Rng + ?Sized>(
    frame: &Frame,
    masks: &[BinaryMask],
    mode: AugmentMode,
    resize: usize,
    crop: usize,
    rng: &mut R,
) -> Result<(Frame, Vec<BinaryMask>)> {
    let window = CropWindow::new(mode, resize, crop, rng)?;
    Ok((window.frame(frame), masks.iter().map(|m| window.mask(m)).collect()))
}
