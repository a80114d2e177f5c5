//! Binary masks as 8-bit grayscale PNG: 255 foreground, 0 background.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::refinement::BinaryMask;

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = dims(mask.width(), mask.height())?;
    let img = GrayImage::from_fn(w, h, |x, y| {
        Luma([if mask.data()[y as usize * mask.width() + x as usize] { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        e => Error::validation(format!("cannot encode {}: {e}", path.display())),
    })
}

/// Any pixel with a non-zero luma counts as foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.into_raw().into_iter().map(|v| v != 0).collect())
}

fn dims(w: usize, h: usize) -> Result<(u32, u32)> {
    let conv = |v: usize| u32::try_from(v).map_err(|_| Error::validation(format!("mask dimension {v} too large")));
    Ok((conv(w)?, conv(h)?))
}
