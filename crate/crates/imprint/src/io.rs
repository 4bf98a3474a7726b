//! PNG images and masks.

use std::io::Cursor;
use std::path::Path;

use image::{imageops, GrayImage, ImageFormat, RgbImage};
use imprint_core::image::{Image, Mask};

use crate::{Error, Result};

/// Longest side of stream thumbnails.
pub const THUMBNAIL_SIDE: u32 = 256;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(img: &Image) -> RgbImage {
    let (h, w) = img.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

pub fn from_rgb8(rgb: &RgbImage) -> Result<Image> {
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, data)?)
}

fn encode(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Runtime(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

pub fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    encode(&image::DynamicImage::ImageRgb8(to_rgb8(img)))
}

/// Fits the image inside a `THUMBNAIL_SIDE` square, keeping its aspect.
pub fn thumbnail_png(img: &Image) -> Result<Vec<u8>> {
    let rgb = to_rgb8(img);
    let (w, h) = rgb.dimensions();
    let s = f64::from(THUMBNAIL_SIDE) / f64::from(w.max(h));
    let (tw, th) = (((f64::from(w) * s).round() as u32).max(1), ((f64::from(h) * s).round() as u32).max(1));
    let filter = if s >= 1.0 { imageops::FilterType::Nearest } else { imageops::FilterType::Triangle };
    encode(&image::DynamicImage::ImageRgb8(imageops::resize(&rgb, tw, th, filter)))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    write_bytes(path, &png_bytes(img)?)
}

pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<Image> {
    let dynamic = image::load_from_memory(bytes).map_err(|e| Error::format(origin, e))?;
    from_rgb8(&dynamic.to_rgb8())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Single-channel masks: nonzero marks the subject.
pub fn decode_mask(bytes: &[u8], origin: &Path) -> Result<Mask> {
    let gray = image::load_from_memory(bytes).map_err(|e| Error::format(origin, e))?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Mask::new(h as usize, w as usize, gray.as_raw().iter().map(|&v| v != 0).collect())?)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

pub fn mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    encode(&image::DynamicImage::ImageLuma8(gray))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_bytes(path, &mask_png(mask)?)
}

/// Nearest-neighbour resampling.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(height, width, |y, x| mask.get(y * h / height, x * w / width))
}

/// Lays images side by side (top-aligned) on a black canvas.
pub fn grid(images: &[Image]) -> Option<Image> {
    let h = images.iter().map(Image::height).max()?;
    let w: usize = images.iter().map(Image::width).sum();
    let mut out = Image::filled(h, w, [0.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    out.set(y, x0 + x, c, img.get(y, x, c));
                }
            }
        }
        x0 += img.width();
    }
    Some(out)
}
