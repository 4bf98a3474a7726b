//! RGB images, boolean masks and pixel boxes.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::RowMix;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// An `H×W×3` image with channel values nominally in `[0, 1]`, stored HWC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values do not form a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * 3 + c] = value;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `(H·W) × 3` view used on the tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.pixel_count(), 3, self.data.clone()).expect("image buffer is H*W*3")
    }

    pub fn from_tensor(height: usize, width: usize, tensor: &Tensor) -> Result<Self> {
        if tensor.shape() != (height * width, 3) {
            return Err(Error::Shape(format!(
                "tensor {:?} is not a {height}x{width} image",
                tensor.shape()
            )));
        }
        Self::new(height, width, tensor.data().to_vec())
    }

    pub fn clamped(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared error over every pixel and channel.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "resolution mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mix = bilinear_mix(self.dims(), (height, width));
        let t = mix.apply(&self.to_tensor());
        Image::from_tensor(height, width, &t).expect("resize output shape")
    }

    /// Copy of the pixels inside `bbox`.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Image> {
        let b = bbox.clipped(self.height, self.width).ok_or_else(|| {
            Error::Invalid(format!("box {bbox:?} lies outside a {}x{} image", self.height, self.width))
        })?;
        Ok(Image::from_fn(b.height(), b.width(), |y, x| self.pixel(b.y0 + y, b.x0 + x)))
    }

    /// Copy with every pixel where `mask` is true replaced by `fill`.
    pub fn with_masked_out(&self, mask: &Mask, fill: [f64; 3]) -> Result<Image> {
        mask.ensure_dims(self.height, self.width)?;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(y, x) {
                    for (c, v) in fill.iter().enumerate() {
                        out.set(y, x, c, *v);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Row-mixing weights for a bilinear resize of a `(pixels, channels)` tensor.
pub fn bilinear_mix(from: (usize, usize), to: (usize, usize)) -> RowMix {
    let (fh, fw) = from;
    let (th, tw) = to;
    let mut entries = Vec::with_capacity(th * tw * 4);
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (libm::floor(pos) as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..th {
        let (y0, y1, fy) = axis(y, fh, th);
        for x in 0..tw {
            let (x0, x1, fx) = axis(x, fw, tw);
            let out = y * tw + x;
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (sy, sx, w) in taps {
                if w != 0.0 {
                    entries.push((out, sy * fw + sx, w));
                }
            }
        }
    }
    RowMix { in_rows: fh * fw, out_rows: th * tw, entries }
}

pub(crate) fn shared_bilinear_mix(from: (usize, usize), to: (usize, usize)) -> Arc<RowMix> {
    Arc::new(bilinear_mix(from, to))
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Invalid(format!("empty box ({x0},{y0})-({x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height && self.x0 < self.x1 && self.y0 < self.y1
    }

    /// Intersection with the image frame, `None` when empty.
    pub fn clipped(&self, height: usize, width: usize) -> Option<Self> {
        let b = Self { x0: self.x0, y0: self.y0, x1: self.x1.min(width), y1: self.y1.min(height) };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// Grows the box by `radius` pixels on every side, clipped to the frame.
    pub fn dilated(&self, radius: usize, height: usize, width: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(radius),
            y0: self.y0.saturating_sub(radius),
            x1: (self.x1 + radius).min(width),
            y1: (self.y1 + radius).min(height),
        }
    }
}

/// `H×W` boolean mask; `true` marks subject pixels unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("{} bits do not form a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn from_box(height: usize, width: usize, bbox: &BoundingBox) -> Self {
        Self::from_fn(height, width, |y, x| bbox.contains(y, x))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.dims() != (height, width) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, image is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Pixel-wise negation.
    pub fn inverted(&self) -> Mask {
        Mask { height: self.height, width: self.width, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        other.ensure_dims(self.height, self.width)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(Mask { height: self.height, width: self.width, bits })
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        other.ensure_dims(self.height, self.width)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Mask { height: self.height, width: self.width, bits })
    }

    /// Square-neighbourhood dilation by `radius` pixels.
    pub fn dilated(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = self.dims();
        Mask::from_fn(h, w, |y, x| {
            let ys = y.saturating_sub(radius)..(y + radius + 1).min(h);
            ys.into_iter().any(|yy| {
                (x.saturating_sub(radius)..(x + radius + 1).min(w)).any(|xx| self.get(yy, xx))
            })
        })
    }

    /// Tightest box around the `true` pixels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BoundingBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                        Some(b) => BoundingBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x + 1),
                            y1: b.y1.max(y + 1),
                        },
                    });
                }
            }
        }
        b
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        let inter = self.intersection(other)?.count();
        let union = self.union(other)?.count();
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// `(H·W) × 3` tensor with 1.0 on `true` pixels.
    pub fn to_channel_tensor(&self) -> Tensor {
        Tensor::from_fn(self.bits.len(), 3, |r, _| if self.bits[r] { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(4, 6, |y, x| [y as f64 / 4.0, x as f64 / 6.0, 0.5]);
        assert_eq!(img.resized(4, 6), img);
        let flat = Image::filled(5, 7, [0.25, 0.5, 0.75]);
        let r = flat.resized(3, 2);
        for v in r.data().chunks(3) {
            assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12 && (v[2] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let mix = bilinear_mix((7, 5), (3, 11));
        let mut sums = vec![0.0; mix.out_rows];
        for (o, _, w) in &mix.entries {
            sums[*o] += w;
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dilation_grows_single_pixel() {
        let m = Mask::from_fn(9, 9, |y, x| y == 4 && x == 4);
        let d = m.dilated(3);
        assert_eq!(d.count(), 49);
        assert_eq!(d.bounding_box(), Some(BoundingBox { x0: 1, y0: 1, x1: 8, y1: 8 }));
    }

    #[test]
    fn crop_and_mask_out() {
        let img = Image::from_fn(4, 4, |y, x| [(y * 4 + x) as f64 / 16.0, 0.0, 0.0]);
        let c = img.crop(&BoundingBox::new(1, 1, 3, 2).unwrap()).unwrap();
        assert_eq!(c.dims(), (1, 2));
        assert_eq!(c.get(0, 0, 0), 5.0 / 16.0);
        let m = Mask::from_fn(4, 4, |y, _| y == 0);
        let out = img.with_masked_out(&m, [0.0; 3]).unwrap();
        assert_eq!(out.get(0, 3, 0), 0.0);
        assert_eq!(out.get(1, 3, 0), img.get(1, 3, 0));
    }

    #[test]
    fn mismatched_mse_is_an_error() {
        let a = Image::filled(2, 2, [0.0; 3]);
        let b = Image::filled(2, 3, [0.0; 3]);
        assert!(a.mse(&b).is_err());
    }
}
