//! Fitting arbitrary frames into the square network input.

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::geometry::BBox;
use crate::model::image_tensor;
use crate::tensor::Tensor;

/// Placement of a source frame inside the square input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    /// Input pixels per source pixel.
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub size: usize,
    pub src_w: u32,
    pub src_h: u32,
}

impl Letterbox {
    pub fn new(src_w: u32, src_h: u32, size: usize) -> Self {
        let scale = (size as f64 / src_w as f64).min(size as f64 / src_h as f64);
        let (w, h) = ((src_w as f64 * scale).round(), (src_h as f64 * scale).round());
        Self { scale, pad_x: ((size as f64 - w) / 2.0).floor(), pad_y: ((size as f64 - h) / 2.0).floor(), size, src_w, src_h }
    }

    fn resized(&self) -> (u32, u32) {
        ((self.src_w as f64 * self.scale).round() as u32, (self.src_h as f64 * self.scale).round() as u32)
    }

    /// Source-normalized box to input-normalized box.
    pub fn to_input(&self, b: &BBox) -> BBox {
        let (w, h) = self.resized();
        let s = self.size as f64;
        let fx = |x: f64| (self.pad_x + x * w as f64) / s;
        let fy = |y: f64| (self.pad_y + y * h as f64) / s;
        BBox::new(fx(b.xmin), fy(b.ymin), fx(b.xmax), fy(b.ymax))
    }

    /// Input-normalized box back to source-normalized, clipped to the frame.
    pub fn to_source(&self, b: &BBox) -> BBox {
        let (w, h) = self.resized();
        let s = self.size as f64;
        let fx = |x: f64| (x * s - self.pad_x) / w as f64;
        let fy = |y: f64| (y * s - self.pad_y) / h as f64;
        BBox::new(fx(b.xmin), fy(b.ymin), fx(b.xmax), fy(b.ymax)).clipped()
    }
}

pub const PAD_VALUE: u8 = 128;

pub fn letterbox(img: &RgbImage, size: usize) -> (Tensor, Letterbox) {
    let lb = Letterbox::new(img.width(), img.height(), size);
    if img.width() as usize == size && img.height() as usize == size {
        return (image_tensor(img.as_raw(), size, size), lb);
    }
    let (w, h) = lb.resized();
    let small = imageops::resize(img, w.max(1), h.max(1), FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(size as u32, size as u32, image::Rgb([PAD_VALUE; 3]));
    imageops::replace(&mut canvas, &small, lb.pad_x as i64, lb.pad_y as i64);
    (image_tensor(canvas.as_raw(), size, size), lb)
}
