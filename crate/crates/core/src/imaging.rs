//! Image decode/encode, white-canvas placement, background masks and the
//! mean-subtracted tensor layout the feature network expects.

use std::collections::VecDeque;
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::RgbImage;

pub const CANVAS_SIZE: u32 = 512;

/// Per-channel RGB means subtracted before the network sees an image.
pub const CHANNEL_MEANS: [f32; 3] = [123.68, 116.779, 103.939];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn decode_error(e: image::ImageError) -> Error {
    Error::BadImage(e.to_string())
}

/// Decodes PNG or JPEG bytes; alpha is composited over white.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes).map_err(decode_error)?;
    if !img.color().has_alpha() {
        return Ok(img.to_rgb8());
    }
    let rgba = img.to_rgba8();
    Ok(RgbImage::from_fn(rgba.width(), rgba.height(), |x, y| {
        let p = rgba.get_pixel(x, y).0;
        let a = p[3] as u32;
        let blend = |c: u8| ((c as u32 * a + 255 * (255 - a) + 127) / 255) as u8;
        Rgb([blend(p[0]), blend(p[1]), blend(p[2])])
    }))
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb(&bytes)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::BadImage(other.to_string()),
    })
}

/// Where an image sits on its square white canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasPlacement {
    pub canvas: u32,
    pub original_width: u32,
    pub original_height: u32,
    /// Size after any aspect-preserving downscale; equals the original when none occurred.
    pub placed_width: u32,
    pub placed_height: u32,
    pub top: u32,
    pub left: u32,
}

impl CanvasPlacement {
    pub fn downscaled(&self) -> bool {
        (self.placed_width, self.placed_height) != (self.original_width, self.original_height)
    }
}

/// Centers `img` on a white `canvas × canvas` image without deforming it.
/// Images larger than the canvas are first downscaled (bilinear) to fit.
pub fn canvas_resize(img: &RgbImage, canvas: u32) -> (RgbImage, CanvasPlacement) {
    let (w, h) = img.dimensions();
    let (pw, ph) = if w > canvas || h > canvas {
        let scale = (canvas as f64 / w as f64).min(canvas as f64 / h as f64);
        let fit = |v: u32| ((v as f64 * scale).round() as u32).clamp(1, canvas);
        (fit(w), fit(h))
    } else {
        (w, h)
    };
    let placed;
    let src = if (pw, ph) != (w, h) {
        placed = image::imageops::resize(img, pw, ph, FilterType::Triangle);
        &placed
    } else {
        img
    };
    let top = (canvas - ph) / 2;
    let left = (canvas - pw) / 2;
    let mut out = RgbImage::from_pixel(canvas, canvas, WHITE);
    image::imageops::replace(&mut out, src, left as i64, top as i64);
    (
        out,
        CanvasPlacement {
            canvas,
            original_width: w,
            original_height: h,
            placed_width: pw,
            placed_height: ph,
            top,
            left,
        },
    )
}

/// Binary garment mask: `true` marks garment pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != (width * height) as usize {
            return Err(Error::shape(format!("mask data does not match {width}x{height}")));
        }
        Ok(Mask { width, height, data })
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![true; (width * height) as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_garment(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn garment_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| Luma([if self.is_garment(x, y) { 255 } else { 0 }]))
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::BadImage(other.to_string()),
            })
    }

    /// 3×3 morphological operation on the garment set; out-of-image pixels
    /// count as background.
    fn morph(&self, dilate: bool) -> Mask {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut data = vec![false; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut window = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (x + dx, y + dy))).map(|(nx, ny)| {
                    nx >= 0 && ny >= 0 && nx < w && ny < h && self.data[(ny * w + nx) as usize]
                });
                data[(y * w + x) as usize] = if dilate { window.any(|v| v) } else { window.all(|v| v) };
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Closing computed on a one-pixel background border, so the result does
    /// not depend on how much white surrounds the image.
    pub fn close(&self) -> Mask {
        let (w, h) = (self.width + 2, self.height + 2);
        let padded = Mask {
            width: w,
            height: h,
            data: (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .map(|(x, y)| {
                    x >= 1 && y >= 1 && x <= self.width && y <= self.height && self.is_garment(x - 1, y - 1)
                })
                .collect(),
        };
        let closed = padded.morph(true).morph(false);
        Mask {
            width: self.width,
            height: self.height,
            data: (0..self.height)
                .flat_map(|y| (0..self.width).map(move |x| (x, y)))
                .map(|(x, y)| closed.is_garment(x + 1, y + 1))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// A pixel is background-colored when min(R, G, B) is at least this.
    pub threshold: u8,
    /// Apply one 3×3 closing to the garment region.
    pub closing: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            threshold: 250,
            closing: true,
        }
    }
}

/// Background = near-white pixels connected to the image border through
/// near-white pixels (4-connectivity). Everything else is garment.
pub fn extract_mask(img: &RgbImage, config: &MaskConfig) -> Result<Mask> {
    let (w, h) = img.dimensions();
    let whiteish = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        p[0].min(p[1]).min(p[2]) >= config.threshold
    };
    let mut background = vec![false; (w * h) as usize];
    let mut queue = VecDeque::new();
    let seed = |x: u32, y: u32, bg: &mut Vec<bool>, q: &mut VecDeque<(u32, u32)>| {
        let i = (y * w + x) as usize;
        if !bg[i] && whiteish(x, y) {
            bg[i] = true;
            q.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut background, &mut queue);
        seed(x, h - 1, &mut background, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut background, &mut queue);
        seed(w - 1, y, &mut background, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut background, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut background, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut background, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut background, &mut queue);
        }
    }
    let mut mask = Mask {
        width: w,
        height: h,
        data: background.iter().map(|&b| !b).collect(),
    };
    if config.closing {
        mask = mask.close();
    }
    if mask.garment_pixels() == 0 {
        return Err(Error::NoGarmentFound);
    }
    Ok(mask)
}

/// `1×3×H×W` tensor with the channel means subtracted.
pub fn normalize(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 - CHANNEL_MEANS[c];
        }
    }
    Tensor::from_vec([1, 3, h as usize, w as usize], data).expect("dimensions are positive")
}

/// Inverse of [`normalize`], rounding and clamping to `[0, 255]`.
pub fn denormalize(t: &Tensor<f32>) -> Result<RgbImage> {
    if t.batch() != 1 || t.channels() != 3 {
        return Err(Error::shape(format!("expected a 1x3xHxW tensor, got {:?}", t.shape())));
    }
    let (h, w) = (t.height(), t.width());
    let plane = h * w;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (d[c * plane + i] + CHANNEL_MEANS[c]).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Clamps a normalized tensor to the values [`denormalize`] can represent.
pub fn clamp_normalized(t: &mut Tensor<f32>) {
    let plane = t.plane();
    let channels = t.channels();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let mean = CHANNEL_MEANS[(i / plane) % channels % 3];
        *v = v.clamp(-mean, 255.0 - mean);
    }
}

/// Whitens background pixels.
pub fn apply_mask(img: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if img.dimensions() != (mask.width, mask.height) {
        return Err(Error::shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width,
            mask.height,
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if !mask.is_garment(x, y) {
            *p = WHITE;
        }
    }
    Ok(out)
}

/// Crops the placement window out of an optimized canvas, restores the
/// original size and whitens the background.
pub fn postprocess(result: &Tensor<f32>, placement: &CanvasPlacement, mask: &Mask) -> Result<RgbImage> {
    let c = placement.canvas as usize;
    if result.height() != c || result.width() != c {
        return Err(Error::shape(format!(
            "result is {}x{}, placement canvas is {c}x{c}",
            result.height(),
            result.width()
        )));
    }
    if (mask.width, mask.height) != (placement.original_width, placement.original_height) {
        return Err(Error::shape(format!(
            "mask is {}x{}, original image was {}x{}",
            mask.width, mask.height, placement.original_width, placement.original_height
        )));
    }
    let canvas = denormalize(result)?;
    let window = image::imageops::crop_imm(
        &canvas,
        placement.left,
        placement.top,
        placement.placed_width,
        placement.placed_height,
    )
    .to_image();
    let restored = if placement.downscaled() {
        image::imageops::resize(
            &window,
            placement.original_width,
            placement.original_height,
            FilterType::Triangle,
        )
    } else {
        window
    };
    apply_mask(&restored, mask)
}
