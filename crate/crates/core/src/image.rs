//! H×W×3 float images in [0, 1] and 8-bit PNG IO.
//!
//! Float to 8-bit quantization clamps to [0, 1], scales by 255 and rounds
//! half away from zero, so writing then reading an image built from 8-bit
//! values reproduces it exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHANNELS: usize = 3;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::dims(
                "Image::from_vec",
                format!("{height}x{width}x3"),
                data.len(),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Rec.601 luma, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    pub fn check_same_dims(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(
                op,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(
            Shape::new(1, CHANNELS, self.height, self.width),
            |_, c, y, x| self.get(y, x, c),
        )
    }

    /// Item `n` of an NCHW tensor with three channels.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Image> {
        let s = t.shape();
        if s.c != CHANNELS || n >= s.n {
            return Err(Error::dims(
                "Image::from_tensor",
                s,
                format!("item {n} of [_, 3, h, w]"),
            ));
        }
        Ok(Image::from_fn(s.h, s.w, |y, x, c| t.at(n, c, y, x)))
    }

    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = images.iter().map(Image::to_tensor).collect();
        Tensor::stack(&items)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::contract(
                "Image::crop",
                format!(
                    "window {height}x{width}+{top}+{left} outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(Image::from_fn(height, width, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Mirror-pad bottom and right edges up to multiples of `align`.
    pub fn reflect_pad(&self, align: usize) -> Image {
        let h = self.height.div_ceil(align) * align;
        let w = self.width.div_ceil(align) * align;
        if (h, w) == self.dims() {
            return self.clone();
        }
        Image::from_fn(h, w, |y, x, c| {
            self.get(
                reflect(y as isize, self.height),
                reflect(x as isize, self.width),
                c,
            )
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dims")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| dequantize(v)).collect(),
        }
    }

    /// Read any PNG as RGB; gray is replicated and alpha dropped.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Write a single-channel map, row-major values in [0, 1], as 8-bit gray PNG.
pub fn write_gray_png(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    values: &[f32],
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::dims(
            "write_gray_png",
            format!("{height}x{width}"),
            values.len(),
        ));
    }
    let raw = values.iter().map(|&v| quantize(v)).collect();
    image::GrayImage::from_raw(width as u32, height as u32, raw)
        .expect("buffer length matches dims")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}
