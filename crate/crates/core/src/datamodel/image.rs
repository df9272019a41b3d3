use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, stored row-major
/// `height x width x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Working resolution for camera images.
    pub const WORKING_WIDTH: usize = 320;
    pub const WORKING_HEIGHT: usize = 240;

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image size {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    /// Builds from raw values, clamping them into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    /// Area-average downscale by an integer factor per axis.
    pub fn downscale(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || self.width % width != 0 || self.height % height != 0 {
            return Err(Error::invalid(format!(
                "cannot downscale {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let norm = 1.0 / (fx * fy) as f64;
        let mut out = vec![0.0; width * height * 3];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += self.get(x * fx + dx, y * fy + dy, c);
                        }
                    }
                    out[(y * width + x) * 3 + c] = (s * norm).clamp(0.0, 1.0);
                }
            }
        }
        Self::new(width, height, out)
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}
