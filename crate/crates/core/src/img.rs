use crate::error::{Error, Result};

/// Row-major RGB image with `f64` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "{} values for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[3 * (y * self.width + x) + ch]
    }

    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f64) {
        self.data[3 * (y * self.width + x) + ch] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Values rounded to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized_u8(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

impl crate::render::RenderOutput {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.image.clone(),
        }
    }
}
