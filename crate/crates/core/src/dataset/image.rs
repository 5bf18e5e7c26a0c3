use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
/// Values per image (`3 * 32 * 32`).
pub const IMAGE_LEN: usize = CHANNELS * PLANE;

/// A 3x32x32 image in channel-major order with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Vec<f32>);

impl Image {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != IMAGE_LEN {
            return Err(Error::Inconsistent(format!(
                "image needs {IMAGE_LEN} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Inconsistent(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self(data))
    }

    pub fn filled(value: f32) -> Self {
        Self(vec![value.clamp(0.0, 1.0); IMAGE_LEN])
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.0
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.0[channel * PLANE + row * SIDE + col]
    }

    /// RGB triple at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        std::array::from_fn(|c| self.get(c, row, col))
    }

    /// Writes all channels of one pixel; values are clamped into `[0, 1]`.
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.0[c * PLANE + row * SIDE + col] = v.clamp(0.0, 1.0);
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.0
    }

    /// Mean of per-channel pixel variances.
    pub fn pixel_variance(&self) -> f64 {
        self.0
            .chunks(PLANE)
            .map(|plane| {
                let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / PLANE as f64;
                plane
                    .iter()
                    .map(|v| (*v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / PLANE as f64
            })
            .sum::<f64>()
            / CHANNELS as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}
