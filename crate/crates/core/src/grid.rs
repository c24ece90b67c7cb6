//! Square single-channel images with intensities in `[-1, 1]`.

use crate::error::{Error, Result};

/// Side length of MNIST and FashionMNIST images.
pub const MNIST_SIDE: usize = 28;

/// A `side × side` row-major grid of intensities in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    side: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    /// Builds a grid, checking the shape and the `[-1, 1]` range.
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(Error::dim("image side must be positive"));
        }
        if pixels.len() != side * side {
            return Err(Error::dim(format!(
                "expected {} pixels for side {side}, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!("pixel {i} = {v} outside [-1, 1]")));
        }
        Ok(Self { side, pixels })
    }

    /// Builds a grid from values that are in range by construction (network outputs).
    pub(crate) fn from_raw(side: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), side * side);
        Self { side, pixels }
    }

    pub fn filled(side: usize, value: f32) -> Result<Self> {
        Self::new(side, vec![value; side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub(crate) fn check_side(&self, side: usize) -> Result<()> {
        if self.side != side {
            return Err(Error::dim(format!(
                "grid side {} does not match {side}",
                self.side
            )));
        }
        Ok(())
    }
}
