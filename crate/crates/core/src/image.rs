//! Pixel rasters and inclusive box geometry.

use ndarray::{s, Array3};

use crate::error::{Error, Result};

/// Channel-first raster with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Self {
        Self { pixels }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn full_box(&self) -> RegionBox {
        RegionBox::new(1, self.width(), 1, self.height())
    }

    /// Copies the pixels inside an inclusive 1-indexed box.
    pub fn crop(&self, b: RegionBox) -> Result<Image> {
        b.check_within(self.width(), self.height())?;
        let view = self.pixels.slice(s![.., b.y1 - 1..b.y2, b.x1 - 1..b.x2]);
        Ok(Image::new(view.to_owned()))
    }
}

/// Axis-aligned inclusive box, 1-indexed: columns `x1..=x2`, rows `y1..=y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionBox {
    pub x1: usize,
    pub x2: usize,
    pub y1: usize,
    pub y2: usize,
}

impl RegionBox {
    pub fn new(x1: usize, x2: usize, y1: usize, y2: usize) -> Self {
        Self { x1, x2, y1, y2 }
    }

    pub fn width(&self) -> usize {
        (self.x2 + 1).saturating_sub(self.x1)
    }

    pub fn height(&self) -> usize {
        (self.y2 + 1).saturating_sub(self.y1)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.x1 >= 1 && self.y1 >= 1 && self.x1 <= self.x2 && self.y1 <= self.y2 && self.x2 <= width && self.y2 <= height;
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateRegion {
                x1: self.x1,
                x2: self.x2,
                y1: self.y1,
                y2: self.y2,
                width,
                height,
            })
        }
    }

    /// Maps a latent-grid box to pixel space for patch factor `f`, clamped to the image.
    pub fn scale_to_pixels(&self, factor: usize, width: usize, height: usize) -> RegionBox {
        RegionBox {
            x1: ((self.x1 - 1) * factor + 1).min(width),
            x2: (self.x2 * factor).min(width),
            y1: ((self.y1 - 1) * factor + 1).min(height),
            y2: (self.y2 * factor).min(height),
        }
    }
}
