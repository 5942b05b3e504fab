//! Pixel <-> latent stand-ins and the toy reference-image feature encoder.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Latent;
use crate::error::{Error, Result};
use crate::image::{Image, RegionBox};
use crate::ops::bilinear_resize;

/// Non-overlapping `factor x factor` patch average per channel.
pub fn latent_encode(image: &Image, factor: usize) -> Result<Latent> {
    let (c, h, w) = image.pixels.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::NotDivisible {
            width: w,
            height: h,
            factor,
        });
    }
    let (lh, lw) = (h / factor, w / factor);
    let area = (factor * factor) as f32;
    let mut values = Array3::<f32>::zeros((c, lh, lw));
    for ch in 0..c {
        for y in 0..lh {
            for x in 0..lw {
                let mut sum = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += image.pixels[[ch, y * factor + dy, x * factor + dx]];
                    }
                }
                values[[ch, y, x]] = sum / area;
            }
        }
    }
    Ok(Latent::new(values))
}

/// Nearest-neighbour upsample by `factor`.
pub fn latent_decode(z: &Latent, factor: usize) -> Image {
    let (c, h, w) = z.values.dim();
    let pixels = Array3::from_shape_fn((c, h * factor, w * factor), |(ch, y, x)| z.values[[ch, y / factor, x / factor]]);
    Image::new(pixels)
}

/// Seeded linear encoder from pixel colour to feature tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    /// Side of the square patch grid each crop is resized to.
    pub grid: usize,
    /// channels x dim, no bias.
    pub projection: Array2<f32>,
}

impl FeatureEncoder {
    pub fn new(channels: usize, dim: usize, grid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (channels as f32).sqrt();
        let projection = Array2::from_shape_simple_fn((channels, dim), || {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { grid, projection }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Crops `region`, resizes it bilinearly to `grid x grid` and maps each
    /// cell's colour to one token. Output is `grid^2 x dim`, row-major cells.
    pub fn encode(&self, image: &Image, region: RegionBox) -> Result<Array2<f32>> {
        if region.area() == 0 {
            return Err(degenerate(region, image));
        }
        let crop = image.crop(region)?;
        let channels = crop.channels();
        if channels != self.projection.nrows() {
            return Err(Error::shape(&[self.projection.nrows()], &[channels]));
        }
        let g = self.grid;
        let mut cells = Array2::<f32>::zeros((g * g, channels));
        for ch in 0..channels {
            let resized = bilinear_resize(crop.pixels.index_axis(ndarray::Axis(0), ch), g, g);
            for (i, v) in resized.iter().enumerate() {
                cells[[i, ch]] = *v;
            }
        }
        Ok(cells.dot(&self.projection))
    }

    /// Mean-pooled features of the whole image.
    pub fn pooled(&self, image: &Image) -> Result<Vec<f32>> {
        let tokens = self.encode(image, image.full_box())?;
        let n = tokens.nrows() as f32;
        Ok((0..tokens.ncols()).map(|c| tokens.column(c).sum() / n).collect())
    }
}

fn degenerate(b: RegionBox, image: &Image) -> Error {
    Error::DegenerateRegion {
        x1: b.x1,
        x2: b.x2,
        y1: b.y1,
        y2: b.y2,
        width: image.width(),
        height: image.height(),
    }
}

/// Convenience wrapper building the encoder from its seed.
pub fn encode_reference_features(image: &Image, region: RegionBox, dim: usize, grid: usize, seed: u64) -> Result<Array2<f32>> {
    FeatureEncoder::new(image.channels(), dim, grid, seed).encode(image, region)
}
