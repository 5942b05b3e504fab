//! Synthetic scenes with planted attention, used by the tests and the
//! `fixtures` subcommand.
//!
//! Characters occupy vertical strips of the latent; each strip is cut into
//! face, upper and lower bands. Every boundary sits on an even cell so the
//! half-resolution layers see exact 0/1 masks.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::RegionKey;
use crate::error::{Error, Result};
use crate::image::{Image, RegionBox};
use crate::probe::AttentionFixture;
use crate::text::{parse_region_prompts, PromptSpec, RegionLabel};

const CAST: [[&str; 3]; 4] = [
    ["a boy", "green jacket", "blue pants"],
    ["a girl", "red coat", "black skirt"],
    ["an old man", "grey sweater", "brown trousers"],
    ["a woman", "white shirt", "denim jeans"],
];

/// Prompt text mentioning the first `characters` members of the cast.
pub fn cast_prompt(characters: usize) -> String {
    CAST[..characters]
        .iter()
        .map(|[face, upper, lower]| format!("{face} wearing {upper} and {lower}"))
        .collect::<Vec<_>>()
        .join(", next to ")
}

/// Region annotations of cast member `j` (1-based).
pub fn cast_annotations(j: usize) -> Vec<(RegionLabel, String)> {
    let [face, upper, lower] = CAST[j - 1];
    vec![
        (RegionLabel::Face, face.to_string()),
        (RegionLabel::Upper, upper.to_string()),
        (RegionLabel::Lower, lower.to_string()),
    ]
}

/// One spec per character over the shared cast prompt.
pub fn cast_specs(characters: usize) -> Result<Vec<PromptSpec>> {
    if characters == 0 || characters > CAST.len() {
        return Err(Error::InvalidParameter(format!("cast has 1..={} characters, got {characters}", CAST.len())));
    }
    let prompt = cast_prompt(characters);
    (1..=characters)
        .map(|j| Ok(parse_region_prompts(&prompt, &cast_annotations(j))?.with_character(j)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub specs: Vec<PromptSpec>,
    pub fixture: AttentionFixture,
    /// Planted support per region, latent coordinates.
    pub truth: BTreeMap<RegionKey, RegionBox>,
}

fn even_cut(len: usize, k: usize, parts: usize) -> usize {
    2 * ((k * len) as f64 / (2 * parts) as f64).round() as usize
}

/// Layout with exactly 0/1 word maps: a region's words attend to its band,
/// every other word attends nowhere.
pub fn planted_layout(characters: usize, size: (usize, usize), num_layers: usize) -> Result<PlantedScene> {
    let (h, w) = size;
    if h % 2 != 0 || w % 2 != 0 || h < 6 || w < 2 * characters {
        return Err(Error::InvalidParameter(format!("latent {w}x{h} cannot hold {characters} planted characters")));
    }
    let specs = cast_specs(characters)?;
    let words = specs[0].tokens.len();
    let mut maps = Array3::<f32>::zeros((words, h, w));
    let mut truth = BTreeMap::new();
    for (j, spec) in specs.iter().enumerate() {
        let (x1, x2) = (even_cut(w, j, characters) + 1, even_cut(w, j + 1, characters));
        for (band, region) in spec.regions.iter().enumerate() {
            let (y1, y2) = (even_cut(h, band, 3) + 1, even_cut(h, band + 1, 3));
            let b = RegionBox::new(x1, x2, y1, y2);
            for word in region.span.begin..=region.span.end {
                for y in y1..=y2 {
                    for x in x1..=x2 {
                        maps[[word - 1, y - 1, x - 1]] = 1.0;
                    }
                }
            }
            truth.insert(RegionKey::new(spec.character, region.label), b);
        }
    }
    Ok(PlantedScene {
        specs,
        fixture: AttentionFixture::uniform(maps, num_layers),
        truth,
    })
}

#[derive(Debug, Clone)]
pub struct PlantedReference {
    pub spec: PromptSpec,
    pub image: Image,
    pub fixture: AttentionFixture,
    /// Planted support per region, latent coordinates.
    pub truth: BTreeMap<RegionKey, RegionBox>,
}

/// A single-character reference with randomly placed, disjoint region
/// supports and noisy attention: background below 0.3, support above 0.9.
pub fn planted_reference(seed: u64, size: (usize, usize), num_layers: usize, factor: usize) -> Result<PlantedReference> {
    let (h, w) = size;
    if h < 6 || w < 2 {
        return Err(Error::InvalidParameter(format!("latent {w}x{h} is too small for a planted reference")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = cast_specs(1)?.remove(0);
    let words = spec.tokens.len();

    // Three stacked bands of random height, each with a random column range.
    let mut cuts = [0usize, 0, 0, h];
    cuts[1] = rng.random_range(2..=h / 3);
    cuts[2] = rng.random_range(cuts[1] + 2..=cuts[1] + (h - cuts[1]) / 2);
    let mut truth = BTreeMap::new();
    let mut support = Array3::<bool>::from_elem((3, h, w), false);
    for band in 0..3 {
        let x1 = rng.random_range(1..=w / 2);
        let x2 = rng.random_range(x1.max(w / 2)..=w);
        let (y1, y2) = (cuts[band] + 1, cuts[band + 1]);
        for y in y1..=y2 {
            for x in x1..=x2 {
                support[[band, y - 1, x - 1]] = true;
            }
        }
        truth.insert(RegionKey::new(1, spec.regions[band].label), RegionBox::new(x1, x2, y1, y2));
    }

    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let mut maps = Array3::<f32>::zeros((words, h, w));
        for word in 1..=words {
            let band = spec.regions.iter().position(|r| r.span.contains(word));
            for y in 0..h {
                for x in 0..w {
                    maps[[word - 1, y, x]] = match band {
                        Some(b) if support[[b, y, x]] => rng.random_range(0.9..1.0),
                        _ => rng.random_range(0.0..0.3),
                    };
                }
            }
        }
        layers.push(maps);
    }

    let mut pixels = Array3::<f32>::zeros((3, h * factor, w * factor));
    for ((c, y, x), v) in pixels.indexed_iter_mut() {
        let cell = (y / factor, x / factor);
        let band = (0..3).find(|&b| support[[b, cell.0, cell.1]]);
        *v = match band {
            Some(b) => if b == c { 0.9 } else { 0.2 },
            None => 0.5,
        };
    }
    Ok(PlantedReference {
        spec,
        image: Image::new(pixels),
        fixture: AttentionFixture::new(layers),
        truth,
    })
}

/// Flat-colored reference for character `j`, distinct per character.
pub fn swatch(j: usize, height: usize, width: usize) -> Image {
    let shade = [0.15f32, 0.45, 0.75];
    Image::new(Array3::from_shape_fn((3, height, width), |(c, y, _)| {
        let band = (3 * y / height.max(1)).min(2);
        shade[(c + band + j) % 3]
    }))
}

/// Box as a hard 0/1 mask of the given size.
pub fn box_mask(b: RegionBox, size: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_fn(size, |(y, x)| if b.contains(x + 1, y + 1) { 1.0 } else { 0.0 })
}
