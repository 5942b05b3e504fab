//! Prompt-guided segmentation of a reference image into region crops.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::sampler::gaussian;
use crate::diffusion::{forward_noise, Conditioning, Engine, RegionKey};
use crate::error::{Error, Result};
use crate::image::Image;
pub use crate::image::RegionBox;
use crate::ops::min_max_normalize;
use crate::probe::{aggregate_layers, aggregate_region_spans, aggregate_timesteps, record_layer_attention, AttentionFixture, LayerAttentionRecord, Probe, WordAttentionMap};
use crate::text::{mix_seed, PromptSpec, RegionQuery};

const SEGMENT_STREAM: u64 = 0x5e6e;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCrop {
    pub key: RegionKey,
    /// Box on the reference latent grid.
    pub latent_box: RegionBox,
    /// Same box in reference pixel coordinates.
    pub pixel_box: RegionBox,
    pub pixels: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOptions {
    pub gamma1: f32,
    /// Timesteps the reference latent is noised to; maps are averaged over them.
    pub probe_timesteps: Vec<usize>,
    /// Use the whole image when a region has no cell above threshold.
    pub fallback_full_image: bool,
    pub seed: u64,
}

impl SegmentOptions {
    /// Single probe at half the schedule length.
    pub fn for_engine(engine: &Engine, seed: u64) -> Self {
        Self {
            gamma1: 0.8,
            probe_timesteps: vec![engine.schedule().total_steps() / 2],
            fallback_full_image: false,
            seed,
        }
    }
}

/// Tight bounding box of the cells whose min-max normalized value exceeds
/// `gamma1`. Coordinates are 1-indexed, x along columns.
pub fn threshold_box(map: &Array2<f32>, gamma1: f32, label: &str) -> Result<RegionBox> {
    if map.is_empty() {
        return Err(Error::InvalidParameter("empty attention map".into()));
    }
    if !(gamma1 > 0.0 && gamma1 < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma1 must lie in (0, 1), got {gamma1}")));
    }
    let normalized = min_max_normalize(map.view());
    let mut bounds: Option<RegionBox> = None;
    for ((y, x), &v) in normalized.indexed_iter() {
        if v > gamma1 {
            let (x, y) = (x + 1, y + 1);
            bounds = Some(match bounds {
                None => RegionBox::new(x, x, y, y),
                Some(b) => RegionBox::new(b.x1.min(x), b.x2.max(x), b.y1.min(y), b.y2.max(y)),
            });
        }
    }
    bounds.ok_or_else(|| Error::NoCellAboveThreshold {
        label: label.to_string(),
        gamma: gamma1,
    })
}

/// Region maps of a reference: noise its latent, probe the conditional pass
/// and aggregate over layers, span words and probe timesteps.
pub fn reference_region_maps(
    reference: &Image,
    spec: &PromptSpec,
    queries: &[RegionQuery],
    engine: &Engine,
    options: &SegmentOptions,
    fixture: Option<&AttentionFixture>,
) -> Result<Vec<WordAttentionMap>> {
    if queries.is_empty() {
        return Err(Error::InvalidParameter("segmentation needs at least one region".into()));
    }
    if options.probe_timesteps.is_empty() {
        return Err(Error::InvalidParameter("segmentation needs at least one probe timestep".into()));
    }
    let z0 = engine.encode_image(reference)?;
    let (_, h, w) = z0.shape();
    let (_, text) = engine.embed_prompt(&spec.full_text)?;
    let cond = Conditioning::text_only(text);
    let mut per_query: Vec<Vec<WordAttentionMap>> = vec![Vec::new(); queries.len()];
    for &t in &options.probe_timesteps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(options.seed, mix_seed(SEGMENT_STREAM, t as u64)));
        let eps = gaussian(z0.shape(), &mut rng);
        let zt = forward_noise(&z0, t, engine.schedule(), &eps)?;
        let mut probe = match fixture {
            Some(f) => Probe::injecting(f.clone()),
            None => Probe::recording(),
        };
        let records = record_layer_attention(engine.unet(), &zt.values, t, &cond, &mut probe)?;
        for (query, maps) in queries.iter().zip(per_query.iter_mut()) {
            maps.push(region_map_from_records(&records, query, (h, w))?);
        }
    }
    let lo = *options.probe_timesteps.iter().min().expect("non-empty");
    let hi = *options.probe_timesteps.iter().max().expect("non-empty");
    per_query.iter().map(|maps| aggregate_timesteps(maps, (lo, hi))).collect()
}

/// Word maps for the query's spans at one timestep, then the region maximum.
pub(crate) fn region_map_from_records(records: &[LayerAttentionRecord], query: &RegionQuery, size: (usize, usize)) -> Result<WordAttentionMap> {
    let refs: Vec<&LayerAttentionRecord> = records.iter().collect();
    let mut word_maps = Vec::new();
    for span in &query.spans {
        for word in span.begin..=span.end {
            word_maps.push(aggregate_layers(&refs, word, size)?);
        }
    }
    aggregate_region_spans(&word_maps, &query.spans, query.key)
}

/// Splits a reference into one crop per region query.
pub fn segment_regions(
    reference: &Image,
    spec: &PromptSpec,
    queries: &[RegionQuery],
    engine: &Engine,
    options: &SegmentOptions,
    fixture: Option<&AttentionFixture>,
) -> Result<Vec<RegionCrop>> {
    let maps = reference_region_maps(reference, spec, queries, engine, options, fixture)?;
    let factor = engine.config().latent_factor;
    let (lh, lw) = (reference.height() / factor, reference.width() / factor);
    queries
        .iter()
        .zip(maps)
        .map(|(query, map)| {
            let latent_box = match threshold_box(&map.values, options.gamma1, &query.key.to_string()) {
                Ok(b) => b,
                Err(Error::NoCellAboveThreshold { .. }) if options.fallback_full_image => RegionBox::new(1, lw, 1, lh),
                Err(e) => return Err(e),
            };
            let pixel_box = latent_box.scale_to_pixels(factor, reference.width(), reference.height());
            Ok(RegionCrop {
                key: query.key,
                latent_box,
                pixel_box,
                pixels: reference.crop(pixel_box)?,
            })
        })
        .collect()
}

/// Segments the reference into the regions annotated in `spec`.
pub fn segment_reference(reference: &Image, spec: &PromptSpec, engine: &Engine, options: &SegmentOptions, fixture: Option<&AttentionFixture>) -> Result<Vec<RegionCrop>> {
    segment_regions(reference, spec, &spec.queries(), engine, options, fixture)
}
