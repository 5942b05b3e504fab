//! Three-stage generation: segment each reference, probe a text-only layout
//! run, then sample again with region adapters fused into every
//! cross-attention layer.

pub mod ablation;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use crate::adapters::{layout_weighting, MaskMode, RegionMask};
use crate::diffusion::{initial_noise, sample, AdapterBundle, AdapterContext, AdapterEntry, Conditioning, DenoiseHook, Engine, Latent, NoHook, RegionKey, SamplerSettings};
use crate::error::{Error, Result};
use crate::image::{Image, RegionBox};
use crate::probe::{aggregate_timesteps, AttentionFixture, LayerAttentionRecord, Probe, WordAttentionMap};
use crate::segmentation::{region_map_from_records, segment_regions, RegionCrop, SegmentOptions};
use crate::text::{PromptSpec, RegionLabel, RegionQuery};

pub use ablation::{ablate_regions, region_plan, AblationReport, AblationRun};
pub use metrics::{mask_iou, toy_alignment_scores, toy_scores, ToyScores};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub steps: usize,
    pub cfg_scale: f32,
    /// Image-branch scale.
    pub lambda: f32,
    pub gamma1: f32,
    pub gamma2: f32,
    pub mask_mode: MaskMode,
    pub seed: u64,
    /// Regions per character: 1 (whole image), 2, 3 or 4.
    pub regions: usize,
    /// Latent `(height, width)` of the generated image.
    pub latent_size: (usize, usize),
    /// Reference noising timestep for segmentation; default T/2.
    pub t_probe: Option<usize>,
    /// Inclusive timestep window of the layout maps; default `[0, T/2]`.
    pub layout_window: Option<(usize, usize)>,
    /// Layers receiving adapter terms; `None` means all.
    pub fused_layers: Option<BTreeSet<usize>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 7.0,
            lambda: 1.0,
            gamma1: 0.8,
            gamma2: 0.8,
            mask_mode: MaskMode::Soft,
            seed: 0,
            regions: 3,
            latent_size: (64, 64),
            t_probe: None,
            layout_window: None,
            fused_layers: None,
        }
    }
}

impl GenerationParams {
    pub fn sampler(&self) -> SamplerSettings {
        SamplerSettings {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed: self.seed,
        }
    }

    pub fn window(&self, engine: &Engine) -> (usize, usize) {
        self.layout_window.unwrap_or((0, engine.schedule().total_steps() / 2))
    }

    /// One-line `key=value` dump of the resolved parameters.
    pub fn describe(&self, engine: &Engine) -> String {
        let (lo, hi) = self.window(engine);
        let layers = match &self.fused_layers {
            None => "all".to_string(),
            Some(l) => l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        };
        format!(
            "steps={} cfg_scale={} lambda={} gamma1={} gamma2={} mask_mode={} seed={} regions={} latent={}x{} t_probe={} layout_window={lo}..{hi} fused_layers={layers} timesteps={} latent_factor={}",
            self.steps,
            self.cfg_scale,
            self.lambda,
            self.gamma1,
            self.gamma2,
            self.mask_mode,
            self.seed,
            self.regions,
            self.latent_size.1,
            self.latent_size.0,
            self.t_probe.unwrap_or(engine.schedule().total_steps() / 2),
            engine.schedule().total_steps(),
            engine.config().latent_factor,
        )
    }

    fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("gamma1", self.gamma1)?;
        unit("gamma2", self.gamma2)?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::InvalidParameter("cfg_scale must be finite".into()));
        }
        if !(1..=4).contains(&self.regions) {
            return Err(Error::InvalidParameter(format!("regions must be 1..=4, got {}", self.regions)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CharacterInput {
    pub spec: PromptSpec,
    pub reference: Image,
    /// Replaces live attention during this reference's segmentation.
    pub segmentation_fixture: Option<AttentionFixture>,
}

impl CharacterInput {
    pub fn new(spec: PromptSpec, reference: Image) -> Self {
        Self {
            spec,
            reference,
            segmentation_fixture: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub characters: Vec<CharacterInput>,
    pub params: GenerationParams,
    /// Replaces live attention during the layout run.
    pub layout_fixture: Option<AttentionFixture>,
}

impl GenerationRequest {
    pub fn new(characters: Vec<CharacterInput>, params: GenerationParams) -> Self {
        Self {
            characters,
            params,
            layout_fixture: None,
        }
    }

    pub fn prompt(&self) -> &str {
        &self.characters[0].spec.full_text
    }

    fn validate(&self, engine: &Engine) -> Result<()> {
        self.params.validate()?;
        let first = self
            .characters
            .first()
            .ok_or_else(|| Error::InvalidParameter("request needs at least one character".into()))?;
        for (j, c) in self.characters.iter().enumerate() {
            if c.spec.full_text != first.spec.full_text {
                return Err(Error::InvalidParameter(format!("character {} uses a different prompt", j + 1)));
            }
            if c.spec.character != j + 1 {
                return Err(Error::InvalidParameter(format!("character {} is labelled {}", j + 1, c.spec.character)));
            }
            if c.spec.regions.is_empty() {
                return Err(Error::InvalidParameter(format!("character {} has no regions", j + 1)));
            }
        }
        let layers = engine.num_layers();
        let fixtures = self.characters.iter().filter_map(|c| c.segmentation_fixture.as_ref()).chain(self.layout_fixture.as_ref());
        for f in fixtures {
            if f.num_layers() != layers {
                return Err(Error::InvalidParameter(format!("fixture has {} layers, engine has {layers}", f.num_layers())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub segmentation: Duration,
    pub layout: Duration,
    pub sampling: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct GenerationArtifacts {
    pub image: Image,
    pub latent: Latent,
    /// Layout mask per region, in region-key order.
    pub layout_masks: Vec<RegionMask>,
    /// Aggregated layout attention per region.
    pub layout_maps: BTreeMap<RegionKey, WordAttentionMap>,
    /// Reference crops per region, in region-key order.
    pub crops: Vec<RegionCrop>,
    pub timing: Timing,
}

impl GenerationArtifacts {
    /// Per-region pixel boxes on the references.
    pub fn boxes(&self) -> Vec<(RegionKey, RegionBox)> {
        self.crops.iter().map(|c| (c.key, c.pixel_box)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayoutResult {
    pub region_maps: BTreeMap<RegionKey, WordAttentionMap>,
    /// Final latent of the text-only run.
    pub latent: Latent,
    pub records: Vec<LayerAttentionRecord>,
}

/// Text-only sampling from the request's seed.
pub fn text_to_image(prompt: &str, engine: &Engine, params: &GenerationParams) -> Result<Latent> {
    let (_, text) = engine.embed_prompt(prompt)?;
    let shape = latent_shape(engine, params);
    let init = initial_noise(shape, params.seed);
    let cond = Conditioning::text_only(text);
    let uncond = Conditioning::text_only(engine.null_text());
    sample(engine.unet(), engine.schedule(), &init, params.sampler(), &cond, &uncond, &mut NoHook)
}

fn latent_shape(engine: &Engine, params: &GenerationParams) -> (usize, usize, usize) {
    (engine.config().unet.latent_channels, params.latent_size.0, params.latent_size.1)
}

/// Stage 2: a probed text-only run whose attention gives each region's layout map.
pub fn layout_pass(prompt: &str, queries: &[RegionQuery], engine: &Engine, params: &GenerationParams, fixture: Option<&AttentionFixture>) -> Result<LayoutResult> {
    let (_, text) = engine.embed_prompt(prompt)?;
    let init = initial_noise(latent_shape(engine, params), params.seed);
    let cond = Conditioning::text_only(text);
    let uncond = Conditioning::text_only(engine.null_text());
    let mut probe = match fixture {
        Some(f) => Probe::injecting(f.clone()),
        None => Probe::recording(),
    };
    let latent = sample(engine.unet(), engine.schedule(), &init, params.sampler(), &cond, &uncond, &mut probe)?;
    let records = probe.take_records()?;

    let mut by_step: BTreeMap<usize, Vec<LayerAttentionRecord>> = BTreeMap::new();
    for r in &records {
        by_step.entry(r.timestep).or_default().push(r.clone());
    }
    let window = params.window(engine);
    let mut region_maps = BTreeMap::new();
    for query in queries {
        let per_step: Vec<WordAttentionMap> = by_step
            .iter()
            .filter(|(t, _)| (window.0..=window.1).contains(*t))
            .map(|(_, recs)| region_map_from_records(recs, query, params.latent_size))
            .collect::<Result<_>>()?;
        region_maps.insert(query.key, aggregate_timesteps(&per_step, window)?);
    }
    Ok(LayoutResult { region_maps, latent, records })
}

/// Single-character generation.
pub fn generate_single(request: &GenerationRequest, engine: &Engine) -> Result<GenerationArtifacts> {
    if request.characters.len() != 1 {
        return Err(Error::InvalidParameter(format!(
            "single-character generation got {} characters",
            request.characters.len()
        )));
    }
    generate_with_hook(request, engine, &mut NoHook)
}

/// Multi-character generation; a single character degenerates to [`generate_single`].
pub fn generate_multi(request: &GenerationRequest, engine: &Engine) -> Result<GenerationArtifacts> {
    generate_with_hook(request, engine, &mut NoHook)
}

/// Full pipeline; `hook` observes the conditional branch of the final sampling run.
pub fn generate_with_hook(request: &GenerationRequest, engine: &Engine, hook: &mut dyn DenoiseHook) -> Result<GenerationArtifacts> {
    request.validate(engine)?;
    let params = &request.params;
    let started = Instant::now();
    let mut timing = Timing::default();

    // Stage 1: segment every reference and encode its region features.
    let mut queries: Vec<RegionQuery> = Vec::new();
    let mut entries: Vec<AdapterEntry> = Vec::new();
    let mut crops: Vec<RegionCrop> = Vec::new();
    for (j, character) in request.characters.iter().enumerate() {
        let plan = region_plan(&character.spec, params.regions)?;
        if params.regions == 1 {
            let reference = &character.reference;
            entries.push(AdapterEntry {
                key: RegionKey::new(j + 1, RegionLabel::Whole),
                features: engine.reference_features(reference, reference.full_box())?,
            });
            continue;
        }
        let mut options = SegmentOptions::for_engine(engine, params.seed);
        options.gamma1 = params.gamma1;
        if let Some(t) = params.t_probe {
            options.probe_timesteps = vec![t];
        }
        let found = segment_regions(&character.reference, &character.spec, &plan, engine, &options, character.segmentation_fixture.as_ref()).map_err(|e| Error::SegmentationFailed {
            character: j + 1,
            source: Box::new(e),
        })?;
        for crop in found {
            entries.push(AdapterEntry {
                key: crop.key,
                features: engine.reference_features(&character.reference, crop.pixel_box)?,
            });
            crops.push(crop);
        }
        queries.extend(plan);
    }
    crops.sort_by_key(|c| c.key);
    timing.segmentation = started.elapsed();

    // Stage 2: layout maps from the text-only run.
    let layout_started = Instant::now();
    let mut layout_masks = Vec::new();
    let mut layout_maps = BTreeMap::new();
    let region_maps = if params.regions == 1 {
        None
    } else {
        let layout = layout_pass(request.prompt(), &queries, engine, params, request.layout_fixture.as_ref())?;
        let mut weightings = BTreeMap::new();
        for (key, map) in &layout.region_maps {
            let (weighting, mask) = layout_weighting(*key, map, params.mask_mode, params.gamma2)?;
            weightings.insert(*key, weighting);
            layout_masks.push(mask);
        }
        layout_maps = layout.region_maps;
        Some(weightings)
    };
    timing.layout = layout_started.elapsed();

    // Stage 3: sample with the region adapters.
    let sampling_started = Instant::now();
    let (_, text) = engine.embed_prompt(request.prompt())?;
    let cond = Conditioning {
        text,
        adapters: Some(AdapterContext {
            bundle: AdapterBundle::new(entries, params.lambda)?,
            region_maps,
            layers: params.fused_layers.clone(),
        }),
    };
    let uncond = Conditioning::text_only(engine.null_text());
    let init = initial_noise(latent_shape(engine, params), params.seed);
    let latent = sample(engine.unet(), engine.schedule(), &init, params.sampler(), &cond, &uncond, hook)?;
    timing.sampling = sampling_started.elapsed();
    timing.total = started.elapsed();

    Ok(GenerationArtifacts {
        image: engine.decode_latent(&latent),
        latent,
        layout_masks,
        layout_maps,
        crops,
        timing,
    })
}
