//! Flat `key = value` prompt configuration.
//!
//! ```text
//! prompt = a boy wearing green jacket and blue pants
//! steps = 20
//! [character]
//! face = a boy
//! upper = green jacket
//! lower = blue pants
//! ```
//! Keys before the first `[character]` header are global; each header opens
//! a new character block. `#` starts a comment.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::GenerationParams;
use crate::text::{parse_region_prompts, PromptSpec, RegionLabel};

pub const DEFAULT_RESOLUTION: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterBlock {
    pub regions: Vec<(RegionLabel, String)>,
    /// Reference raster path, relative to the config file.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    pub prompt: String,
    pub characters: Vec<CharacterBlock>,
    pub params: GenerationParams,
    /// Pixel side of the generated image.
    pub resolution: usize,
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        what: "config",
        message: format!("line {line}: {}", message.into()),
    }
}

fn number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| err(line, format!("{key} expects a number, got {value:?}")))
}

impl PromptConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut prompt = None;
        let mut characters: Vec<CharacterBlock> = Vec::new();
        let mut params = GenerationParams::default();
        let mut resolution = DEFAULT_RESOLUTION;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if line != "[character]" {
                    return Err(err(n, format!("unknown section {line}")));
                }
                characters.push(CharacterBlock {
                    regions: Vec::new(),
                    reference: None,
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(n, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(block) = characters.last_mut() {
                match key {
                    "reference" => block.reference = Some(value.to_string()),
                    _ => {
                        let label: RegionLabel = key.parse().map_err(|_| err(n, format!("unknown character key {key}")))?;
                        if !RegionLabel::ANNOTATED.contains(&label) {
                            return Err(err(n, format!("{key} cannot be annotated")));
                        }
                        block.regions.push((label, value.to_string()));
                    }
                }
                continue;
            }
            match key {
                "prompt" => prompt = Some(value.to_string()),
                "steps" => params.steps = number(n, key, value)?,
                "cfg_scale" => params.cfg_scale = number(n, key, value)?,
                "lambda" => params.lambda = number(n, key, value)?,
                "gamma1" => params.gamma1 = number(n, key, value)?,
                "gamma2" => params.gamma2 = number(n, key, value)?,
                "mask_mode" => params.mask_mode = value.parse()?,
                "seed" => params.seed = number(n, key, value)?,
                "regions" => params.regions = number(n, key, value)?,
                "resolution" => resolution = number(n, key, value)?,
                "t_probe" => params.t_probe = Some(number(n, key, value)?),
                "fused_layers" => params.fused_layers = Some(parse_layers(value).map_err(|m| err(n, m))?),
                _ => return Err(err(n, format!("unknown key {key}"))),
            }
        }
        let prompt = prompt.ok_or_else(|| err(0, "missing prompt"))?;
        if characters.is_empty() {
            return Err(err(0, "no [character] section"));
        }
        Ok(Self {
            prompt,
            characters,
            params,
            resolution,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One spec per character block, numbered from 1.
    pub fn specs(&self) -> Result<Vec<PromptSpec>> {
        self.characters
            .iter()
            .enumerate()
            .map(|(j, c)| Ok(parse_region_prompts(&self.prompt, &c.regions)?.with_character(j + 1)))
            .collect()
    }

    /// Parameters with the latent size derived from `resolution`.
    pub fn resolved_params(&self, latent_factor: usize) -> Result<GenerationParams> {
        if self.resolution == 0 || !self.resolution.is_multiple_of(2 * latent_factor) {
            return Err(Error::NotDivisible {
                width: self.resolution,
                height: self.resolution,
                factor: 2 * latent_factor,
            });
        }
        let side = self.resolution / latent_factor;
        Ok(GenerationParams {
            latent_size: (side, side),
            ..self.params.clone()
        })
    }
}

/// Comma-separated 1-based layer indices.
pub fn parse_layers(value: &str) -> std::result::Result<BTreeSet<usize>, String> {
    value
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad layer index {s:?}")))
        .collect()
}
