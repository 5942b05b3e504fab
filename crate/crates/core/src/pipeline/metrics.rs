//! Desk-scale evaluation. The alignment scores are toy stand-ins built from
//! this crate's own encoders, not CLIP or DINO similarities.

use crate::adapters::RegionMask;
use crate::diffusion::Engine;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::ops::cosine;

use super::{GenerationArtifacts, GenerationRequest};

/// Intersection over union of two hard masks; 1 when both are empty.
pub fn mask_iou(a: &RegionMask, b: &RegionMask) -> Result<f64> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::shape(a.values.shape(), b.values.shape()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(b.values.iter()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyScores {
    /// Cosine of the mean prompt embedding against the generated image's pooled features.
    pub text_score: f64,
    /// Mean over characters of reference-vs-generated pooled feature cosine.
    pub image_score: f64,
}

pub fn toy_alignment_scores(artifacts: &GenerationArtifacts, request: &GenerationRequest, engine: &Engine) -> Result<ToyScores> {
    let references: Vec<&Image> = request.characters.iter().map(|c| &c.reference).collect();
    toy_scores(engine, request.prompt(), &references, &artifacts.image)
}

/// Scores of `generated` against a prompt and reference images. The text
/// score is 0 when text and image widths differ.
pub fn toy_scores(engine: &Engine, prompt: &str, references: &[&Image], generated: &Image) -> Result<ToyScores> {
    let encoder = engine.feature_encoder();
    let pooled = encoder.pooled(generated)?;
    let (_, text) = engine.embed_prompt(prompt)?;
    let text_row = text.mean_row();
    let text_score = if text_row.len() == pooled.len() { cosine(&text_row, &pooled) } else { 0.0 };
    let mut image_score = 0.0;
    for r in references {
        image_score += cosine(&encoder.pooled(r)?, &pooled);
    }
    image_score /= references.len().max(1) as f64;
    Ok(ToyScores { text_score, image_score })
}
