//! Text cross-attention and the decoupled image-prompt branch.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;

use crate::adapters::{fuse_region_outputs, region_embedding, RegionAdapterOutput};
use crate::error::{Error, Result};
use crate::ops::softmax_rows;
use crate::text::{RegionLabel, TextEmbeddingMatrix};

/// Projections of one text cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// 1-based layer index.
    pub layer: usize,
    /// latent width x head dim
    pub wq: Array2<f32>,
    /// text dim x head dim
    pub wk: Array2<f32>,
    /// text dim x head dim
    pub wv: Array2<f32>,
}

impl AttentionWeights {
    pub fn head_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn queries(&self, z: &Array2<f32>) -> Result<Array2<f32>> {
        if z.ncols() != self.wq.nrows() {
            return Err(Error::shape(&[z.nrows(), self.wq.nrows()], &[z.nrows(), z.ncols()]));
        }
        Ok(z.dot(&self.wq))
    }
}

/// Image-branch key/value projections of one adapter at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterProjection {
    /// image dim x head dim
    pub wk: Array2<f32>,
    /// image dim x head dim
    pub wv: Array2<f32>,
}

/// Identifies one region adapter: which character, which region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionKey {
    pub character: usize,
    pub label: RegionLabel,
}

impl RegionKey {
    pub fn new(character: usize, label: RegionLabel) -> Self {
        Self { character, label }
    }
}

impl fmt::Display for RegionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "char{}_{}", self.character, self.label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub key: RegionKey,
    /// tokens x image dim
    pub features: Array2<f32>,
}

/// Reference-image features per region plus the image-branch scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub entries: Vec<AdapterEntry>,
    pub scale: f32,
}

impl AdapterBundle {
    pub fn new(entries: Vec<AdapterEntry>, scale: f32) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidParameter(format!("adapter scale must be finite and >= 0, got {scale}")));
        }
        Ok(Self { entries, scale })
    }

    /// One unmasked adapter over the whole reference: the plain two-branch form.
    pub fn whole_image(character: usize, features: Array2<f32>, scale: f32) -> Result<Self> {
        Self::new(
            vec![AdapterEntry {
                key: RegionKey::new(character, RegionLabel::Whole),
                features,
            }],
            scale,
        )
    }

    pub fn get(&self, key: RegionKey) -> Option<&AdapterEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn is_inert(&self) -> bool {
        self.scale == 0.0 || self.entries.is_empty()
    }
}

/// Text attention output together with the softmax weights that produced it.
pub(crate) struct TextAttention {
    pub queries: Array2<f32>,
    pub output: Array2<f32>,
    /// positions x words
    pub probs: Array2<f32>,
}

pub(crate) fn text_attention(z: &Array2<f32>, c_t: &TextEmbeddingMatrix, w: &AttentionWeights) -> Result<TextAttention> {
    if c_t.dim() != w.wk.nrows() {
        return Err(Error::shape(&[c_t.rows(), w.wk.nrows()], &[c_t.rows(), c_t.dim()]));
    }
    let queries = w.queries(z)?;
    let keys = c_t.0.dot(&w.wk);
    let values = c_t.0.dot(&w.wv);
    let scale = 1.0 / (w.head_dim() as f32).sqrt();
    let mut probs = queries.dot(&keys.t());
    probs.mapv_inplace(|s| s * scale);
    softmax_rows(&mut probs);
    let output = probs.dot(&values);
    Ok(TextAttention { queries, output, probs })
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = z Wq`, `K = c Wk`, `V = c Wv`.
///
/// `z` is positions x latent width.
pub fn cross_attention(z: &Array2<f32>, c_t: &TextEmbeddingMatrix, w: &AttentionWeights) -> Result<Array2<f32>> {
    Ok(text_attention(z, c_t, w)?.output)
}

/// Text attention plus `scale *` the sum of image-branch terms.
///
/// With `region_attn` every listed region's image term is weighted per
/// position by its map (positions in row-major order at this layer's
/// resolution). Without it every bundle entry contributes unmasked, which for
/// a single entry is the classic decoupled form.
pub fn decoupled_cross_attention(
    z: &Array2<f32>,
    c_t: &TextEmbeddingMatrix,
    w: &AttentionWeights,
    bundle: &AdapterBundle,
    projections: &BTreeMap<RegionLabel, AdapterProjection>,
    region_attn: Option<&BTreeMap<RegionKey, Array2<f32>>>,
) -> Result<Array2<f32>> {
    let text = text_attention(z, c_t, w)?;
    decoupled_from_text(&text, bundle, projections, region_attn)
}

pub(crate) fn decoupled_from_text(
    text: &TextAttention,
    bundle: &AdapterBundle,
    projections: &BTreeMap<RegionLabel, AdapterProjection>,
    region_attn: Option<&BTreeMap<RegionKey, Array2<f32>>>,
) -> Result<Array2<f32>> {
    if bundle.is_inert() {
        return Ok(text.output.clone());
    }
    let mut outputs: Vec<RegionAdapterOutput> = Vec::new();
    let projection = |label: RegionLabel| {
        projections
            .get(&label)
            .ok_or_else(|| Error::MissingRegionFeatures(format!("no adapter projection for {label}")))
    };
    match region_attn {
        Some(maps) => {
            for (key, weighting) in maps {
                let entry = bundle.get(*key).ok_or_else(|| Error::MissingRegionFeatures(key.to_string()))?;
                outputs.push(region_embedding(Some(weighting), &text.queries, entry, projection(key.label)?)?);
            }
        }
        None => {
            for entry in &bundle.entries {
                outputs.push(region_embedding(None, &text.queries, entry, projection(entry.key.label)?)?);
            }
        }
    }
    fuse_region_outputs(&text.output, &outputs, bundle.scale)
}
