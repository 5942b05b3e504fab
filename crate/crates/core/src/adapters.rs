//! Region-level adapters: layout masks, per-region image terms and their
//! fusion into a layer's latent.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::diffusion::attention::{AdapterEntry, AdapterProjection, RegionKey};
use crate::error::{Error, Result};
use crate::ops::{min_max_normalize, softmax_rows};
use crate::probe::WordAttentionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    Hard,
    #[default]
    Soft,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Hard => "hard",
            MaskMode::Soft => "soft",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            other => Err(Error::InvalidParameter(format!("mask mode must be hard or soft, got {other:?}"))),
        }
    }
}

/// Hard masks hold only 0 and 1; soft masks hold the normalized map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub key: RegionKey,
    pub mode: MaskMode,
    pub values: Array2<f32>,
}

impl RegionMask {
    pub fn hard(key: RegionKey, values: Array2<f32>) -> Self {
        Self {
            key,
            mode: MaskMode::Hard,
            values,
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAdapterOutput {
    pub key: RegionKey,
    /// positions x head dim
    pub embedding: Array2<f32>,
}

/// 1 where the value is strictly above `gamma2`, else 0.
pub fn binarize_mask(key: RegionKey, map: &Array2<f32>, gamma2: f32) -> RegionMask {
    RegionMask::hard(key, map.mapv(|v| if v > gamma2 { 1.0 } else { 0.0 }))
}

/// Elementwise product of the attention map with the mask.
pub fn masked_region_attention(map: &Array2<f32>, mask: &RegionMask) -> Result<Array2<f32>> {
    if map.dim() != mask.values.dim() {
        let (a, b) = map.dim();
        let (c, d) = mask.values.dim();
        return Err(Error::shape(&[a, b], &[c, d]));
    }
    Ok(map * &mask.values)
}

/// The dynamic-fusion weighting: the normalized map itself, mask dropped.
pub fn soft_region_attention(map: &Array2<f32>) -> Array2<f32> {
    map.clone()
}

/// Spatial weighting for one region from its aggregated layout map.
///
/// Returns the weighting and the mask that is reported for it.
pub fn layout_weighting(key: RegionKey, map: &WordAttentionMap, mode: MaskMode, gamma2: f32) -> Result<(Array2<f32>, RegionMask)> {
    if !(gamma2 > 0.0 && gamma2 < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma2 must lie in (0, 1), got {gamma2}")));
    }
    let normalized = min_max_normalize(map.values.view());
    match mode {
        MaskMode::Hard => {
            let mask = binarize_mask(key, &normalized, gamma2);
            let weighting = masked_region_attention(&normalized, &mask)?;
            Ok((weighting, mask))
        }
        MaskMode::Soft => {
            let weighting = soft_region_attention(&normalized);
            let mask = RegionMask {
                key,
                mode: MaskMode::Soft,
                values: normalized,
            };
            Ok((weighting, mask))
        }
    }
}

/// Image-branch term of one region adapter, weighted per position.
///
/// Each query attends over the region's value-projected feature tokens; the
/// result is scaled by the position's weighting. Positions with zero
/// weighting get an exact zero row. `weighting = None` means unmasked.
pub fn region_embedding(
    weighting: Option<&Array2<f32>>,
    queries: &Array2<f32>,
    entry: &AdapterEntry,
    projection: &AdapterProjection,
) -> Result<RegionAdapterOutput> {
    if entry.features.ncols() != projection.wk.nrows() {
        return Err(Error::shape(&[entry.features.nrows(), projection.wk.nrows()], &[entry.features.nrows(), entry.features.ncols()]));
    }
    let keys = entry.features.dot(&projection.wk);
    let values = entry.features.dot(&projection.wv);
    if keys.ncols() != queries.ncols() {
        return Err(Error::shape(&[queries.nrows(), keys.ncols()], &[queries.nrows(), queries.ncols()]));
    }
    let scale = 1.0 / (queries.ncols() as f32).sqrt();
    let mut probs = queries.dot(&keys.t());
    probs.mapv_inplace(|s| s * scale);
    softmax_rows(&mut probs);
    let mut embedding = probs.dot(&values);
    if let Some(w) = weighting {
        if w.len() != embedding.nrows() {
            return Err(Error::shape(&[embedding.nrows()], &[w.len()]));
        }
        for (mut row, &weight) in embedding.axis_iter_mut(Axis(0)).zip(w.iter()) {
            if weight == 0.0 {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v * weight);
            }
        }
    }
    Ok(RegionAdapterOutput { key: entry.key, embedding })
}

/// `z + scale * sum(e_m)`, summed in region-key order.
///
/// Cells whose summed contribution is exactly zero are left untouched.
pub fn fuse_region_outputs(z: &Array2<f32>, outputs: &[RegionAdapterOutput], scale: f32) -> Result<Array2<f32>> {
    let mut order: Vec<&RegionAdapterOutput> = outputs.iter().collect();
    order.sort_by_key(|o| o.key);
    if let Some(w) = order.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(Error::InvalidParameter(format!("duplicate adapter output for {}", w[0].key)));
    }
    for o in &order {
        if o.embedding.dim() != z.dim() {
            let (a, b) = z.dim();
            let (c, d) = o.embedding.dim();
            return Err(Error::shape(&[a, b], &[c, d]));
        }
    }
    let mut fused = z.clone();
    if scale == 0.0 || order.is_empty() {
        return Ok(fused);
    }
    for ((i, j), cell) in fused.indexed_iter_mut() {
        let mut delta = 0.0f32;
        for o in &order {
            delta += o.embedding[[i, j]];
        }
        if delta != 0.0 {
            *cell += scale * delta;
        }
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::RegionLabel;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Uniform};

    fn key(label: RegionLabel) -> RegionKey {
        RegionKey::new(1, label)
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        let u = Uniform::new(-1.0f32, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || u.sample(rng))
    }

    #[test]
    fn binarize_boundary() {
        let m = binarize_mask(key(RegionLabel::Face), &array![[0.9f32, 0.8], [0.81, 0.0]], 0.8);
        assert_eq!(m.values, array![[1.0, 0.0], [1.0, 0.0]]);
        let zero = binarize_mask(key(RegionLabel::Face), &Array2::zeros((3, 3)), 0.8);
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_matches_per_cell_compare() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Uniform::new(0.0f32, 1.0).unwrap();
        let map = Array2::from_shape_simple_fn((8, 8), || u.sample(&mut rng));
        let m = binarize_mask(key(RegionLabel::Upper), &map, 0.8);
        for y in 0..8 {
            for x in 0..8 {
                let expected = if map[[y, x]] > 0.8 { 1.0 } else { 0.0 };
                assert_eq!(m.values[[y, x]], expected);
            }
        }
    }

    #[test]
    fn masking_is_cellwise_product() {
        let map = array![[0.2f32, 0.6], [0.4, 0.8]];
        let k = key(RegionLabel::Face);
        let out = masked_region_attention(&map, &RegionMask::hard(k, array![[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(out, array![[0.2, 0.0], [0.0, 0.8]]);
        assert_eq!(masked_region_attention(&map, &RegionMask::hard(k, Array2::ones((2, 2)))).unwrap(), map);
        assert!(masked_region_attention(&map, &RegionMask::hard(k, Array2::zeros((2, 2))))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(masked_region_attention(&map, &RegionMask::hard(k, Array2::zeros((2, 3)))).is_err());
    }

    #[test]
    fn soft_equals_hard_on_binary_maps() {
        let map = array![[0.0f32, 1.0], [1.0, 0.0]];
        for gamma in [0.1, 0.5, 0.8] {
            let mask = binarize_mask(key(RegionLabel::Lower), &map, gamma);
            assert_eq!(masked_region_attention(&map, &mask).unwrap(), soft_region_attention(&map));
        }
    }

    #[test]
    fn hard_and_soft_differ_below_threshold() {
        let map = array![[0.1f32, 0.5], [0.85, 1.0]];
        let mask = binarize_mask(key(RegionLabel::Lower), &map, 0.8);
        let hard = masked_region_attention(&map, &mask).unwrap();
        let soft = soft_region_attention(&map);
        for ((idx, h), s) in hard.indexed_iter().zip(soft.iter()) {
            if map[idx] <= 0.8 {
                assert_ne!(h, s);
            } else {
                assert_eq!(h, s);
            }
        }
    }

    fn scalar_entry(value: f32) -> (AdapterEntry, AdapterProjection) {
        let entry = AdapterEntry {
            key: key(RegionLabel::Face),
            features: array![[value]],
        };
        let projection = AdapterProjection {
            wk: array![[0.3f32, -0.2]],
            wv: array![[2.0f32, -1.0]],
        };
        (entry, projection)
    }

    #[test]
    fn single_token_embedding_is_outer_product() {
        let (entry, projection) = scalar_entry(1.5);
        let weighting = array![[0.25f32, 0.0], [1.0, 0.5]];
        let queries = array![[0.1f32, 0.2], [0.3, 0.4], [-0.5, 0.6], [0.7, -0.8]];
        let out = region_embedding(Some(&weighting), &queries, &entry, &projection).unwrap();
        let v = [1.5f32 * 2.0, 1.5 * -1.0];
        let flat = [0.25f32, 0.0, 1.0, 0.5];
        for p in 0..4 {
            for c in 0..2 {
                assert!((out.embedding[[p, c]] - flat[p] * v[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_weighting_or_features_give_zero() {
        let (entry, projection) = scalar_entry(1.0);
        let queries = array![[0.1f32, 0.2], [0.3, 0.4]];
        let out = region_embedding(Some(&Array2::zeros((1, 2))), &queries, &entry, &projection).unwrap();
        assert!(out.embedding.iter().all(|&v| v == 0.0));
        let (entry, projection) = scalar_entry(0.0);
        let out = region_embedding(None, &queries, &entry, &projection).unwrap();
        assert!(out.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_empty_and_zero_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random(4, 3, &mut rng);
        assert_eq!(fuse_region_outputs(&z, &[], 1.0).unwrap(), z);
        let out = RegionAdapterOutput {
            key: key(RegionLabel::Face),
            embedding: random(4, 3, &mut rng),
        };
        assert_eq!(fuse_region_outputs(&z, &[out], 0.0).unwrap(), z);
    }

    #[test]
    fn fuse_sums_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(5, 4, &mut rng);
        let outs: Vec<RegionAdapterOutput> = RegionLabel::ANNOTATED
            .iter()
            .map(|&l| RegionAdapterOutput {
                key: key(l),
                embedding: random(5, 4, &mut rng),
            })
            .collect();
        let fused = fuse_region_outputs(&z, &outs, 0.5).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let sum: f32 = outs.iter().map(|o| o.embedding[[i, j]]).sum();
                assert!((fused[[i, j]] - (z[[i, j]] + 0.5 * sum)).abs() < 1e-6);
            }
        }
        let wrong = RegionAdapterOutput {
            key: key(RegionLabel::Body),
            embedding: random(5, 3, &mut rng),
        };
        assert!(fuse_region_outputs(&z, &[wrong], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn fuse_is_order_invariant(seed in 0u64..1000, rotate in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(6, 3, &mut rng);
            let mut outs: Vec<RegionAdapterOutput> = RegionLabel::ANNOTATED
                .iter()
                .map(|&l| RegionAdapterOutput { key: key(l), embedding: random(6, 3, &mut rng) })
                .collect();
            let a = fuse_region_outputs(&z, &outs, 1.0).unwrap();
            outs.rotate_left(rotate);
            outs.swap(0, 2);
            let b = fuse_region_outputs(&z, &outs, 1.0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn contribution_scales_linearly(seed in 0u64..1000, s in 0.0f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(6, 3, &mut rng);
            let e = random(6, 3, &mut rng);
            let base = fuse_region_outputs(&z, &[RegionAdapterOutput { key: key(RegionLabel::Face), embedding: e.clone() }], 1.0).unwrap();
            let scaled = fuse_region_outputs(&z, &[RegionAdapterOutput { key: key(RegionLabel::Face), embedding: e.mapv(|v| v * s) }], 1.0).unwrap();
            for ((b, sc), zz) in base.iter().zip(scaled.iter()).zip(z.iter()) {
                prop_assert!(((sc - zz) - s * (b - zz)).abs() < 1e-5);
            }
        }
    }
}
