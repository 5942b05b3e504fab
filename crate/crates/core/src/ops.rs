//! Small numeric kernels shared by the engine, the probe and the adapters.
//!
//! Every reduction here walks its input in a fixed order so that repeated
//! runs are bit-identical.

use ndarray::{Array2, ArrayView2, Axis};

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(scores: &mut Array2<f32>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
///
/// Resizing to the same shape returns an exact copy; halving each axis
/// reduces to 2x2 block averaging.
pub fn bilinear_resize(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = map.dim();
    if in_h == out_h && in_w == out_w {
        return map.to_owned();
    }
    let ys: Vec<(usize, usize, f32)> = (0..out_h).map(|i| sample_coord(i, in_h, out_h)).collect();
    let xs: Vec<(usize, usize, f32)> = (0..out_w).map(|j| sample_coord(j, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn sample_coord(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, (src - lo as f64) as f32)
}

/// Min-max normalization to [0, 1]. A constant map normalizes to all zeros.
pub fn min_max_normalize(map: ArrayView2<f32>) -> Array2<f32> {
    let min = map.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / range)
}

/// Per-row layer normalization without affine parameters.
pub fn layer_norm_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    let width = x.ncols() as f32;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.iter().sum::<f32>() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Cosine similarity; zero vectors compare as 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_single_element_is_one() {
        let mut s = array![[3.5f32]];
        softmax_rows(&mut s);
        assert_eq!(s[[0, 0]], 1.0);
    }

    #[test]
    fn downsample_by_two_is_block_mean() {
        let m = array![
            [1.0f32, 3.0, 0.0, 0.0],
            [5.0, 7.0, 0.0, 0.0],
            [0.0, 0.0, 2.0, 2.0],
            [0.0, 0.0, 2.0, 2.0]
        ];
        let r = bilinear_resize(m.view(), 2, 2);
        assert_eq!(r, array![[4.0, 0.0], [0.0, 2.0]]);
    }

    #[test]
    fn upsample_matches_hand_values() {
        // Half-pixel centres: output samples at -0.25, 0.25, 0.75, 1.25 (clamped).
        let m = array![[0.0f32, 4.0], [8.0, 12.0]];
        let r = bilinear_resize(m.view(), 4, 4);
        let row0 = [0.0, 1.0, 3.0, 4.0];
        let col_weights = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
        for (i, &(wt, wb)) in col_weights.iter().enumerate() {
            for j in 0..4 {
                let expected = wt * row0[j] + wb * (row0[j] + 8.0);
                assert!((r[[i, j]] - expected).abs() < 1e-6, "{i},{j}");
            }
        }
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let m = Array2::from_elem((3, 3), 0.7f32);
        assert!(min_max_normalize(m.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_of_orthogonal_is_zero() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
    }
}
