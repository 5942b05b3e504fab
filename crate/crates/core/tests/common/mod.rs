#![allow(dead_code)]

use character_adapter::diffusion::{Engine, EngineConfig};
use character_adapter::image::Image;
use character_adapter::text::{parse_region_prompts, PromptSpec, RegionLabel};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROMPT: &str = "a boy standing in a library, wearing green jacket and blue pants";

pub fn engine() -> Engine {
    Engine::new(EngineConfig::default()).unwrap()
}

pub fn example_spec() -> PromptSpec {
    parse_region_prompts(
        PROMPT,
        &[
            (RegionLabel::Face, "a boy".into()),
            (RegionLabel::Upper, "green jacket".into()),
            (RegionLabel::Lower, "blue pants".into()),
        ],
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0f32..1.0))
}

pub fn random_image(seed: u64, height: usize, width: usize) -> Image {
    let mut r = rng(seed);
    Image::new(Array3::from_shape_simple_fn((3, height, width), || r.random_range(0.0f32..1.0)))
}

fn dot64(a: &Array2<f32>, b: &Array2<f32>) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0f64; b.ncols()]; a.nrows()];
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            for k in 0..a.ncols() {
                out[i][j] += a[[i, k]] as f64 * b[[k, j]] as f64;
            }
        }
    }
    out
}

/// Triple-loop `softmax(z Wq (c Wk)^T / sqrt(d)) c Wv` in f64.
pub fn naive_attention(z: &Array2<f32>, c: &Array2<f32>, wq: &Array2<f32>, wk: &Array2<f32>, wv: &Array2<f32>) -> Vec<Vec<f64>> {
    let q = dot64(z, wq);
    let k = dot64(c, wk);
    let v = dot64(c, wv);
    let d = wq.ncols();
    let mut out = vec![vec![0.0f64; d]; z.nrows()];
    for i in 0..z.nrows() {
        let scores: Vec<f64> = (0..c.nrows()).map(|j| (0..d).map(|e| q[i][e] * k[j][e]).sum::<f64>() / (d as f64).sqrt()).collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..c.nrows() {
            for e in 0..d {
                out[i][e] += exps[j] / total * v[j][e];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Array2<f32>, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] as f64 - v).abs());
        }
    }
    worst
}
