//! A small seeded UNet-style noise predictor.
//!
//! Four cross-attention layers at two resolutions: full, half, half, full.
//! Everything except the 2x2 average-pool / nearest-upsample pair acts on
//! each position independently, so information never travels further than
//! the 2x2 block a position belongs to.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::attention::{decoupled_from_text, text_attention, AdapterBundle, AdapterProjection, AttentionWeights, RegionKey};
use crate::error::{Error, Result};
use crate::ops::{bilinear_resize, layer_norm_rows, silu};
use crate::text::{mix_seed, RegionLabel, TextEmbeddingMatrix};

/// Downsampling level of each cross-attention layer (0 = full resolution).
pub const LAYER_LEVELS: [usize; 4] = [0, 1, 1, 0];

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            width: 32,
            text_dim: 32,
            image_dim: 32,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn num_layers(&self) -> usize {
        LAYER_LEVELS.len()
    }

    /// Spatial side divisor every latent dimension must satisfy.
    pub fn spatial_multiple(&self) -> usize {
        1 << LAYER_LEVELS.iter().max().copied().unwrap_or(0)
    }
}

/// Text plus optional image conditioning for one noise prediction.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub text: TextEmbeddingMatrix,
    pub adapters: Option<AdapterContext>,
}

impl Conditioning {
    pub fn text_only(text: TextEmbeddingMatrix) -> Self {
        Self { text, adapters: None }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterContext {
    pub bundle: AdapterBundle,
    /// Per-region spatial weighting at full latent resolution. `None` means
    /// every adapter applies unmasked.
    pub region_maps: Option<BTreeMap<RegionKey, Array2<f32>>>,
    /// 1-based layers that receive adapter terms; `None` means all.
    pub layers: Option<BTreeSet<usize>>,
}

impl AdapterContext {
    fn applies_to(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }
}

/// Observation points inside a noise prediction.
pub trait DenoiseHook {
    fn wants_attention(&self) -> bool {
        false
    }

    /// Softmax weights of a text cross-attention layer, positions x words,
    /// positions row-major over `(height, width)`.
    fn on_attention(&mut self, _layer: usize, _timestep: usize, _size: (usize, usize), _probs: &Array2<f32>) {}

    /// Output of a layer's decoupled attention after region fusion.
    fn on_fused(&mut self, _layer: usize, _timestep: usize, _size: (usize, usize), _fused: &Array2<f32>) {}
}

/// Hook that observes nothing.
pub struct NoHook;

impl DenoiseHook for NoHook {}

pub trait NoisePredictor {
    fn predict_noise(&self, latent: &Array3<f32>, timestep: usize, cond: &Conditioning, hook: &mut dyn DenoiseHook) -> Result<Array3<f32>>;
}

#[derive(Debug, Clone)]
struct CrossAttentionBlock {
    weights: AttentionWeights,
    out: Array2<f32>,
    adapters: BTreeMap<RegionLabel, AdapterProjection>,
}

#[derive(Debug, Clone)]
struct Mlp {
    up: Array2<f32>,
    down: Array2<f32>,
}

impl Mlp {
    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut hidden = layer_norm_rows(x).dot(&self.up);
        hidden.mapv_inplace(silu);
        hidden.dot(&self.down)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    input: Array2<f32>,
    time: Array2<f32>,
    mlps: [Mlp; 3],
    attention: Vec<CrossAttentionBlock>,
    output: Array2<f32>,
}

struct WeightInit {
    rng: ChaCha8Rng,
}

impl WeightInit {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Array2<f32> {
        let scale = 1.0 / (rows as f32).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || {
            let v: f32 = StandardNormal.sample(&mut self.rng);
            v * scale
        })
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        if config.latent_channels == 0 || config.width == 0 || config.text_dim == 0 || config.image_dim == 0 {
            return Err(Error::InvalidParameter("UNet dimensions must be positive".into()));
        }
        let w = config.width;
        let mut init = WeightInit::new(config.seed);
        let input = init.matrix(config.latent_channels, w);
        let time = init.matrix(w, w);
        let mut mlp = || Mlp {
            up: init.matrix(w, 2 * w),
            down: init.matrix(2 * w, w).mapv(|v| v * 0.5),
        };
        let mlps = [mlp(), mlp(), mlp()];
        let mut attention = Vec::with_capacity(LAYER_LEVELS.len());
        for layer in 1..=LAYER_LEVELS.len() {
            let weights = AttentionWeights {
                layer,
                wq: init.matrix(w, w),
                wk: init.matrix(config.text_dim, w),
                wv: init.matrix(config.text_dim, w),
            };
            let out = init.matrix(w, w);
            let mut adapters = BTreeMap::new();
            for label in [RegionLabel::Face, RegionLabel::Upper, RegionLabel::Lower, RegionLabel::Body, RegionLabel::Whole] {
                // One init family, distinguished by (region, layer).
                let mut region_init = WeightInit::new(mix_seed(config.seed, (label.index() << 8) | layer as u64));
                adapters.insert(
                    label,
                    AdapterProjection {
                        wk: region_init.matrix(config.image_dim, w),
                        wv: region_init.matrix(config.image_dim, w),
                    },
                );
            }
            attention.push(CrossAttentionBlock { weights, out, adapters });
        }
        let output = init.matrix(w, config.latent_channels);
        Ok(Self {
            config,
            input,
            time,
            mlps,
            attention,
            output,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn attention_weights(&self, layer: usize) -> &AttentionWeights {
        &self.attention[layer - 1].weights
    }

    pub fn adapter_projections(&self, layer: usize) -> &BTreeMap<RegionLabel, AdapterProjection> {
        &self.attention[layer - 1].adapters
    }

    fn time_embedding(&self, timestep: usize) -> Vec<f32> {
        let w = self.config.width;
        let half = w / 2;
        let mut freq = vec![0.0f32; w];
        for i in 0..half {
            let f = (-(i as f32) * (10_000f32).ln() / half.max(1) as f32).exp();
            let arg = timestep as f32 * f;
            freq[i] = arg.sin();
            freq[half + i] = arg.cos();
        }
        let freq = Array2::from_shape_vec((1, w), freq).expect("shape");
        freq.dot(&self.time).iter().map(|&v| silu(v)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        layer: usize,
        h: &Array2<f32>,
        size: (usize, usize),
        timestep: usize,
        cond: &Conditioning,
        maps_at: &mut BTreeMap<(usize, usize), BTreeMap<RegionKey, Array2<f32>>>,
        hook: &mut dyn DenoiseHook,
    ) -> Result<Array2<f32>> {
        let block = &self.attention[layer - 1];
        let normed = layer_norm_rows(h);
        let text = text_attention(&normed, &cond.text, &block.weights)?;
        if hook.wants_attention() {
            hook.on_attention(layer, timestep, size, &text.probs);
        }
        let fused = match &cond.adapters {
            Some(ctx) if ctx.applies_to(layer) => {
                let region_attn = ctx.region_maps.as_ref().map(|maps| {
                    &*maps_at.entry(size).or_insert_with(|| {
                        maps.iter()
                            .map(|(k, m)| (*k, bilinear_resize(m.view(), size.0, size.1)))
                            .collect()
                    })
                });
                decoupled_from_text(&text, &ctx.bundle, &block.adapters, region_attn)?
            }
            _ => text.output,
        };
        hook.on_fused(layer, timestep, size, &fused);
        Ok(fused.dot(&block.out))
    }
}

fn to_tokens(latent: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = latent.dim();
    Array2::from_shape_fn((h * w, c), |(p, ch)| latent[[ch, p / w, p % w]])
}

fn from_tokens(tokens: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((tokens.ncols(), h, w), |(ch, y, x)| tokens[[y * w + x, ch]])
}

fn avg_pool2(x: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh * ow, x.ncols()), |(p, c)| {
        let (y, xx) = (2 * (p / ow), 2 * (p % ow));
        (x[[y * w + xx, c]] + x[[y * w + xx + 1, c]] + x[[(y + 1) * w + xx, c]] + x[[(y + 1) * w + xx + 1, c]]) * 0.25
    })
}

fn upsample2(x: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let ow = w / 2;
    Array2::from_shape_fn((h * w, x.ncols()), |(p, c)| {
        let (y, xx) = (p / w, p % w);
        x[[(y / 2) * ow + xx / 2, c]]
    })
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, latent: &Array3<f32>, timestep: usize, cond: &Conditioning, hook: &mut dyn DenoiseHook) -> Result<Array3<f32>> {
        let (c, h, w) = latent.dim();
        if c != self.config.latent_channels {
            return Err(Error::shape(&[self.config.latent_channels, h, w], &[c, h, w]));
        }
        let m = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::NotDivisible { width: w, height: h, factor: m });
        }
        let mut maps_at = BTreeMap::new();
        let temb = self.time_embedding(timestep);

        let mut x = to_tokens(latent).dot(&self.input);
        for mut row in x.rows_mut() {
            row.iter_mut().zip(&temb).for_each(|(v, t)| *v += t);
        }
        x = &x + &self.mlps[0].apply(&x);
        let skip = &x + &self.attend(1, &x, (h, w), timestep, cond, &mut maps_at, hook)?;

        let (hh, hw) = (h / 2, w / 2);
        let mut d = avg_pool2(&skip, h, w);
        d = &d + &self.attend(2, &d, (hh, hw), timestep, cond, &mut maps_at, hook)?;
        d = &d + &self.mlps[1].apply(&d);
        d = &d + &self.attend(3, &d, (hh, hw), timestep, cond, &mut maps_at, hook)?;

        let mut u = &upsample2(&d, h, w) + &skip;
        u = &u + &self.attend(4, &u, (h, w), timestep, cond, &mut maps_at, hook)?;
        u = &u + &self.mlps[2].apply(&u);
        let eps = layer_norm_rows(&u).dot(&self.output);
        Ok(from_tokens(&eps, h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_tokens, tokenize};

    fn small() -> UNet {
        UNet::new(UNetConfig {
            width: 8,
            text_dim: 8,
            image_dim: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn latent(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| ((c * 31 + y * 7 + x * 13) % 11) as f32 / 5.0 - 1.0)
    }

    #[test]
    fn predicts_latent_shape_deterministically() {
        let net = small();
        let text = encode_tokens(&tokenize("a red fox").unwrap(), 8, 0);
        let cond = Conditioning::text_only(text);
        let a = net.predict_noise(&latent(8, 8), 5, &cond, &mut NoHook).unwrap();
        let b = net.predict_noise(&latent(8, 8), 5, &cond, &mut NoHook).unwrap();
        assert_eq!(a.dim(), (3, 8, 8));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_odd_latents() {
        let net = small();
        let cond = Conditioning::text_only(encode_tokens(&tokenize("a").unwrap(), 8, 0));
        assert!(net.predict_noise(&latent(5, 8), 1, &cond, &mut NoHook).is_err());
    }

    #[test]
    fn changes_stay_inside_their_block() {
        let net = small();
        let cond = Conditioning::text_only(encode_tokens(&tokenize("a red fox").unwrap(), 8, 0));
        let base = latent(8, 8);
        let mut bumped = base.clone();
        bumped[[0, 2, 5]] += 1.0;
        let a = net.predict_noise(&base, 3, &cond, &mut NoHook).unwrap();
        let b = net.predict_noise(&bumped, 3, &cond, &mut NoHook).unwrap();
        for (((_, y, x), va), vb) in a.indexed_iter().zip(b.iter()) {
            let in_block = y / 2 == 1 && x / 2 == 2;
            if !in_block {
                assert_eq!(va, vb, "({y},{x}) changed");
            }
        }
    }

    struct Counter(usize, usize);

    impl DenoiseHook for Counter {
        fn wants_attention(&self) -> bool {
            true
        }
        fn on_attention(&mut self, _: usize, _: usize, _: (usize, usize), probs: &Array2<f32>) {
            self.0 += 1;
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
        fn on_fused(&mut self, _: usize, _: usize, _: (usize, usize), _: &Array2<f32>) {
            self.1 += 1;
        }
    }

    #[test]
    fn hook_sees_every_layer() {
        let net = small();
        let cond = Conditioning::text_only(encode_tokens(&tokenize("a red fox").unwrap(), 8, 0));
        let mut hook = Counter(0, 0);
        net.predict_noise(&latent(4, 4), 2, &cond, &mut hook).unwrap();
        assert_eq!((hook.0, hook.1), (4, 4));
    }
}
