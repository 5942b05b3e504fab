//! Minimal latent-diffusion machinery.

pub mod attention;
pub mod codec;
pub mod sampler;
pub mod schedule;
pub mod unet;

use ndarray::{Array2, Array3};

use crate::error::Result;
use crate::image::{Image, RegionBox};
use crate::text::{encode_tokens, tokenize, TextEmbeddingMatrix, TokenSequence};

pub use attention::{cross_attention, decoupled_cross_attention, AdapterBundle, AdapterEntry, AdapterProjection, AttentionWeights, RegionKey};
pub use codec::{encode_reference_features, latent_decode, latent_encode, FeatureEncoder};
pub use sampler::{cfg_combine, initial_noise, sample, SamplerSettings};
pub use schedule::{forward_noise, NoiseSchedule};
pub use unet::{AdapterContext, Conditioning, DenoiseHook, NoHook, NoisePredictor, UNet, UNetConfig};

/// Channel-first latent `c x h x w` tagged with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f32>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(values: Array3<f32>) -> Self {
        Self { values, timestep: 0 }
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub unet: UNetConfig,
    /// Schedule length T.
    pub timesteps: usize,
    /// Pixel-to-latent patch factor.
    pub latent_factor: usize,
    /// Side of the patch grid reference crops are encoded to.
    pub feature_grid: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            timesteps: 20,
            latent_factor: 4,
            feature_grid: 4,
        }
    }
}

/// Immutable model state: weights, schedule and encoders.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    unet: UNet,
    schedule: NoiseSchedule,
    features: FeatureEncoder,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        let unet = UNet::new(config.unet.clone())?;
        let schedule = NoiseSchedule::cosine(config.timesteps)?;
        let features = FeatureEncoder::new(
            config.unet.latent_channels,
            config.unet.image_dim,
            config.feature_grid,
            crate::text::mix_seed(config.unet.seed, 0xfea7),
        );
        Ok(Self {
            config,
            unet,
            schedule,
            features,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn feature_encoder(&self) -> &FeatureEncoder {
        &self.features
    }

    pub fn num_layers(&self) -> usize {
        self.config.unet.num_layers()
    }

    pub fn embed_prompt(&self, text: &str) -> Result<(TokenSequence, TextEmbeddingMatrix)> {
        let tokens = tokenize(text)?;
        let emb = encode_tokens(&tokens, self.config.unet.text_dim, self.config.unet.seed);
        Ok((tokens, emb))
    }

    /// Unconditional context: a single all-zero token.
    pub fn null_text(&self) -> TextEmbeddingMatrix {
        TextEmbeddingMatrix(Array2::zeros((1, self.config.unet.text_dim)))
    }

    pub fn reference_features(&self, image: &Image, region: RegionBox) -> Result<Array2<f32>> {
        self.features.encode(image, region)
    }

    pub fn encode_image(&self, image: &Image) -> Result<Latent> {
        latent_encode(image, self.config.latent_factor)
    }

    pub fn decode_latent(&self, z: &Latent) -> Image {
        latent_decode(z, self.config.latent_factor)
    }
}
