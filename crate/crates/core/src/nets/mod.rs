//! Network architectures: mapping, synthesis and renderer stages of the
//! generator, the inversion encoder, the identity embedder and the fixed
//! random-feature perceptual extractor.

mod checkpoint;
mod critics;
mod generator;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, save_checkpoint, validate_checkpoint, CheckpointManifest, NetSet,
    CHECKPOINT_VERSION,
};
pub use critics::{Embedder, Encoder, Perceptual, PERCEPTUAL_SEED};
pub use generator::{FrozenStages, GeneratorBundle, MapKind, MappingNet, Provenance};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub map_hidden: usize,
    pub feat_channels: usize,
    pub feat_size: usize,
    pub render_channels: usize,
    pub encoder_channels: [usize; 4],
    pub embed_channels: [usize; 3],
    pub embed_dim: usize,
    pub percep_channels: [usize; 3],
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            z_dim: 512,
            w_dim: 512,
            map_hidden: 128,
            feat_channels: 32,
            feat_size: 8,
            render_channels: 16,
            encoder_channels: [16, 32, 64, 64],
            embed_channels: [16, 32, 64],
            embed_dim: 32,
            percep_channels: [16, 32, 32],
        }
    }
}

impl ArchConfig {
    /// Miniature networks on 8x8 images, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ArchConfig {
            z_dim: 6,
            w_dim: 6,
            map_hidden: 8,
            feat_channels: 3,
            feat_size: 2,
            render_channels: 3,
            encoder_channels: [2, 3, 3, 4],
            embed_channels: [3, 4, 4],
            embed_dim: 5,
            percep_channels: [2, 3, 3],
        }
    }

    pub fn image_size(&self) -> usize {
        self.feat_size * 4
    }

    pub fn feature_len(&self) -> usize {
        self.feat_channels * self.feat_size * self.feat_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.z_dim,
            self.w_dim,
            self.map_hidden,
            self.feat_channels,
            self.feat_size,
            self.render_channels,
            self.embed_dim,
        ];
        let all = dims
            .iter()
            .chain(&self.encoder_channels)
            .chain(&self.embed_channels)
            .chain(&self.percep_channels);
        if all.into_iter().any(|&d| d == 0) {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        if self.image_size() < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        Ok(())
    }
}

/// A point in the generator's style space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

/// A draw from the standard normal prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseVector(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl NoiseVector {
    pub fn sample(rng: &mut crate::rng::Stream, dim: usize) -> Self {
        NoiseVector(crate::rng::normal_vec(rng, dim))
    }
}

/// `[n, dim, 1, 1]` batch from latent codes, checking every dimension.
pub fn latent_batch<T: Real>(codes: &[LatentCode], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(codes.len() * dim);
    for c in codes {
        if c.dim() != dim {
            return Err(Error::Dimension {
                what: "latent code",
                expected: dim,
                got: c.dim(),
            });
        }
        data.extend(c.0.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::from_vec([codes.len(), dim, 1, 1], data))
}

pub fn latents_from_tensor<T: Real>(t: &Tensor<T>) -> Vec<LatentCode> {
    (0..t.batch())
        .map(|i| LatentCode(t.sample(i).iter().map(|v| v.f64()).collect()))
        .collect()
}

/// RGB image stored planar (`[3][h][w]`), values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn from_chw(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * size * size, "image buffer size");
        Image { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.size + row) * self.size + col]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        images_to_tensor(std::slice::from_ref(self))
    }
}

pub fn images_to_tensor<T: Real>(images: &[Image]) -> Tensor<T> {
    let size = images.first().map_or(0, |i| i.size);
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        assert_eq!(img.size, size, "mixed image sizes");
        data.extend(img.data.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::from_vec([images.len(), 3, size, size], data)
}

pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Vec<Image> {
    let [n, c, h, w] = t.shape();
    assert!(c == 3 && h == w, "not an image batch: {:?}", t.shape());
    (0..n)
        .map(|i| Image::from_chw(h, t.sample(i).iter().map(|v| v.f64() as f32).collect()))
        .collect()
}
