use rand::Rng;

use super::{images_to_tensor, latents_from_tensor, ArchConfig, Image, LatentCode};
use crate::layers::{Conv2d, Layer, Linear, Sequential, Trace};
use crate::rng::substream;
use crate::tensor::{Real, Tensor};

/// Seed the perceptual extractor's weights are drawn from.
pub const PERCEPTUAL_SEED: u64 = 1234;

fn conv_block<T: Real, R: Rng + ?Sized>(layers: &mut Vec<Layer<T>>, cin: usize, cout: usize, stride: usize, rng: &mut R) {
    layers.push(Layer::Conv(Conv2d::new(cin, cout, stride, rng)));
    layers.push(Layer::LeakyRelu);
}

/// Inversion network `E: image -> w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub net: Sequential<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let [c0, c1, c2, c3] = cfg.encoder_channels;
        let mut layers = Vec::new();
        conv_block(&mut layers, 3, c0, 2, rng);
        conv_block(&mut layers, c0, c1, 2, rng);
        conv_block(&mut layers, c1, c2, 2, rng);
        conv_block(&mut layers, c2, c3, 1, rng);
        let side = cfg.image_size() / 8;
        layers.push(Layer::Linear(Linear::new(c3 * side * side, cfg.w_dim, rng)));
        Encoder {
            net: Sequential::new(layers),
        }
    }

    pub fn encode_batch(&self, images: &Tensor<T>) -> Tensor<T> {
        self.net.forward(images)
    }

    pub fn encode_images(&self, images: &[Image]) -> Vec<LatentCode> {
        if images.is_empty() {
            return Vec::new();
        }
        latents_from_tensor(&self.encode_batch(&images_to_tensor(images)))
    }

    pub fn encode(&self, x: &Image) -> LatentCode {
        self.encode_images(std::slice::from_ref(x)).remove(0)
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder { net: self.net.cast() }
    }
}

/// Identity embedder: three strided conv blocks, global pooling, a linear
/// head and L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder<T> {
    pub net: Sequential<T>,
}

impl<T: Real> Embedder<T> {
    /// Activation index of the pooled penultimate features.
    pub const POOLED: usize = 7;
    /// Activation indices of the three conv block outputs.
    pub const BLOCKS: [usize; 3] = [2, 4, 6];

    pub fn new<R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Self {
        let [c0, c1, c2] = cfg.embed_channels;
        let mut layers = Vec::new();
        conv_block(&mut layers, 3, c0, 2, rng);
        conv_block(&mut layers, c0, c1, 2, rng);
        conv_block(&mut layers, c1, c2, 2, rng);
        let side = (cfg.image_size() / 16).max(1);
        layers.push(if side > 1 { Layer::AvgPool2 } else { Layer::GlobalAvgPool });
        layers.push(Layer::Linear(Linear::new(c2 * side * side, cfg.embed_dim, rng)));
        layers.push(Layer::L2Normalize);
        Embedder {
            net: Sequential::new(layers),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.net.layers[Self::POOLED] {
            Layer::Linear(l) => l.in_dim,
            _ => unreachable!("embedder head is linear"),
        }
    }

    /// Unit-norm embeddings, `[n, dim, 1, 1]`.
    pub fn embed_batch(&self, images: &Tensor<T>) -> Tensor<T> {
        self.net.forward(images)
    }

    pub fn trace(&self, images: Tensor<T>) -> Trace<T> {
        self.net.forward_traced(images)
    }

    /// Pooled penultimate activations, the Fréchet feature space.
    pub fn pooled_features(&self, images: &Tensor<T>) -> Tensor<T> {
        let mut cur = images.clone();
        for l in &self.net.layers[..Self::POOLED] {
            cur = l.forward(&cur);
        }
        cur
    }

    pub fn embed(&self, x: &Image) -> Vec<f64> {
        self.embed_batch(&x.to_tensor()).data().iter().map(|v| v.f64()).collect()
    }

    /// Intermediate feature maps keyed by name.
    pub fn feature_maps(&self, x: &Image) -> Vec<(String, Tensor<T>)> {
        let trace = self.trace(x.to_tensor());
        let mut out: Vec<(String, Tensor<T>)> = Self::BLOCKS
            .iter()
            .enumerate()
            .map(|(b, &i)| (format!("block{b}"), trace.acts[i].clone()))
            .collect();
        out.push(("pooled".into(), trace.acts[Self::POOLED].clone()));
        out
    }

    pub fn cast<U: Real>(&self) -> Embedder<U> {
        Embedder { net: self.net.cast() }
    }
}

/// Random-feature perceptual extractor; weights are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceptual<T> {
    net: Sequential<T>,
}

impl<T: Real> Perceptual<T> {
    /// Activation indices whose outputs enter the perceptual distance.
    pub const TAPS: [usize; 3] = [2, 4, 6];

    pub fn new(cfg: &ArchConfig) -> Self {
        let mut rng = substream(PERCEPTUAL_SEED, "perceptual", 0);
        let [c0, c1, c2] = cfg.percep_channels;
        let mut layers = Vec::new();
        conv_block(&mut layers, 3, c0, 2, &mut rng);
        conv_block(&mut layers, c0, c1, 2, &mut rng);
        conv_block(&mut layers, c1, c2, 2, &mut rng);
        Perceptual {
            net: Sequential::new(layers),
        }
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn trace(&self, images: Tensor<T>) -> Trace<T> {
        self.net.forward_traced(images)
    }

    pub fn features(&self, x: &Image) -> Vec<Tensor<T>> {
        let trace = self.trace(x.to_tensor());
        Self::TAPS.iter().map(|&i| trace.acts[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_identity, sample_identity, Regime, VariationParams};

    fn image(seed: u64) -> Image {
        let spec = sample_identity(&mut substream(seed, "id", 0), Regime::InDomain, "x");
        render_identity(&spec, &VariationParams::ZERO, 32)
    }

    #[test]
    fn embeddings_are_unit_norm_and_stable() {
        let cfg = ArchConfig::default();
        let emb = Embedder::<f32>::new(&cfg, &mut substream(0, "emb", 0));
        for s in 0..4 {
            let x = image(s);
            let e = emb.embed(&x);
            assert_eq!(e.len(), 32);
            let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "norm {n}");
            assert_eq!(e, emb.embed(&x));
        }
        assert_eq!(emb.feature_dim(), 64 * 2 * 2);
        let maps = emb.feature_maps(&image(0));
        assert_eq!(maps.last().unwrap().1.shape(), [1, 64, 2, 2]);
    }

    #[test]
    fn perceptual_weights_depend_only_on_the_fixed_seed() {
        let cfg = ArchConfig::default();
        let a = Perceptual::<f32>::new(&cfg);
        let b = Perceptual::<f32>::new(&cfg);
        assert_eq!(a, b);
        let feats = a.features(&image(1));
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[2].shape(), [1, 32, 4, 4]);
    }

    #[test]
    fn encoder_emits_latent_dimension() {
        let cfg = ArchConfig::default();
        let e = Encoder::<f32>::new(&cfg, &mut substream(0, "enc", 0));
        let x = image(2);
        let w = e.encode(&x);
        assert_eq!(w.dim(), 512);
        assert_eq!(w, e.encode(&x));
    }
}
