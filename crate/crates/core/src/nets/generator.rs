use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{latent_batch, latents_from_tensor, tensor_to_images, ArchConfig, Image, LatentCode, NoiseVector};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Layer, Linear, Sequential};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Identity,
    Mlp,
}

/// `Map: z -> w`.
#[derive(Clone, Debug, PartialEq)]
pub enum MappingNet<T> {
    Identity { dim: usize },
    Mlp(Sequential<T>),
}

impl<T: Real> MappingNet<T> {
    pub fn kind(&self) -> MapKind {
        match self {
            MappingNet::Identity { .. } => MapKind::Identity,
            MappingNet::Mlp(_) => MapKind::Mlp,
        }
    }

    fn forward(&self, z: &Tensor<T>) -> Tensor<T> {
        match self {
            MappingNet::Identity { .. } => z.clone(),
            MappingNet::Mlp(net) => net.forward(z),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Source,
    Unlearned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenStages {
    pub mapping: bool,
    pub synthesis: bool,
    pub renderer: bool,
}

/// Mapping, synthesis and renderer stages: `image = R(G(Map(z)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle<T> {
    pub config: ArchConfig,
    pub mapping: MappingNet<T>,
    pub synthesis: Sequential<T>,
    pub renderer: Sequential<T>,
    pub frozen: FrozenStages,
    pub provenance: Provenance,
}

pub(crate) fn build_mapping<T: Real, R: Rng + ?Sized>(cfg: &ArchConfig, kind: MapKind, rng: &mut R) -> MappingNet<T> {
    match kind {
        MapKind::Identity => MappingNet::Identity { dim: cfg.z_dim },
        MapKind::Mlp => MappingNet::Mlp(Sequential::new(vec![
            Layer::Linear(Linear::new(cfg.z_dim, cfg.map_hidden, rng)),
            Layer::LeakyRelu,
            Layer::Linear(Linear::new(cfg.map_hidden, cfg.w_dim, rng)),
        ])),
    }
}

pub(crate) fn build_synthesis<T: Real, R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Sequential<T> {
    let c = cfg.feat_channels;
    Sequential::new(vec![
        Layer::Linear(Linear::new(cfg.w_dim, cfg.feature_len(), rng)),
        Layer::LeakyRelu,
        Layer::Reshape([c, cfg.feat_size, cfg.feat_size]),
        Layer::Conv(Conv2d::new(c, c, 1, rng)),
        Layer::LeakyRelu,
        Layer::Conv(Conv2d::new(c, c, 1, rng)),
        Layer::LeakyRelu,
    ])
}

pub(crate) fn build_renderer<T: Real, R: Rng + ?Sized>(cfg: &ArchConfig, rng: &mut R) -> Sequential<T> {
    Sequential::new(vec![
        Layer::Upsample2,
        Layer::Conv(Conv2d::new(cfg.feat_channels, cfg.render_channels, 1, rng)),
        Layer::LeakyRelu,
        Layer::Upsample2,
        Layer::Conv(Conv2d::new(cfg.render_channels, 3, 1, rng)),
        Layer::Tanh,
    ])
}

impl<T: Real> GeneratorBundle<T> {
    pub fn new<R: Rng + ?Sized>(config: ArchConfig, map: MapKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if map == MapKind::Identity && config.z_dim != config.w_dim {
            return Err(Error::Config("identity mapping needs z_dim == w_dim".into()));
        }
        Ok(GeneratorBundle {
            mapping: build_mapping(&config, map, rng),
            synthesis: build_synthesis(&config, rng),
            renderer: build_renderer(&config, rng),
            frozen: FrozenStages {
                mapping: true,
                synthesis: false,
                renderer: true,
            },
            provenance: Provenance::Source,
            config,
        })
    }

    /// Deep copy that becomes the unlearned edition.
    pub fn clone_generator(&self) -> Self {
        GeneratorBundle {
            provenance: Provenance::Unlearned,
            frozen: FrozenStages {
                mapping: true,
                synthesis: false,
                renderer: true,
            },
            ..self.clone()
        }
    }

    pub fn map_batch(&self, zs: &[NoiseVector]) -> Result<Vec<LatentCode>> {
        let codes: Vec<LatentCode> = zs.iter().map(|z| LatentCode(z.0.clone())).collect();
        let zt = latent_batch::<T>(&codes, self.config.z_dim).map_err(|_| Error::Dimension {
            what: "noise vector",
            expected: self.config.z_dim,
            got: zs.iter().map(|z| z.0.len()).find(|&l| l != self.config.z_dim).unwrap_or(0),
        })?;
        if let MappingNet::Identity { .. } = self.mapping {
            return Ok(codes);
        }
        Ok(latents_from_tensor(&self.mapping.forward(&zt)))
    }

    pub fn map_forward(&self, z: &NoiseVector) -> Result<LatentCode> {
        Ok(self.map_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn synth_batch(&self, ws: &[LatentCode]) -> Result<Tensor<T>> {
        Ok(self.synthesis.forward(&latent_batch(ws, self.config.w_dim)?))
    }

    pub fn synth_forward(&self, w: &LatentCode) -> Result<Tensor<T>> {
        self.synth_batch(std::slice::from_ref(w))
    }

    pub fn render_forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = features.shape();
        let fs = self.config.feat_size;
        if c != self.config.feat_channels || h != fs || w != fs {
            return Err(Error::ShapeMismatch {
                array: "synth feature".into(),
                expected: vec![self.config.feat_channels, fs, fs],
                found: vec![c, h, w],
            });
        }
        Ok(self.renderer.forward(features))
    }

    pub fn generate_batch(&self, ws: &[LatentCode]) -> Result<Tensor<T>> {
        self.render_forward(&self.synth_batch(ws)?)
    }

    pub fn generate(&self, w: &LatentCode) -> Result<Image> {
        Ok(tensor_to_images(&self.generate_batch(std::slice::from_ref(w))?).remove(0))
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.config == other.config && self.mapping.kind() == other.mapping.kind()
    }

    pub fn cast<U: Real>(&self) -> GeneratorBundle<U> {
        GeneratorBundle {
            config: self.config.clone(),
            mapping: match &self.mapping {
                MappingNet::Identity { dim } => MappingNet::Identity { dim: *dim },
                MappingNet::Mlp(n) => MappingNet::Mlp(n.cast()),
            },
            synthesis: self.synthesis.cast(),
            renderer: self.renderer.cast(),
            frozen: self.frozen,
            provenance: self.provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, substream};

    fn tiny(map: MapKind) -> GeneratorBundle<f64> {
        GeneratorBundle::new(ArchConfig::tiny(), map, &mut substream(1, "g", 0)).unwrap()
    }

    #[test]
    fn identity_mapping_returns_input() {
        let g = tiny(MapKind::Identity);
        let z = NoiseVector(vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
        assert_eq!(g.map_forward(&z).unwrap().0, z.0);
    }

    #[test]
    fn wrong_noise_dimension_is_reported() {
        let g = tiny(MapKind::Mlp);
        let err = g.map_forward(&NoiseVector(vec![0.0; 4])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 6, got: 4, .. }));
        let err = g.synth_forward(&LatentCode(vec![0.0; 5])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 6, got: 5, .. }));
    }

    #[test]
    fn mapping_jvp_matches_central_differences() {
        let g = tiny(MapKind::Mlp);
        let MappingNet::Mlp(net) = &g.mapping else { unreachable!() };
        let mut rng = substream(2, "jvp", 0);
        let z = normal_vec(&mut rng, 6);
        let v = normal_vec(&mut rng, 6);
        let zt = Tensor::from_vec([1, 6, 1, 1], z.clone());
        let trace = net.forward_traced(zt);
        let h = 1e-5;
        let shifted = |s: f64| {
            let zz: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + s * h * b).collect();
            g.map_forward(&NoiseVector(zz)).unwrap().0
        };
        let (p, m) = (shifted(1.0), shifted(-1.0));
        // reverse mode, one output coordinate at a time
        for j in 0..6 {
            let mut seed = Tensor::zeros([1, 6, 1, 1]);
            seed.data_mut()[j] = 1.0;
            let grad = net.backward(&trace, vec![(3, seed)], None, true).unwrap();
            let an: f64 = grad.data().iter().zip(&v).map(|(a, b)| a * b).sum();
            let fd = (p[j] - m[j]) / (2.0 * h);
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{an} vs {fd}");
        }
    }

    #[test]
    fn default_generator_emits_bounded_32px_rgb() {
        let g = GeneratorBundle::<f32>::new(ArchConfig::default(), MapKind::Identity, &mut substream(0, "g", 0))
            .unwrap();
        let mut rng = substream(0, "w", 0);
        let ws: Vec<LatentCode> = (0..3).map(|_| LatentCode(normal_vec(&mut rng, 512))).collect();
        let out = g.generate_batch(&ws).unwrap();
        assert_eq!(out.shape(), [3, 3, 32, 32]);
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(g.generate_batch(&ws).unwrap(), out);
    }

    #[test]
    fn mean_pixel_gradient_wrt_latent_matches_finite_differences() {
        let g = tiny(MapKind::Identity);
        let mut rng = substream(5, "w", 0);
        let w = normal_vec(&mut rng, 6);
        let wt = Tensor::from_vec([1, 6, 1, 1], w.clone());
        let st = g.synthesis.forward_traced(wt);
        let rt = g.renderer.forward_traced(st.output().clone());
        let out_len = rt.output().data().len() as f64;
        let seed = Tensor::from_vec(rt.output().shape(), vec![1.0 / out_len; rt.output().data().len()]);
        let df = g.renderer.backward(&rt, vec![(g.renderer.layers.len(), seed)], None, true).unwrap();
        let dw = g
            .synthesis
            .backward(&st, vec![(g.synthesis.layers.len(), df)], None, true)
            .unwrap();
        let mean_pixel = |ww: &[f64]| {
            let img = g.generate_batch(&[LatentCode(ww.to_vec())]).unwrap();
            img.data().iter().sum::<f64>() / out_len
        };
        for _ in 0..10 {
            let v = normal_vec(&mut rng, 6);
            let h = 1e-5;
            let wp: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let wm: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd = (mean_pixel(&wp) - mean_pixel(&wm)) / (2.0 * h);
            let an: f64 = dw.data().iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-6), "{fd} vs {an}");
        }
    }

    #[test]
    fn clone_is_independent_and_marked_unlearned() {
        let src = tiny(MapKind::Mlp);
        let mut u = src.clone_generator();
        assert_eq!(u.provenance, Provenance::Unlearned);
        let w = LatentCode(vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]);
        assert_eq!(src.generate_batch(&[w.clone()]).unwrap(), u.generate_batch(&[w.clone()]).unwrap());
        let before = src.generate_batch(&[w.clone()]).unwrap();
        for p in u.synthesis.params_mut() {
            for v in p.iter_mut() {
                *v += 0.01;
            }
        }
        assert_eq!(src.generate_batch(&[w.clone()]).unwrap(), before);
        assert_ne!(u.generate_batch(&[w]).unwrap(), before);
    }
}
