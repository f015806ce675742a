//! Pretraining of the source generator, the inversion encoder and the
//! identity embedder on the synthetic corpus.
//!
//! The default backbone is a latent-matched autoencoder: `E` encodes an
//! image, `R(G(w))` reconstructs it, and a moment penalty pulls encoded
//! latents toward the standard normal prior so that `Map` can stay the
//! identity. An adversarial mode with a trained `Map` is also available.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentops::estimate_mean_latent;
use crate::layers::{Layer, Linear, Sequential};
use crate::losses::{mse_rows, mse_rows_grad, percdist_backward, percdist_from_taps};
use crate::metrics::id_similarity;
use crate::nets::{
    images_to_tensor, latent_batch, ArchConfig, Embedder, Encoder, GeneratorBundle, Image, MapKind, MappingNet, NetSet,
    NoiseVector, Perceptual,
};
use crate::optim::{Adam, AdamParams};
use crate::rng::{normal_vec, substream, Stream};
use crate::synthdata::{render_identity, Corpus, Split, VariationParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    #[default]
    LatentAutoencoder,
    Adversarial,
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent_autoencoder" => Ok(PretrainMode::LatentAutoencoder),
            "adversarial" => Ok(PretrainMode::Adversarial),
            other => Err(Error::Config(format!("unknown pretrain mode `{other}`"))),
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainMode::LatentAutoencoder => "latent_autoencoder",
            PretrainMode::Adversarial => "adversarial",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the latent moment penalty.
    pub beta: f64,
    pub perceptual_weight: f64,
    /// EMA factor of the latent moment estimates.
    pub moment_momentum: f64,
    pub embedder_epochs: usize,
    pub embedder_lr: f64,
    pub cosface_scale: f64,
    pub cosface_margin: f64,
    /// Train the embedder on fresh variations of the train identities every epoch.
    pub embedder_augment: bool,
    /// Weight of the same-identity compactness term `mean(1 - <e_i, e_j>)`.
    pub embedder_pair_weight: f64,
    /// Images per identity in each embedder batch.
    pub embedder_group: usize,
    /// Gradient-penalty weight (adversarial mode).
    pub r1_weight: f64,
    /// Prior draws for the cached mean latent.
    pub mean_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::LatentAutoencoder,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            beta: 0.1,
            perceptual_weight: 1.0,
            moment_momentum: 0.99,
            embedder_epochs: 30,
            embedder_lr: 1e-3,
            cosface_scale: 16.0,
            cosface_margin: 0.1,
            embedder_augment: true,
            embedder_pair_weight: 10.0,
            embedder_group: 4,
            r1_weight: 1.0,
            mean_samples: 10_000,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.embedder_epochs == 0 || self.mean_samples == 0 || self.embedder_group == 0 {
            return Err(Error::Config("pretrain counts must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("embedder_lr", self.embedder_lr),
            ("cosface_scale", self.cosface_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("beta", self.beta),
            ("perceptual_weight", self.perceptual_weight),
            ("cosface_margin", self.cosface_margin),
            ("embedder_pair_weight", self.embedder_pair_weight),
            ("r1_weight", self.r1_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.moment_momentum) {
            return Err(Error::Config("moment_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of history.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// Stage-specific components: reconstruction/perceptual/moment for the
    /// autoencoder, cross-entropy/accuracy for the embedder, d/g for GAN.
    pub terms: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn stage(&self, name: &str) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|e| e.stage == name).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("stage,epoch,loss,terms\n");
        for e in &self.epochs {
            let terms: Vec<String> = e.terms.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
            text.push_str(&format!("{},{},{:e},{}\n", e.stage, e.epoch, e.loss, terms.join(";")));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Training images: every stored variation of the train split except
/// variation 0, which stays unseen for the in-domain scenario.
pub struct TrainingSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl TrainingSet {
    pub fn from_corpus(corpus: &Corpus, resolution: usize) -> Result<Self> {
        let ids = corpus.indices(Split::Train);
        if ids.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (class, &i) in ids.iter().enumerate() {
            for v in 1..corpus.identities[i].variations.len() {
                images.push(corpus.render(i, v, resolution));
                labels.push(class);
            }
        }
        if images.is_empty() {
            return Err(Error::Empty("training images (need at least 2 per identity)"));
        }
        Ok(TrainingSet {
            images: images_to_tensor(&images),
            labels,
            n_classes: ids.len(),
        })
    }

    /// Train identities under freshly drawn variations, `per_identity` each.
    pub fn augmented(corpus: &Corpus, resolution: usize, per_identity: usize, rng: &mut Stream) -> Result<Self> {
        let ids = corpus.indices(Split::Train);
        if ids.is_empty() || per_identity == 0 {
            return Err(Error::Empty("train split"));
        }
        let mut images = Vec::with_capacity(ids.len() * per_identity);
        let mut labels = Vec::with_capacity(ids.len() * per_identity);
        for (class, &i) in ids.iter().enumerate() {
            for _ in 0..per_identity {
                let var = VariationParams::sample(rng);
                images.push(render_identity(&corpus.identities[i].spec, &var, resolution));
                labels.push(class);
            }
        }
        Ok(TrainingSet {
            images: images_to_tensor(&images),
            labels,
            n_classes: ids.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let mut shape = self.images.shape();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * self.images.sample_len());
        for &i in idx {
            data.extend_from_slice(self.images.sample(i));
        }
        Tensor::from_vec(shape, data)
    }

    fn batches(&self, batch: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    }

    /// Batches built from shuffled same-label groups of `group` samples.
    fn grouped_batches(&self, batch: usize, group: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut groups = Vec::new();
        for mut members in by_class {
            members.shuffle(rng);
            groups.extend(members.chunks(group).map(<[usize]>::to_vec));
        }
        groups.shuffle(rng);
        let per = (batch / group).max(1);
        groups.chunks(per).map(|c| c.concat()).collect()
    }
}

fn check_finite(v: f64, stage: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.into(),
            step,
        })
    }
}

fn adam_for(net: &Sequential<f32>, lr: f64) -> Adam<f32> {
    let sizes: Vec<usize> = net.param_shapes().iter().map(|s| s.iter().product()).collect();
    Adam::new(AdamParams::with_lr(lr), &sizes)
}

/// Running first and second latent moments and the penalty
/// `(|S1|^2 + |S2 - S1 S1^T - I|_F^2) / D` on them.
///
/// A single batch is far smaller than the latent width, so its own
/// covariance is rank deficient; the moments are therefore exponential
/// moving averages. The batch's share of the average is `(1 - momentum)`,
/// which would shrink its gradient by the same factor; the gradient is
/// rescaled as if the batch carried full weight.
pub struct MomentTracker {
    momentum: f64,
    s1: DVector<f64>,
    s2: DMatrix<f64>,
}

impl MomentTracker {
    pub fn new(dim: usize, momentum: f64) -> Self {
        MomentTracker {
            momentum,
            s1: DVector::zeros(dim),
            s2: DMatrix::identity(dim, dim),
        }
    }

    /// Folds a batch `[b, D]` into the moments and returns the penalty and
    /// its gradient w.r.t. each row (the old moments are constants).
    pub fn update(&mut self, w: &Tensor<f32>) -> (f64, Tensor<f32>) {
        let (b, d) = (w.batch(), w.sample_len());
        let wm = DMatrix::from_row_slice(b, d, &w.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
        let mu = self.momentum;
        let c = (1.0 - mu) / b as f64;
        let col_sum = wm.row_sum().transpose();
        self.s1 = &self.s1 * mu + col_sum * c;
        self.s2 = &self.s2 * mu + wm.transpose() * &wm * c;
        let m = &self.s2 - &self.s1 * self.s1.transpose() - DMatrix::<f64>::identity(d, d);
        let df = d as f64;
        let penalty = (self.s1.norm_squared() + m.norm_squared()) / df;
        // d/dw_i = [2 S1 + 4 M (w_i - S1)] / (B D), times (1 - momentum) if unscaled
        let centered = DMatrix::from_fn(b, d, |i, j| wm[(i, j)] - self.s1[j]);
        let mut g = &centered * &m * 4.0;
        for mut row in g.row_iter_mut() {
            row += self.s1.transpose() * 2.0;
        }
        g /= b as f64 * df;
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            data.extend((0..d).map(|j| g[(i, j)] as f32));
        }
        (penalty, Tensor::from_vec(w.shape(), data))
    }
}

/// Latent-matched autoencoder training of `E`, `G` and `R`.
pub fn train_backbone(
    corpus: &Corpus,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
) -> Result<(GeneratorBundle<f32>, Encoder<f32>, History)> {
    cfg.validate()?;
    arch.validate()?;
    match cfg.mode {
        PretrainMode::LatentAutoencoder => train_autoencoder(corpus, arch, cfg),
        PretrainMode::Adversarial => train_adversarial(corpus, arch, cfg),
    }
}

fn train_autoencoder(
    corpus: &Corpus,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
) -> Result<(GeneratorBundle<f32>, Encoder<f32>, History)> {
    let data = TrainingSet::from_corpus(corpus, arch.image_size())?;
    let mut init = substream(cfg.seed, "backbone-init", 0);
    let mut gen = GeneratorBundle::<f32>::new(arch.clone(), MapKind::Identity, &mut init)?;
    let mut enc = Encoder::<f32>::new(arch, &mut init);
    let percep = Perceptual::<f32>::new(arch);
    let mut opt_e = adam_for(&enc.net, cfg.lr);
    let mut opt_g = adam_for(&gen.synthesis, cfg.lr);
    let mut opt_r = adam_for(&gen.renderer, cfg.lr);
    let mut moments = MomentTracker::new(arch.w_dim, cfg.moment_momentum);
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let batches = data.batches(cfg.batch_size, &mut substream(cfg.seed, "backbone-shuffle", epoch as u64));
        for idx in &batches {
            let x = data.gather(idx);
            let b = idx.len();
            let coef = vec![1.0 / b as f64; b];
            let e_tr = enc.net.forward_traced(x.clone());
            let s_tr = gen.synthesis.forward_traced(e_tr.output().clone());
            let r_tr = gen.renderer.forward_traced(s_tr.output().clone());
            let xh = r_tr.output();
            let p_tr = percep.trace(xh.clone());
            let p_real = percep.trace(x.clone());
            let real_taps: Vec<Tensor<f32>> = Perceptual::<f32>::TAPS.iter().map(|&i| p_real.acts[i].clone()).collect();
            let fake_taps: Vec<Tensor<f32>> = Perceptual::<f32>::TAPS.iter().map(|&i| p_tr.acts[i].clone()).collect();
            let recon = mse_rows(xh, &x).iter().sum::<f64>() / b as f64;
            let per = percdist_from_taps(&fake_taps, &real_taps).iter().sum::<f64>() / b as f64;
            let (moment, dmoment) = moments.update(e_tr.output());
            let loss = recon + cfg.perceptual_weight * per + cfg.beta * moment;
            check_finite(loss, "backbone", step)?;

            let mut dx = mse_rows_grad(xh, &x, &coef);
            let pc: Vec<f64> = coef.iter().map(|c| c * cfg.perceptual_weight).collect();
            dx.add_assign(&percdist_backward(&percep, &p_tr, &real_taps, &pc));
            let mut gr = gen.renderer.zero_grads();
            let df = gen
                .renderer
                .backward(&r_tr, vec![(gen.renderer.layers.len(), dx)], Some(&mut gr), true)
                .expect("input gradient");
            let mut gs = gen.synthesis.zero_grads();
            let mut dw = gen
                .synthesis
                .backward(&s_tr, vec![(gen.synthesis.layers.len(), df)], Some(&mut gs), true)
                .expect("input gradient");
            let mut dm = dmoment;
            dm.scale(cfg.beta as f32);
            dw.add_assign(&dm);
            let mut ge = enc.net.zero_grads();
            enc.net.backward(&e_tr, vec![(enc.net.layers.len(), dw)], Some(&mut ge), false);
            opt_r.step(gen.renderer.params_mut(), &gr);
            opt_g.step(gen.synthesis.params_mut(), &gs);
            opt_e.step(enc.net.params_mut(), &ge);
            for (s, v) in sums.iter_mut().zip([loss, recon, per, moment]) {
                *s += v;
            }
            step += 1;
        }
        let n = batches.len() as f64;
        history.epochs.push(EpochRecord {
            stage: "backbone".into(),
            epoch,
            loss: sums[0] / n,
            terms: vec![
                ("recon".into(), sums[1] / n),
                ("perceptual".into(), sums[2] / n),
                ("moment".into(), sums[3] / n),
            ],
        });
    }
    Ok((gen, enc, history))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn build_critic(arch: &ArchConfig, rng: &mut Stream) -> Sequential<f32> {
    use crate::layers::Conv2d;
    let [c0, c1, c2] = arch.embed_channels;
    let side = arch.image_size() / 8;
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(3, c0, 2, rng)),
        Layer::LeakyRelu,
        Layer::Conv(Conv2d::new(c0, c1, 2, rng)),
        Layer::LeakyRelu,
        Layer::Conv(Conv2d::new(c1, c2, 2, rng)),
        Layer::LeakyRelu,
        Layer::Linear(Linear::new(c2 * side * side, 1, rng)),
    ])
}

fn per_sample_seed(shape: [usize; 4], vals: &[f64]) -> Tensor<f32> {
    Tensor::from_vec(shape, vals.iter().map(|&v| v as f32).collect())
}

/// Nonsaturating GAN with a finite-difference gradient penalty
/// `E_n[((D(x + eps n) - D(x)) / eps)^2]` on real images; the encoder is
/// fitted afterwards by latent regression on generated samples.
fn train_adversarial(
    corpus: &Corpus,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
) -> Result<(GeneratorBundle<f32>, Encoder<f32>, History)> {
    const R1_EPS: f32 = 1e-2;
    let data = TrainingSet::from_corpus(corpus, arch.image_size())?;
    let mut init = substream(cfg.seed, "backbone-init", 0);
    let mut gen = GeneratorBundle::<f32>::new(arch.clone(), MapKind::Mlp, &mut init)?;
    let mut enc = Encoder::<f32>::new(arch, &mut init);
    let mut critic = build_critic(arch, &mut init);
    let mut opt_d = adam_for(&critic, cfg.lr);
    let MappingNet::Mlp(map0) = &gen.mapping else { unreachable!("adversarial mode trains Map") };
    let mut opt_m = adam_for(map0, cfg.lr);
    let mut opt_g = adam_for(&gen.synthesis, cfg.lr);
    let mut opt_r = adam_for(&gen.renderer, cfg.lr);
    let mut opt_e = adam_for(&enc.net, cfg.lr);
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 3];
        let batches = data.batches(cfg.batch_size, &mut substream(cfg.seed, "backbone-shuffle", epoch as u64));
        for idx in &batches {
            let b = idx.len();
            let mut zr = substream(cfg.seed, "gan-noise", step as u64);
            let zs: Vec<NoiseVector> = (0..b).map(|_| NoiseVector::sample(&mut zr, arch.z_dim)).collect();
            let zt = latent_batch::<f32>(
                &zs.iter().map(|z| crate::nets::LatentCode(z.0.clone())).collect::<Vec<_>>(),
                arch.z_dim,
            )?;
            let MappingNet::Mlp(map) = &gen.mapping else { unreachable!() };
            let m_tr = map.forward_traced(zt);
            let s_tr = gen.synthesis.forward_traced(m_tr.output().clone());
            let r_tr = gen.renderer.forward_traced(s_tr.output().clone());
            let fake = r_tr.output().clone();
            let real = data.gather(idx);

            // critic step
            let noise = Tensor::from_vec(real.shape(), normal_vec(&mut zr, real.data().len()).iter().map(|&v| v as f32).collect());
            let mut shifted = real.clone();
            for (s, n) in shifted.data_mut().iter_mut().zip(noise.data()) {
                *s += R1_EPS * n;
            }
            let all = Tensor::concat(&[&real, &fake, &shifted]);
            let tr = critic.forward_traced(all);
            let out: Vec<f64> = tr.output().data().iter().map(|&v| f64::from(v)).collect();
            let (dr, rest) = out.split_at(b);
            let (df, ds) = rest.split_at(b);
            let mut d_loss = 0.0;
            let mut seed = vec![0.0; 3 * b];
            for i in 0..b {
                let q = (ds[i] - dr[i]) / f64::from(R1_EPS);
                d_loss += (softplus(-dr[i]) + softplus(df[i]) + 0.5 * cfg.r1_weight * q * q) / b as f64;
                let gq = cfg.r1_weight * q / f64::from(R1_EPS) / b as f64;
                seed[i] = -sigmoid(-dr[i]) / b as f64 - gq;
                seed[b + i] = sigmoid(df[i]) / b as f64;
                seed[2 * b + i] = gq;
            }
            check_finite(d_loss, "adversarial-critic", step)?;
            let mut gd = critic.zero_grads();
            critic.backward(&tr, vec![(critic.layers.len(), per_sample_seed(tr.output().shape(), &seed))], Some(&mut gd), false);
            opt_d.step(critic.params_mut(), &gd);

            // generator step against the updated critic
            let f_tr = critic.forward_traced(fake);
            let fo: Vec<f64> = f_tr.output().data().iter().map(|&v| f64::from(v)).collect();
            let g_loss: f64 = fo.iter().map(|&v| softplus(-v)).sum::<f64>() / b as f64;
            check_finite(g_loss, "adversarial-generator", step)?;
            let gseed: Vec<f64> = fo.iter().map(|&v| -sigmoid(-v) / b as f64).collect();
            let dx = critic
                .backward(&f_tr, vec![(critic.layers.len(), per_sample_seed(f_tr.output().shape(), &gseed))], None, true)
                .expect("input gradient");
            let mut gr = gen.renderer.zero_grads();
            let dfeat = gen.renderer.backward(&r_tr, vec![(gen.renderer.layers.len(), dx)], Some(&mut gr), true).expect("input");
            let mut gs = gen.synthesis.zero_grads();
            let dw = gen.synthesis.backward(&s_tr, vec![(gen.synthesis.layers.len(), dfeat)], Some(&mut gs), true).expect("input");
            let MappingNet::Mlp(map) = &mut gen.mapping else { unreachable!() };
            let mut gm = map.zero_grads();
            map.backward(&m_tr, vec![(map.layers.len(), dw)], Some(&mut gm), false);
            opt_m.step(map.params_mut(), &gm);
            opt_g.step(gen.synthesis.params_mut(), &gs);
            opt_r.step(gen.renderer.params_mut(), &gr);

            // encoder: regress the latent of a generated sample
            let w = m_tr.output();
            let fake_img = r_tr.output();
            let e_tr = enc.net.forward_traced(fake_img.clone());
            let coef = vec![1.0 / b as f64; b];
            let e_loss = mse_rows(e_tr.output(), w).iter().sum::<f64>() / b as f64;
            check_finite(e_loss, "adversarial-encoder", step)?;
            let de = mse_rows_grad(e_tr.output(), w, &coef);
            let mut ge = enc.net.zero_grads();
            enc.net.backward(&e_tr, vec![(enc.net.layers.len(), de)], Some(&mut ge), false);
            opt_e.step(enc.net.params_mut(), &ge);

            for (s, v) in sums.iter_mut().zip([d_loss, g_loss, e_loss]) {
                *s += v;
            }
            step += 1;
        }
        let n = batches.len() as f64;
        history.epochs.push(EpochRecord {
            stage: "adversarial".into(),
            epoch,
            loss: (sums[0] + sums[1]) / n,
            terms: vec![
                ("critic".into(), sums[0] / n),
                ("generator".into(), sums[1] / n),
                ("encoder".into(), sums[2] / n),
            ],
        });
    }
    Ok((gen, enc, history))
}

/// Embedder plus its cosine-softmax class head.
pub struct EmbedderTraining {
    pub embedder: Embedder<f32>,
    pub history: History,
    pub final_accuracy: f64,
}

/// Trains the identity embedder with a large-margin cosine softmax
/// (logits `s (cos_c - m [c = y])`) over the train identities.
pub fn train_embedder(corpus: &Corpus, arch: &ArchConfig, cfg: &PretrainConfig) -> Result<EmbedderTraining> {
    cfg.validate()?;
    let mut data = TrainingSet::from_corpus(corpus, arch.image_size())?;
    let mut init = substream(cfg.seed, "embedder-init", 0);
    let mut emb = Embedder::<f32>::new(arch, &mut init);
    let (k, dim) = (data.n_classes, arch.embed_dim);
    let mut head: Vec<f32> = normal_vec(&mut init, k * dim).into_iter().map(|v| v as f32).collect();
    let mut opt = adam_for(&emb.net, cfg.embedder_lr);
    let mut opt_h = Adam::<f32>::new(AdamParams::with_lr(cfg.embedder_lr), &[k * dim]);
    let (s, m) = (cfg.cosface_scale, cfg.cosface_margin);
    let mut history = History::default();
    let mut final_accuracy = 0.0;
    let mut step = 0;
    for epoch in 0..cfg.embedder_epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut shuffle = substream(cfg.seed, "embedder-shuffle", epoch as u64);
        if cfg.embedder_augment {
            let g = cfg.embedder_group;
            let per = (corpus.images_per_identity.saturating_sub(1) / g * g).max(g);
            data = TrainingSet::augmented(corpus, arch.image_size(), per, &mut shuffle)?;
        }
        let batches = data.grouped_batches(cfg.batch_size, cfg.embedder_group, &mut shuffle);
        for idx in &batches {
            let b = idx.len();
            let x = data.gather(idx);
            let tr = emb.trace(x);
            let e: Vec<f64> = tr.output().data().iter().map(|&v| f64::from(v)).collect();
            let norms: Vec<f64> = head
                .chunks(dim)
                .map(|r| r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt().max(1e-12))
                .collect();
            let mut de = vec![0.0f64; b * dim];
            let mut dhat = vec![0.0f64; k * dim];
            let mut loss = 0.0;
            for (i, &row) in idx.iter().enumerate() {
                let y = data.labels[row];
                let ei = &e[i * dim..(i + 1) * dim];
                let cos: Vec<f64> = (0..k)
                    .map(|c| {
                        let w = &head[c * dim..(c + 1) * dim];
                        w.iter().zip(ei).map(|(&a, &b)| f64::from(a) * b).sum::<f64>() / norms[c]
                    })
                    .collect();
                let logits: Vec<f64> = cos.iter().enumerate().map(|(c, &v)| s * (v - if c == y { m } else { 0.0 })).collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                loss += (mx + z.ln() - logits[y]) / b as f64;
                let best = (0..k).max_by(|&a, &c| cos[a].total_cmp(&cos[c])).unwrap_or(0);
                correct += usize::from(best == y);
                for c in 0..k {
                    let p = (logits[c] - mx).exp() / z - if c == y { 1.0 } else { 0.0 };
                    let g = s * p / b as f64;
                    let w = &head[c * dim..(c + 1) * dim];
                    for j in 0..dim {
                        de[i * dim + j] += g * f64::from(w[j]) / norms[c];
                        dhat[c * dim + j] += g * ei[j];
                    }
                }
            }
            if cfg.embedder_pair_weight > 0.0 {
                let pairs: Vec<(usize, usize)> = (0..b)
                    .flat_map(|i| (i + 1..b).map(move |j| (i, j)))
                    .filter(|&(i, j)| data.labels[idx[i]] == data.labels[idx[j]])
                    .collect();
                let c = cfg.embedder_pair_weight / pairs.len().max(1) as f64;
                for &(i, j) in &pairs {
                    let (ei, ej) = (&e[i * dim..(i + 1) * dim], &e[j * dim..(j + 1) * dim]);
                    loss += c * (1.0 - ei.iter().zip(ej).map(|(a, b)| a * b).sum::<f64>());
                    for t in 0..dim {
                        de[i * dim + t] -= c * ej[t];
                        de[j * dim + t] -= c * ei[t];
                    }
                }
            }
            check_finite(loss, "embedder", step)?;
            // through w_hat = w / |w|
            let mut dh = vec![0.0f32; k * dim];
            for c in 0..k {
                let w = &head[c * dim..(c + 1) * dim];
                let gh = &dhat[c * dim..(c + 1) * dim];
                let proj: f64 = w.iter().zip(gh).map(|(&a, &g)| f64::from(a) * g).sum::<f64>() / norms[c];
                for j in 0..dim {
                    let what = f64::from(w[j]) / norms[c];
                    dh[c * dim + j] = ((gh[j] - proj * what) / norms[c]) as f32;
                }
            }
            let seed = Tensor::from_vec(tr.output().shape(), de.iter().map(|&v| v as f32).collect());
            let mut g = emb.net.zero_grads();
            emb.net.backward(&tr, vec![(emb.net.layers.len(), seed)], Some(&mut g), false);
            opt.step(emb.net.params_mut(), &g);
            opt_h.step(vec![&mut head], &[dh]);
            loss_sum += loss;
            step += 1;
        }
        let acc = correct as f64 / data.len() as f64;
        final_accuracy = acc;
        history.epochs.push(EpochRecord {
            stage: "embedder".into(),
            epoch,
            loss: loss_sum / batches.len() as f64,
            terms: vec![("accuracy".into(), acc)],
        });
    }
    Ok(EmbedderTraining {
        embedder: emb,
        history,
        final_accuracy,
    })
}

/// `generate(G_s, encode(E, x))`.
pub fn reconstruct(g: &GeneratorBundle<f32>, e: &Encoder<f32>, x: &Image) -> Result<Image> {
    g.generate(&e.encode(x))
}

/// Trains embedder and backbone, then caches the mean latent.
pub fn pretrain_all(corpus: &Corpus, arch: &ArchConfig, cfg: &PretrainConfig) -> Result<(NetSet, History)> {
    let emb = train_embedder(corpus, arch, cfg)?;
    let (generator, encoder, backbone_history) = train_backbone(corpus, arch, cfg)?;
    let mean = estimate_mean_latent(&generator, cfg.mean_samples, &mut substream(cfg.seed, "mean-latent", 0))?;
    let mut history = emb.history;
    history.epochs.extend(backbone_history.epochs);
    let meta = serde_json::json!({
        "pretrain": cfg,
        "embedder_train_accuracy": emb.final_accuracy,
        "resolution": arch.image_size(),
    });
    Ok((
        NetSet {
            generator,
            encoder,
            embedder: emb.embedder,
            mean_latent: Some(mean),
            seed: cfg.seed,
            meta,
        },
        history,
    ))
}

/// Held-out quality measurements of a pretrained set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Mean identity cosine between held-out in-domain images and their reconstructions.
    pub recon_id_heldout: f64,
    /// Same, over the unseen variation of train identities.
    pub recon_id_train: f64,
    pub embed_same_id: f64,
    pub embed_cross_id: f64,
}

pub fn assess_quality(nets: &NetSet, corpus: &Corpus) -> Result<QualityReport> {
    let res = nets.generator.config.image_size();
    let held = corpus.indices(Split::HeldoutInd);
    let train = corpus.indices(Split::Train);
    if held.is_empty() || train.is_empty() {
        return Err(Error::Empty("held-out or train split"));
    }
    let emb = &nets.embedder;
    let recon_mean = |imgs: &[Image]| -> Result<f64> {
        let ws = nets.encoder.encode_images(imgs);
        let recs = crate::nets::tensor_to_images(&nets.generator.generate_batch(&ws)?);
        Ok(imgs.iter().zip(&recs).map(|(a, b)| id_similarity(emb, a, b)).sum::<f64>() / imgs.len() as f64)
    };
    let held_imgs: Vec<Vec<Image>> = held.iter().map(|&i| corpus.render_all(i, res)).collect();
    let flat: Vec<Image> = held_imgs.iter().flatten().cloned().collect();
    let recon_id_heldout = recon_mean(&flat)?;
    let train_imgs: Vec<Image> = train.iter().map(|&i| corpus.render(i, 0, res)).collect();
    let recon_id_train = recon_mean(&train_imgs)?;
    let embs: Vec<Vec<Vec<f64>>> = held_imgs.iter().map(|v| v.iter().map(|x| emb.embed(x)).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, ei) in embs.iter().enumerate() {
        for a in 0..ei.len() {
            for b in a + 1..ei.len() {
                same += dot(&ei[a], &ei[b]);
                ns += 1;
            }
        }
        for ej in &embs[i + 1..] {
            for (a, b) in ei.iter().zip(ej) {
                cross += dot(a, b);
                nc += 1;
            }
        }
    }
    Ok(QualityReport {
        recon_id_heldout,
        recon_id_train,
        embed_same_id: same / ns.max(1) as f64,
        embed_cross_id: cross / nc.max(1) as f64,
    })
}
