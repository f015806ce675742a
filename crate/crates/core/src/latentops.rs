//! Target selection in latent space and the latent sampling behind the
//! adjacency and global terms.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::{GeneratorBundle, LatentCode, NoiseVector};
use crate::rng::Stream;
use crate::tensor::Real;

/// Smallest identity-latent norm for which a direction is defined.
pub const EPS_ID: f64 = 1e-6;
/// Consecutive rejections tolerated by the global sampler.
pub const MAX_REJECTIONS: usize = 1000;
const MEAN_CHUNK: usize = 500;
const MAX_REDRAWS: usize = 100;

fn check_dims(what: &'static str, a: &LatentCode, b: &LatentCode) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            what,
            expected: b.dim(),
            got: a.dim(),
        });
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `w_mean = (1/n) sum Map(z_i)` with `z_i` from the standard normal prior.
pub fn estimate_mean_latent<T: Real>(bundle: &GeneratorBundle<T>, n_samples: usize, rng: &mut Stream) -> Result<LatentCode> {
    if n_samples == 0 {
        return Err(Error::Empty("mean-latent sample count"));
    }
    let dim = bundle.config.w_dim;
    let mut acc = vec![0.0; dim];
    let mut left = n_samples;
    while left > 0 {
        let k = left.min(MEAN_CHUNK);
        let zs: Vec<NoiseVector> = (0..k).map(|_| NoiseVector::sample(rng, bundle.config.z_dim)).collect();
        for w in bundle.map_batch(&zs)? {
            for (a, v) in acc.iter_mut().zip(&w.0) {
                *a += v;
            }
        }
        left -= k;
    }
    Ok(LatentCode(acc.into_iter().map(|a| a / n_samples as f64).collect()))
}

/// `w_id = w_u - w_mean`.
pub fn compute_identity_latent(w_u: &LatentCode, w_mean: &LatentCode) -> Result<LatentCode> {
    check_dims("source latent", w_u, w_mean)?;
    Ok(LatentCode(w_u.0.iter().zip(&w_mean.0).map(|(a, b)| a - b).collect()))
}

/// `w_t = w_mean - d * w_id / |w_id|`: a point `|d|` away from the mean, on
/// the opposite side from the source.
pub fn compute_target_latent(w_u: &LatentCode, w_mean: &LatentCode, d: f64) -> Result<LatentCode> {
    let w_id = compute_identity_latent(w_u, w_mean)?;
    let norm = w_id.norm();
    if norm < EPS_ID || !norm.is_finite() {
        return Err(Error::DegenerateSource { norm, eps: EPS_ID });
    }
    let s = d / norm;
    Ok(LatentCode(w_mean.0.iter().zip(&w_id.0).map(|(m, v)| m - s * v).collect()))
}

/// Shared offsets added to both the source and the target latent.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyOffsets {
    pub offsets: Vec<LatentCode>,
    pub alphas: Vec<f64>,
}

impl AdjacencyOffsets {
    pub fn zero(n: usize, dim: usize) -> Self {
        AdjacencyOffsets {
            offsets: vec![LatentCode(vec![0.0; dim]); n],
            alphas: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn apply(&self, w: &LatentCode) -> Vec<LatentCode> {
        self.offsets
            .iter()
            .map(|d| LatentCode(w.0.iter().zip(&d.0).map(|(a, b)| a + b).collect()))
            .collect()
    }
}

/// `Delta_i = alpha_i (w_r - w_u) / |w_r - w_u|` with `w_r = Map(z)` and
/// `alpha_i ~ U(0, alpha_max)`. `alpha_max = 0` yields zero offsets.
pub fn sample_adjacency_offsets<T: Real>(
    w_u: &LatentCode,
    alpha_max: f64,
    n_a: usize,
    bundle: &GeneratorBundle<T>,
    rng: &mut Stream,
) -> Result<AdjacencyOffsets> {
    if !(alpha_max >= 0.0 && alpha_max.is_finite()) {
        return Err(Error::Config(format!("alpha_max must be finite and >= 0, got {alpha_max}")));
    }
    if n_a == 0 {
        return Err(Error::Empty("adjacency offsets"));
    }
    if w_u.dim() != bundle.config.w_dim {
        return Err(Error::Dimension {
            what: "source latent",
            expected: bundle.config.w_dim,
            got: w_u.dim(),
        });
    }
    let mut out = AdjacencyOffsets {
        offsets: Vec::with_capacity(n_a),
        alphas: Vec::with_capacity(n_a),
    };
    for _ in 0..n_a {
        let mut redraws = 0;
        let (dir, norm) = loop {
            let w_r = bundle.map_forward(&NoiseVector::sample(rng, bundle.config.z_dim))?;
            let dir: Vec<f64> = w_r.0.iter().zip(&w_u.0).map(|(a, b)| a - b).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= EPS_ID {
                break (dir, norm);
            }
            redraws += 1;
            if redraws >= MAX_REDRAWS {
                return Err(Error::Sampling {
                    attempts: redraws,
                    reason: "prior latent coincides with the source latent".into(),
                });
            }
        };
        let alpha = rng.random::<f64>() * alpha_max;
        out.offsets.push(LatentCode(dir.iter().map(|v| alpha * v / norm).collect()));
        out.alphas.push(alpha);
    }
    Ok(out)
}

/// Balls around the source and target latents that global samples must avoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub w_u: LatentCode,
    pub w_t: LatentCode,
    pub alpha_max: f64,
    pub margin: f64,
}

impl Exclusion {
    pub fn radius(&self) -> f64 {
        self.alpha_max + self.margin
    }

    pub fn admits(&self, w: &LatentCode) -> bool {
        let r = self.radius();
        dist(&w.0, &self.w_u.0) > r && dist(&w.0, &self.w_t.0) > r
    }
}

/// Prior latents outside the exclusion balls, by rejection sampling.
pub fn sample_global_latents<T: Real>(
    n_g: usize,
    bundle: &GeneratorBundle<T>,
    rng: &mut Stream,
    exclusion: &Exclusion,
) -> Result<Vec<LatentCode>> {
    if n_g == 0 {
        return Err(Error::Empty("global latents"));
    }
    let mut out = Vec::with_capacity(n_g);
    let mut rejected = 0;
    while out.len() < n_g {
        let w = bundle.map_forward(&NoiseVector::sample(rng, bundle.config.z_dim))?;
        if exclusion.admits(&w) {
            out.push(w);
            rejected = 0;
        } else {
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::Sampling {
                    attempts: rejected,
                    reason: format!("exclusion radius {} rejects the prior", exclusion.radius()),
                });
            }
        }
    }
    Ok(out)
}
