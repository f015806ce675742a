//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use unlearn_core::latentops::{sample_adjacency_offsets, AdjacencyOffsets};
use unlearn_core::layers::Sequential;
use unlearn_core::nets::{ArchConfig, Embedder, GeneratorBundle, LatentCode, MapKind, Perceptual};
use unlearn_core::rng::{normal_vec, substream};
use unlearn_core::unlearn::{total_loss, total_loss_and_grad, ObjectiveSamples, UnlearnConfig};

pub struct Tiny {
    pub g_s: GeneratorBundle<f64>,
    pub g_u: GeneratorBundle<f64>,
    pub percep: Perceptual<f64>,
    pub embedder: Embedder<f64>,
    pub w_u: LatentCode,
    pub w_t: LatentCode,
}

pub fn perturb(net: &mut Sequential<f64>, scale: f64, seed: u64) {
    let mut rng = substream(seed, "perturb", 0);
    for p in net.params_mut() {
        let noise = normal_vec(&mut rng, p.len());
        for (v, n) in p.iter_mut().zip(noise) {
            *v += scale * n;
        }
    }
}

/// Miniature double-precision setup; `g_u` is a perturbed copy of `g_s`.
pub fn tiny(seed: u64) -> Tiny {
    let arch = ArchConfig::tiny();
    let mut rng = substream(seed, "tiny", 0);
    let g_s = GeneratorBundle::<f64>::new(arch.clone(), MapKind::Identity, &mut rng).unwrap();
    let mut g_u = g_s.clone_generator();
    perturb(&mut g_u.synthesis, 0.05, seed);
    let embedder = Embedder::new(&arch, &mut rng);
    let w_u = LatentCode(normal_vec(&mut rng, arch.w_dim));
    let w_t = LatentCode(normal_vec(&mut rng, arch.w_dim));
    Tiny {
        percep: Perceptual::new(&arch),
        g_s,
        g_u,
        embedder,
        w_u,
        w_t,
    }
}

pub fn tiny_samples(t: &Tiny, cfg: &UnlearnConfig, seed: u64) -> ObjectiveSamples {
    let mut rng = substream(seed, "samples", 0);
    let offsets: AdjacencyOffsets = sample_adjacency_offsets(&t.w_u, cfg.alpha_max, cfg.n_a, &t.g_s, &mut rng).unwrap();
    let globals = (0..cfg.n_g).map(|_| LatentCode(normal_vec(&mut rng, t.g_s.config.w_dim))).collect();
    ObjectiveSamples {
        offsets: Some(offsets),
        globals: Some(globals),
    }
}

/// Central-difference and analytic directional derivatives of `L_total`
/// along `n_dirs` random unit directions in synthesis-parameter space.
pub fn total_loss_direction_errors(t: &Tiny, cfg: &UnlearnConfig, samples: &ObjectiveSamples, n_dirs: usize, h: f64) -> Vec<(f64, f64)> {
    let (la, lg) = cfg.outer_weights();
    let value = |g: &GeneratorBundle<f64>| {
        let (parts, _) =
            total_loss_and_grad(g, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, samples, cfg, false).unwrap();
        total_loss(parts, la, lg)
    };
    let (_, grads) =
        total_loss_and_grad(&t.g_u, &t.g_s, &t.percep, &t.embedder, &t.w_u, &t.w_t, samples, cfg, true).unwrap();
    let grads = grads.expect("gradient requested");
    let mut rng = substream(11, "directions", 0);
    (0..n_dirs)
        .map(|_| {
            let mut dirs: Vec<Vec<f64>> = grads.iter().map(|g| normal_vec(&mut rng, g.len())).collect();
            let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            dirs.iter_mut().flatten().for_each(|v| *v /= norm);
            let shifted = |sign: f64| {
                let mut g = t.g_u.clone();
                for (p, d) in g.synthesis.params_mut().into_iter().zip(&dirs) {
                    for (a, b) in p.iter_mut().zip(d) {
                        *a += sign * h * b;
                    }
                }
                value(&g)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let an: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            (fd, an)
        })
        .collect()
}

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs())
}
