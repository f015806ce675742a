//! Throughput of the hot paths under the rayon backend and on one thread.
//!
//! With the default `parallel` feature every benchmark runs twice: on the
//! global rayon pool and inside a single-thread pool. Build with
//! `--no-default-features` to measure the plain sequential fallback; its
//! results are filed under `sequential`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unlearn_core::latentops::{sample_adjacency_offsets, sample_global_latents, Exclusion};
use unlearn_core::metrics::{frechet_distance, generator_features};
use unlearn_core::nets::{images_to_tensor, ArchConfig, Embedder, GeneratorBundle, LatentCode, MapKind, Perceptual};
use unlearn_core::par::PARALLEL;
use unlearn_core::rng::{normal_vec, substream};
use unlearn_core::unlearn::{total_loss_and_grad, ObjectiveSamples, UnlearnConfig};

struct Fixture {
    g: GeneratorBundle<f32>,
    percep: Perceptual<f32>,
    embedder: Embedder<f32>,
    latents: Vec<LatentCode>,
}

fn fixture() -> Fixture {
    let arch = ArchConfig::default();
    let mut rng = substream(0, "bench", 0);
    let g = GeneratorBundle::new(arch.clone(), MapKind::Identity, &mut rng).unwrap();
    let latents = (0..64).map(|_| LatentCode(normal_vec(&mut rng, arch.w_dim))).collect();
    Fixture {
        percep: Perceptual::new(&arch),
        embedder: Embedder::new(&arch, &mut rng),
        g,
        latents,
    }
}

/// Runs `f` under each available backend.
fn backends(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    if PARALLEL {
        g.bench_function(BenchmarkId::new("rayon", "global-pool"), |b| b.iter(&mut f));
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            g.bench_function(BenchmarkId::new("rayon", "one-thread"), |b| pool.install(|| b.iter(&mut f)));
        }
    } else {
        g.bench_function(BenchmarkId::new("sequential", "caller-thread"), |b| b.iter(&mut f));
    }
    g.finish();
}

fn generate(c: &mut Criterion) {
    let fx = fixture();
    backends(c, "generate_batch_64", || {
        black_box(fx.g.generate_batch(&fx.latents).unwrap());
    });
}

fn unlearning_step(c: &mut Criterion) {
    let fx = fixture();
    let cfg = UnlearnConfig::default();
    let w_u = fx.latents[0].clone();
    let w_t = LatentCode(w_u.0.iter().map(|v| -v).collect());
    let mut rng = substream(1, "bench", 0);
    let offsets = sample_adjacency_offsets(&w_u, cfg.alpha_max, cfg.n_a, &fx.g, &mut rng).unwrap();
    let exclusion = Exclusion {
        w_u: w_u.clone(),
        w_t: w_t.clone(),
        alpha_max: cfg.alpha_max,
        margin: cfg.margin,
    };
    let globals = sample_global_latents(cfg.n_g, &fx.g, &mut rng, &exclusion).unwrap();
    let samples = ObjectiveSamples {
        offsets: Some(offsets),
        globals: Some(globals),
    };
    let g_u = fx.g.clone_generator();
    backends(c, "unlearning_loss_and_grad", || {
        black_box(
            total_loss_and_grad(&g_u, &fx.g, &fx.percep, &fx.embedder, &w_u, &w_t, &samples, &cfg, true).unwrap(),
        );
    });
}

fn features(c: &mut Criterion) {
    let fx = fixture();
    backends(c, "embedder_features_64", || {
        black_box(generator_features(&fx.g, &fx.embedder, &fx.latents).unwrap());
    });
    let images = unlearn_core::nets::tensor_to_images(&fx.g.generate_batch(&fx.latents).unwrap());
    let batch = images_to_tensor(&images);
    backends(c, "perceptual_trace_64", || {
        black_box(fx.percep.trace(batch.clone()));
    });
}

fn frechet(c: &mut Criterion) {
    let mut rng = substream(2, "bench", 0);
    let a: Vec<Vec<f64>> = (0..2000).map(|_| normal_vec(&mut rng, 64)).collect();
    let b: Vec<Vec<f64>> = (0..2000).map(|_| normal_vec(&mut rng, 64)).collect();
    backends(c, "frechet_64d_2000", || {
        black_box(frechet_distance(&a, &b).unwrap());
    });
}

criterion_group!(benches, generate, unlearning_step, features, frechet);
criterion_main!(benches);
