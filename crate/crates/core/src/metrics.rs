//! Identity similarity and Fréchet feature distances, and the per-run report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{images_to_tensor, Embedder, Encoder, GeneratorBundle, Image, LatentCode, NoiseVector};
use crate::par;
use crate::rng::substream;
use crate::tensor::{Real, Tensor};

pub const REPORT_VERSION: u32 = 1;
const COV_JITTER: f64 = 1e-6;
const FEATURE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Random,
    Ind,
    Ood,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Scenario::Random),
            "ind" => Ok(Scenario::Ind),
            "ood" => Ok(Scenario::Ood),
            other => Err(Error::Config(format!("unknown scenario `{other}` (expected random, ind or ood)"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Random => "random",
            Scenario::Ind => "ind",
            Scenario::Ood => "ood",
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine of the two images' identity embeddings.
pub fn id_similarity<T: Real>(embedder: &Embedder<T>, a: &Image, b: &Image) -> f64 {
    cosine(&embedder.embed(a), &embedder.embed(b))
}

fn embed_rows<T: Real>(embedder: &Embedder<T>, images: &Tensor<T>) -> Vec<Vec<f64>> {
    embedder
        .embed_batch(images)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect()
}

fn check_pair<T: Real>(g_s: &GeneratorBundle<T>, g_u: &GeneratorBundle<T>) -> Result<()> {
    if !g_s.same_architecture(g_u) {
        return Err(Error::Architecture("source and unlearned generators differ in architecture".into()));
    }
    Ok(())
}

/// Mean identity similarity between `G_s` and `G_u` renders of each latent.
pub fn paired_id<T: Real>(
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    embedder: &Embedder<T>,
    ws: &[LatentCode],
) -> Result<Vec<f64>> {
    check_pair(g_s, g_u)?;
    let a = embed_rows(embedder, &g_s.generate_batch(ws)?);
    let b = embed_rows(embedder, &g_u.generate_batch(ws)?);
    Ok(a.iter().zip(&b).map(|(x, y)| cosine(x, y)).collect())
}

/// Identity similarity of the source and unlearned renders at `w_u`.
pub fn id_metric<T: Real>(
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    w_u: &LatentCode,
    embedder: &Embedder<T>,
) -> Result<f64> {
    Ok(paired_id(g_s, g_u, embedder, std::slice::from_ref(w_u))?[0])
}

/// Mean identity similarity at the inversions of other images of the identity.
pub fn id_others_metric<T: Real>(
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    encoder: &Encoder<T>,
    embedder: &Embedder<T>,
    others: &[Image],
) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::Empty("other images of the identity"));
    }
    let ws = encoder.encode_images(others);
    let v = paired_id(g_s, g_u, embedder, &ws)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::Empty("Fréchet distance needs at least 2 samples per set"));
        }
        let k = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::Dimension {
                what: "feature vector",
                expected: k,
                got: bad.len(),
            });
        }
        let n = rows.len();
        let mut mean = DVector::zeros(k);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(n, k);
        for (i, r) in rows.iter().enumerate() {
            for j in 0..k {
                centered[(i, j)] = r[j] - mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(FeatureStats { n, mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 sqrt(S_a^1/2 S_b S_a^1/2))`, with jittered
/// covariances and negative eigenvalues clamped; never negative.
pub fn frechet_from_stats(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let k = a.mean.len();
    if b.mean.len() != k {
        return Err(Error::Dimension {
            what: "feature width",
            expected: k,
            got: b.mean.len(),
        });
    }
    let jitter = DMatrix::<f64>::identity(k, k) * COV_JITTER;
    let sa = &a.cov + &jitter;
    let sb = &b.cov + &jitter;
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let cross = psd_sqrt(&inner).trace();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let sa = FeatureStats::from_rows(a)?;
    let sb = FeatureStats::from_rows(b)?;
    frechet_from_stats(&sa, &sb)
}

/// Pooled embedder features of a batch of images, in order.
pub fn image_features<T: Real>(embedder: &Embedder<T>, images: &[Image]) -> Vec<Vec<f64>> {
    let chunks: Vec<&[Image]> = images.chunks(FEATURE_CHUNK).collect();
    par::map_slice(&chunks, |c| {
        embedder
            .pooled_features(&images_to_tensor::<T>(c))
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.f64()).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Pooled embedder features of generator renders at `ws`.
pub fn generator_features<T: Real>(
    g: &GeneratorBundle<T>,
    embedder: &Embedder<T>,
    ws: &[LatentCode],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ws.len());
    for c in ws.chunks(FEATURE_CHUNK) {
        let imgs = g.generate_batch(c)?;
        out.extend(
            embedder
                .pooled_features(&imgs)
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.f64()).collect::<Vec<f64>>()),
        );
    }
    Ok(out)
}

/// The fixed prior latent set shared by both generators.
pub fn eval_latents<T: Real>(g: &GeneratorBundle<T>, n: usize, seed: u64) -> Result<Vec<LatentCode>> {
    let mut rng = substream(seed, "eval-latents", 0);
    let zs: Vec<NoiseVector> = (0..n).map(|_| NoiseVector::sample(&mut rng, g.config.z_dim)).collect();
    g.map_batch(&zs)
}

/// Frechet distance between `G_s` and `G_u` renders of the same prior latents.
pub fn frechet_pre<T: Real>(
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    embedder: &Embedder<T>,
    n_latents: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(g_s, g_u)?;
    let ws = eval_latents(g_s, n_latents, seed)?;
    frechet_distance(&generator_features(g_s, embedder, &ws)?, &generator_features(g_u, embedder, &ws)?)
}

/// `FD(G_u, real) - FD(G_s, real)`; negative when unlearning moved samples closer to the corpus.
pub fn delta_frechet_real<T: Real>(
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    embedder: &Embedder<T>,
    real: &[Vec<f64>],
    n_latents: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(g_s, g_u)?;
    let ws = eval_latents(g_s, n_latents, seed)?;
    let real = FeatureStats::from_rows(real)?;
    let s = FeatureStats::from_rows(&generator_features(g_s, embedder, &ws)?)?;
    let u = FeatureStats::from_rows(&generator_features(g_u, embedder, &ws)?)?;
    Ok(frechet_from_stats(&u, &real)? - frechet_from_stats(&s, &real)?)
}

/// Source-side statistics reused across every run evaluated against one checkpoint.
pub struct EvalContext {
    pub n_latents: usize,
    pub seed: u64,
    latents: Vec<LatentCode>,
    source: FeatureStats,
    real: FeatureStats,
    source_vs_real: f64,
}

impl EvalContext {
    pub fn new<T: Real>(
        g_s: &GeneratorBundle<T>,
        embedder: &Embedder<T>,
        real: &[Vec<f64>],
        n_latents: usize,
        seed: u64,
    ) -> Result<Self> {
        let latents = eval_latents(g_s, n_latents, seed)?;
        let source = FeatureStats::from_rows(&generator_features(g_s, embedder, &latents)?)?;
        let real = FeatureStats::from_rows(real)?;
        let source_vs_real = frechet_from_stats(&source, &real)?;
        Ok(EvalContext {
            n_latents,
            seed,
            latents,
            source,
            real,
            source_vs_real,
        })
    }

    /// `(frechet_pre, delta_frechet_real)` for an unlearned generator.
    pub fn frechet_pair<T: Real>(&self, g_u: &GeneratorBundle<T>, embedder: &Embedder<T>) -> Result<(f64, f64)> {
        let u = FeatureStats::from_rows(&generator_features(g_u, embedder, &self.latents)?)?;
        let pre = frechet_from_stats(&self.source, &u)?;
        let delta = frechet_from_stats(&u, &self.real)? - self.source_vs_real;
        Ok((pre, delta))
    }

    pub fn source_vs_real(&self) -> f64 {
        self.source_vs_real
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub id: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_others: Option<f64>,
    pub frechet_pre: f64,
    pub delta_frechet_real: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: u32,
    pub scenario: Scenario,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub metrics: Metrics,
    pub n_eval_latents: usize,
    pub runtime_sec: f64,
    /// Where Fréchet features come from.
    pub feature_space: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let m = &self.metrics;
        let in_range = |v: f64| (-1.0..=1.0).contains(&v);
        if !in_range(m.id) || m.id_others.is_some_and(|v| !in_range(v)) {
            return Err(Error::Config("identity metrics must lie in [-1, 1]".into()));
        }
        if !m.frechet_pre.is_finite() || m.frechet_pre < 0.0 || !m.delta_frechet_real.is_finite() {
            return Err(Error::Config("Fréchet metrics must be finite, frechet_pre >= 0".into()));
        }
        if self.scenario == Scenario::Random && m.id_others.is_some() {
            return Err(Error::Config("random-scenario reports carry no id_others".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid report: {e}")))?;
        r.validate()?;
        Ok(r)
    }
}

/// Inputs that identify a report beyond its metrics.
#[derive(Clone, Debug, Default)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub runtime_sec: f64,
}

/// Assembles every applicable metric; `others` adds the multi-image score
/// and is ignored in the random scenario.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    scenario: Scenario,
    g_s: &GeneratorBundle<T>,
    g_u: &GeneratorBundle<T>,
    encoder: &Encoder<T>,
    embedder: &Embedder<T>,
    ctx: &EvalContext,
    w_u: &LatentCode,
    others: Option<&[Image]>,
    meta: ReportMeta,
) -> Result<EvalReport> {
    let id = id_metric(g_s, g_u, w_u, embedder)?;
    let id_others = match (scenario, others) {
        (Scenario::Random, _) | (_, None) => None,
        (_, Some(o)) => Some(id_others_metric(g_s, g_u, encoder, embedder, o)?),
    };
    let (frechet_pre, delta_frechet_real) = ctx.frechet_pair(g_u, embedder)?;
    let report = EvalReport {
        version: REPORT_VERSION,
        scenario,
        config_hash: meta.config_hash,
        seeds: meta.seeds,
        metrics: Metrics {
            id,
            id_others,
            frechet_pre,
            delta_frechet_real,
        },
        n_eval_latents: ctx.n_latents,
        runtime_sec: meta.runtime_sec,
        feature_space: "embedder_pooled".into(),
    };
    report.validate()?;
    Ok(report)
}

/// Stable 64-bit FNV-1a hash of a serializable config, as hex.
pub fn config_hash<S: Serialize>(config: &S) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
