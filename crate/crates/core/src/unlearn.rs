//! Latent target unlearning: the local, adjacency and global losses and the
//! Adam loop that fine-tunes a clone of the source synthesis stage.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentops::{
    compute_target_latent, estimate_mean_latent, sample_adjacency_offsets, sample_global_latents, AdjacencyOffsets,
    Exclusion,
};
use crate::layers::ParamGrads;
use crate::losses::{pair_terms, target_side, TermWeights};
use crate::nets::{Embedder, GeneratorBundle, LatentCode, Perceptual};
use crate::optim::{Adam, AdamParams};
use crate::rng::substream;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Extrapolated target plus adjacency and global terms.
    #[default]
    Guide,
    /// Mean-latent target, local loss only.
    Baseline,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guide" => Ok(Mode::Guide),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected guide or baseline)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Guide => "guide",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub d: f64,
    pub alpha_max: f64,
    pub n_a: usize,
    pub n_g: usize,
    pub lambda_l2: f64,
    pub lambda_per: f64,
    pub lambda_id: f64,
    pub lambda_adj: f64,
    pub lambda_global: f64,
    /// Separate local-term weights inside the adjacency loss; `None` shares the local ones.
    pub adjacency_weights: Option<TermWeights>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Extra distance beyond `alpha_max` that global latents keep from `w_u` and `w_t`.
    pub margin: f64,
    /// Prior draws used for the mean latent when no cached value is supplied.
    pub mean_samples: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            d: 30.0,
            alpha_max: 15.0,
            n_a: 2,
            n_g: 2,
            lambda_l2: 1e-2,
            lambda_per: 1.0,
            lambda_id: 1e-1,
            lambda_adj: 1.0,
            lambda_global: 1.0,
            adjacency_weights: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 1000,
            seed: 0,
            mode: Mode::Guide,
            margin: 1.0,
            mean_samples: 10_000,
        }
    }
}

impl UnlearnConfig {
    /// Reconstruction and perceptual terms only (no identity loss).
    pub fn preset_no_id(mut self) -> Self {
        self.lambda_id = 0.0;
        if let Some(w) = &mut self.adjacency_weights {
            w.id = 0.0;
        }
        self
    }

    pub fn local_weights(&self) -> TermWeights {
        TermWeights {
            l2: self.lambda_l2,
            per: self.lambda_per,
            id: self.lambda_id,
        }
    }

    pub fn adjacency_term_weights(&self) -> TermWeights {
        self.adjacency_weights.unwrap_or_else(|| self.local_weights())
    }

    /// `(lambda_adj, lambda_global)` after applying the mode.
    pub fn outer_weights(&self) -> (f64, f64) {
        match self.mode {
            Mode::Guide => (self.lambda_adj, self.lambda_global),
            Mode::Baseline => (0.0, 0.0),
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut lambdas = vec![
            ("lambda_l2", self.lambda_l2),
            ("lambda_per", self.lambda_per),
            ("lambda_id", self.lambda_id),
            ("lambda_adj", self.lambda_adj),
            ("lambda_global", self.lambda_global),
        ];
        if let Some(w) = self.adjacency_weights {
            lambdas.extend([("adjacency_weights.l2", w.l2), ("adjacency_weights.per", w.per), ("adjacency_weights.id", w.id)]);
        }
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.d.is_finite() {
            return Err(Error::Config("d must be finite".into()));
        }
        if !(self.alpha_max >= 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!("alpha_max must be >= 0, got {}", self.alpha_max)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.n_a == 0 || self.n_g == 0 {
            return Err(Error::Config("n_a and n_g must be at least 1".into()));
        }
        if self.mean_samples == 0 {
            return Err(Error::Config("mean_samples must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// The three loss components at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub local: f64,
    pub adj: f64,
    pub global: f64,
}

/// `L_total = L_local + lambda_adj L_adj + lambda_global L_global`.
pub fn total_loss(parts: LossParts, lambda_adj: f64, lambda_global: f64) -> f64 {
    parts.local + lambda_adj * parts.adj + lambda_global * parts.global
}

fn needs_embedder(w: &[TermWeights]) -> bool {
    w.iter().any(|t| t.id != 0.0)
}

/// `lambda_L2 mse(F_u, F_t) + lambda_per percdist + lambda_id (1 - cos)` at `(w_u, w_t)`.
pub fn local_unlearn_loss<T: Real>(
    g_u: &GeneratorBundle<T>,
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: &Embedder<T>,
    w_u: &LatentCode,
    w_t: &LatentCode,
    weights: TermWeights,
) -> Result<f64> {
    let emb = needs_embedder(&[weights]).then_some(embedder);
    let target = target_side(g_s, percep, emb, std::slice::from_ref(w_t))?;
    let (terms, _) = pair_terms(g_u, percep, emb, std::slice::from_ref(w_u), &target, None)?;
    Ok(terms.weighted(0, weights))
}

/// Mean of the local loss over `(w_u + Delta_i, w_t + Delta_i)`.
pub fn adjacency_unlearn_loss<T: Real>(
    g_u: &GeneratorBundle<T>,
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: &Embedder<T>,
    w_u: &LatentCode,
    w_t: &LatentCode,
    offsets: &AdjacencyOffsets,
    weights: TermWeights,
) -> Result<f64> {
    if offsets.is_empty() {
        return Err(Error::Empty("adjacency offsets"));
    }
    let emb = needs_embedder(&[weights]).then_some(embedder);
    let target = target_side(g_s, percep, emb, &offsets.apply(w_t))?;
    let (terms, _) = pair_terms(g_u, percep, emb, &offsets.apply(w_u), &target, None)?;
    Ok((0..offsets.len()).map(|i| terms.weighted(i, weights)).sum::<f64>() / offsets.len() as f64)
}

/// Mean perceptual distance between `G_u` and `G_s` renders at `globals`.
pub fn global_preservation_loss<T: Real>(
    g_u: &GeneratorBundle<T>,
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    globals: &[LatentCode],
) -> Result<f64> {
    if globals.is_empty() {
        return Err(Error::Empty("global latents"));
    }
    let target = target_side(g_s, percep, None, globals)?;
    let (terms, _) = pair_terms(g_u, percep, None, globals, &target, None)?;
    Ok(terms.per.iter().sum::<f64>() / globals.len() as f64)
}

/// Sampled latents one objective evaluation depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSamples {
    pub offsets: Option<AdjacencyOffsets>,
    pub globals: Option<Vec<LatentCode>>,
}

fn add_grads<T: Real>(acc: &mut ParamGrads<T>, g: ParamGrads<T>) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// Loss components and, if requested, the gradient of `L_total` w.r.t. the
/// synthesis parameters of `g_u`. Terms whose weight or samples are absent
/// contribute zero.
pub fn total_loss_and_grad<T: Real>(
    g_u: &GeneratorBundle<T>,
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: &Embedder<T>,
    w_u: &LatentCode,
    w_t: &LatentCode,
    samples: &ObjectiveSamples,
    cfg: &UnlearnConfig,
    need_grad: bool,
) -> Result<(LossParts, Option<ParamGrads<T>>)> {
    let (lam_adj, lam_glob) = cfg.outer_weights();
    let lw = cfg.local_weights();
    let aw = cfg.adjacency_term_weights();
    let mut parts = LossParts::default();
    let mut grads = need_grad.then(|| g_u.synthesis.zero_grads());

    // local and adjacency pairs share one batch
    let mut src = vec![w_u.clone()];
    let mut tgt = vec![w_t.clone()];
    let mut coefs = vec![lw];
    let n_adj = match (&samples.offsets, cfg.mode) {
        (Some(off), Mode::Guide) if !off.is_empty() => {
            src.extend(off.apply(w_u));
            tgt.extend(off.apply(w_t));
            coefs.extend(std::iter::repeat_n(aw.scaled(lam_adj / off.len() as f64), off.len()));
            off.len()
        }
        _ => 0,
    };
    let emb = needs_embedder(&[lw, aw]).then_some(embedder);
    let target = target_side(g_s, percep, emb, &tgt)?;
    let (terms, g) = pair_terms(g_u, percep, emb, &src, &target, need_grad.then_some(coefs.as_slice()))?;
    parts.local = terms.weighted(0, lw);
    if n_adj > 0 {
        parts.adj = (1..=n_adj).map(|i| terms.weighted(i, aw)).sum::<f64>() / n_adj as f64;
    }
    if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
        add_grads(acc, g);
    }

    if let (Some(globals), Mode::Guide) = (&samples.globals, cfg.mode) {
        if !globals.is_empty() {
            let n = globals.len() as f64;
            let target = target_side(g_s, percep, None, globals)?;
            let coefs = vec![
                TermWeights {
                    per: lam_glob / n,
                    ..TermWeights::ZERO
                };
                globals.len()
            ];
            let (terms, g) = pair_terms(g_u, percep, None, globals, &target, need_grad.then_some(coefs.as_slice()))?;
            parts.global = terms.per.iter().sum::<f64>() / n;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                add_grads(acc, g);
            }
        }
    }
    Ok((parts, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub l_local: f64,
    pub l_adj: f64,
    pub l_global: f64,
    pub l_total: f64,
}

/// Stream labels the run draws from, all under the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub mean_latent: Option<String>,
    pub adjacency: String,
    pub global: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRunRecord {
    pub config: UnlearnConfig,
    pub seeds: RunSeeds,
    pub w_u: LatentCode,
    pub w_mean: LatentCode,
    pub w_t: LatentCode,
    #[serde(skip)]
    pub rows: Vec<LossRow>,
    pub wall_time_sec: f64,
    pub source_checkpoint: Option<String>,
    pub unlearned_checkpoint: Option<String>,
}

impl UnlearnRunRecord {
    pub fn write_losses_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("iteration,l_local,l_adj,l_global,l_total\n");
        for r in &self.rows {
            text.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.iteration, r.l_local, r.l_adj, r.l_global, r.l_total));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize| Error::Manifest {
            path: path.to_path_buf(),
            reason: format!("malformed row at line {line}"),
        };
        text.lines()
            .enumerate()
            .skip(1)
            .map(|(i, line)| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(i + 1));
                }
                let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i + 1));
                Ok(LossRow {
                    iteration: f[0].parse().map_err(|_| bad(i + 1))?,
                    l_local: num(1)?,
                    l_adj: num(2)?,
                    l_global: num(3)?,
                    l_total: num(4)?,
                })
            })
            .collect()
    }
}

pub struct UnlearnOutcome<T> {
    pub generator: GeneratorBundle<T>,
    pub record: UnlearnRunRecord,
}

/// Resolves the target latent for a run: UFO extrapolation in guide mode,
/// the mean latent in baseline mode.
pub fn resolve_target(w_u: &LatentCode, w_mean: &LatentCode, cfg: &UnlearnConfig) -> Result<LatentCode> {
    match cfg.mode {
        Mode::Guide => compute_target_latent(w_u, w_mean, cfg.d),
        Mode::Baseline => Ok(w_mean.clone()),
    }
}

/// Fine-tunes a clone of `g_s` so `w_u` and its neighbourhood render the target.
pub fn run_unlearning<T: Real>(
    g_s: &GeneratorBundle<T>,
    percep: &Perceptual<T>,
    embedder: &Embedder<T>,
    w_u: &LatentCode,
    mean_latent: Option<&LatentCode>,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome<T>> {
    cfg.validate()?;
    let started = Instant::now();
    if w_u.dim() != g_s.config.w_dim || !w_u.is_finite() {
        return Err(Error::Dimension {
            what: "source latent",
            expected: g_s.config.w_dim,
            got: w_u.dim(),
        });
    }
    let mut g_u = g_s.clone_generator();
    let w_mean = match mean_latent {
        Some(m) => m.clone(),
        None => estimate_mean_latent(g_s, cfg.mean_samples, &mut substream(cfg.seed, "mean-latent", 0))?,
    };
    let w_t = resolve_target(w_u, &w_mean, cfg)?;
    let (lam_adj, lam_glob) = cfg.outer_weights();
    let exclusion = Exclusion {
        w_u: w_u.clone(),
        w_t: w_t.clone(),
        alpha_max: cfg.alpha_max,
        margin: cfg.margin,
    };
    let sizes: Vec<usize> = g_u.synthesis.param_shapes().iter().map(|s| s.iter().product()).collect();
    let mut adam = Adam::<T>::new(cfg.adam(), &sizes);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let samples = match cfg.mode {
            Mode::Guide => ObjectiveSamples {
                offsets: Some(sample_adjacency_offsets(
                    w_u,
                    cfg.alpha_max,
                    cfg.n_a,
                    g_s,
                    &mut substream(cfg.seed, "adjacency", it as u64),
                )?),
                globals: (lam_glob > 0.0)
                    .then(|| sample_global_latents(cfg.n_g, g_s, &mut substream(cfg.seed, "global", it as u64), &exclusion))
                    .transpose()?,
            },
            Mode::Baseline => ObjectiveSamples {
                offsets: None,
                globals: None,
            },
        };
        let (parts, grads) = total_loss_and_grad(&g_u, g_s, percep, embedder, w_u, &w_t, &samples, cfg, true)?;
        let total = total_loss(parts, lam_adj, lam_glob);
        let grads = grads.expect("gradient requested");
        if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                stage: "unlearning".into(),
                step: it,
            });
        }
        rows.push(LossRow {
            iteration: it,
            l_local: parts.local,
            l_adj: parts.adj,
            l_global: parts.global,
            l_total: total,
        });
        adam.step(g_u.synthesis.params_mut(), &grads);
    }
    let record = UnlearnRunRecord {
        config: cfg.clone(),
        seeds: RunSeeds {
            master: cfg.seed,
            mean_latent: mean_latent.is_none().then(|| "mean-latent".to_string()),
            adjacency: "adjacency".into(),
            global: "global".into(),
        },
        w_u: w_u.clone(),
        w_mean,
        w_t,
        rows,
        wall_time_sec: started.elapsed().as_secs_f64(),
        source_checkpoint: None,
        unlearned_checkpoint: None,
    };
    Ok(UnlearnOutcome { generator: g_u, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ArchConfig, MapKind};
    use crate::rng::normal_vec;

    struct Fixture {
        g_s: GeneratorBundle<f64>,
        percep: Perceptual<f64>,
        emb: Embedder<f64>,
        w_u: LatentCode,
        w_t: LatentCode,
    }

    fn fixture() -> Fixture {
        let arch = ArchConfig::tiny();
        let mut rng = substream(11, "fixture", 0);
        let g_s = GeneratorBundle::new(arch.clone(), MapKind::Identity, &mut rng).unwrap();
        let emb = Embedder::new(&arch, &mut rng);
        Fixture {
            g_s,
            percep: Perceptual::new(&arch),
            emb,
            w_u: LatentCode(normal_vec(&mut rng, 6)),
            w_t: LatentCode(normal_vec(&mut rng, 6)),
        }
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = UnlearnConfig::default();
        assert_eq!((c.d, c.alpha_max, c.n_a, c.n_g), (30.0, 15.0, 2, 2));
        assert_eq!((c.lambda_l2, c.lambda_per, c.lambda_id), (1e-2, 1.0, 1e-1));
        assert_eq!((c.lambda_adj, c.lambda_global, c.lr, c.iterations), (1.0, 1.0, 1e-4, 1000));
        assert_eq!(UnlearnConfig::default().preset_no_id().lambda_id, 0.0);
    }

    #[test]
    fn identical_operands_give_zero_local_loss() {
        let f = fixture();
        let w = TermWeights {
            l2: 1.0,
            per: 1.0,
            id: 1.0,
        };
        let g_u = f.g_s.clone_generator();
        let l = local_unlearn_loss(&g_u, &f.g_s, &f.percep, &f.emb, &f.w_u, &f.w_u, w).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        let l = local_unlearn_loss(&g_u, &f.g_s, &f.percep, &f.emb, &f.w_u, &f.w_t, TermWeights::ZERO).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn zero_offset_adjacency_reduces_to_local() {
        let f = fixture();
        let g_u = f.g_s.clone_generator();
        let w = UnlearnConfig::default().local_weights();
        let local = local_unlearn_loss(&g_u, &f.g_s, &f.percep, &f.emb, &f.w_u, &f.w_t, w).unwrap();
        let adj = adjacency_unlearn_loss(&g_u, &f.g_s, &f.percep, &f.emb, &f.w_u, &f.w_t, &AdjacencyOffsets::zero(1, 6), w)
            .unwrap();
        assert!((local - adj).abs() <= 1e-12 * local.abs());
    }

    #[test]
    fn baseline_mode_reports_local_only() {
        let f = fixture();
        let cfg = UnlearnConfig {
            mode: Mode::Baseline,
            iterations: 3,
            mean_samples: 100,
            ..UnlearnConfig::default()
        };
        let out = run_unlearning(&f.g_s, &f.percep, &f.emb, &f.w_u, None, &cfg).unwrap();
        assert_eq!(out.record.w_t, out.record.w_mean);
        for r in &out.record.rows {
            assert_eq!((r.l_adj, r.l_global), (0.0, 0.0));
            assert_eq!(r.l_total, r.l_local);
        }
    }

    #[test]
    fn zero_iterations_leave_the_clone_untouched() {
        let f = fixture();
        let cfg = UnlearnConfig {
            iterations: 0,
            mean_samples: 100,
            ..UnlearnConfig::default()
        };
        let out = run_unlearning(&f.g_s, &f.percep, &f.emb, &f.w_u, None, &cfg).unwrap();
        assert_eq!(out.generator.synthesis, f.g_s.synthesis);
        assert!(out.record.rows.is_empty());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("guide".parse::<Mode>().unwrap(), Mode::Guide);
        assert_eq!("baseline".parse::<Mode>().unwrap(), Mode::Baseline);
        assert!("other".parse::<Mode>().is_err());
    }

    #[test]
    fn negative_weights_are_rejected() {
        let cfg = UnlearnConfig {
            lambda_per: -1.0,
            ..UnlearnConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("lambda_per")));
    }
}
