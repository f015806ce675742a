//! Scenario sources and the unlearn-then-evaluate step shared by the command
//! line and the end-to-end tests.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{config_hash, evaluate, image_features, EvalContext, EvalReport, ReportMeta, Scenario};
use crate::nets::{GeneratorBundle, Image, LatentCode, NetSet, NoiseVector, Perceptual};
use crate::rng::substream;
use crate::synthdata::{Corpus, Split};
use crate::unlearn::{run_unlearning, UnlearnConfig, UnlearnOutcome};

/// The image (or prior draw) to forget, plus the identity's other images.
#[derive(Clone, Debug)]
pub struct Source {
    pub scenario: Scenario,
    pub index: usize,
    pub w_u: LatentCode,
    pub image: Option<Image>,
    pub others: Vec<Image>,
}

/// Identities a scenario draws from: train identities for InD, the shifted
/// held-out set for OOD. Random needs no corpus entry.
pub fn scenario_pool(corpus: &Corpus, scenario: Scenario) -> Option<Vec<usize>> {
    match scenario {
        Scenario::Random => None,
        Scenario::Ind => Some(corpus.indices(Split::Train)),
        Scenario::Ood => Some(corpus.indices(Split::HeldoutOod)),
    }
}

/// Source number `k` of a scenario. InD and OOD invert variation 0 of the
/// k-th identity and keep the remaining variations as `others`; Random maps
/// a fresh prior draw.
pub fn scenario_source(nets: &NetSet, corpus: &Corpus, scenario: Scenario, k: usize, seed: u64) -> Result<Source> {
    let g = &nets.generator;
    let Some(pool) = scenario_pool(corpus, scenario) else {
        let z = NoiseVector::sample(&mut substream(seed, "random-source", k as u64), g.config.z_dim);
        return Ok(Source {
            scenario,
            index: k,
            w_u: g.map_forward(&z)?,
            image: None,
            others: Vec::new(),
        });
    };
    let &i = pool
        .get(k)
        .ok_or_else(|| Error::Config(format!("{scenario} scenario has {} identities, asked for #{k}", pool.len())))?;
    let mut images = corpus.render_all(i, g.config.image_size());
    let image = images.remove(0);
    Ok(Source {
        scenario,
        index: k,
        w_u: nets.encoder.encode(&image),
        image: Some(image),
        others: images,
    })
}

/// Embedder features of every train image, the real reference set.
pub fn real_features(nets: &NetSet, corpus: &Corpus) -> Vec<Vec<f64>> {
    let res = nets.generator.config.image_size();
    let images: Vec<Image> = corpus
        .indices(Split::Train)
        .into_iter()
        .flat_map(|i| corpus.render_all(i, res))
        .collect();
    image_features(&nets.embedder, &images)
}

/// Pretrained networks plus cached evaluation statistics.
pub struct Experiment<'a> {
    pub nets: &'a NetSet,
    pub corpus: &'a Corpus,
    pub percep: Perceptual<f32>,
    pub ctx: EvalContext,
    pub eval_seed: u64,
}

impl<'a> Experiment<'a> {
    pub fn new(nets: &'a NetSet, corpus: &'a Corpus, n_eval_latents: usize, eval_seed: u64) -> Result<Self> {
        let real = real_features(nets, corpus);
        let ctx = EvalContext::new(&nets.generator, &nets.embedder, &real, n_eval_latents, eval_seed)?;
        Ok(Experiment {
            nets,
            corpus,
            percep: Perceptual::new(&nets.generator.config),
            ctx,
            eval_seed,
        })
    }

    pub fn source(&self, scenario: Scenario, k: usize, seed: u64) -> Result<Source> {
        scenario_source(self.nets, self.corpus, scenario, k, seed)
    }

    pub fn unlearn(&self, source: &Source, cfg: &UnlearnConfig) -> Result<UnlearnOutcome<f32>> {
        run_unlearning(
            &self.nets.generator,
            &self.percep,
            &self.nets.embedder,
            &source.w_u,
            self.nets.mean_latent.as_ref(),
            cfg,
        )
    }

    /// Scores `g_u` against the source generator; `unlearn_sec` is added to
    /// the evaluation time in the report.
    pub fn evaluate(
        &self,
        source: &Source,
        cfg: &UnlearnConfig,
        g_u: &GeneratorBundle<f32>,
        unlearn_sec: f64,
    ) -> Result<EvalReport> {
        let started = Instant::now();
        let seeds = BTreeMap::from([
            ("unlearn".to_string(), cfg.seed),
            ("eval".to_string(), self.eval_seed),
            ("pretrain".to_string(), self.nets.seed),
        ]);
        let others = (!source.others.is_empty()).then_some(source.others.as_slice());
        let mut report = evaluate(
            source.scenario,
            &self.nets.generator,
            g_u,
            &self.nets.encoder,
            &self.nets.embedder,
            &self.ctx,
            &source.w_u,
            others,
            ReportMeta {
                config_hash: config_hash(cfg),
                seeds,
                runtime_sec: 0.0,
            },
        )?;
        report.runtime_sec = unlearn_sec + started.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Unlearns scenario source `k` and evaluates the result.
    pub fn run(&self, scenario: Scenario, k: usize, cfg: &UnlearnConfig) -> Result<(Source, UnlearnOutcome<f32>, EvalReport)> {
        let source = self.source(scenario, k, cfg.seed)?;
        let outcome = self.unlearn(&source, cfg)?;
        let report = self.evaluate(&source, cfg, &outcome.generator, outcome.record.wall_time_sec)?;
        Ok((source, outcome, report))
    }
}
