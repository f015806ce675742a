//! The pipeline stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use unlearn_core::experiment::{scenario_source, Experiment, Source};
use unlearn_core::grid::save_contact_sheet;
use unlearn_core::metrics::{config_hash, eval_latents, EvalReport};
use unlearn_core::nets::{load_checkpoint, save_checkpoint, GeneratorBundle, Image, NetSet, Perceptual};
use unlearn_core::pretrain::{assess_quality, pretrain_all};
use unlearn_core::synthdata::{build_corpus, load_corpus, save_corpus, Corpus};
use unlearn_core::unlearn::{run_unlearning, UnlearnConfig, UnlearnRunRecord};

use crate::config::{apply_axis, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::summary::{write_summary, SummaryRow};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where each command reads and writes under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout { root: cfg.out_root() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn corpus(&self) -> PathBuf {
        self.data_dir().join("corpus.json")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("checkpoint")
    }

    /// One directory per scenario and unlearning variant.
    pub fn unlearn_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        let mut tag = format!("{}-{}", cfg.eval.scenario, cfg.unlearn.mode);
        if cfg.unlearn.lambda_id == 0.0 {
            tag.push_str("-no-id");
        }
        self.root.join("unlearn").join(tag)
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig, k: usize) -> PathBuf {
        self.unlearn_dir(cfg).join(format!("id-{k:03}"))
    }

    pub fn ablate_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root
            .join("ablate")
            .join(format!("{}-{}", cfg.ablate.scenario, cfg.ablate.axis))
    }
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path, artifact: &'static str, command: &'static str) -> CliResult<D> {
    let text = fs::read_to_string(path).map_err(|_| CliError::MissingArtifact {
        artifact,
        path: path.to_path_buf(),
        command,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::config(&path.display().to_string(), e.to_string()))
}

/// Echoes the resolved config and software version into `dir`.
pub fn stamp(dir: &Path, cfg: &ExperimentConfig, command: &str) -> CliResult<()> {
    mkdir(dir)?;
    write_json(
        &dir.join("config.json"),
        &serde_json::json!({ "version": VERSION, "command": command, "config": cfg }),
    )
}

fn list_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(base, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p.strip_prefix(base).unwrap_or(&p).display().to_string());
        }
    }
    Ok(())
}

/// Lists every file under `dir` in `dir/manifest.json`.
pub fn write_manifest(dir: &Path, command: &str) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({ "version": VERSION, "command": command, "files": files }),
    )?;
    Ok(files)
}

fn require_corpus(layout: &Layout) -> CliResult<Corpus> {
    let path = layout.corpus();
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            artifact: "corpus",
            path,
            command: "make-data",
        });
    }
    Ok(load_corpus(&path)?)
}

fn require_nets(layout: &Layout) -> CliResult<NetSet> {
    let path = layout.checkpoint();
    if !path.join("manifest.json").exists() {
        return Err(CliError::MissingArtifact {
            artifact: "pretrained checkpoint",
            path,
            command: "pretrain",
        });
    }
    Ok(load_checkpoint(&path)?)
}

pub fn make_data(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let dir = layout.data_dir();
    stamp(&dir, cfg, "make-data")?;
    let corpus = build_corpus(cfg.data.size(), cfg.seed)?;
    save_corpus(&corpus, &layout.corpus())?;
    write_manifest(&dir, "make-data")?;
    Ok(dir)
}

pub fn pretrain(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = require_corpus(&layout)?;
    let dir = layout.pretrain_dir();
    stamp(&dir, cfg, "pretrain")?;
    let (nets, history) = pretrain_all(&corpus, &cfg.arch, &cfg.pretrain)?;
    save_checkpoint(&nets, &layout.checkpoint())?;
    history.write_csv(&dir.join("history.csv"))?;
    write_json(&dir.join("quality.json"), &assess_quality(&nets, &corpus)?)?;
    write_manifest(&dir, "pretrain")?;
    Ok(dir)
}

fn identities(cfg: &ExperimentConfig) -> std::ops::Range<usize> {
    cfg.eval.first_identity..cfg.eval.first_identity + cfg.eval.n_identities
}

fn unlearned_set(nets: &NetSet, g_u: GeneratorBundle<f32>, source: &Source) -> NetSet {
    NetSet {
        generator: g_u,
        encoder: nets.encoder.clone(),
        embedder: nets.embedder.clone(),
        mean_latent: nets.mean_latent.clone(),
        seed: nets.seed,
        meta: serde_json::json!({
            "unlearned": true,
            "scenario": source.scenario,
            "source_index": source.index,
        }),
    }
}

fn write_run(dir: &Path, record: &UnlearnRunRecord) -> CliResult<()> {
    record.write_losses_csv(&dir.join("losses.csv"))?;
    write_json(&dir.join("run.json"), record)
}

pub fn unlearn(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = require_corpus(&layout)?;
    let nets = require_nets(&layout)?;
    let dir = layout.unlearn_dir(cfg);
    stamp(&dir, cfg, "unlearn")?;
    let percep = Perceptual::new(&nets.generator.config);
    for k in identities(cfg) {
        let run_dir = layout.run_dir(cfg, k);
        stamp(&run_dir, cfg, "unlearn")?;
        let source = scenario_source(&nets, &corpus, cfg.eval.scenario, k, cfg.seed)?;
        let outcome = run_unlearning(
            &nets.generator,
            &percep,
            &nets.embedder,
            &source.w_u,
            nets.mean_latent.as_ref(),
            &cfg.unlearn,
        )?;
        let mut record = outcome.record;
        record.source_checkpoint = Some(layout.checkpoint().display().to_string());
        record.unlearned_checkpoint = Some("checkpoint".into());
        save_checkpoint(&unlearned_set(&nets, outcome.generator, &source), &run_dir.join("checkpoint"))?;
        write_run(&run_dir, &record)?;
        write_manifest(&run_dir, "unlearn")?;
    }
    write_manifest(&dir, "unlearn")?;
    Ok(dir)
}

fn load_run(run_dir: &Path) -> CliResult<(UnlearnRunRecord, NetSet)> {
    let record: UnlearnRunRecord = read_json(&run_dir.join("run.json"), "unlearning run record", "unlearn")?;
    let ck = run_dir.join("checkpoint");
    if !ck.join("manifest.json").exists() {
        return Err(CliError::MissingArtifact {
            artifact: "unlearned checkpoint",
            path: ck,
            command: "unlearn",
        });
    }
    Ok((record, load_checkpoint(&ck)?))
}

pub fn evaluate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = require_corpus(&layout)?;
    let nets = require_nets(&layout)?;
    let dir = layout.unlearn_dir(cfg);
    let exp = Experiment::new(&nets, &corpus, cfg.eval.n_eval_latents, cfg.seed)?;
    let mut reports = Vec::new();
    for k in identities(cfg) {
        let run_dir = layout.run_dir(cfg, k);
        let (record, unlearned) = load_run(&run_dir)?;
        let source = exp.source(cfg.eval.scenario, k, cfg.seed)?;
        let report = exp.evaluate(&source, &record.config, &unlearned.generator, record.wall_time_sec)?;
        write_json(&run_dir.join("report.json"), &report)?;
        write_manifest(&run_dir, "evaluate")?;
        reports.push(report);
    }
    let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_summary(&dir.join("summary.csv"), "run", &[SummaryRow::from_reports(&label, &reports)])?;
    stamp(&dir, cfg, "evaluate")?;
    write_manifest(&dir, "evaluate")?;
    Ok(dir)
}

pub fn grid(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = require_corpus(&layout)?;
    let nets = require_nets(&layout)?;
    let dir = layout.unlearn_dir(cfg);
    let g_s = &nets.generator;
    let keep = eval_latents(g_s, cfg.eval.grid_preservation, cfg.seed)?;
    let mut rows: Vec<Vec<Image>> = Vec::new();
    for k in identities(cfg) {
        let (record, unlearned) = load_run(&layout.run_dir(cfg, k))?;
        let g_u = &unlearned.generator;
        let source = scenario_source(&nets, &corpus, cfg.eval.scenario, k, cfg.seed)?;
        let mut row = vec![
            source.image.clone().unwrap_or(g_s.generate(&record.w_u)?),
            g_s.generate(&record.w_u)?,
            g_s.generate(&record.w_t)?,
            g_u.generate(&record.w_u)?,
        ];
        for w in &keep {
            row.push(g_s.generate(w)?);
            row.push(g_u.generate(w)?);
        }
        rows.push(row);
    }
    save_contact_sheet(&dir.join("grid.png"), &rows)?;
    stamp(&dir, cfg, "grid")?;
    write_manifest(&dir, "grid")?;
    Ok(dir.join("grid.png"))
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// Reuses a finished report when the directory already holds one for the
/// same unlearning config.
fn cached_report(dir: &Path, ucfg: &UnlearnConfig) -> Option<EvalReport> {
    let text = fs::read_to_string(dir.join("report.json")).ok()?;
    let report = EvalReport::from_json(&text).ok()?;
    (report.config_hash == config_hash(ucfg)).then_some(report)
}

pub fn ablate(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let layout = Layout::new(cfg);
    let corpus = require_corpus(&layout)?;
    let nets = require_nets(&layout)?;
    let dir = layout.ablate_dir(cfg);
    stamp(&dir, cfg, "ablate")?;
    let exp = Experiment::new(&nets, &corpus, cfg.eval.n_eval_latents, cfg.seed)?;
    let axis = &cfg.ablate.axis;
    let mut rows = Vec::new();
    for &value in &cfg.ablate.values {
        let mut ucfg = cfg.unlearn.clone();
        apply_axis(&mut ucfg, axis, value)?;
        let mut reports = Vec::new();
        for k in 0..cfg.ablate.n_identities {
            let run_dir = dir.join(format!("{axis}={}", value_label(value))).join(format!("id-{k:03}"));
            if let Some(r) = cached_report(&run_dir, &ucfg) {
                reports.push(r);
                continue;
            }
            let mut run_cfg = cfg.clone();
            run_cfg.unlearn = ucfg.clone();
            stamp(&run_dir, &run_cfg, "ablate")?;
            let (_, outcome, report) = exp.run(cfg.ablate.scenario, k, &ucfg)?;
            write_run(&run_dir, &outcome.record)?;
            write_json(&run_dir.join("report.json"), &report)?;
            write_manifest(&run_dir, "ablate")?;
            reports.push(report);
        }
        rows.push(SummaryRow::from_reports(&value_label(value), &reports));
    }
    write_summary(&dir.join("summary.csv"), axis, &rows)?;
    write_manifest(&dir, "ablate")?;
    Ok(dir)
}
