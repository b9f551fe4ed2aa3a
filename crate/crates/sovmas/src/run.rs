//! Training runs: run directories, split files, periodic and best
//! checkpoints, and few-shot continuation.
//!
//! A run writes into a hidden temporary directory next to the requested
//! output and renames it into place only after every artifact is complete.
//! The finished directory holds `config.txt` (the resolved configuration),
//! `metrics.jsonl`, `loss.csv`, `checkpoints/step-<n>.sovm`, `best.sovm`
//! when a validation split exists, `final.sovm`, and `manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sovmas_core::data::{split_corpus, Corpus, CorpusSplit, ResourceTier, SplitRatios};
use sovmas_core::model::Model;
use sovmas_core::tensor::OptimizerState;
use sovmas_core::train::{evaluate, Decoding, EvalRecord, Event, RunMetrics, TrainConfig, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{KeyValues, RunConfig};
use crate::corpus::load_corpus;
use crate::reports;

/// Continuation length used when none is given.
pub const DEFAULT_FEW_SHOT_STEPS: u64 = 3000;

/// Example ids of every part of a split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub few_shot: Vec<String>,
}

impl SplitFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read split {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed split file {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(path, text.as_bytes())
    }

    pub fn part(&self, name: &str) -> anyhow::Result<&[String]> {
        Ok(match name {
            "train" => &self.train,
            "validation" => &self.validation,
            "test" => &self.test,
            "few_shot" | "few-shot" => &self.few_shot,
            other => bail!("unknown split part `{other}` (train, validation, test, few_shot)"),
        })
    }
}

/// Splits every language separately with its tier (default `tier`).
pub fn split_by_language(
    corpus: &Corpus,
    tier: ResourceTier,
    per_language: &BTreeMap<String, ResourceTier>,
    ratios: SplitRatios,
    seed: u64,
) -> anyhow::Result<SplitFile> {
    let mut out = SplitFile::default();
    for (k, (lang, idx)) in corpus.by_language().into_iter().enumerate() {
        let t = per_language.get(&lang).copied().unwrap_or(tier);
        let s = split_corpus(idx.len(), t, ratios, seed.wrapping_add(k as u64))
            .map_err(|e| anyhow!("language {lang}: {e}"))?;
        let ids = |part: &[usize]| part.iter().map(|&i| corpus.examples[idx[i]].id.clone()).collect::<Vec<_>>();
        out.train.extend(ids(&s.train));
        out.validation.extend(ids(&s.validation));
        out.test.extend(ids(&s.test));
        out.few_shot.extend(ids(&s.few_shot));
    }
    Ok(out)
}

/// A split over bare example positions `0..n`, ids written as numbers.
pub fn split_positions(n: usize, tier: ResourceTier, ratios: SplitRatios, seed: u64) -> anyhow::Result<SplitFile> {
    let CorpusSplit { train, validation, test, few_shot } = split_corpus(n, tier, ratios, seed)?;
    let ids = |v: Vec<usize>| v.into_iter().map(|i| i.to_string()).collect();
    Ok(SplitFile { train: ids(train), validation: ids(validation), test: ids(test), few_shot: ids(few_shot) })
}

/// Maps example ids to corpus positions.
pub fn resolve_ids(corpus: &Corpus, ids: &[String]) -> anyhow::Result<Vec<usize>> {
    let pos: HashMap<&str, usize> = corpus.examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    ids.iter()
        .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| anyhow!("split names unknown example id `{id}`")))
        .collect()
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<String>,
    /// Resolved configuration, identical to `config.txt`.
    pub config: String,
    pub seed: u64,
    pub output_dir: String,
    /// SHA-256 of every artifact, keyed by path relative to the run dir.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// Everything `train` needs.
#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub config_path: Option<PathBuf>,
    /// Values from flags, applied over the file.
    pub overrides: KeyValues,
    /// Used for `seed` when neither flags nor the file set it.
    pub fallback_seed: Option<u64>,
    pub corpus: PathBuf,
    pub split: Option<PathBuf>,
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Train on the few-shot part of the split instead of `train`.
    pub few_shot: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: RunMetrics,
    pub warnings: Vec<String>,
}

/// Resolves flags over file over defaults, with layout read off the corpus.
pub fn resolve_config(req: &TrainRequest, corpus: &Corpus) -> anyhow::Result<RunConfig> {
    let mut values = match &req.config_path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(seed) = req.fallback_seed {
        values.0.entry("seed".into()).or_insert_with(|| seed.to_string());
    }
    if req.few_shot {
        values.0.entry("steps".into()).or_insert_with(|| DEFAULT_FEW_SHOT_STEPS.to_string());
    }
    let values = values.overlay(&req.overrides);
    let dims = (!corpus.examples.is_empty()).then_some(&corpus.dims);
    Ok(RunConfig::resolve(&values, dims)?)
}

/// Runs training and publishes the run directory.
pub fn train_run(req: &TrainRequest) -> anyhow::Result<RunSummary> {
    if req.out.exists() {
        bail!("output directory {} already exists", req.out.display());
    }
    if let Some(p) = &req.config_path {
        if !p.is_file() {
            bail!("config file {} not found", p.display());
        }
    }
    let corpus = load_corpus(&req.corpus, None)?;
    let mut rc = resolve_config(req, &corpus)?;
    let resumed = req.resume.as_ref().map(|p| Checkpoint::load(p).with_context(|| format!("cannot load {}", p.display()))).transpose()?;
    if let Some(ck) = &resumed {
        rc.model = ck.config.clone();
    }
    corpus.validate(rc.model.vocab_size).map_err(|e| anyhow!("{}: {e}", req.corpus.display()))?;

    let split = req.split.as_ref().map(|p| SplitFile::load(p)).transpose()?;
    let (train_idx, val_idx) = match &split {
        Some(s) => {
            let part = if req.few_shot { &s.few_shot } else { &s.train };
            (resolve_ids(&corpus, part)?, resolve_ids(&corpus, &s.validation)?)
        }
        None if req.few_shot => bail!("few-shot continuation needs a split file"),
        None => ((0..corpus.examples.len()).collect(), Vec::new()),
    };
    if train_idx.is_empty() {
        bail!("the training pool is empty");
    }

    let parent = req.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    let name = req.out.file_name().ok_or_else(|| anyhow!("output path has no final component"))?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("checkpoints"))?;
    let result = train_into(&tmp, &rc, &corpus, &train_idx, &val_idx, resumed);
    match result {
        Ok((metrics, warnings)) => {
            let manifest = RunManifest {
                config_path: req.config_path.as_ref().map(|p| p.display().to_string()),
                config: rc.to_text(),
                seed: rc.train.seed,
                output_dir: req.out.display().to_string(),
                artifacts: hash_tree(&tmp)?,
            };
            fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
            fs::rename(&tmp, &req.out).with_context(|| format!("cannot move run into {}", req.out.display()))?;
            Ok(RunSummary { dir: req.out.clone(), manifest, metrics, warnings })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn hash_tree(dir: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&fs::read(&p)?));
            }
        }
    }
    Ok(out)
}

fn io_to_core(e: impl std::fmt::Display) -> sovmas_core::Error {
    sovmas_core::Error::Invalid(format!("run output: {e}"))
}

fn train_into(
    dir: &Path,
    rc: &RunConfig,
    corpus: &Corpus,
    train_idx: &[usize],
    val_idx: &[usize],
    resumed: Option<Checkpoint>,
) -> anyhow::Result<(RunMetrics, Vec<String>)> {
    let mut warnings = Vec::new();
    fs::write(dir.join("config.txt"), rc.to_text())?;
    let (model, optimizer, start) = match resumed {
        Some(ck) => {
            let model = ck.model()?;
            let opt = match ck.optimizer {
                Some(o) => o,
                None => {
                    warnings.push("checkpoint has no optimizer state; restarting the optimizer".into());
                    OptimizerState::new(&model.params)
                }
            };
            (model, opt, ck.step)
        }
        None => {
            let model = Model::<f32>::new(rc.model.clone(), rc.train.seed)?;
            let opt = OptimizerState::new(&model.params);
            (model, opt, 0)
        }
    };
    let steps = rc.train.steps;
    let mut trainer = Trainer::resume(model, optimizer, start, corpus, train_idx, rc.train.clone())?;
    let mut log = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    let mut best: Option<f64> = None;
    let quick = Decoding::Greedy { max_len: rc.model.max_summary_len };
    let mut metrics = trainer.run(steps, |ev| match ev {
        Event::Step(m) => {
            writeln!(log, "{}", reports::step_json(m)).map_err(io_to_core)?;
            Ok(None)
        }
        Event::Checkpoint { step, model, optimizer } => {
            Checkpoint::from_model(model, Some(optimizer), step)
                .save(&dir.join("checkpoints").join(format!("step-{step}.sovm")))
                .map_err(io_to_core)?;
            Ok(None)
        }
        Event::Eval { step, model } => {
            if val_idx.is_empty() {
                return Ok(None);
            }
            let table = evaluate(model, corpus, val_idx, &quick)?;
            let rec = EvalRecord { step, split: "validation".into(), table };
            writeln!(log, "{}", reports::eval_json(&rec)).map_err(io_to_core)?;
            if best.is_none_or(|b| rec.table.average.rl > b) {
                best = Some(rec.table.average.rl);
                Checkpoint::from_model(model, None, step).save(&dir.join("best.sovm")).map_err(io_to_core)?;
            }
            Ok(Some(rec))
        }
    })?;
    if !val_idx.is_empty() {
        let step = trainer.step_count();
        let table = evaluate(&trainer.model, corpus, val_idx, &quick)?;
        let rec = EvalRecord { step, split: "validation".into(), table };
        writeln!(log, "{}", reports::eval_json(&rec))?;
        if best.is_none_or(|b| rec.table.average.rl > b) {
            Checkpoint::from_model(&trainer.model, None, step).save(&dir.join("best.sovm"))?;
        }
        metrics.evals.push(rec);
    }
    log.flush()?;
    fs::write(dir.join("loss.csv"), reports::loss_csv(&metrics.steps))?;
    Checkpoint::from_model(&trainer.model, Some(&trainer.optimizer), trainer.step_count()).save(&dir.join("final.sovm"))?;
    Ok((metrics, warnings))
}

/// Continues training `ck` on `indices` for `steps` steps. Missing
/// optimizer state restarts the optimizer and is reported in the warnings.
pub fn few_shot_continue(
    ck: &Checkpoint,
    corpus: &Corpus,
    indices: &[usize],
    config: &TrainConfig,
    steps: u64,
) -> anyhow::Result<(Checkpoint, RunMetrics, Vec<String>)> {
    if steps == 0 {
        return Ok((ck.clone(), RunMetrics::default(), Vec::new()));
    }
    let mut warnings = Vec::new();
    let model = ck.model()?;
    let opt = match &ck.optimizer {
        Some(o) => o.clone(),
        None => {
            warnings.push("checkpoint has no optimizer state; restarting the optimizer".into());
            OptimizerState::new(&model.params)
        }
    };
    let mut trainer = Trainer::resume(model, opt, ck.step, corpus, indices, config.clone())?;
    let metrics = trainer.run(steps, |_| Ok(None))?;
    let out = Checkpoint::from_model(&trainer.model, Some(&trainer.optimizer), trainer.step_count());
    Ok((out, metrics, warnings))
}
