//! Command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sovmas_core::data::{synth_corpus, Batch, ResourceTier, SplitRatios, SynthSpec};
use sovmas_core::model::{BeamConfig, Mode, Model, ModelConfig, Session};
use sovmas_core::objectives::{joint_mono, loss_mas, loss_mim, loss_vis2sum, mask_one_image, LossWeights};
use sovmas_core::rouge::paired_significance;
use sovmas_core::tensor::{grad_check, GradCheckReport, Scalar};
use sovmas_core::train::{evaluate, generate, Decoding};

use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::corpus::{load_corpus, write_corpus};
use crate::reports;
use crate::run::{resolve_ids, split_by_language, split_positions, train_run, write_atomic, SplitFile, TrainRequest};

/// Environment variable read when no `--seed` is given.
pub const SEED_ENV: &str = "SOVMAS_SEED";

const LANGUAGE_CODES: &[&str] =
    &["en", "fr", "zh", "ja", "ar", "hi", "ru", "es", "de", "my", "pt", "id", "tr", "vi", "ko", "sw"];

#[derive(Debug, Parser)]
#[command(name = "sovmas", version, about = "Multimodal abstractive summarization with summary-oriented vision objectives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Write train/validation/test/few-shot splits.
    Split(SplitArgs),
    /// Train a model into a new run directory.
    Train(TrainArgs),
    /// Score a checkpoint and print the ROUGE table.
    Eval(EvalArgs),
    /// Write candidate summaries as JSON Lines.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference gradients on the tiny model.
    Gradcheck(GradcheckArgs),
    /// Print per-language corpus statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of languages, or a comma-separated list of codes.
    #[arg(long, default_value = "1")]
    pub langs: String,
    /// Examples per language, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for corpus.jsonl, corpus.sovf and vocab.txt.
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub images: usize,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    #[arg(long, default_value_t = 16)]
    pub d_visual: usize,
    #[arg(long, default_value_t = 0.7)]
    pub informativeness: f64,
    #[arg(long, default_value_t = 12)]
    pub topics: usize,
    #[arg(long, default_value_t = 40)]
    pub fillers: usize,
    #[arg(long, default_value_t = 24)]
    pub article_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub mention_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub min_images: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Corpus manifest; ids in the split file are its example ids.
    #[arg(long, conflicts_with = "n")]
    pub corpus: Option<PathBuf>,
    /// Split positions 0..n instead of a corpus.
    #[arg(long)]
    pub n: Option<usize>,
    /// Tier of every language: mid-high, low or zero.
    #[arg(long, default_value = "mid-high")]
    pub tier: String,
    /// Per-language tier, `lang=tier`; repeatable.
    #[arg(long = "lang-tier")]
    pub lang_tier: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    pub validation: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON file; printed counts only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// mono or multi.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// mim, mrm or off.
    #[arg(long = "mask-mode")]
    pub mask_mode: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on the few-shot part of the split (3000 steps unless set).
    #[arg(long = "few-shot", requires = "split")]
    pub few_shot: bool,
    /// Extra `key=value` overrides; repeatable.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split file; the whole corpus is used when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Split part to use.
    #[arg(long, default_value = "test")]
    pub part: String,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long = "length-penalty", default_value_t = 0.6)]
    pub length_penalty: f64,
    /// Maximum generated length; the model's summary length by default.
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Write the TSV table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint of a system to test against with paired bootstrap.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write significance records (JSON Lines).
    #[arg(long = "significance-out")]
    pub significance_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// One surface form per token id.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output JSON Lines; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// 32 or 64.
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Entries checked per parameter tensor; 0 checks all.
    #[arg(long = "per-tensor", default_value_t = 0)]
    pub per_tensor: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

fn seed_or_env(flag: Option<u64>) -> anyhow::Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Runs one command, writing reports to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Split(a) => cmd_split(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Stats(a) => cmd_stats(a, out),
    }
}

fn language_codes(spec: &str) -> anyhow::Result<Vec<String>> {
    if let Ok(k) = spec.parse::<usize>() {
        if k == 0 || k > LANGUAGE_CODES.len() {
            bail!("--langs must be between 1 and {}", LANGUAGE_CODES.len());
        }
        return Ok(LANGUAGE_CODES[..k].iter().map(|s| s.to_string()).collect());
    }
    let codes: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).collect();
    if codes.iter().any(String::is_empty) {
        bail!("empty language code in --langs");
    }
    Ok(codes)
}

fn stats_rows(corpus: &sovmas_core::data::Corpus) -> Vec<(String, usize, usize)> {
    corpus
        .by_language()
        .into_iter()
        .map(|(l, idx)| {
            let images = idx.iter().map(|&i| corpus.examples[i].n_images).sum();
            (l, idx.len(), images)
        })
        .collect()
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let codes = language_codes(&a.langs)?;
    let sizes = if a.sizes.len() == 1 { vec![a.sizes[0]; codes.len()] } else { a.sizes.clone() };
    if sizes.len() != codes.len() {
        bail!("--sizes lists {} values for {} languages", sizes.len(), codes.len());
    }
    let spec = SynthSpec {
        languages: codes.into_iter().zip(sizes).collect(),
        vocab_size: a.vocab_size,
        classes: a.classes,
        n_images: a.images,
        regions: a.regions,
        d_visual: a.d_visual,
        informativeness: a.informativeness,
        topics: a.topics,
        fillers: a.fillers,
        article_len: a.article_len,
        mention_rate: a.mention_rate,
        min_images: a.min_images,
        ..SynthSpec::default()
    };
    let seed = seed_or_env(a.seed)?.unwrap_or(0);
    let corpus = synth_corpus(seed, &spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_corpus(&corpus, &a.out.join("corpus.jsonl"))?;
    let vocab: String = (0..spec.vocab_size as u32).map(|w| spec.surface(w) + "\n").collect();
    write_atomic(&a.out.join("vocab.txt"), vocab.as_bytes())?;
    write!(out, "{}", reports::stats_table(&stats_rows(&corpus)))?;
    Ok(0)
}

fn cmd_split(a: SplitArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let tier: ResourceTier = a.tier.parse()?;
    let ratios = SplitRatios { validation: a.validation, test: a.test };
    let seed = seed_or_env(a.seed)?.unwrap_or(0);
    let split = match (&a.corpus, a.n) {
        (Some(path), _) => {
            let mut tiers = BTreeMap::new();
            for item in &a.lang_tier {
                let (l, t) = item.split_once('=').ok_or_else(|| anyhow!("--lang-tier expects lang=tier, got `{item}`"))?;
                tiers.insert(l.to_string(), t.parse::<ResourceTier>()?);
            }
            split_by_language(&load_corpus(path, None)?, tier, &tiers, ratios, seed)?
        }
        (None, Some(n)) => {
            if !a.lang_tier.is_empty() {
                bail!("--lang-tier needs --corpus");
            }
            split_positions(n, tier, ratios, seed)?
        }
        (None, None) => bail!("split needs --corpus or --n"),
    };
    if let Some(p) = &a.out {
        split.save(p)?;
    }
    writeln!(out, "part\texamples")?;
    for (name, part) in
        [("train", &split.train), ("validation", &split.validation), ("test", &split.test), ("few_shot", &split.few_shot)]
    {
        writeln!(out, "{name}\t{}", part.len())?;
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let mut overrides = KeyValues::default();
    if let Some(v) = &a.mode {
        overrides.set("mode", v);
    }
    if let Some(v) = a.alpha {
        overrides.set("alpha", v);
    }
    if let Some(v) = a.beta {
        overrides.set("beta", v);
    }
    if let Some(v) = &a.mask_mode {
        overrides.set("mask_mode", v);
    }
    if let Some(v) = a.steps {
        overrides.set("steps", v);
    }
    if let Some(v) = a.seed {
        overrides.set("seed", v);
    }
    for item in &a.set {
        let (k, v) = item.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{item}`"))?;
        overrides.set(k.trim(), v.trim());
    }
    let fallback_seed = if a.seed.is_none() { seed_or_env(None)? } else { None };
    let req = TrainRequest {
        config_path: a.config,
        overrides,
        fallback_seed,
        corpus: a.corpus,
        split: a.split,
        out: a.out,
        resume: a.resume,
        few_shot: a.few_shot,
    };
    let summary = train_run(&req)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let last = summary.metrics.steps.last();
    writeln!(
        out,
        "run {} finished: {} steps, final joint loss {}",
        summary.dir.display(),
        summary.metrics.steps.len(),
        last.map_or("n/a".to_string(), |m| format!("{:.4}", m.joint))
    )?;
    if let Some(e) = summary.metrics.evals.last() {
        write!(out, "{}", reports::rouge_tsv(&e.table))?;
    }
    Ok(0)
}

struct Loaded {
    model: Model<f32>,
    corpus: sovmas_core::data::Corpus,
    indices: Vec<usize>,
    decoding: Decoding,
}

fn load_for_decoding(d: &DecodeArgs) -> anyhow::Result<Loaded> {
    let ck = Checkpoint::load(&d.checkpoint).with_context(|| format!("cannot load {}", d.checkpoint.display()))?;
    let model = ck.model()?;
    let corpus = load_corpus(&d.corpus, Some(model.config.vocab_size))?;
    let indices = match &d.split {
        Some(p) => resolve_ids(&corpus, SplitFile::load(p)?.part(&d.part)?)?,
        None => (0..corpus.examples.len()).collect(),
    };
    if indices.is_empty() {
        bail!("nothing to decode: the selected examples are empty");
    }
    if d.beam == 0 {
        bail!("--beam must be at least 1");
    }
    let max_len = d.max_len.unwrap_or(model.config.max_summary_len);
    let decoding = Decoding::Beam(BeamConfig { beam: d.beam, length_penalty: d.length_penalty, max_len });
    Ok(Loaded { model, corpus, indices, decoding })
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let l = load_for_decoding(&a.decode)?;
    let table = evaluate(&l.model, &l.corpus, &l.indices, &l.decoding)?;
    let tsv = reports::rouge_tsv(&table);
    write!(out, "{tsv}")?;
    if let Some(p) = &a.out {
        write_atomic(p, tsv.as_bytes())?;
    }
    if let Some(base) = &a.baseline {
        let ck = Checkpoint::load(base).with_context(|| format!("cannot load {}", base.display()))?;
        let other = evaluate(&ck.model()?, &l.corpus, &l.indices, &l.decoding)?;
        let seed = seed_or_env(a.seed)?.unwrap_or(0);
        let a_name = a.decode.checkpoint.display().to_string();
        let b_name = base.display().to_string();
        let mut lines = String::new();
        for (metric, pick) in [("R-1", 0usize), ("R-2", 1), ("R-L", 2)] {
            let xs: Vec<f64> = table.per_example.iter().map(|t| t.f1_percent()[pick]).collect();
            let ys: Vec<f64> = other.per_example.iter().map(|t| t.f1_percent()[pick]).collect();
            let r = paired_significance(&xs, &ys, a.resamples, seed)?;
            lines.push_str(&reports::significance_json(&a_name, &b_name, metric, &r));
            lines.push('\n');
        }
        write!(out, "{lines}")?;
        if let Some(p) = &a.significance_out {
            write_atomic(p, lines.as_bytes())?;
        }
    }
    Ok(0)
}

/// Joins surface forms with spaces; ids without an entry print as `<id>`.
pub fn detokenize(tokens: &[usize], vocab: &[String]) -> String {
    tokens.iter().map(|&t| vocab.get(t).cloned().unwrap_or_else(|| format!("<{t}>"))).collect::<Vec<_>>().join(" ")
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let l = load_for_decoding(&a.decode)?;
    let vocab: Vec<String> = match &a.vocab {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("cannot read vocabulary {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };
    let cands = generate(&l.model, &l.corpus, &l.indices, &l.decoding)?;
    let mut text = String::new();
    for (&i, c) in l.indices.iter().zip(&cands) {
        let ex = &l.corpus.examples[i];
        let rec = json!({"id": ex.id, "lang": ex.lang, "tokens": c, "text": detokenize(c, &vocab)});
        text.push_str(&rec.to_string());
        text.push('\n');
    }
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => write!(out, "{text}")?,
    }
    Ok(0)
}

/// Gradient check of the joint objective on the tiny reference model.
pub fn gradcheck_tiny<T: Scalar>(seed: u64, per_tensor: usize, eps: f64) -> anyhow::Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let spec = SynthSpec {
        languages: vec![("en".into(), 2)],
        vocab_size: cfg.vocab_size,
        classes: cfg.detector_classes,
        n_images: cfg.n_images,
        regions: cfg.regions_per_image,
        d_visual: cfg.d_visual,
        topics: 4,
        fillers: 10,
        article_len: 4,
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(seed, &spec)?;
    let mut batch = Batch::from_corpus(&corpus, &[0, 1], &cfg)?;
    let plan = mask_one_image(&mut batch, cfg.regions_per_image, &mut sovmas_core::rng_from_seed(seed))?;
    let model = Model::<T>::new(cfg, seed)?;
    let mut store = model.params.clone();
    let per = if per_tensor == 0 { usize::MAX } else { per_tensor };
    let report = grad_check(
        &mut store,
        |g| {
            let mut s = Session::over(&model, g.store(), Mode::Eval)?;
            let o = s.forward_joint(&batch, Some(&plan))?;
            let ls = model.config.label_smoothing;
            let mas = loss_mas(&mut s.graph, &o.mas, ls)?;
            let v2s = loss_vis2sum(&mut s.graph, &o.vis2sum, ls)?;
            let mim = loss_mim(&mut s.graph, o.mim.as_ref().expect("mask plan given"), &plan)?;
            let j = joint_mono(&mut s.graph, mas, v2s, Some(mim), &LossWeights::default())?;
            *g = s.into_graph();
            Ok(j)
        },
        eps,
        per,
    )?;
    Ok(report)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let seed = seed_or_env(a.seed)?.unwrap_or(0);
    let report = match a.precision {
        64 => gradcheck_tiny::<f64>(seed, a.per_tensor, 1e-5)?,
        32 => gradcheck_tiny::<f32>(seed, a.per_tensor, 1e-2)?,
        p => bail!("--precision must be 32 or 64, got {p}"),
    };
    let worst = report.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
    writeln!(out, "entries checked: {}", report.entries_checked)?;
    writeln!(out, "max relative error: {:.3e} (worst {worst})", report.max_rel_error)?;
    let ok = report.max_rel_error < a.tolerance;
    writeln!(out, "{} (tolerance {:.1e})", if ok { "PASS" } else { "FAIL" }, a.tolerance)?;
    Ok(if ok { 0 } else { 2 })
}

fn cmd_stats(a: StatsArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let corpus = load_corpus(&a.corpus, None)?;
    write!(out, "{}", reports::stats_table(&stats_rows(&corpus)))?;
    Ok(0)
}
