//! Monolingual and multilingual training loops and ROUGE evaluation.
//!
//! Every step draws one language (multilingual mode), takes a batch from
//! that language, masks regions for the MIM path, runs the three forward
//! paths on the same batch, and applies one clipped Adam update to
//! `L_MAS + α·L_Vis2Sum + β·L_MIM`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::data::{pad_truncate, Batch, Corpus, LanguageSampler, SamplerSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{beam_search, greedy_decode, BeamConfig, Mode, Model};
use crate::objectives::{
    joint_mono, loss_mas, loss_mim, loss_vis2sum, mask_one_image, mask_regions, LossWeights, MaskPlan,
    MRM_PROBABILITY,
};
use crate::rouge::RougeTriple;
use crate::tensor::{adam_step, clip_grad_norm, LrSchedule, OptimizerState, Scalar};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Monolingual,
    Multilingual,
}

/// Region masking that feeds the MIM path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSetting {
    /// One whole image per example.
    Mim,
    /// Independent regions with the configured probability.
    Mrm,
    /// No masked-image path.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Weight of `L_MAS`; 0 trains the auxiliary paths alone.
    pub mas_weight: f64,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub seed: u64,
    pub mask: MaskSetting,
    pub mrm_probability: f64,
    /// Exponent of the language sampling distribution.
    pub sampling_exponent: f64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Steps between validation runs; 0 disables them.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Multilingual,
            steps: 1000,
            batch_size: 8,
            weights: LossWeights::default(),
            mas_weight: 1.0,
            schedule: LrSchedule::inverse_sqrt(1e-3, 100),
            clip_norm: 1.0,
            seed: 0,
            mask: MaskSetting::Mim,
            mrm_probability: MRM_PROBABILITY,
            sampling_exponent: 0.5,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid!("gradient clip norm must be positive"));
        }
        self.weights.validate()?;
        if !(self.mas_weight >= 0.0 && self.mas_weight.is_finite()) {
            return Err(invalid!("MAS weight must be finite and non-negative"));
        }
        self.schedule.validate()?;
        if self.mask == MaskSetting::Off && self.weights.beta > 0.0 {
            return Err(invalid!("mask mode `off` disables the MIM loss, so beta must be 0 (got {})", self.weights.beta));
        }
        if self.mask == MaskSetting::Mrm && !(self.mrm_probability > 0.0 && self.mrm_probability < 1.0) {
            return Err(invalid!("MRM probability must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub language: String,
    pub mas: f64,
    pub vis2sum: f64,
    /// 0 when no region was masked or masking is off.
    pub mim: f64,
    pub joint: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// True when the update was dropped because of a non-finite value.
    pub skipped: bool,
}

/// ROUGE F1 (×100) for one language, or the average row.
#[derive(Debug, Clone, PartialEq)]
pub struct RougeRow {
    pub language: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub examples: usize,
}

/// Per-language rows followed by the unweighted average row `Avg.`.
#[derive(Debug, Clone, PartialEq)]
pub struct RougeTable {
    pub rows: Vec<RougeRow>,
    pub average: RougeRow,
    /// Per-example scores in evaluation order, for significance tests.
    pub per_example: Vec<RougeTriple>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub split: String,
    pub table: RougeTable,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
}

/// What the training loop reports between steps.
pub enum Event<'a, T> {
    Step(&'a StepMetrics),
    /// A checkpoint interval was reached.
    Checkpoint { step: u64, model: &'a Model<T>, optimizer: &'a OptimizerState<T> },
    /// An evaluation interval was reached.
    Eval { step: u64, model: &'a Model<T> },
}

/// Cycles through a language pool in freshly shuffled order.
#[derive(Debug, Clone)]
struct Pool {
    language: String,
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn next_batch(&mut self, size: usize, rng: &mut crate::Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.clone_from(&self.indices);
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Owns the model and optimizer for one run.
pub struct Trainer<'c, T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    corpus: &'c Corpus,
    pools: Vec<Pool>,
    sampler: Option<LanguageSampler>,
    rng: crate::Rng,
    step: u64,
    bad_streak: usize,
}

impl<'c, T: Scalar> Trainer<'c, T> {
    /// Starts a fresh run over the training examples `indices` of `corpus`.
    pub fn new(model: Model<T>, corpus: &'c Corpus, indices: &[usize], config: TrainConfig) -> Result<Self> {
        let optimizer = OptimizerState::new(&model.params);
        Self::resume(model, optimizer, 0, corpus, indices, config)
    }

    /// Continues a run whose optimizer state and step counter were saved.
    pub fn resume(
        model: Model<T>,
        optimizer: OptimizerState<T>,
        start_step: u64,
        corpus: &'c Corpus,
        indices: &[usize],
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if indices.is_empty() {
            return Err(invalid!("training split is empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= corpus.examples.len()) {
            return Err(invalid!("training index {} outside a corpus of {}", bad, corpus.examples.len()));
        }
        if !optimizer.matches(&model.params) {
            return Err(invalid!("optimizer state does not match the model parameters"));
        }
        let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_lang.entry(corpus.examples[i].lang.as_str()).or_default().push(i);
        }
        // languages in order of first appearance
        let mut order: Vec<&str> = Vec::new();
        for &i in indices {
            let l = corpus.examples[i].lang.as_str();
            if !order.contains(&l) {
                order.push(l);
            }
        }
        let pools: Vec<Pool> = order
            .iter()
            .map(|&l| Pool { language: l.into(), indices: by_lang[l].clone(), order: Vec::new(), cursor: 0 })
            .collect();
        let sampler = match config.mode {
            TrainMode::Monolingual => {
                if pools.len() != 1 {
                    return Err(invalid!("monolingual training takes exactly one language, found {}", pools.len()));
                }
                None
            }
            TrainMode::Multilingual => {
                let mut spec = SamplerSpec::new(pools.iter().map(|p| (p.language.clone(), p.indices.len())).collect());
                spec.exponent = config.sampling_exponent;
                Some(LanguageSampler::new(&spec)?)
            }
        };
        let rng = crate::rng_from_seed(config.seed ^ start_step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(Self { model, optimizer, config, corpus, pools, sampler, rng, step: start_step, bad_streak: 0 })
    }

    /// Number of steps taken so far, including skipped ones.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn languages(&self) -> Vec<String> {
        self.pools.iter().map(|p| p.language.clone()).collect()
    }

    fn next_batch(&mut self) -> Result<(String, Batch)> {
        let k = match &self.sampler {
            Some(s) => s.draw(&mut self.rng),
            None => 0,
        };
        let pool = &mut self.pools[k];
        let idx = pool.next_batch(self.config.batch_size, &mut self.rng);
        let batch = Batch::from_corpus(self.corpus, &idx, &self.model.config)?;
        Ok((pool.language.clone(), batch))
    }

    fn mask_plan(&mut self, batch: &Batch) -> Result<Option<MaskPlan>> {
        let mut scratch = batch.clone();
        let plan = match self.config.mask {
            MaskSetting::Off => return Ok(None),
            MaskSetting::Mim => mask_one_image(&mut scratch, self.model.config.regions_per_image, &mut self.rng)?,
            MaskSetting::Mrm => mask_regions(&mut scratch, self.config.mrm_probability, &mut self.rng)?,
        };
        Ok(Some(plan))
    }

    /// One optimizer step. Non-finite losses or gradients skip the update;
    /// the third consecutive skip is an error.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        self.step += 1;
        let step = self.step;
        let (language, batch) = self.next_batch()?;
        let plan = self.mask_plan(&batch)?;
        let lr = self.config.schedule.lr_at(step)?;
        let dropout_seed = self.rng.next_u64();
        let weights = self.config.weights;
        let mas_weight = self.config.mas_weight;
        let smoothing = self.model.config.label_smoothing;

        let outcome = (|| -> Result<_> {
            let mut s = self.model.session(Mode::Train { seed: dropout_seed });
            let out = s.forward_joint(&batch, plan.as_ref())?;
            let mas = loss_mas(&mut s.graph, &out.mas, smoothing)?;
            let v2s = loss_vis2sum(&mut s.graph, &out.vis2sum, smoothing)?;
            let mim = match (&out.mim, &plan) {
                (Some(m), Some(p)) => Some(loss_mim(&mut s.graph, m, p)?),
                _ => None,
            };
            let weighted = if mas_weight == 1.0 { mas } else { s.graph.scale(mas, T::of(mas_weight)) };
            let j = joint_mono(&mut s.graph, weighted, v2s, mim, &weights)?;
            let values = (
                s.graph.scalar(mas).as_f64(),
                s.graph.scalar(v2s).as_f64(),
                mim.map_or(0.0, |m| s.graph.scalar(m).as_f64()),
                s.graph.scalar(j).as_f64(),
            );
            let grads = if values.3.is_finite() { Some(s.graph.backward(j)?) } else { None };
            Ok((values, grads))
        })();

        let mut metrics = StepMetrics {
            step,
            language,
            mas: f64::NAN,
            vis2sum: f64::NAN,
            mim: f64::NAN,
            joint: f64::NAN,
            lr,
            grad_norm: f64::NAN,
            skipped: true,
        };
        let grads = match outcome {
            Ok(((mas, v2s, mim, j), grads)) => {
                metrics.mas = mas;
                metrics.vis2sum = v2s;
                metrics.mim = mim;
                metrics.joint = j;
                grads
            }
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(grads) = grads {
            self.model.params.zero_grads();
            self.model.params.accumulate(&grads);
            let norm = clip_grad_norm(&mut self.model.params, self.config.clip_norm);
            metrics.grad_norm = norm;
            if norm.is_finite() {
                match adam_step(&mut self.model.params, &mut self.optimizer, lr) {
                    Ok(()) => metrics.skipped = false,
                    Err(Error::NonFinite(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            self.model.params.zero_grads();
        }
        if metrics.skipped {
            self.bad_streak += 1;
            if self.bad_streak >= MAX_NONFINITE_STEPS {
                return Err(invalid!(
                    "aborting: {} consecutive non-finite steps ending at step {} (last losses MAS {} Vis2Sum {} MIM {})",
                    self.bad_streak,
                    step,
                    metrics.mas,
                    metrics.vis2sum,
                    metrics.mim
                ));
            }
        } else {
            self.bad_streak = 0;
        }
        Ok(metrics)
    }

    /// Runs `steps` further steps, reporting every step and every checkpoint
    /// and evaluation interval to `observer`.
    pub fn run<F>(&mut self, steps: u64, mut observer: F) -> Result<RunMetrics>
    where
        F: FnMut(Event<'_, T>) -> Result<Option<EvalRecord>>,
    {
        let mut metrics = RunMetrics::default();
        for _ in 0..steps {
            let m = self.train_step()?;
            observer(Event::Step(&m))?;
            let step = m.step;
            metrics.steps.push(m);
            if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                observer(Event::Checkpoint { step, model: &self.model, optimizer: &self.optimizer })?;
            }
            if self.config.eval_every > 0 && step % self.config.eval_every == 0 {
                if let Some(rec) = observer(Event::Eval { step, model: &self.model })? {
                    metrics.evals.push(rec);
                }
            }
        }
        Ok(metrics)
    }
}

/// Decoding used by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy { max_len: usize },
    Beam(BeamConfig),
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::Beam(BeamConfig::default())
    }
}

/// Decodes every example of `indices` through the multimodal path.
pub fn generate<T: Scalar>(model: &Model<T>, corpus: &Corpus, indices: &[usize], decoding: &Decoding) -> Result<Vec<Vec<usize>>> {
    indices
        .iter()
        .map(|&i| {
            let ex = corpus.examples.get(i).ok_or_else(|| invalid!("example index {} out of range", i))?;
            let padded = pad_truncate(ex, &corpus.dims, &model.config)?;
            let hyp = match decoding {
                Decoding::Greedy { max_len } => greedy_decode(model, &padded, *max_len, 0.0)?,
                Decoding::Beam(cfg) => beam_search(model, &padded, cfg)?,
            };
            Ok(hyp.content().to_vec())
        })
        .collect()
}

/// Scores candidates against references and groups them by language, in
/// order of first appearance. `Avg.` is the unweighted mean of the
/// language rows.
pub fn rouge_table(candidates: &[Vec<usize>], references: &[Vec<usize>], languages: &[String]) -> Result<RougeTable> {
    if candidates.is_empty() {
        return Err(invalid!("cannot evaluate an empty split"));
    }
    if candidates.len() != references.len() || candidates.len() != languages.len() {
        return Err(invalid!("candidate, reference and language counts differ"));
    }
    let per_example: Vec<RougeTriple> =
        candidates.iter().zip(references).map(|(c, r)| RougeTriple::score(c, r)).collect();
    let mut rows: Vec<RougeRow> = Vec::new();
    for (lang, s) in languages.iter().zip(&per_example) {
        let [r1, r2, rl] = s.f1_percent();
        let row = match rows.iter_mut().find(|r| &r.language == lang) {
            Some(row) => row,
            None => {
                rows.push(RougeRow { language: lang.clone(), r1: 0.0, r2: 0.0, rl: 0.0, examples: 0 });
                rows.last_mut().expect("pushed")
            }
        };
        row.r1 += r1;
        row.r2 += r2;
        row.rl += rl;
        row.examples += 1;
    }
    for row in &mut rows {
        let n = row.examples as f64;
        row.r1 /= n;
        row.r2 /= n;
        row.rl /= n;
    }
    let k = rows.len() as f64;
    let average = RougeRow {
        language: "Avg.".into(),
        r1: rows.iter().map(|r| r.r1).sum::<f64>() / k,
        r2: rows.iter().map(|r| r.r2).sum::<f64>() / k,
        rl: rows.iter().map(|r| r.rl).sum::<f64>() / k,
        examples: candidates.len(),
    };
    Ok(RougeTable { rows, average, per_example })
}

/// Decodes and scores a split. The model runs without dropout.
pub fn evaluate<T: Scalar>(model: &Model<T>, corpus: &Corpus, indices: &[usize], decoding: &Decoding) -> Result<RougeTable> {
    if indices.is_empty() {
        return Err(invalid!("cannot evaluate an empty split"));
    }
    let candidates = generate(model, corpus, indices, decoding)?;
    let references: Vec<Vec<usize>> =
        indices.iter().map(|&i| corpus.examples[i].summary.iter().map(|&t| t as usize).collect()).collect();
    let languages: Vec<String> = indices.iter().map(|&i| corpus.examples[i].lang.clone()).collect();
    rouge_table(&candidates, &references, &languages)
}

/// Which decoder memory [`token_accuracy`] reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Multimodal,
    Visual,
}

/// Teacher-forced next-token accuracy over non-pad targets: `(hits, total)`.
pub fn token_accuracy<T: Scalar>(model: &Model<T>, batch: &Batch, path: Path) -> Result<(usize, usize)> {
    let mut s = model.session(Mode::Eval);
    let out = match path {
        Path::Multimodal => s.forward_mas(batch)?,
        Path::Visual => s.forward_vis2sum(batch)?,
    };
    let v = model.config.vocab_size;
    let logits = s.graph.value(out.logits);
    let (mut hits, mut total) = (0, 0);
    for (i, &y) in out.targets.iter().enumerate() {
        if y == crate::data::PAD as usize {
            continue;
        }
        let row = &logits[i * v..(i + 1) * v];
        let arg = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(arg == y);
        total += 1;
    }
    Ok((hits, total))
}
