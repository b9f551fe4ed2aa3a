//! Corpus records, padding, splits, language sampling and the synthetic
//! corpus generator.

mod sampler;
mod split;
mod synth;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;

pub use sampler::{LanguageSampler, SamplerSpec};
pub use split::{split_corpus, CorpusSplit, ResourceTier, SplitRatios};
pub use synth::{synth_corpus, SynthSpec};

pub const PAD: u32 = 0;
pub const END: u32 = 1;
pub const START: u32 = 2;
pub const UNK: u32 = 3;

/// Shape of the per-example region arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub n_images: usize,
    pub regions: usize,
    pub d_visual: usize,
    pub classes: usize,
}

impl FeatureDims {
    pub fn slots(&self) -> usize {
        self.n_images * self.regions
    }
}

/// One article/summary pair with its image regions.
///
/// `features`, `boxes` and `classes` always hold all `n_images · regions`
/// slots in image-major order; slots of absent images are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub lang: String,
    pub article: Vec<u32>,
    pub summary: Vec<u32>,
    pub n_images: usize,
    pub features: Vec<f32>,
    pub boxes: Vec<f32>,
    /// Detector class distribution per region.
    pub classes: Vec<f32>,
}

impl MultimodalExample {
    /// Checks every record invariant. Errors name the offending field.
    pub fn validate(&self, dims: &FeatureDims, vocab_size: usize) -> Result<()> {
        let slots = dims.slots();
        let field = |name: &str, got: usize, want: usize| -> Result<()> {
            if got == want {
                Ok(())
            } else {
                Err(invalid!("{}: expected {} values, found {}", name, want, got))
            }
        };
        field("features", self.features.len(), slots * dims.d_visual)?;
        field("boxes", self.boxes.len(), slots * 4)?;
        field("classes", self.classes.len(), slots * dims.classes)?;
        if self.n_images > dims.n_images {
            return Err(invalid!("n_images: {} exceeds the corpus maximum {}", self.n_images, dims.n_images));
        }
        for (name, ids) in [("article_ids", &self.article), ("summary_ids", &self.summary)] {
            if let Some((i, t)) = ids.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
                return Err(invalid!("{}[{}]: token id {} not below vocabulary size {}", name, i, t, vocab_size));
            }
        }
        let real = self.n_images * dims.regions;
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("features[{}]: non-finite value", i));
        }
        for (i, b) in self.boxes[..real * 4].iter().enumerate() {
            if !(0.0..=1.0).contains(b) {
                return Err(invalid!("boxes[{}]: coordinate {} outside [0, 1]", i, b));
            }
        }
        for (r, row) in self.classes[..real * dims.classes].chunks(dims.classes).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(invalid!("classes[{}]: row sums to {:.6}, expected a distribution", r, s));
            }
        }
        Ok(())
    }
}

/// An in-memory corpus sharing one region layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dims: FeatureDims,
    pub examples: Vec<MultimodalExample>,
}

impl Corpus {
    pub fn new(dims: FeatureDims) -> Self {
        Self { dims, examples: Vec::new() }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            ex.validate(&self.dims, vocab_size).map_err(|e| match e {
                Error::Invalid(m) => Error::Invalid(format!("example {} ({}): {}", i, ex.id, m)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Distinct language codes in first-appearance order.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ex in &self.examples {
            if !out.contains(&ex.lang) {
                out.push(ex.lang.clone());
            }
        }
        out
    }

    /// Example indices per language, in [`Corpus::languages`] order.
    pub fn by_language(&self) -> Vec<(String, Vec<usize>)> {
        self.languages()
            .into_iter()
            .map(|l| {
                let idx = self.examples.iter().enumerate().filter(|(_, e)| e.lang == l).map(|(i, _)| i).collect();
                (l, idx)
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus { dims: self.dims, examples: indices.iter().map(|&i| self.examples[i].clone()).collect() }
    }
}

/// A record cut or padded to the model's fixed lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedExample {
    pub lang: String,
    /// `max_text_len` ids.
    pub article: Vec<usize>,
    pub article_mask: Vec<bool>,
    /// `max_summary_len` target ids: the summary, `END`, then `PAD`.
    pub summary: Vec<usize>,
    pub summary_mask: Vec<bool>,
    /// `n·m·d_v` features; absent slots are zero.
    pub features: Vec<f32>,
    pub boxes: Vec<f32>,
    pub classes: Vec<f32>,
    pub region_mask: Vec<bool>,
    pub n_images: usize,
}

impl PaddedExample {
    /// Decoder input: `START` followed by the targets shifted right.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.summary.len());
        v.push(START as usize);
        v.extend_from_slice(&self.summary[..self.summary.len() - 1]);
        v
    }

    /// Target ids up to and including `END`.
    pub fn target_tokens(&self) -> &[usize] {
        let n = self.summary_mask.iter().filter(|&&m| m).count();
        &self.summary[..n]
    }

    /// Summary ids without the trailing `END`.
    pub fn reference(&self) -> &[usize] {
        let t = self.target_tokens();
        match t.last() {
            Some(&e) if e == END as usize => &t[..t.len() - 1],
            _ => t,
        }
    }
}

/// Truncates (keeping the head) or pads the article, the summary and the
/// image sequence to the configured lengths.
pub fn pad_truncate(ex: &MultimodalExample, dims: &FeatureDims, cfg: &ModelConfig) -> Result<PaddedExample> {
    if dims.regions != cfg.regions_per_image || dims.d_visual != cfg.d_visual || dims.classes != cfg.detector_classes {
        return Err(invalid!(
            "corpus region layout (m={}, d_v={}, C={}) does not match the model (m={}, d_v={}, C={})",
            dims.regions,
            dims.d_visual,
            dims.classes,
            cfg.regions_per_image,
            cfg.d_visual,
            cfg.detector_classes
        ));
    }
    let t = cfg.max_text_len;
    let mut article: Vec<usize> = ex.article.iter().take(t).map(|&x| x as usize).collect();
    let real_text = article.len();
    article.resize(t, PAD as usize);
    let article_mask = (0..t).map(|i| i < real_text).collect();

    let s = cfg.max_summary_len;
    let mut summary: Vec<usize> = ex.summary.iter().take(s - 1).map(|&x| x as usize).collect();
    summary.push(END as usize);
    let real_sum = summary.len();
    summary.resize(s, PAD as usize);
    let summary_mask = (0..s).map(|i| i < real_sum).collect();

    let m = cfg.regions_per_image;
    let slots = cfg.n_images * m;
    let n_images = ex.n_images.min(cfg.n_images);
    let keep = n_images.min(dims.n_images) * m;
    let take = |src: &[f32], w: usize| {
        let mut v = vec![0.0f32; slots * w];
        v[..keep * w].copy_from_slice(&src[..keep * w]);
        v
    };
    Ok(PaddedExample {
        lang: ex.lang.clone(),
        article,
        article_mask,
        summary,
        summary_mask,
        features: take(&ex.features, cfg.d_visual),
        boxes: take(&ex.boxes, 4),
        classes: take(&ex.classes, cfg.detector_classes),
        region_mask: (0..slots).map(|i| i < keep).collect(),
        n_images,
    })
}

/// A list of padded examples sharing one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<PaddedExample>,
}

impl Batch {
    pub fn from_corpus(corpus: &Corpus, indices: &[usize], cfg: &ModelConfig) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| pad_truncate(&corpus.examples[i], &corpus.dims, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
