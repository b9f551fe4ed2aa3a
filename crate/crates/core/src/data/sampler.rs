use alloc::string::String;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;

use crate::error::{invalid, Result};

/// Per-language corpus sizes and the smoothing exponent for batch sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub counts: Vec<(String, usize)>,
    pub exponent: f64,
}

impl SamplerSpec {
    pub fn new(counts: Vec<(String, usize)>) -> Self {
        Self { counts, exponent: 0.5 }
    }
}

/// Draws a language per batch with `P(k) ∝ count_k^exponent`.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    languages: Vec<String>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl LanguageSampler {
    pub fn new(spec: &SamplerSpec) -> Result<Self> {
        if spec.counts.is_empty() {
            return Err(invalid!("language sampler needs at least one language"));
        }
        if let Some((l, _)) = spec.counts.iter().find(|(_, c)| *c == 0) {
            return Err(invalid!("language `{}` has no examples", l));
        }
        if !(spec.exponent >= 0.0) || !spec.exponent.is_finite() {
            return Err(invalid!("sampling exponent must be finite and non-negative"));
        }
        let weights: Vec<f64> =
            spec.counts.iter().map(|(_, c)| num_traits::Float::powf(*c as f64, spec.exponent)).collect();
        let total: f64 = weights.iter().sum();
        let dist = WeightedIndex::new(&weights).map_err(|e| invalid!("sampler weights: {}", e))?;
        Ok(Self {
            languages: spec.counts.iter().map(|(l, _)| l.clone()).collect(),
            probs: weights.iter().map(|w| w / total).collect(),
            dist,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Index into [`LanguageSampler::languages`].
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}
