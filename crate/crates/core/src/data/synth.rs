//! Synthetic multimodal corpus with a known generative structure.
//!
//! Every example draws one latent topic per image. The summary lists the
//! topic words of the images in order. The article is filler text that
//! mentions each topic word with probability `mention_rate`. Each image is
//! "informative" with probability `informativeness`: its regions then carry
//! the topic's detector class (one class per topic) and features built from
//! that class prototype; otherwise the regions draw uniformly random classes
//! independent of the summary.
//!
//! Vocabulary layout: ids 0..4 are PAD, END, START, UNK, then every language
//! owns a block of `topics` topic words followed by `fillers` filler words.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{Corpus, FeatureDims, MultimodalExample};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Language code and number of examples.
    pub languages: Vec<(String, usize)>,
    pub vocab_size: usize,
    pub classes: usize,
    pub n_images: usize,
    pub regions: usize,
    pub d_visual: usize,
    /// Probability that an image's regions reflect its topic.
    pub informativeness: f64,
    pub topics: usize,
    pub fillers: usize,
    pub article_len: usize,
    /// Probability that a summary topic word also appears in the article.
    pub mention_rate: f64,
    pub min_images: usize,
    /// Mass spread uniformly over all classes in `q`; 0 gives one-hot rows.
    pub class_smoothing: f64,
    pub feature_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            languages: vec![("en".into(), 100)],
            vocab_size: 512,
            classes: 16,
            n_images: 5,
            regions: 36,
            d_visual: 16,
            informativeness: 0.7,
            topics: 12,
            fillers: 40,
            article_len: 24,
            mention_rate: 0.5,
            min_images: 1,
            class_smoothing: 0.1,
            feature_noise: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims { n_images: self.n_images, regions: self.regions, d_visual: self.d_visual, classes: self.classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() || self.languages.iter().any(|(_, n)| *n == 0) {
            return Err(invalid!("every synthetic language needs at least one example"));
        }
        let need = 4 + self.languages.len() * (self.topics + self.fillers);
        if need > self.vocab_size {
            return Err(invalid!("vocabulary of {} cannot hold {} synthetic tokens", self.vocab_size, need));
        }
        if self.topics == 0 || self.fillers == 0 || self.topics > self.classes {
            return Err(invalid!("need 0 < topics ≤ classes and at least one filler word"));
        }
        if self.n_images == 0 || self.regions == 0 || self.d_visual == 0 {
            return Err(invalid!("image layout extents must be positive"));
        }
        if self.min_images == 0 || self.min_images > self.n_images {
            return Err(invalid!("min_images must lie in 1..=n_images"));
        }
        if self.article_len < self.n_images {
            return Err(invalid!("article must be long enough to mention every image topic"));
        }
        for (name, p) in [
            ("informativeness", self.informativeness),
            ("mention_rate", self.mention_rate),
            ("class_smoothing", self.class_smoothing),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{} must lie in [0, 1], got {}", name, p));
            }
        }
        Ok(())
    }

    fn block(&self, lang: usize) -> u32 {
        (4 + lang * (self.topics + self.fillers)) as u32
    }

    pub fn topic_word(&self, lang: usize, topic: usize) -> u32 {
        self.block(lang) + topic as u32
    }

    pub fn filler_word(&self, lang: usize, filler: usize) -> u32 {
        self.block(lang) + (self.topics + filler) as u32
    }

    /// Inverse of [`SynthSpec::topic_word`].
    pub fn topic_of(&self, lang: usize, word: u32) -> Option<usize> {
        let b = self.block(lang);
        (word >= b && word < b + self.topics as u32).then(|| (word - b) as usize)
    }

    /// Surface form of a token id, used for display.
    pub fn surface(&self, word: u32) -> String {
        match word {
            0 => "<pad>".into(),
            1 => "</s>".into(),
            2 => "<s>".into(),
            3 => "<unk>".into(),
            w => {
                let off = (w - 4) as usize;
                let per = self.topics + self.fillers;
                let (lang, k) = (off / per, off % per);
                let code = self.languages.get(lang).map_or("xx", |(c, _)| c.as_str());
                if k < self.topics {
                    format!("{code}:topic{k}")
                } else {
                    format!("{code}:w{}", k - self.topics)
                }
            }
        }
    }
}

/// Generates a corpus; identical seeds give bit-identical corpora.
pub fn synth_corpus(seed: u64, spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = crate::rng_from_seed(seed);
    let dims = spec.dims();
    let prototypes: Vec<f32> = (0..spec.classes * spec.d_visual)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let mut corpus = Corpus::new(dims);
    for (li, (code, size)) in spec.languages.iter().enumerate() {
        for k in 0..*size {
            let ex = synth_example(spec, &prototypes, li, code, format!("{code}-{k:05}"), &mut rng);
            corpus.examples.push(ex);
        }
    }
    Ok(corpus)
}

fn synth_example(
    spec: &SynthSpec,
    prototypes: &[f32],
    lang: usize,
    code: &str,
    id: String,
    rng: &mut crate::Rng,
) -> MultimodalExample {
    let (m, dv, c) = (spec.regions, spec.d_visual, spec.classes);
    let slots = spec.n_images * m;
    let images = rng.random_range(spec.min_images..=spec.n_images);
    let topics: Vec<usize> = (0..images).map(|_| rng.random_range(0..spec.topics)).collect();
    let summary = topics.iter().map(|&t| spec.topic_word(lang, t)).collect();

    let mut article: Vec<u32> =
        (0..spec.article_len).map(|_| spec.filler_word(lang, rng.random_range(0..spec.fillers))).collect();
    // one ordered mention slot per image
    let mut positions = rand::seq::index::sample(rng, spec.article_len, images).into_vec();
    positions.sort_unstable();
    for (&t, &pos) in topics.iter().zip(&positions) {
        if rng.random_bool(spec.mention_rate) {
            article[pos] = spec.topic_word(lang, t);
        }
    }

    let mut features = vec![0.0f32; slots * dv];
    let mut boxes = vec![0.0f32; slots * 4];
    let mut classes = vec![0.0f32; slots * c];
    let off = (spec.class_smoothing / c as f64) as f32;
    let on = (1.0 - spec.class_smoothing) as f32 + off;
    for (i, &topic) in topics.iter().enumerate() {
        let informative = rng.random_bool(spec.informativeness);
        for j in 0..m {
            let slot = i * m + j;
            let class = if informative { topic } else { rng.random_range(0..c) };
            for v in 0..dv {
                let z: f64 = StandardNormal.sample(rng);
                features[slot * dv + v] = prototypes[class * dv + v] + (spec.feature_noise * z) as f32;
            }
            let (x0, x1) = ordered_pair(rng);
            let (y0, y1) = ordered_pair(rng);
            boxes[slot * 4..slot * 4 + 4].copy_from_slice(&[x0, y0, x1, y1]);
            let row = &mut classes[slot * c..(slot + 1) * c];
            row.iter_mut().for_each(|q| *q = off);
            row[class] = on;
        }
    }
    MultimodalExample { id, lang: code.into(), article, summary, n_images: images, features, boxes, classes }
}

fn ordered_pair(rng: &mut crate::Rng) -> (f32, f32) {
    let a: f32 = rng.random();
    let b: f32 = rng.random();
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(informativeness: f64) -> SynthSpec {
        SynthSpec {
            languages: vec![("en".into(), 60), ("fr".into(), 40)],
            vocab_size: 128,
            classes: 10,
            n_images: 3,
            regions: 4,
            d_visual: 8,
            informativeness,
            topics: 8,
            fillers: 20,
            article_len: 12,
            ..SynthSpec::default()
        }
    }

    /// Recovers the summary from the majority argmax class of each image.
    fn class_oracle(spec: &SynthSpec, ex: &MultimodalExample, lang: usize) -> Vec<u32> {
        let (m, c) = (spec.regions, spec.classes);
        (0..ex.n_images)
            .map(|i| {
                let mut votes = vec![0usize; c];
                for j in 0..m {
                    let row = &ex.classes[(i * m + j) * c..(i * m + j + 1) * c];
                    let arg = (0..c).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                    votes[arg] += 1;
                }
                let best = (0..c).max_by_key(|&k| votes[k]).unwrap();
                spec.topic_word(lang, best)
            })
            .collect()
    }

    #[test]
    fn full_informativeness_is_invertible() {
        let spec = small(1.0);
        let corpus = synth_corpus(5, &spec).unwrap();
        for ex in &corpus.examples {
            let lang = spec.languages.iter().position(|(c, _)| *c == ex.lang).unwrap();
            assert_eq!(class_oracle(&spec, ex, lang), ex.summary);
        }
    }

    #[test]
    fn zero_informativeness_decouples_classes() {
        // class draws are uniform regardless of topic: the oracle is at chance
        let spec = small(0.0);
        let corpus = synth_corpus(6, &spec).unwrap();
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in &corpus.examples {
            let lang = spec.languages.iter().position(|(c, _)| *c == ex.lang).unwrap();
            let guess = class_oracle(&spec, ex, lang);
            hit += guess.iter().zip(&ex.summary).filter(|(a, b)| a == b).count();
            total += ex.summary.len();
        }
        assert!((hit as f64 / total as f64) < 0.3);
    }

    #[test]
    fn deterministic_and_valid() {
        let spec = small(0.5);
        let a = synth_corpus(9, &spec).unwrap();
        assert_eq!(a, synth_corpus(9, &spec).unwrap());
        assert_ne!(a, synth_corpus(10, &spec).unwrap());
        assert_eq!(a.examples.len(), 100);
        a.validate(spec.vocab_size).unwrap();
    }

    #[test]
    fn vocabulary_must_fit() {
        let mut spec = small(0.5);
        spec.vocab_size = 40;
        assert!(synth_corpus(1, &spec).is_err());
    }

    #[test]
    fn topic_words_round_trip() {
        let spec = small(0.5);
        for lang in 0..2 {
            for t in 0..spec.topics {
                assert_eq!(spec.topic_of(lang, spec.topic_word(lang, t)), Some(t));
            }
            assert_eq!(spec.topic_of(lang, spec.filler_word(lang, 0)), None);
        }
        assert_eq!(spec.surface(spec.topic_word(1, 2)), "fr:topic2");
    }
}
