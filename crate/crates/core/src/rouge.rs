//! ROUGE-N and ROUGE-L with language-aware tokenization, and paired
//! bootstrap significance testing.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, Result};

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(hit: usize, cand: usize, reference: usize) -> Self {
        if cand == 0 || reference == 0 {
            return Self::default();
        }
        let precision = hit as f64 / cand as f64;
        let recall = hit as f64 / reference as f64;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. Empty candidate or reference n-gram sets score
/// 0/0/0.
pub fn rouge_n<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(invalid!("ROUGE-N needs n ≥ 1"));
    }
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let hit = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |m: &BTreeMap<&[T], usize>| m.values().sum::<usize>();
    Ok(RougeScore::from_counts(hit, total(&c), total(&r)))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L: `P = ℓ/|cand|`, `R = ℓ/|ref|`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RougeTriple {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
}

impl RougeTriple {
    pub fn score<T: Ord>(candidate: &[T], reference: &[T]) -> Self {
        Self {
            r1: rouge_n(candidate, reference, 1).expect("n = 1"),
            r2: rouge_n(candidate, reference, 2).expect("n = 2"),
            rl: rouge_l(candidate, reference),
        }
    }

    /// F1 values scaled to 0–100.
    pub fn f1_percent(&self) -> [f64; 3] {
        [self.r1.f1 * 100.0, self.r2.f1 * 100.0, self.rl.f1 * 100.0]
    }
}

/// Languages whose text is scored one character per token by default.
pub const CHARACTER_SCRIPTED: &[&str] = &["zh", "ja", "my"];

/// Lowercases and splits on whitespace and punctuation; for languages
/// listed in `char_langs` every non-space, non-punctuation character is a
/// token.
pub fn tokenize_for_rouge(text: &str, lang: &str, char_langs: &[&str]) -> Vec<String> {
    let lower = text.to_lowercase();
    let per_char = char_langs.iter().any(|l| l.eq_ignore_ascii_case(lang));
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        let sep = ch.is_whitespace() || (ch.is_ascii_punctuation() || is_wide_punctuation(ch));
        if sep {
            if !word.is_empty() {
                out.push(core::mem::take(&mut word));
            }
        } else if per_char {
            out.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn is_wide_punctuation(ch: char) -> bool {
    matches!(ch, '\u{3000}'..='\u{303F}' | '\u{FF01}'..='\u{FF0F}' | '\u{FF1A}'..='\u{FF20}' | '\u{104A}' | '\u{104B}')
}

/// Outcome of a paired bootstrap test that system A beats system B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigReport {
    /// Fraction of resamples where `mean(A) ≤ mean(B)`.
    pub p_value: f64,
    pub resamples: usize,
    /// `mean(A) − mean(B)` over the original sample.
    pub mean_difference: f64,
}

/// One-sided paired bootstrap resampling over per-example scores.
pub fn paired_significance(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<SigReport> {
    if a.len() != b.len() {
        return Err(invalid!("paired scores differ in length ({} vs {})", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(invalid!("paired significance needs at least 2 examples"));
    }
    if resamples == 0 {
        return Err(invalid!("paired significance needs at least one resample"));
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = crate::rng_from_seed(seed);
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += diffs[rng.random_range(0..n)];
        }
        if sum <= 0.0 {
            not_better += 1;
        }
    }
    Ok(SigReport {
        p_value: not_better as f64 / resamples as f64,
        resamples,
        mean_difference: diffs.iter().sum::<f64>() / n as f64,
    })
}
