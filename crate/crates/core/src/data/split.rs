use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};

/// Resource setting of a language, which decides how its data is split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceTier {
    MidHigh,
    Low,
    Zero,
}

impl core::str::FromStr for ResourceTier {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid-high" | "midhigh" | "high" => Ok(Self::MidHigh),
            "low" => Ok(Self::Low),
            "zero" => Ok(Self::Zero),
            other => Err(invalid!("unknown resource tier `{}` (mid-high, low, zero)", other)),
        }
    }
}

/// Validation and test fractions for the mid-high and low tiers; training
/// receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { validation: 0.1, test: 0.1 }
    }
}

/// Disjoint index lists covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub few_shot: Vec<usize>,
}

/// Number of examples carved out as few-shot data for zero-resource languages.
pub const FEW_SHOT: usize = 100;

/// Seeded split of `n` examples.
///
/// Mid-high and low tiers: validation and test sizes are `floor(n·ratio)`,
/// the rest trains. Zero tier: 100 few-shot examples, then the remainder is
/// halved between validation (rounded up) and test.
pub fn split_corpus(n: usize, tier: ResourceTier, ratios: SplitRatios, seed: u64) -> Result<CorpusSplit> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng_from_seed(seed));
    match tier {
        ResourceTier::MidHigh | ResourceTier::Low => {
            let ok = |r: f64| (0.0..1.0).contains(&r);
            if !ok(ratios.validation) || !ok(ratios.test) || ratios.validation + ratios.test >= 1.0 {
                return Err(invalid!("split ratios must be fractions leaving room for training"));
            }
            let v = num_traits::Float::floor(n as f64 * ratios.validation) as usize;
            let t = num_traits::Float::floor(n as f64 * ratios.test) as usize;
            let test = idx.split_off(n - t);
            let validation = idx.split_off(n - t - v);
            Ok(CorpusSplit { train: idx, validation, test, few_shot: Vec::new() })
        }
        ResourceTier::Zero => {
            if n < FEW_SHOT + 2 {
                return Err(invalid!("zero-resource split needs at least {} examples, got {}", FEW_SHOT + 2, n));
            }
            let rest = idx.split_off(FEW_SHOT);
            let few_shot = idx;
            let v = rest.len().div_ceil(2);
            let mut validation = rest;
            let test = validation.split_off(v);
            Ok(CorpusSplit { train: Vec::new(), validation, test, few_shot })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covers(s: &CorpusSplit, n: usize) -> bool {
        let mut all: Vec<usize> =
            s.train.iter().chain(&s.validation).chain(&s.test).chain(&s.few_shot).copied().collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn low_tier_ratio() {
        let s = split_corpus(1000, ResourceTier::Low, SplitRatios::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (800, 100, 100));
        assert!(covers(&s, 1000));
    }

    #[test]
    fn zero_tier_carves_few_shot() {
        let s = split_corpus(1000, ResourceTier::Zero, SplitRatios::default(), 3).unwrap();
        assert_eq!((s.few_shot.len(), s.validation.len(), s.test.len()), (100, 450, 450));
        assert!(s.train.is_empty());
        assert!(covers(&s, 1000));
        assert!(split_corpus(101, ResourceTier::Zero, SplitRatios::default(), 3).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split_corpus(257, ResourceTier::MidHigh, SplitRatios::default(), 9).unwrap();
        let b = split_corpus(257, ResourceTier::MidHigh, SplitRatios::default(), 9).unwrap();
        let c = split_corpus(257, ResourceTier::MidHigh, SplitRatios::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.validation.len(), a.test.len(), a.train.len()), (25, 25, 207));
    }

    #[test]
    fn english_style_ratio() {
        let r = SplitRatios { validation: 0.035, test: 0.035 };
        let s = split_corpus(1000, ResourceTier::MidHigh, r, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (930, 35, 35));
    }
}
