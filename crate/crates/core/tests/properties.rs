use std::collections::HashMap;

use proptest::prelude::*;
use sovmas_core::data::{split_corpus, synth_corpus, LanguageSampler, ResourceTier, SamplerSpec, SplitRatios, SynthSpec};
use sovmas_core::rouge::{lcs_len, rouge_l, rouge_n, RougeScore};

/// Counts n-grams by scanning every window against every other window.
fn oracle_ngram(c: &[u8], r: &[u8], n: usize) -> RougeScore {
    let windows = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (cw, rw) = (windows(c), windows(r));
    let mut distinct: Vec<&Vec<u8>> = cw.iter().collect();
    distinct.sort();
    distinct.dedup();
    let hit: usize = distinct
        .iter()
        .map(|g| {
            let a = cw.iter().filter(|w| w == g).count();
            let b = rw.iter().filter(|w| w == g).count();
            a.min(b)
        })
        .sum();
    prf(hit, cw.len(), rw.len())
}

fn prf(hit: usize, cand: usize, reference: usize) -> RougeScore {
    if cand == 0 || reference == 0 {
        return RougeScore::default();
    }
    let p = hit as f64 / cand as f64;
    let r = hit as f64 / reference as f64;
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    RougeScore { precision: p, recall: r, f1: f }
}

fn is_subsequence(sub: &[u8], of: &[u8]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn oracle_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if is_subsequence(&sub, b) {
            best = len;
        }
    }
    best
}

fn close(a: RougeScore, b: RougeScore) -> bool {
    (a.precision - b.precision).abs() < 1e-9 && (a.recall - b.recall).abs() < 1e-9 && (a.f1 - b.f1).abs() < 1e-9
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..=12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rouge_matches_brute_force(c in seq(), r in seq()) {
        for n in [1, 2] {
            prop_assert!(close(rouge_n(&c, &r, n).unwrap(), oracle_ngram(&c, &r, n)));
        }
        let l = oracle_lcs(&c, &r);
        prop_assert_eq!(lcs_len(&c, &r), l);
        prop_assert!(close(rouge_l(&c, &r), prf(l, c.len(), r.len())));
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall(c in seq(), r in seq()) {
        for (ab, ba) in [
            (rouge_n(&c, &r, 1).unwrap(), rouge_n(&r, &c, 1).unwrap()),
            (rouge_n(&c, &r, 2).unwrap(), rouge_n(&r, &c, 2).unwrap()),
            (rouge_l(&c, &r), rouge_l(&r, &c)),
        ] {
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        }
    }

    #[test]
    fn unigram_f1_ignores_order(
        (c, shuffled) in prop::collection::vec(0u8..5, 1..=12)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()))
    ) {
        prop_assert_eq!(rouge_n(&shuffled, &c, 1).unwrap().f1, 1.0);
    }
}

#[test]
fn lcs_is_order_sensitive() {
    let a: Vec<u8> = (0..8).collect();
    let rev: Vec<u8> = a.iter().rev().copied().collect();
    assert_eq!(rouge_n(&rev, &a, 1).unwrap().f1, 1.0);
    assert!(rouge_l(&rev, &a).f1 < 0.2);
}

#[test]
fn thousand_synthetic_examples_validate() {
    let spec = SynthSpec {
        languages: vec![("en".into(), 400), ("fr".into(), 350), ("zh".into(), 250)],
        vocab_size: 256,
        informativeness: 0.5,
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(17, &spec).unwrap();
    assert_eq!(corpus.examples.len(), 1000);
    corpus.validate(256).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn sampler_frequencies_within_two_points(
        counts in prop::collection::vec(1usize..5000, 1..=30),
        exponent in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut spec = SamplerSpec::new(counts.iter().enumerate().map(|(i, &c)| (format!("l{i}"), c)).collect());
        spec.exponent = exponent;
        let s = LanguageSampler::new(&spec).unwrap();
        let total: f64 = counts.iter().map(|&c| (c as f64).powf(exponent)).sum();
        let mut rng = sovmas_core::rng_from_seed(seed);
        let mut hits: HashMap<usize, usize> = HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            *hits.entry(s.draw(&mut rng)).or_default() += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let want = (c as f64).powf(exponent) / total;
            let got = hits.get(&k).copied().unwrap_or(0) as f64 / draws as f64;
            prop_assert!((got - want).abs() <= 0.02, "language {}: {} vs {}", k, got, want);
        }
    }

    #[test]
    fn split_sizes_follow_the_rounding_rule(n in 102usize..3000, seed in any::<u64>()) {
        let s = split_corpus(n, ResourceTier::Low, SplitRatios::default(), seed).unwrap();
        let tenth = n as f64 * 0.1;
        prop_assert!((s.validation.len() as f64 - tenth).abs() <= 1.0);
        prop_assert!((s.test.len() as f64 - tenth).abs() <= 1.0);
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        let z = split_corpus(n, ResourceTier::Zero, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(z.few_shot.len(), 100);
        prop_assert!(z.validation.len().abs_diff(z.test.len()) <= 1);
    }
}
