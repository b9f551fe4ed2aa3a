use alloc::vec;
use alloc::vec::Vec;

use super::{Mode, Model};
use crate::data::{PaddedExample, END, START};
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Exponent γ of the length penalty.
    pub length_penalty: f64,
    /// Upper bound on generated tokens, `END` included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 4, length_penalty: 0.6, max_len: 84 }
    }
}

/// A generated sequence (without `START`; ends with `END` unless cut at
/// `max_len`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / lp(len)`.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens with the trailing `END` removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == END as usize => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// `((5 + len) / 6)^γ`
pub fn length_penalty(len: usize, gamma: f64) -> f64 {
    num_traits::Float::powf((5.0 + len as f64) / 6.0, gamma)
}

/// Source of next-token log-probabilities for a decoder prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary after `prefix` (which starts
    /// with `START`).
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn hypothesis(tokens: Vec<usize>, log_prob: f64, gamma: f64) -> Hypothesis {
    let score = log_prob / length_penalty(tokens.len(), gamma);
    Hypothesis { tokens, log_prob, score }
}

/// Picks the highest-probability token at every step.
pub fn greedy_with<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize, gamma: f64) -> Result<Hypothesis> {
    let mut prefix = vec![START as usize];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let tok = argmax(&lp);
        log_prob += lp[tok];
        prefix.push(tok);
        if tok == END as usize {
            break;
        }
    }
    Ok(hypothesis(prefix.split_off(1), log_prob, gamma))
}

/// Beam search over any step scorer.
///
/// Each step expands every live beam, keeps the `beam` best expansions by
/// cumulative log-probability and retires those ending in `END`. Search
/// stops once no beam is live, or once `beam` hypotheses are finished and
/// none of the live beams scores better at the current length. The result
/// is the finished hypothesis with the best length-normalized score; for
/// `beam > 1` the greedy hypothesis also competes, so the result never
/// scores below greedy decoding.
pub fn beam_search_with<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(invalid!("beam size must be at least 1"));
    }
    if cfg.max_len == 0 {
        return Err(invalid!("max_len must be at least 1"));
    }
    let gamma = cfg.length_penalty;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![START as usize], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (prefix, lp)) in live.iter().enumerate() {
            let next = scorer.next_log_probs(prefix)?;
            cands.extend(next.iter().enumerate().map(|(tok, &l)| (lp + l, bi, tok)));
        }
        // stable: equal scores keep (beam, token) order
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
        let mut next_live = Vec::with_capacity(cfg.beam);
        for &(lp, bi, tok) in cands.iter().take(cfg.beam) {
            let mut prefix = live[bi].0.clone();
            prefix.push(tok);
            if tok == END as usize {
                finished.push(hypothesis(prefix[1..].to_vec(), lp, gamma));
            } else {
                next_live.push((prefix, lp));
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|(_, lp)| *lp).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live / length_penalty(step + 1, gamma) {
                break;
            }
        }
    }
    if finished.is_empty() {
        finished.extend(live.into_iter().map(|(p, lp)| hypothesis(p[1..].to_vec(), lp, gamma)));
    }
    let mut best = finished
        .into_iter()
        .fold(None::<Hypothesis>, |acc, h| match acc {
            Some(a) if a.score >= h.score => Some(a),
            _ => Some(h),
        })
        .expect("at least one hypothesis");
    if cfg.beam > 1 {
        let greedy = greedy_with(scorer, cfg.max_len, gamma)?;
        if greedy.score > best.score {
            best = greedy;
        }
    }
    Ok(best)
}

/// Scores prefixes with the model decoder over a fixed encoder memory.
pub struct ModelScorer<'m, T> {
    model: &'m Model<T>,
    memory: Tensor<T>,
    mask: Vec<bool>,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    /// Encodes the article and images of `ex` once.
    pub fn multimodal(model: &'m Model<T>, ex: &PaddedExample) -> Result<Self> {
        let mut s = model.session(Mode::Eval);
        let (mem, mask) = s.encode_example(ex)?;
        Ok(Self { model, memory: s.graph.to_tensor(mem), mask })
    }

    /// Encodes only the images of `ex` (Vis2Sum path).
    pub fn visual(model: &'m Model<T>, ex: &PaddedExample) -> Result<Self> {
        let mut s = model.session(Mode::Eval);
        let (mem, mask) = s.encode_example_visual_memory(ex)?;
        Ok(Self { model, memory: s.graph.to_tensor(mem), mask })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = self.model.session(Mode::Eval);
        let mem = s.graph.constant(&self.memory);
        let logits = s.decode(prefix, mem, &self.mask)?;
        let (rows, v) = s.graph.dims(logits);
        let last = s.graph.slice_rows(logits, rows - 1, 1)?;
        let lp = s.graph.log_softmax(last)?;
        debug_assert_eq!(s.graph.dims(lp).1, v);
        Ok(s.graph.value(lp).iter().map(|x| x.as_f64()).collect())
    }
}

fn max_len_for<T>(model: &Model<T>, cfg: &BeamConfig) -> usize {
    cfg.max_len.min(model.config.max_summary_len)
}

/// Greedy decoding of one example through the multimodal path.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, ex: &PaddedExample, max_len: usize, gamma: f64) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::multimodal(model, ex)?;
    greedy_with(&mut scorer, max_len.min(model.config.max_summary_len), gamma)
}

/// Beam search for one example through the multimodal path.
pub fn beam_search<T: Scalar>(model: &Model<T>, ex: &PaddedExample, cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::multimodal(model, ex)?;
    let cfg = BeamConfig { max_len: max_len_for(model, cfg), ..*cfg };
    beam_search_with(&mut scorer, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-step model over {END, a, b}: step one prefers `a` (0.6) but every
    /// continuation of `a` is flat, while `b` (0.4) is followed by END with
    /// probability 0.9.
    fn toy(prefix: &[usize]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match prefix {
            [_] => [0.0, 0.6, 0.4],
            [_, 1] => [0.34, 0.33, 0.33],
            [_, 2] => [0.9, 0.05, 0.05],
            _ => [1.0, 0.0, 0.0],
        };
        // ids: END = 1; remap {END, a, b} onto {1, 3, 4}
        let mut out = vec![f64::NEG_INFINITY; 5];
        out[1] = p[0].ln();
        out[3] = p[1].ln();
        out[4] = p[2].ln();
        Ok(out)
    }

    fn toy_model(prefix: &[usize]) -> Result<Vec<f64>> {
        let mapped: Vec<usize> = prefix.iter().map(|&t| match t {
            3 => 1,
            4 => 2,
            x => x,
        }).collect();
        toy(&mapped)
    }

    #[test]
    fn beam_finds_better_joint_sequence_than_greedy() {
        // exhaustive oracle over first token × second token
        let first = [(3usize, 0.6f64), (4, 0.4)];
        let mut best = (0.0f64, 0usize);
        for &(t, p1) in &first {
            let p2 = if t == 3 { 0.34 } else { 0.9 };
            if p1 * p2 > best.0 {
                best = (p1 * p2, t);
            }
        }
        assert_eq!(best.1, 4);
        let greedy = greedy_with(&mut toy_model, 2, 0.0).unwrap();
        assert_eq!(greedy.tokens, vec![3, 1]);
        let beam = beam_search_with(&mut toy_model, &BeamConfig { beam: 2, length_penalty: 0.0, max_len: 2 }).unwrap();
        assert_eq!(beam.tokens, vec![4, 1]);
        assert!((beam.log_prob - best.0.ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy() {
        let greedy = greedy_with(&mut toy_model, 4, 0.6).unwrap();
        let beam = beam_search_with(&mut toy_model, &BeamConfig { beam: 1, length_penalty: 0.6, max_len: 4 }).unwrap();
        assert_eq!(greedy, beam);
    }

    #[test]
    fn penalty_off_is_identity() {
        for len in 0..20 {
            assert_eq!(length_penalty(len, 0.0), 1.0);
        }
        assert!((length_penalty(1, 0.6) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_beam_rejected() {
        assert!(beam_search_with(&mut toy_model, &BeamConfig { beam: 0, ..BeamConfig::default() }).is_err());
    }
}
