//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use crate::error::{contract, Result};
use crate::fusion::{DecoderMemory, DecoderState, Model, BOS, EOS};
use crate::tensor::kernels::log_softmax;
use crate::tensor::Tensor;

/// Something that yields next-token log-probabilities one step at a time.
pub trait StepScorer {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Feeds `token` and returns log-probabilities for the next position.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

/// Incremental scorer backed by the key/value cache.
pub struct CachedScorer<'a> {
    model: &'a Model,
    memory: DecoderMemory,
}

impl<'a> CachedScorer<'a> {
    pub fn new(model: &'a Model, x_a: &Tensor, x_v: Option<&Tensor>) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.prepare_decoding(x_a, x_v)?,
        })
    }
}

impl StepScorer for CachedScorer<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        self.model.start_decoding()
    }

    fn step(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.model.decode_step(&self.memory, state, token)?))
    }
}

/// Recomputes the whole prefix every step. Slow; used to check the cache.
pub struct FullScorer<'a> {
    model: &'a Model,
    x_a: &'a Tensor,
    x_v: Option<&'a Tensor>,
}

impl<'a> FullScorer<'a> {
    pub fn new(model: &'a Model, x_a: &'a Tensor, x_v: Option<&'a Tensor>) -> Self {
        Self { model, x_a, x_v }
    }
}

impl StepScorer for FullScorer<'_> {
    type State = Vec<usize>;

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, prefix: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
        prefix.push(token);
        let logits = self.model.forward_logits(self.x_a, self.x_v, prefix)?;
        Ok(log_softmax(logits.row(prefix.len() - 1)))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without BOS and EOS.
    pub tokens: Vec<usize>,
    /// Summed log-probability, including EOS when `finished`.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored tokens, counting EOS.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn normalized(&self, length_norm: f64) -> f64 {
        normalized_score(self.log_prob, self.scored_len(), length_norm)
    }
}

pub fn normalized_score(log_prob: f64, len: usize, length_norm: f64) -> f64 {
    if length_norm == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(length_norm)
    }
}

pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut state = scorer.start();
    let mut token = BOS;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = scorer.step(&mut state, token)?;
        token = argmax(&lp);
        hyp.log_prob += lp[token];
        if token == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(token);
    }
    Ok(hyp)
}

struct Live<St> {
    hyp: Hypothesis,
    state: St,
    last: usize,
}

/// Length-normalised beam search. Candidates are ranked by raw score, then
/// token id, then parent order; EOS candidates retire to the finished set.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, length_norm: f64) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(contract("beam must be at least 1"));
    }
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: scorer.start(),
        last: BOS,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut expanded = Vec::with_capacity(live.len());
        for l in &live {
            let mut st = l.state.clone();
            let lp = scorer.step(&mut st, l.last)?;
            expanded.push((st, lp));
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, (_, lp)) in expanded.iter().enumerate() {
            for (t, &v) in lp.iter().enumerate() {
                cands.push((live[h].hyp.log_prob + v, t, h));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for &(score, t, h) in cands.iter().take(beam) {
            let mut hyp = live[h].hyp.clone();
            hyp.log_prob = score;
            if t == EOS {
                hyp.finished = true;
                finished.push(hyp);
            } else {
                hyp.tokens.push(t);
                next.push(Live {
                    hyp,
                    state: expanded[h].0.clone(),
                    last: t,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|l| l.hyp));

    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.normalized(length_norm) > finished[best].normalized(length_norm) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Log-probability a scorer assigns to `tokens`, plus EOS if `with_eos`.
pub fn sequence_log_prob<S: StepScorer>(scorer: &S, tokens: &[usize], with_eos: bool) -> Result<f64> {
    let mut state = scorer.start();
    let mut prev = BOS;
    let mut total = 0.0;
    let ends = with_eos.then_some(EOS);
    for &t in tokens.iter().chain(ends.iter()) {
        let lp = scorer.step(&mut state, prev)?;
        total += lp[t];
        prev = t;
    }
    Ok(total)
}

/// Model-level greedy decode using the cache.
pub fn greedy_decode(model: &Model, x_a: &Tensor, x_v: Option<&Tensor>, max_len: usize) -> Result<Vec<usize>> {
    let scorer = CachedScorer::new(model, x_a, x_v)?;
    Ok(greedy(&scorer, max_len.min(model.config.max_len))?.tokens)
}

pub fn beam_decode(
    model: &Model,
    x_a: &Tensor,
    x_v: Option<&Tensor>,
    beam: usize,
    max_len: usize,
    length_norm: f64,
) -> Result<Vec<usize>> {
    let scorer = CachedScorer::new(model, x_a, x_v)?;
    Ok(beam_search(&scorer, beam, max_len.min(model.config.max_len), length_norm)?.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probs depend only on the step index.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        type State = usize;

        fn start(&self) -> usize {
            0
        }

        fn step(&self, s: &mut usize, _token: usize) -> Result<Vec<f64>> {
            let row = self.0[(*s).min(self.0.len() - 1)].clone();
            *s += 1;
            Ok(row.iter().map(|p: &f64| p.ln()).collect())
        }
    }

    #[test]
    fn eos_first_gives_empty_transcript() {
        let t = Table(vec![vec![0.1, 0.1, 0.7, 0.1]]);
        let h = greedy(&t, 5).unwrap();
        assert!(h.tokens.is_empty() && h.finished);
        assert_eq!(beam_search(&t, 3, 5, 0.0).unwrap().tokens, Vec::<usize>::new());
    }

    #[test]
    fn unfinished_at_max_len_is_returned() {
        let t = Table(vec![vec![0.1, 0.1, 0.1, 0.7]]);
        let h = greedy(&t, 4).unwrap();
        assert_eq!(h.tokens, vec![3; 4]);
        assert!(!h.finished);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
