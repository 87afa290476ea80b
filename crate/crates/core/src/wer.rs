//! Word error rate.

use crate::error::{contract, Result};

/// Minimum number of unit-cost substitutions, deletions and insertions
/// turning `reference` into `hypothesis`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over reference length. Can exceed 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(contract("WER needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Pooled counts: total edits over total reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerCounts {
    pub edits: usize,
    pub words: usize,
}

impl WerCounts {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(contract("WER needs a non-empty reference"));
        }
        self.edits += edit_distance(reference, hypothesis);
        self.words += reference.len();
        Ok(())
    }

    pub fn rate(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(contract("no reference words accumulated"));
        }
        Ok(self.edits as f64 / self.words as f64)
    }
}
