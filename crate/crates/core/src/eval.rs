//! Benchmark evaluation: decode a split under clean and babble conditions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Split, Utterance};
use crate::decode::{beam_decode, greedy_decode};
use crate::error::{Error, Result};
use crate::fusion::Model;
use crate::noise::{NoiseBank, NoisePool, PartitionPart};
use crate::seed;
use crate::train::noisy_audio;
use crate::wer::WerCounts;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: 24,
            length_norm: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Clean,
    Babble { pool: NoisePool, snr_db: f64 },
}

/// The `snr_db` column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrLabel {
    Clean,
    Db(f64),
    Average,
}

impl fmt::Display for SnrLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrLabel::Clean => f.write_str("clean"),
            SnrLabel::Db(x) => write!(f, "{x}"),
            SnrLabel::Average => f.write_str("avg"),
        }
    }
}

impl FromStr for SnrLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SnrLabel::Clean),
            "avg" => Ok(SnrLabel::Average),
            _ => s.parse::<f64>().map(SnrLabel::Db).map_err(|_| Error::Config {
                field: "snr_db".into(),
                reason: format!("`{s}` is neither clean, avg nor a number"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub mode: String,
    pub params: usize,
    pub noise_pool: String,
    pub snr_db: SnrLabel,
    pub split: Split,
    /// Percent.
    pub wer: f64,
}

pub fn partition_for(split: Split) -> PartitionPart {
    match split {
        Split::Train => PartitionPart::Train,
        Split::Dev => PartitionPart::Validation,
        Split::Test => PartitionPart::Test,
    }
}

/// Seed of the noise realization for one utterance under one condition.
pub fn condition_seed(seed: u64, utterance_id: &str, pool: NoisePool, snr_db: f64) -> u64 {
    seed::derive(seed, &format!("{utterance_id}|{pool}|{snr_db}"), 0)
}

/// Corpus-level WER in percent for one condition.
pub fn condition_wer(
    model: &Model,
    data: &[Utterance],
    split: Split,
    condition: Condition,
    bank: Option<&NoiseBank>,
    opts: &DecodeOptions,
    seed: u64,
) -> Result<f64> {
    let visual = model.kind().is_audiovisual();
    let mut counts = WerCounts::default();
    for u in data {
        let audio = match condition {
            Condition::Clean => u.audio.clone(),
            Condition::Babble { pool, snr_db } => {
                let bank = bank
                    .filter(|b| b.pool == pool)
                    .ok_or_else(|| crate::error::contract(format!("no noise bank for {pool}")))?;
                noisy_audio(
                    u,
                    bank,
                    partition_for(split),
                    snr_db,
                    condition_seed(seed, &u.id, pool, snr_db),
                )?
            }
        };
        let x_v = visual.then_some(&u.video);
        let hyp = if opts.beam <= 1 {
            greedy_decode(model, &audio, x_v, opts.max_len)?
        } else {
            beam_decode(model, &audio, x_v, opts.beam, opts.max_len, opts.length_norm)?
        };
        counts.add(&u.tokens, &hyp)?;
    }
    Ok(100.0 * counts.rate()?)
}

/// Rows for every pool: clean, each SNR, then the average of those.
/// The clean condition is decoded once and repeated under each pool.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    variant_label: &str,
    data: &[Utterance],
    split: Split,
    banks: &[&NoiseBank],
    snrs: &[f64],
    opts: &DecodeOptions,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let row = |pool: NoisePool, snr: SnrLabel, wer: f64| EvalRow {
        variant: variant_label.to_string(),
        mode: model.kind().mode().to_string(),
        params: model.param_count(),
        noise_pool: pool.as_str().to_string(),
        snr_db: snr,
        split,
        wer,
    };
    let clean = condition_wer(model, data, split, Condition::Clean, None, opts, seed)?;
    let mut rows = Vec::new();
    for bank in banks {
        let mut wers = vec![clean];
        rows.push(row(bank.pool, SnrLabel::Clean, clean));
        for &snr_db in snrs {
            let cond = Condition::Babble {
                pool: bank.pool,
                snr_db,
            };
            let w = condition_wer(model, data, split, cond, Some(bank), opts, seed)?;
            wers.push(w);
            rows.push(row(bank.pool, SnrLabel::Db(snr_db), w));
        }
        let avg = wers.iter().sum::<f64>() / wers.len() as f64;
        rows.push(row(bank.pool, SnrLabel::Average, avg));
    }
    Ok(rows)
}
