//! Synthetic babble noise, speaker partitions and SNR mixing.
//!
//! Noise is mixed in feature space: powers are means of squared feature
//! values over the whole utterance.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::AUDIO_FRAMES_PER_TOKEN;
use crate::error::{contract, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const SPEAKERS_PER_POOL: usize = 30;
pub const DEFAULT_OVERLAP: usize = 30;
/// Symbols in each noise speaker's private inventory.
const NOISE_SYMBOLS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoisePool {
    #[serde(rename = "pool_A")]
    A,
    #[serde(rename = "pool_B")]
    B,
}

impl NoisePool {
    pub fn as_str(self) -> &'static str {
        match self {
            NoisePool::A => "pool_A",
            NoisePool::B => "pool_B",
        }
    }

    fn seed_base(self) -> u64 {
        match self {
            NoisePool::A => 1_000_000,
            NoisePool::B => 2_000_000,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            NoisePool::A => "A",
            NoisePool::B => "B",
        }
    }
}

impl fmt::Display for NoisePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoisePool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool_A" | "A" | "a" => Ok(NoisePool::A),
            "pool_B" | "B" | "b" => Ok(NoisePool::B),
            _ => Err(Error::Config {
                field: "noise_pool".into(),
                reason: format!("unknown pool `{s}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpeaker {
    pub speaker_id: String,
    pub seed: u64,
    pub pool: NoisePool,
    /// `NOISE_SYMBOLS` rows of `audio_dim` values.
    pub templates: Vec<Vec<f64>>,
}

impl NoiseSpeaker {
    pub fn new(speaker_id: String, seed: u64, pool: NoisePool, audio_dim: usize) -> Self {
        let mut rng = seed::rng(seed, "noise-speaker", 0);
        let templates = (0..NOISE_SYMBOLS)
            .map(|_| (0..audio_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self {
            speaker_id,
            seed,
            pool,
            templates,
        }
    }

    /// A random utterance of this speaker, `frames` long, starting at a
    /// random offset into its first symbol.
    fn utterance<R: Rng>(&self, frames: usize, rng: &mut R) -> Vec<f64> {
        let dim = self.templates[0].len();
        let onset = rng.gen_range(0..AUDIO_FRAMES_PER_TOKEN);
        let mut out = Vec::with_capacity(frames * dim);
        let mut symbol = rng.gen_range(0..NOISE_SYMBOLS);
        for f in 0..frames {
            if f > 0 && (f + onset) % AUDIO_FRAMES_PER_TOKEN == 0 {
                symbol = rng.gen_range(0..NOISE_SYMBOLS);
            }
            out.extend_from_slice(&self.templates[symbol]);
        }
        out
    }
}

/// The 30 speakers of a pool. Pools use disjoint seed ranges.
pub fn speaker_pool(pool: NoisePool, audio_dim: usize) -> Vec<NoiseSpeaker> {
    (0..SPEAKERS_PER_POOL)
        .map(|i| {
            NoiseSpeaker::new(
                format!("{}-spk-{i:02}", pool.prefix()),
                pool.seed_base() + i as u64,
                pool,
                audio_dim,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePartition {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// Seeded shuffle, then consecutive slices sized by `fractions`.
pub fn partition_speakers(pool: &[NoiseSpeaker], fractions: (f64, f64, f64), seed: u64) -> Result<NoisePartition> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(contract(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = pool.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (frac, size, name) in [(a, n_train, "train"), (b, n_val, "validation"), (c, n_test, "test")] {
        if frac > 0.0 && size == 0 {
            return Err(contract(format!(
                "pool of {n} speakers is too small for a non-empty {name} part"
            )));
        }
    }
    let mut ids: Vec<String> = pool.iter().map(|s| s.speaker_id.clone()).collect();
    ids.shuffle(&mut seed::rng(seed, "partition", 0));
    let test = ids.split_off(n_train + n_val).into_iter().collect();
    let validation = ids.split_off(n_train).into_iter().collect();
    Ok(NoisePartition {
        train: ids.into_iter().collect(),
        validation,
        test,
    })
}

impl NoisePartition {
    pub fn speakers<'a>(&self, part: PartitionPart, pool: &'a [NoiseSpeaker]) -> Vec<&'a NoiseSpeaker> {
        let set = match part {
            PartitionPart::Train => &self.train,
            PartitionPart::Validation => &self.validation,
            PartitionPart::Test => &self.test,
        };
        pool.iter().filter(|s| set.contains(&s.speaker_id)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPart {
    Train,
    Validation,
    Test,
}

/// A babble track with the speakers that went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct BabbleTrack {
    pub features: Tensor,
    pub speakers: BTreeSet<String>,
}

/// Sums `n_overlap` utterance tracks, each from a speaker drawn with
/// replacement, and scales the sum to unit power.
pub fn build_babble(speakers: &[&NoiseSpeaker], frames: usize, n_overlap: usize, seed: u64) -> Result<BabbleTrack> {
    if speakers.is_empty() {
        return Err(contract("babble needs at least one speaker"));
    }
    if n_overlap == 0 || frames == 0 {
        return Err(contract("babble needs n_overlap >= 1 and frames >= 1"));
    }
    if let Some(s) = speakers.iter().find(|s| s.pool != speakers[0].pool) {
        return Err(contract(format!(
            "speaker {} comes from a different pool",
            s.speaker_id
        )));
    }
    let dim = speakers[0].templates[0].len();
    let mut rng = seed::rng(seed, "babble", 0);
    let mut sum = vec![0.0; frames * dim];
    let mut used = BTreeSet::new();
    for _ in 0..n_overlap {
        let s = speakers[rng.gen_range(0..speakers.len())];
        used.insert(s.speaker_id.clone());
        for (acc, v) in sum.iter_mut().zip(s.utterance(frames, &mut rng)) {
            *acc += v;
        }
    }
    let power = mean_power(&sum);
    if power == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    let k = 1.0 / power.sqrt();
    for v in &mut sum {
        *v *= k;
    }
    Ok(BabbleTrack {
        features: Tensor::new(vec![frames, dim], sum)?,
        speakers: used,
    })
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Noise gain that puts `noise` at `snr_db` below `signal`.
pub fn snr_gain(signal: &Tensor, noise: &Tensor, snr_db: f64) -> Result<f64> {
    if signal.shape() != noise.shape() {
        return Err(Error::Dimension {
            op: "mix_at_snr",
            lhs: signal.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    if !snr_db.is_finite() {
        return Err(contract("snr_db must be finite"));
    }
    let ps = mean_power(signal.data());
    let pn = mean_power(noise.data());
    if pn == 0.0 {
        return Err(Error::DegenerateNoise);
    }
    if ps == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `signal + g · noise` with `g` chosen so that the signal-to-noise power
/// ratio is exactly `snr_db`.
pub fn mix_at_snr(signal: &Tensor, noise: &Tensor, snr_db: f64) -> Result<Tensor> {
    let g = snr_gain(signal, noise, snr_db)?;
    let data = signal.data().iter().zip(noise.data()).map(|(s, n)| s + g * n).collect();
    Tensor::new(signal.shape().to_vec(), data)
}

pub fn measured_snr_db(signal: &Tensor, scaled_noise: &[f64]) -> f64 {
    10.0 * (mean_power(signal.data()) / mean_power(scaled_noise)).log10()
}

/// A pool's speakers with their partition.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    pub pool: NoisePool,
    pub speakers: Vec<NoiseSpeaker>,
    pub partition: NoisePartition,
}

impl NoiseBank {
    pub fn new(pool: NoisePool, audio_dim: usize, seed: u64) -> Result<Self> {
        let speakers = speaker_pool(pool, audio_dim);
        let partition = partition_speakers(
            &speakers,
            (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
            seed::derive(seed, pool.as_str(), 0),
        )?;
        Ok(Self {
            pool,
            speakers,
            partition,
        })
    }

    pub fn part(&self, part: PartitionPart) -> Vec<&NoiseSpeaker> {
        self.partition.speakers(part, &self.speakers)
    }

    pub fn babble(&self, part: PartitionPart, frames: usize, seed: u64) -> Result<BabbleTrack> {
        build_babble(&self.part(part), frames, DEFAULT_OVERLAP, seed)
    }

    pub fn manifest(&self) -> PoolManifest {
        let part_of = |id: &str| {
            if self.partition.train.contains(id) {
                PartitionPart::Train
            } else if self.partition.validation.contains(id) {
                PartitionPart::Validation
            } else {
                PartitionPart::Test
            }
        };
        PoolManifest {
            pool: self.pool,
            speakers: self
                .speakers
                .iter()
                .map(|s| ManifestEntry {
                    speaker_id: s.speaker_id.clone(),
                    seed: s.seed,
                    partition: part_of(&s.speaker_id),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub seed: u64,
    pub partition: PartitionPart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub pool: NoisePool,
    pub speakers: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_powers_at_zero_db_add_directly() {
        let s = Tensor::new(vec![2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let n = Tensor::new(vec![2, 2], vec![-1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(snr_gain(&s, &n, 0.0).unwrap(), 1.0);
        let m = mix_at_snr(&s, &n, 0.0).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let z = Tensor::zeros(&[3, 2]);
        let one = Tensor::ones(&[3, 2]);
        assert!(matches!(mix_at_snr(&one, &z, 0.0), Err(Error::DegenerateNoise)));
        assert!(matches!(mix_at_snr(&z, &one, 0.0), Err(Error::DegenerateSignal)));
    }

    #[test]
    fn pools_have_distinct_ids() {
        let a = speaker_pool(NoisePool::A, 4);
        let b = speaker_pool(NoisePool::B, 4);
        assert_eq!(a.len(), 30);
        assert!(a
            .iter()
            .all(|s| b.iter().all(|t| t.speaker_id != s.speaker_id && t.seed != s.seed)));
    }

    #[test]
    fn babble_refuses_mixed_pools() {
        let a = speaker_pool(NoisePool::A, 4);
        let b = speaker_pool(NoisePool::B, 4);
        assert!(build_babble(&[&a[0], &b[0]], 8, 2, 0).is_err());
        assert!(build_babble(&[], 8, 2, 0).is_err());
    }
}
