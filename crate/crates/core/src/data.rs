//! Seeded synthetic audiovisual corpus.
//!
//! Every token is emitted synchronously on both channels: 8 audio frames
//! (its acoustic template plus Gaussian noise) and 2 video frames (its
//! visual template plus Gaussian noise, clipped to `[0, 1]`). Acoustic
//! templates are weak relative to the frame noise so that added babble
//! destroys much of the audio evidence, while the video channel keeps a
//! clean view of the symbol.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::N_SPECIAL;
use crate::seed;
use crate::tensor::Tensor;

pub const AUDIO_FRAMES_PER_TOKEN: usize = 8;
pub const VIDEO_FRAMES_PER_TOKEN: usize = 2;
pub const CORPUS_FORMAT: &str = "dualfuse-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config {
                field: "split".into(),
                reason: format!("unknown split `{s}`"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub vocab: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sigma_a: f64,
    pub sigma_v: f64,
    /// Standard deviation of acoustic template entries.
    pub audio_template_scale: f64,
    pub audio_dim: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub n_speakers: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            min_tokens: 3,
            max_tokens: 6,
            sigma_a: 0.3,
            sigma_v: 0.1,
            audio_template_scale: 0.12,
            audio_dim: 26,
            frame_h: 8,
            frame_w: 8,
            n_speakers: 8,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.vocab <= N_SPECIAL {
            return err("vocab", "needs at least one symbol beyond the 4 specials");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return err("min_tokens", "need 1 <= min_tokens <= max_tokens");
        }
        if !(self.sigma_a >= 0.0 && self.sigma_a.is_finite()) {
            return err("sigma_a", "must be finite and non-negative");
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return err("sigma_v", "must be finite and non-negative");
        }
        if !(self.audio_template_scale > 0.0 && self.audio_template_scale.is_finite()) {
            return err("audio_template_scale", "must be positive");
        }
        if self.audio_dim == 0 || self.frame_h == 0 || self.frame_w == 0 {
            return err("audio_dim", "feature sizes must be positive");
        }
        if self.n_speakers == 0 {
            return err("n_speakers", "must be positive");
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }

    /// Short hex digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_string(self).expect("config serializes"))
    }
}

pub fn digest_json(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-symbol patterns of one channel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    /// `vocab` rows of `audio_dim` values.
    pub audio: Vec<Vec<f64>>,
    /// `vocab` rows of `2 · H · W` values in `[0, 1]`.
    pub video: Vec<Vec<f64>>,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl Templates {
    pub fn generate(cfg: &CorpusConfig) -> Self {
        let mut rng = seed::rng(cfg.seed, "templates", 0);
        let normal = Normal::new(0.0, cfg.audio_template_scale).expect("positive scale");
        let audio = (0..cfg.vocab)
            .map(|_| (0..cfg.audio_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let pixels = VIDEO_FRAMES_PER_TOKEN * cfg.frame_h * cfg.frame_w;
        let video = (0..cfg.vocab)
            .map(|_| (0..pixels).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        Self {
            audio,
            video,
            frame_h: cfg.frame_h,
            frame_w: cfg.frame_w,
        }
    }

    pub fn vocab(&self) -> usize {
        self.audio.len()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    /// `8·n × audio_dim`.
    pub audio: Tensor,
    /// `2·n × H × W`.
    pub video: Tensor,
}

impl Utterance {
    /// Transcript as words (one word per token).
    pub fn words(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.to_string()).collect()
    }
}

/// Emits the audio and video frames for `tokens`.
#[allow(clippy::too_many_arguments)]
pub fn generate_utterance(
    id: &str,
    speaker_id: &str,
    split: Split,
    tokens: &[usize],
    templates: &Templates,
    sigma_a: f64,
    sigma_v: f64,
    seed: u64,
) -> Result<Utterance> {
    let vocab = templates.vocab();
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocabulary { token: t, vocab });
    }
    if tokens.is_empty() {
        return Err(Error::Contract("utterance needs at least one token".into()));
    }
    let mut rng = seed::rng(seed, "utterance", 0);
    let noise_a = Normal::new(0.0, sigma_a.max(0.0)).expect("finite sigma");
    let noise_v = Normal::new(0.0, sigma_v.max(0.0)).expect("finite sigma");
    let dim = templates.audio_dim();
    let (h, w) = (templates.frame_h, templates.frame_w);

    let mut audio = Vec::with_capacity(tokens.len() * AUDIO_FRAMES_PER_TOKEN * dim);
    let mut video = Vec::with_capacity(tokens.len() * VIDEO_FRAMES_PER_TOKEN * h * w);
    for &t in tokens {
        for _ in 0..AUDIO_FRAMES_PER_TOKEN {
            for &a in &templates.audio[t] {
                let e = if sigma_a > 0.0 { noise_a.sample(&mut rng) } else { 0.0 };
                audio.push(a + e);
            }
        }
        for &v in &templates.video[t] {
            let e = if sigma_v > 0.0 { noise_v.sample(&mut rng) } else { 0.0 };
            video.push((v + e).clamp(0.0, 1.0));
        }
    }
    Ok(Utterance {
        id: id.to_string(),
        speaker_id: speaker_id.to_string(),
        split,
        tokens: tokens.to_vec(),
        audio: Tensor::new(vec![tokens.len() * AUDIO_FRAMES_PER_TOKEN, dim], audio)?,
        video: Tensor::new(vec![tokens.len() * VIDEO_FRAMES_PER_TOKEN, h, w], video)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Utterance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Generates all three splits. Utterance `i` of split `s` draws its tokens,
/// speaker and frame noise from a seed derived from `(cfg.seed, s, i)`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let templates = Templates::generate(cfg);
    let mut corpus = Corpus {
        config: cfg.clone(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for split in Split::ALL {
        let mut out = Vec::with_capacity(cfg.size(split));
        for i in 0..cfg.size(split) {
            let useed = seed::derive(cfg.seed, split.as_str(), i as u64);
            let mut rng = seed::rng(useed, "content", 0);
            let n = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(N_SPECIAL..cfg.vocab)).collect();
            let speaker = format!("spk{:02}", rng.gen_range(0..cfg.n_speakers));
            let id = format!("{}-{i:05}", split.as_str());
            out.push(generate_utterance(
                &id,
                &speaker,
                split,
                &tokens,
                &templates,
                cfg.sigma_a,
                cfg.sigma_v,
                useed,
            )?);
        }
        *corpus.split_mut(split) = out;
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config_digest: String,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    speaker: String,
    split: Split,
    tokens: Vec<usize>,
    audio: Vec<Vec<f64>>,
    video: Vec<Vec<Vec<f64>>>,
}

impl Record {
    fn from_utterance(u: &Utterance) -> Self {
        let audio = (0..u.audio.rows()).map(|r| u.audio.row(r).to_vec()).collect();
        let s = u.video.shape();
        let (h, w) = (s[1], s[2]);
        let video = u
            .video
            .data()
            .chunks(h * w)
            .map(|frame| frame.chunks(w).map(<[f64]>::to_vec).collect())
            .collect();
        Self {
            id: u.id.clone(),
            speaker: u.speaker_id.clone(),
            split: u.split,
            tokens: u.tokens.clone(),
            audio,
            video,
        }
    }

    fn into_utterance(self) -> std::result::Result<Utterance, String> {
        let audio = Tensor::from_rows(&self.audio).map_err(|e| format!("audio: {e}"))?;
        let frames = self.video.len();
        let h = self.video.first().map_or(0, Vec::len);
        let w = self.video.first().and_then(|f| f.first()).map_or(0, Vec::len);
        if self
            .video
            .iter()
            .any(|f| f.len() != h || f.iter().any(|r| r.len() != w))
        {
            return Err("video: ragged frames".into());
        }
        let flat: Vec<f64> = self.video.into_iter().flatten().flatten().collect();
        let video = Tensor::new(vec![frames, h, w], flat).map_err(|e| format!("video: {e}"))?;
        Ok(Utterance {
            id: self.id,
            speaker_id: self.speaker,
            split: self.split,
            tokens: self.tokens,
            audio,
            video,
        })
    }
}

/// JSON-lines: a header line, then one utterance per line.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        let header = Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            config_digest: corpus.config.digest(),
            config: corpus.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for u in corpus.iter() {
            serde_json::to_writer(&mut w, &Record::from_utterance(u))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, reason: String| Error::Parse { line, reason };

    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported corpus format {} v{}", header.format, header.version),
        ));
    }
    let mut corpus = Corpus {
        config: header.config,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let split = rec.split;
        let u = rec.into_utterance().map_err(|e| parse_err(line_no, e))?;
        corpus.split_mut(split).push(u);
    }
    Ok(corpus)
}
