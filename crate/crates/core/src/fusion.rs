//! Audiovisual fusion model.
//!
//! Visual features reach the model along two routes:
//!
//! * **encoder injection**: visual encoder output is repeated frame-wise to
//!   the acoustic frame rate, projected to the model width, scaled by a
//!   trainable scalar `alpha` (initialised to zero) and added to the acoustic
//!   frontend output before the audio encoder;
//! * **decoder adapters**: a gated cross-attention block runs before every
//!   decoder block and attends to the visual features. Both gates start at
//!   zero, so `tanh(gate)` turns the adapter into the identity.
//!
//! `early` uses the first route, `middle` the second, `dual_use` both.
//! With zero-initialised `alpha` and gates every variant computes exactly
//! the audio-only function, which makes the audio-only checkpoint a
//! lossless starting point for audiovisual fine-tuning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::params::{Binding, Builder, Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{
    positions_from, sinusoidal_positions, AttnParams, DecoderBlockParams, EncoderBlockParams, FfnParams, KvSource,
    LayerNormParams, Linear, ProjectedKv, SelfKvCache,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIAL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub audio_dim: usize,
    pub d_visual: usize,
    pub visual_heads: usize,
    pub n_enc_visual: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub ffn_mult: usize,
    pub upsample_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_enc: 2,
            n_dec: 2,
            vocab: 32,
            max_len: 24,
            audio_dim: 26,
            d_visual: 24,
            visual_heads: 4,
            n_enc_visual: 4,
            frame_h: 8,
            frame_w: 8,
            ffn_mult: 4,
            upsample_factor: 2,
        }
    }
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc", self.n_enc),
            ("n_dec", self.n_dec),
            ("max_len", self.max_len),
            ("audio_dim", self.audio_dim),
            ("d_visual", self.d_visual),
            ("visual_heads", self.visual_heads),
            ("frame_h", self.frame_h),
            ("frame_w", self.frame_w),
            ("ffn_mult", self.ffn_mult),
            ("upsample_factor", self.upsample_factor),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(cfg_err(name, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(cfg_err("d_model", "must be even for positional encoding"));
        }
        if !self.d_visual.is_multiple_of(2) {
            return Err(cfg_err("d_visual", "must be even for positional encoding"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(cfg_err("n_heads", "must divide d_model"));
        }
        if !self.d_visual.is_multiple_of(self.visual_heads) {
            return Err(cfg_err("visual_heads", "must divide d_visual"));
        }
        if self.vocab <= N_SPECIAL {
            return Err(cfg_err(
                "vocab",
                format!("needs room beyond {N_SPECIAL} special tokens"),
            ));
        }
        if self.upsample_factor != 2 {
            return Err(cfg_err(
                "upsample_factor",
                "video runs at half the encoder frame rate; factor must be 2",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    AudioOnly,
    Early,
    Middle,
    DualUse,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::AudioOnly,
        VariantKind::Early,
        VariantKind::Middle,
        VariantKind::DualUse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::AudioOnly => "audio_only",
            VariantKind::Early => "early",
            VariantKind::Middle => "middle",
            VariantKind::DualUse => "dual_use",
        }
    }

    pub fn uses_encoder_injection(self) -> bool {
        matches!(self, VariantKind::Early | VariantKind::DualUse)
    }

    pub fn uses_decoder_adapters(self) -> bool {
        matches!(self, VariantKind::Middle | VariantKind::DualUse)
    }

    pub fn is_audiovisual(self) -> bool {
        self != VariantKind::AudioOnly
    }

    /// "A" for the audio-only model, "AV" otherwise.
    pub fn mode(self) -> &'static str {
        if self.is_audiovisual() {
            "AV"
        } else {
            "A"
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| cfg_err("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDesign {
    Add,
    Concat,
}

impl FusionDesign {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionDesign::Add => "add",
            FusionDesign::Concat => "concat",
        }
    }
}

impl FromStr for FusionDesign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionDesign::Add),
            "concat" => Ok(FusionDesign::Concat),
            _ => Err(cfg_err("fusion_design", format!("unknown design `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelVariant {
    pub kind: VariantKind,
    pub fusion_design: FusionDesign,
    /// Number of visual encoder blocks applied before features are tapped;
    /// 0 means straight after the visual frontend and positional encoding.
    pub visual_tap_block: usize,
}

impl ModelVariant {
    /// Additive injection, features tapped after the last visual block.
    pub fn standard(kind: VariantKind, cfg: &ModelConfig) -> Self {
        Self {
            kind,
            fusion_design: FusionDesign::Add,
            visual_tap_block: cfg.n_enc_visual,
        }
    }

    /// Stable identifier used in file names and result rows. Non-default
    /// design/tap choices are spelled out.
    pub fn label(&self, cfg: &ModelConfig) -> String {
        let mut s = self.kind.as_str().to_string();
        if self.kind.uses_encoder_injection() && self.fusion_design != FusionDesign::Add {
            s.push('_');
            s.push_str(self.fusion_design.as_str());
        }
        if self.kind.is_audiovisual() && self.visual_tap_block != cfg.n_enc_visual {
            s.push_str(&format!("_tap{}", self.visual_tap_block));
        }
        s
    }
}

/// FC(d) projection and the zero-initialised scale `alpha`.
#[derive(Clone, Copy, Debug)]
pub struct VisualPathwayParams {
    pub proj: Linear,
    pub alpha: ParamId,
    pub upsample_factor: usize,
}

/// Gated cross-attention + gated feed-forward adapter.
#[derive(Clone, Copy, Debug)]
pub struct FlamingoParams {
    pub ln_attn: LayerNormParams,
    pub cross_attn: AttnParams,
    pub gate_attn: ParamId,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
    pub gate_ffn: ParamId,
}

impl FlamingoParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize, n_heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNormParams::new(b, &format!("{prefix}.ln_attn"), d),
            cross_attn: AttnParams::new(b, &format!("{prefix}.cross_attn"), d, n_heads)?,
            gate_attn: b.zeros(&format!("{prefix}.gate_attn"), &[1]),
            ln_ffn: LayerNormParams::new(b, &format!("{prefix}.ln_ffn"), d),
            ffn: FfnParams::new(b, &format!("{prefix}.ffn"), d, mult),
            gate_ffn: b.zeros(&format!("{prefix}.gate_ffn"), &[1]),
        })
    }

    /// `y' = y + tanh(g_a)·CrossAttn(LN(y), h_v)`; `out = y' + tanh(g_f)·FFN(LN(y'))`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, y: Var, visual: KvSource<'_>) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, y)?;
        let a = self.cross_attn.forward(g, p, h, visual, None)?;
        let ga = g.tanh(p.get(self.gate_attn))?;
        let a = g.mul(ga, a)?;
        let y = g.add(y, a)?;
        let h = self.ln_ffn.forward(g, p, y)?;
        let f = self.ffn.forward(g, p, h)?;
        let gf = g.tanh(p.get(self.gate_ffn))?;
        let f = g.mul(gf, f)?;
        g.add(y, f)
    }
}

#[derive(Clone, Copy, Debug)]
struct AcousticFrontend {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct VisualEncoder {
    frontend: Linear,
    blocks: Vec<EncoderBlockParams>,
}

#[derive(Clone, Copy, Debug)]
enum DecoderLayer {
    Adapter(FlamingoParams),
    Block(DecoderBlockParams),
}

#[derive(Clone, Debug)]
struct Layout {
    acoustic: AcousticFrontend,
    audio_blocks: Vec<EncoderBlockParams>,
    audio_ln_post: LayerNormParams,
    visual: Option<VisualEncoder>,
    pathway: Option<VisualPathwayParams>,
    concat_fc: Option<Linear>,
    adapter_proj: Option<Linear>,
    embed: ParamId,
    decoder: Vec<DecoderLayer>,
    ln_final: LayerNormParams,
    head: Linear,
}

/// A fully assembled model: variant, configuration, parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Encoder outputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h_av: Var,
    /// Visual features projected to the model width for the adapters.
    pub visual: Option<Var>,
}

/// Encoder outputs with every cross-attention key/value projection done,
/// ready for step-by-step decoding.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    layers: Vec<ProjectedKv>,
}

/// Per-hypothesis decoding state.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    caches: Vec<SelfKvCache>,
    pub position: usize,
}

/// Builds a model for `variant`. Parameters are initialised from `seed`
/// keyed by name, so submodules shared between variants start identical.
pub fn build_model(variant: ModelVariant, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if variant.visual_tap_block > cfg.n_enc_visual {
        return Err(cfg_err(
            "visual_tap_block",
            format!(
                "{} exceeds {} visual blocks",
                variant.visual_tap_block, cfg.n_enc_visual
            ),
        ));
    }
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        init: Init { seed },
    };
    let kind = variant.kind;

    let acoustic = AcousticFrontend {
        fc1: Linear::new(&mut b, "audio.frontend.fc1", cfg.audio_dim, d, true),
        fc2: Linear::new(&mut b, "audio.frontend.fc2", 2 * d, d, true),
    };

    let visual = if kind.is_audiovisual() {
        let frontend = Linear::new(&mut b, "visual.frontend", cfg.frame_h * cfg.frame_w, cfg.d_visual, true);
        let blocks = (0..variant.visual_tap_block)
            .map(|i| {
                EncoderBlockParams::new(
                    &mut b,
                    &format!("visual.enc.{i}"),
                    cfg.d_visual,
                    cfg.visual_heads,
                    cfg.ffn_mult,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Some(VisualEncoder { frontend, blocks })
    } else {
        None
    };

    let pathway = kind.uses_encoder_injection().then(|| VisualPathwayParams {
        proj: Linear::new(&mut b, "fusion.proj", cfg.d_visual, d, true),
        alpha: b.zeros("fusion.alpha", &[1]),
        upsample_factor: cfg.upsample_factor,
    });
    let concat_fc = (kind.uses_encoder_injection() && variant.fusion_design == FusionDesign::Concat)
        .then(|| Linear::new(&mut b, "fusion.concat", 2 * d, d, true));

    let audio_blocks = (0..cfg.n_enc)
        .map(|i| EncoderBlockParams::new(&mut b, &format!("audio.enc.{i}"), d, cfg.n_heads, cfg.ffn_mult))
        .collect::<Result<Vec<_>>>()?;
    let audio_ln_post = LayerNormParams::new(&mut b, "audio.enc.ln_post", d);

    let adapter_proj = kind
        .uses_decoder_adapters()
        .then(|| Linear::new(&mut b, "adapter.proj", cfg.d_visual, d, true));

    let embed = b.uniform("dec.embed", &[cfg.vocab, d], 1.0 / (d as f64).sqrt());
    let mut decoder = Vec::new();
    for i in 0..cfg.n_dec {
        if kind.uses_decoder_adapters() {
            decoder.push(DecoderLayer::Adapter(FlamingoParams::new(
                &mut b,
                &format!("dec.adapter.{i}"),
                d,
                cfg.n_heads,
                cfg.ffn_mult,
            )?));
        }
        decoder.push(DecoderLayer::Block(DecoderBlockParams::new(
            &mut b,
            &format!("dec.block.{i}"),
            d,
            cfg.n_heads,
            cfg.ffn_mult,
        )?));
    }
    let ln_final = LayerNormParams::new(&mut b, "dec.ln_final", d);
    let head = Linear::new(&mut b, "dec.head", d, cfg.vocab, true);

    Ok(Model {
        variant,
        config: cfg.clone(),
        params: store,
        layout: Layout {
            acoustic,
            audio_blocks,
            audio_ln_post,
            visual,
            pathway,
            concat_fc,
            adapter_proj,
            embed,
            decoder,
            ln_final,
            head,
        },
    })
}

/// Output row `i` is input row `⌊i / factor⌋`.
pub fn upsample_repeat(g: &mut Graph, h: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(contract("upsample factor must be at least 1"));
    }
    let rows = g.value(h).rows();
    let ids: Vec<usize> = (0..rows * factor).map(|i| i / factor).collect();
    g.gather(h, &ids)
}

/// `alpha · (h_up · W + b)`.
pub fn project_scale(g: &mut Graph, p: &Binding, h_up: Var, pathway: &VisualPathwayParams) -> Result<Var> {
    let proj = pathway.proj.forward(g, p, h_up)?;
    g.mul(p.get(pathway.alpha), proj)
}

impl Model {
    pub fn kind(&self) -> VariantKind {
        self.variant.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Scalars in the visual frontend and encoder blocks.
    pub fn visual_encoder_param_count(&self) -> usize {
        self.params.count_prefix("visual.")
    }

    pub fn visual_pathway(&self) -> Option<&VisualPathwayParams> {
        self.layout.pathway.as_ref()
    }

    pub fn adapters(&self) -> Vec<FlamingoParams> {
        self.layout
            .decoder
            .iter()
            .filter_map(|l| match l {
                DecoderLayer::Adapter(a) => Some(*a),
                DecoderLayer::Block(_) => None,
            })
            .collect()
    }

    /// Decoder depth including adapters.
    pub fn decoder_depth(&self) -> usize {
        self.layout.decoder.len()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.by_name(name)
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| contract(format!("no parameter named {name}")))?;
        self.params.set(id, t)
    }

    /// Acoustic frontend: per-frame linear + GELU, then pairs of frames
    /// merged by a second linear + GELU (stride 2), plus positions.
    /// Maps `2T × F_a` to `T × d`.
    pub fn acoustic_frontend(&self, g: &mut Graph, p: &Binding, x_a: Var) -> Result<Var> {
        let (frames, dim) = (g.value(x_a).rows(), g.value(x_a).cols());
        if g.shape(x_a).len() != 2 || dim != self.config.audio_dim {
            return Err(Error::Dimension {
                op: "acoustic_frontend",
                lhs: g.shape(x_a).to_vec(),
                rhs: vec![self.config.audio_dim],
            });
        }
        if frames % 2 != 0 {
            return Err(contract(format!("audio length {frames} must be even")));
        }
        let fe = &self.layout.acoustic;
        let h = fe.fc1.forward(g, p, x_a)?;
        let h = g.gelu(h)?;
        let even: Vec<usize> = (0..frames / 2).map(|i| 2 * i).collect();
        let odd: Vec<usize> = (0..frames / 2).map(|i| 2 * i + 1).collect();
        let he = g.gather(h, &even)?;
        let ho = g.gather(h, &odd)?;
        let pair = g.concat(&[he, ho])?;
        let h = fe.fc2.forward(g, p, pair)?;
        let h = g.gelu(h)?;
        let pe = g.constant(sinusoidal_positions(frames / 2, self.config.d_model)?);
        g.add(h, pe)
    }

    /// Visual frontend (flatten + linear + positions) followed by the first
    /// `tap` visual encoder blocks. `x_v` is `(T/2) × H × W`.
    pub fn visual_features(&self, g: &mut Graph, p: &Binding, x_v: &Tensor, tap: usize) -> Result<Var> {
        Ok(*self
            .visual_activations(g, p, x_v, tap)?
            .last()
            .expect("frontend output present"))
    }

    /// Frontend output followed by the output of each of the first `tap`
    /// visual blocks.
    pub fn visual_activations(&self, g: &mut Graph, p: &Binding, x_v: &Tensor, tap: usize) -> Result<Vec<Var>> {
        let enc = self
            .layout
            .visual
            .as_ref()
            .ok_or_else(|| contract("audio-only model has no visual encoder"))?;
        if tap > enc.blocks.len() {
            return Err(contract(format!(
                "visual tap {tap} out of range 0..={}",
                enc.blocks.len()
            )));
        }
        let pixels = self.config.frame_h * self.config.frame_w;
        let frames = x_v.len() / pixels;
        if x_v.shape().len() != 3 || x_v.shape()[1] * x_v.shape()[2] != pixels {
            return Err(Error::Dimension {
                op: "visual_frontend",
                lhs: x_v.shape().to_vec(),
                rhs: vec![self.config.frame_h, self.config.frame_w],
            });
        }
        let x = g.constant(x_v.reshape(vec![frames, pixels])?);
        let h = enc.frontend.forward(g, p, x)?;
        let pe = g.constant(sinusoidal_positions(frames, self.config.d_visual)?);
        let mut h = g.add(h, pe)?;
        let mut acts = vec![h];
        for block in &enc.blocks[..tap] {
            h = block.forward(g, p, h)?;
            acts.push(h);
        }
        Ok(acts)
    }

    /// Audio encoder on `audio_f` fused with `v_v` (when present).
    pub fn encoder_fuse(&self, g: &mut Graph, p: &Binding, audio_f: Var, v_v: Option<Var>) -> Result<Var> {
        let mut x = audio_f;
        if let Some(v) = v_v {
            if g.value(v).rows() != g.value(audio_f).rows() {
                return Err(contract(format!(
                    "visual length {} does not match acoustic length {}; check the upsampling factor",
                    g.value(v).rows(),
                    g.value(audio_f).rows()
                )));
            }
            x = match self.layout.concat_fc {
                None => g.add(audio_f, v)?,
                Some(fc) => {
                    let cat = g.concat(&[audio_f, v])?;
                    fc.forward(g, p, cat)?
                }
            };
        }
        for block in &self.layout.audio_blocks {
            x = block.forward(g, p, x)?;
        }
        self.layout.audio_ln_post.forward(g, p, x)
    }

    /// Runs both encoders and the fusion steps.
    pub fn encode(&self, g: &mut Graph, p: &Binding, x_a: &Tensor, x_v: Option<&Tensor>) -> Result<Encoded> {
        let xa = g.constant(x_a.clone());
        let audio_f = self.acoustic_frontend(g, p, xa)?;

        let h_v = if self.kind().is_audiovisual() {
            let x_v = x_v.ok_or_else(|| contract("audiovisual model needs video input"))?;
            Some(self.visual_features(g, p, x_v, self.variant.visual_tap_block)?)
        } else {
            None
        };

        let v_v = match (&self.layout.pathway, h_v) {
            (Some(pw), Some(h)) => {
                let up = upsample_repeat(g, h, pw.upsample_factor)?;
                Some(project_scale(g, p, up, pw)?)
            }
            _ => None,
        };
        let h_av = self.encoder_fuse(g, p, audio_f, v_v)?;

        let visual = match (&self.layout.adapter_proj, h_v) {
            (Some(proj), Some(h)) => Some(proj.forward(g, p, h)?),
            _ => None,
        };
        Ok(Encoded { h_av, visual })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Vocabulary {
                token: t,
                vocab: self.config.vocab,
            });
        }
        if tokens.len() > self.config.max_len {
            return Err(contract(format!(
                "decoder input of {} tokens exceeds max length {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder pass; returns `L × vocab` logits.
    pub fn decode(&self, g: &mut Graph, p: &Binding, enc: &Encoded, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(contract("decoder input is empty"));
        }
        let emb = g.gather(p.get(self.layout.embed), tokens)?;
        let pe = g.constant(sinusoidal_positions(tokens.len(), self.config.d_model)?);
        let mut y = g.add(emb, pe)?;
        for layer in &self.layout.decoder {
            y = match layer {
                DecoderLayer::Adapter(a) => {
                    let v = enc.visual.ok_or_else(|| contract("adapter without visual features"))?;
                    a.forward(g, p, y, KvSource::Rows(v))?
                }
                DecoderLayer::Block(blk) => blk.forward(g, p, y, KvSource::Rows(enc.h_av))?,
            };
        }
        let y = self.layout.ln_final.forward(g, p, y)?;
        self.layout.head.forward(g, p, y)
    }

    /// Teacher-forced logits for `prefix` (which must begin with BOS).
    pub fn forward_logits(&self, x_a: &Tensor, x_v: Option<&Tensor>, prefix: &[usize]) -> Result<Tensor> {
        if prefix.first() != Some(&BOS) {
            return Err(contract("decoder prefix must begin with BOS"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, x_a, x_v)?;
        let logits = self.decode(&mut g, &p, &enc, prefix)?;
        Ok(g.value(logits).clone())
    }

    /// Mean next-token cross-entropy for one utterance under teacher forcing.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Binding,
        x_a: &Tensor,
        x_v: Option<&Tensor>,
        tokens: &[usize],
    ) -> Result<Var> {
        let (input, target) = teacher_forcing_pair(tokens);
        let enc = self.encode(g, p, x_a, x_v)?;
        let logits = self.decode(g, p, &enc, &input)?;
        g.cross_entropy(logits, &target, Some(PAD))
    }

    /// Encodes once and precomputes every cross-attention key/value.
    pub fn prepare_decoding(&self, x_a: &Tensor, x_v: Option<&Tensor>) -> Result<DecoderMemory> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, x_a, x_v)?;
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            layers.push(match layer {
                DecoderLayer::Adapter(a) => {
                    let v = enc.visual.ok_or_else(|| contract("adapter without visual features"))?;
                    a.cross_attn.project_kv(&mut g, &p, v)?
                }
                DecoderLayer::Block(b) => b.cross_attn.project_kv(&mut g, &p, enc.h_av)?,
            });
        }
        Ok(DecoderMemory { layers })
    }

    pub fn start_decoding(&self) -> DecoderState {
        DecoderState {
            caches: vec![SelfKvCache::default(); self.layout.decoder.len()],
            position: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position,
    /// reusing cached keys/values of all earlier positions.
    pub fn decode_step(&self, mem: &DecoderMemory, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.check_tokens(&[token])?;
        if state.position >= self.config.max_len {
            return Err(contract("decoder state is at max length"));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let emb = g.gather(p.get(self.layout.embed), &[token])?;
        let pe = g.constant(positions_from(state.position, 1, self.config.d_model)?);
        let mut y = g.add(emb, pe)?;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            y = match layer {
                DecoderLayer::Adapter(a) => a.forward(&mut g, &p, y, KvSource::Cached(&mem.layers[i]))?,
                DecoderLayer::Block(b) => b.forward_cached(&mut g, &p, y, &mut state.caches[i], &mem.layers[i])?,
            };
        }
        let y = self.layout.ln_final.forward(&mut g, &p, y)?;
        let logits = self.layout.head.forward(&mut g, &p, y)?;
        state.position += 1;
        Ok(g.value(logits).data().to_vec())
    }
}

/// Decoder input `[BOS, t_1..t_n]` and target `[t_1..t_n, EOS]`.
pub fn teacher_forcing_pair(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(EOS);
    (input, target)
}
