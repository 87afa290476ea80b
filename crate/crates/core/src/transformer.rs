//! Pre-norm transformer building blocks: multi-head attention, encoder and
//! decoder blocks, sinusoidal positions and the decoder key/value cache.

use crate::autograd::{Graph, Mask, Var};
use crate::error::{contract, Result};
use crate::params::{Binding, Builder, ParamId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(contract(format!("positional encoding needs an even width, got {d}")));
    }
    if len == 0 {
        return Err(contract("positional encoding needs at least one position"));
    }
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t as f64 / freq;
            data[t * d + 2 * i] = angle.sin();
            data[t * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Rows `offset..offset + len` of the sinusoidal table.
pub fn positions_from(offset: usize, len: usize, d: usize) -> Result<Tensor> {
    let full = sinusoidal_positions(offset + len, d)?;
    Tensor::new(vec![len, d], full.data()[offset * d..].to_vec())
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{prefix}.gamma"), &[d]),
            beta: b.zeros(&format!("{prefix}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            w: b.weight(&format!("{prefix}.w"), fan_in, fan_out),
            b: bias.then(|| b.zeros(&format!("{prefix}.b"), &[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// Projection weights of one multi-head attention layer (no biases).
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d: usize,
    pub n_heads: usize,
}

/// Keys and values already projected for every memory position.
#[derive(Clone, Debug)]
pub struct ProjectedKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Growing self-attention cache of one decoder layer.
#[derive(Clone, Debug, Default)]
pub struct SelfKvCache {
    pub k: Option<Tensor>,
    pub v: Option<Tensor>,
}

impl SelfKvCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) -> Result<()> {
        self.k = Some(match &self.k {
            Some(old) => old.vstack(k)?,
            None => k.clone(),
        });
        self.v = Some(match &self.v {
            Some(old) => old.vstack(v)?,
            None => v.clone(),
        });
        Ok(())
    }
}

/// Where the keys/values of an attention call come from.
pub enum KvSource<'a> {
    /// Project these rows inside the graph.
    Rows(Var),
    /// Reuse projections computed earlier.
    Cached(&'a ProjectedKv),
}

impl AttnParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(contract(format!("{n_heads} heads do not divide width {d}")));
        }
        Ok(Self {
            w_q: b.weight(&format!("{prefix}.w_q"), d, d),
            w_k: b.weight(&format!("{prefix}.w_k"), d, d),
            w_v: b.weight(&format!("{prefix}.w_v"), d, d),
            w_o: b.weight(&format!("{prefix}.w_o"), d, d),
            d,
            n_heads,
        })
    }

    /// Projects memory rows to keys and values once, for reuse across
    /// decoding steps.
    pub fn project_kv(&self, g: &mut Graph, p: &Binding, memory: Var) -> Result<ProjectedKv> {
        let k = g.matmul(memory, p.get(self.w_k))?;
        let v = g.matmul(memory, p.get(self.w_v))?;
        Ok(ProjectedKv {
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        })
    }

    /// Scaled dot-product attention per head, heads concatenated and
    /// projected by `W_o`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, q_in: Var, kv: KvSource<'_>, mask: Option<Mask>) -> Result<Var> {
        let (k, v) = match kv {
            KvSource::Rows(rows) => (g.matmul(rows, p.get(self.w_k))?, g.matmul(rows, p.get(self.w_v))?),
            KvSource::Cached(c) => (g.constant(c.k.clone()), g.constant(c.v.clone())),
        };
        let q = g.matmul(q_in, p.get(self.w_q))?;
        let ctx = self.attend(g, q, k, v, mask)?;
        g.matmul(ctx, p.get(self.w_o))
    }

    /// Core attention on already projected `q`, `k`, `v` (before `W_o`).
    pub fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Mask>) -> Result<Var> {
        let dh = self.d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice(q, h * dh, dh)?;
            let kh = g.slice(k, h * dh, dh)?;
            let vh = g.slice(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, mask.clone())?;
            heads.push(g.matmul(weights, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat(&heads)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub up: Linear,
    pub down: Linear,
}

impl FfnParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            up: Linear::new(b, &format!("{prefix}.up"), d, mult * d, true),
            down: Linear::new(b, &format!("{prefix}.down"), mult * d, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, p, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttnParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

impl EncoderBlockParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize, n_heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNormParams::new(b, &format!("{prefix}.ln_attn"), d),
            attn: AttnParams::new(b, &format!("{prefix}.attn"), d, n_heads)?,
            ln_ffn: LayerNormParams::new(b, &format!("{prefix}.ln_ffn"), d),
            ffn: FfnParams::new(b, &format!("{prefix}.ffn"), d, mult),
        })
    }

    /// `x + SelfAttn(LN(x))`, then `+ FFN(LN(·))`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, KvSource::Rows(h), None)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlockParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttnParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttnParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

impl DecoderBlockParams {
    pub fn new(b: &mut Builder<'_>, prefix: &str, d: usize, n_heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNormParams::new(b, &format!("{prefix}.ln_self"), d),
            self_attn: AttnParams::new(b, &format!("{prefix}.self_attn"), d, n_heads)?,
            ln_cross: LayerNormParams::new(b, &format!("{prefix}.ln_cross"), d),
            cross_attn: AttnParams::new(b, &format!("{prefix}.cross_attn"), d, n_heads)?,
            ln_ffn: LayerNormParams::new(b, &format!("{prefix}.ln_ffn"), d),
            ffn: FfnParams::new(b, &format!("{prefix}.ffn"), d, mult),
        })
    }

    /// Full (teacher-forced) pass over all positions of `y`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, y: Var, memory: KvSource<'_>) -> Result<Var> {
        let h = self.ln_self.forward(g, p, y)?;
        let a = self
            .self_attn
            .forward(g, p, h, KvSource::Rows(h), Some(Mask::Causal { offset: 0 }))?;
        self.finish(g, p, y, a, memory)
    }

    /// Incremental pass: `y` holds only the new positions; their keys and
    /// values are appended to `cache` and attention runs over the whole
    /// cached prefix.
    pub fn forward_cached(
        &self,
        g: &mut Graph,
        p: &Binding,
        y: Var,
        cache: &mut SelfKvCache,
        memory: &ProjectedKv,
    ) -> Result<Var> {
        let offset = cache.len();
        let h = self.ln_self.forward(g, p, y)?;
        let k_new = g.matmul(h, p.get(self.self_attn.w_k))?;
        let v_new = g.matmul(h, p.get(self.self_attn.w_v))?;
        cache.append(g.value(k_new), g.value(v_new))?;
        let k = g.constant(cache.k.clone().expect("just appended"));
        let v = g.constant(cache.v.clone().expect("just appended"));
        let q = g.matmul(h, p.get(self.self_attn.w_q))?;
        let ctx = self.self_attn.attend(g, q, k, v, Some(Mask::Causal { offset }))?;
        let a = g.matmul(ctx, p.get(self.self_attn.w_o))?;
        self.finish(g, p, y, a, KvSource::Cached(memory))
    }

    fn finish(&self, g: &mut Graph, p: &Binding, y: Var, self_out: Var, memory: KvSource<'_>) -> Result<Var> {
        let y = g.add(y, self_out)?;
        let h = self.ln_cross.forward(g, p, y)?;
        let c = self.cross_attn.forward(g, p, h, memory, None)?;
        let y = g.add(y, c)?;
        let h = self.ln_ffn.forward(g, p, y)?;
        let f = self.ffn.forward(g, p, h)?;
        g.add(y, f)
    }
}
