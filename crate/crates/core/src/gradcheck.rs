//! Finite-difference checks over every primitive op and the fusion
//! parameters of a full model. Used by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Graph, Mask, Var};
use crate::data::{generate_corpus, CorpusConfig};
use crate::error::Result;
use crate::fusion::{build_model, Model, ModelConfig, ModelVariant, VariantKind};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    MatMul,
    Add,
    AddRow,
    AddScalar,
    Mul,
    MulScalar,
    Scale,
    Concat,
    Slice,
    Transpose,
    Softmax,
    MaskedSoftmax,
    LayerNorm,
    Gelu,
    Tanh,
    Gather,
    CrossEntropy,
    Sum,
    Mean,
}

impl Op {
    pub const ALL: [Op; 19] = [
        Op::MatMul,
        Op::Add,
        Op::AddRow,
        Op::AddScalar,
        Op::Mul,
        Op::MulScalar,
        Op::Scale,
        Op::Concat,
        Op::Slice,
        Op::Transpose,
        Op::Softmax,
        Op::MaskedSoftmax,
        Op::LayerNorm,
        Op::Gelu,
        Op::Tanh,
        Op::Gather,
        Op::CrossEntropy,
        Op::Sum,
        Op::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row_broadcast",
            Op::AddScalar => "add_scalar_broadcast",
            Op::Mul => "mul",
            Op::MulScalar => "mul_scalar_broadcast",
            Op::Scale => "scale",
            Op::Concat => "concat",
            Op::Slice => "slice",
            Op::Transpose => "transpose",
            Op::Softmax => "softmax",
            Op::MaskedSoftmax => "softmax_causal",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Gather => "gather",
            Op::CrossEntropy => "cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape matches data")
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element carries gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_case(op: Op, m: usize, n: usize, seed: u64) -> (Vec<Tensor>, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| random(rng, &[r, c]);
    macro_rules! unary {
        ($inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            (
                $inputs,
                Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let y = $body?;
                    weighted_sum($g, y, seed)
                }) as Loss,
            )
        };
    }
    match op {
        Op::MatMul => unary!(vec![mat(&mut rng, m, n), mat(&mut rng, n, 3)], |g, v| g
            .matmul(v[0], v[1])),
        Op::Add => unary!(vec![mat(&mut rng, m, n), mat(&mut rng, m, n)], |g, v| g.add(v[0], v[1])),
        Op::AddRow => unary!(vec![mat(&mut rng, m, n), random(&mut rng, &[n])], |g, v| g
            .add(v[0], v[1])),
        Op::AddScalar => unary!(vec![mat(&mut rng, m, n), random(&mut rng, &[1])], |g, v| g
            .add(v[0], v[1])),
        Op::Mul => unary!(vec![mat(&mut rng, m, n), mat(&mut rng, m, n)], |g, v| g.mul(v[0], v[1])),
        Op::MulScalar => unary!(vec![random(&mut rng, &[1]), mat(&mut rng, m, n)], |g, v| g
            .mul(v[0], v[1])),
        Op::Scale => unary!(vec![mat(&mut rng, m, n)], |g, v| g.scale(v[0], -0.7)),
        Op::Concat => unary!(vec![mat(&mut rng, m, n), mat(&mut rng, m, 2)], |g, v| g
            .concat(&[v[0], v[1]])),
        Op::Slice => unary!(vec![mat(&mut rng, m, n + 2)], |g, v| g.slice(v[0], 1, n)),
        Op::Transpose => unary!(vec![mat(&mut rng, m, n)], |g, v| g.transpose(v[0])),
        Op::Softmax => unary!(vec![mat(&mut rng, m, n)], |g, v| g.softmax(v[0], None)),
        Op::MaskedSoftmax => unary!(vec![mat(&mut rng, m, n)], |g, v| g
            .softmax(v[0], Some(Mask::Causal { offset: 0 }))),
        Op::LayerNorm => unary!(
            vec![
                mat(&mut rng, m, n + 2),
                random(&mut rng, &[n + 2]),
                random(&mut rng, &[n + 2])
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)
        ),
        Op::Gelu => unary!(vec![mat(&mut rng, m, n)], |g, v| g.gelu(v[0])),
        Op::Tanh => unary!(vec![mat(&mut rng, m, n)], |g, v| g.tanh(v[0])),
        Op::Gather => {
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..m)).collect();
            unary!(vec![mat(&mut rng, m, n)], |g, v| g.gather(v[0], &ids))
        }
        Op::CrossEntropy => {
            let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            (
                vec![mat(&mut rng, m, n)],
                Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &targets, None)),
            )
        }
        Op::Sum => (
            vec![mat(&mut rng, m, n)],
            Box::new(|g: &mut Graph, v: &[Var]| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            }),
        ),
        Op::Mean => (
            vec![mat(&mut rng, m, n)],
            Box::new(|g: &mut Graph, v: &[Var]| {
                let t = g.tanh(v[0])?;
                g.mean(t)
            }),
        ),
    }
}

/// Worst relative error of `op` over `instances` random shapes and values.
pub fn check_op(op: Op, instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.gen_range(1..4);
        let n = rng.gen_range(1..5);
        let (inputs, f) = op_case(op, m, n, rng.gen());
        worst = worst.max(grad_check(f, &inputs, STEP)?);
    }
    Ok(CheckResult {
        name: op.name().to_string(),
        max_rel_err: worst,
        tolerance: OP_TOLERANCE,
    })
}

pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Op::ALL.iter().map(|&op| check_op(op, instances, seed)).collect()
}

/// Relative error of the single-utterance loss gradient with respect to
/// the named parameters.
pub fn model_param_check(model: &Model, seed: u64, names: &[&str]) -> Result<f64> {
    let cfg = CorpusConfig {
        vocab: model.config.vocab,
        audio_dim: model.config.audio_dim,
        frame_h: model.config.frame_h,
        frame_w: model.config.frame_w,
        n_train: 1,
        n_dev: 0,
        n_test: 0,
        seed,
        ..CorpusConfig::default()
    };
    let u = generate_corpus(&cfg)?.train.remove(0);
    let ids = names
        .iter()
        .map(|n| {
            model
                .params
                .id(n)
                .ok_or_else(|| crate::error::contract(format!("no parameter named {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Tensor> = ids.iter().map(|&id| model.params.get(id).clone()).collect();
    let x_v = model.kind().is_audiovisual().then_some(&u.video);
    grad_check(
        |g, xs| {
            let mut p = model.params.bind(g, false);
            for (&id, &x) in ids.iter().zip(xs) {
                p.replace(id, x);
            }
            model.loss(g, &p, &u.audio, x_v, &u.tokens)
        },
        &inputs,
        STEP,
    )
}

/// End-to-end checks on a dual-use model for α, every adapter gate and the
/// visual projection, at initialisation and with those scalars moved off
/// zero.
pub fn fusion_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckResult>> {
    let mut model = build_model(ModelVariant::standard(VariantKind::DualUse, cfg), cfg, seed)?;
    let mut scalars = vec!["fusion.alpha".to_string()];
    for i in 0..cfg.n_dec {
        scalars.push(format!("dec.adapter.{i}.gate_attn"));
        scalars.push(format!("dec.adapter.{i}.gate_ffn"));
    }
    let mut out = Vec::new();
    for (label, moved) in [("init", false), ("moved", true)] {
        if moved {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for name in &scalars {
                model.set_param(name, Tensor::scalar(rng.gen_range(-0.5..0.5)))?;
            }
        }
        for name in scalars.iter().map(String::as_str).chain(["fusion.proj.w"]) {
            out.push(CheckResult {
                name: format!("{name}@{label}"),
                max_rel_err: model_param_check(&model, seed, &[name])?,
                tolerance: MODEL_TOLERANCE,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_short_suite() {
        for r in op_suite(5, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn passing_is_strictly_below_tolerance() {
        let r = |e| CheckResult {
            name: "x".into(),
            max_rel_err: e,
            tolerance: OP_TOLERANCE,
        };
        assert!(r(0.0).passed());
        assert!(!r(OP_TOLERANCE).passed());
        assert!(!r(f64::NAN).passed());
    }
}
