use dualfuse_core::autograd::Graph;
use dualfuse_core::data::{generate_corpus, CorpusConfig, Utterance};
use dualfuse_core::decode::{
    beam_search, greedy, normalized_score, sequence_log_prob, CachedScorer, FullScorer, StepScorer,
};
use dualfuse_core::fusion::{build_model, Model, ModelConfig, ModelVariant, VariantKind, BOS, EOS};
use dualfuse_core::noise::{NoiseBank, NoisePool};
use dualfuse_core::train::{init_from_stage1, lr_at, train, LrSchedule, Stage, TrainConfig};
use dualfuse_core::wer::{edit_distance, wer, WerCounts};
use dualfuse_core::{Error, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn utterances(n: usize, seed: u64) -> Vec<Utterance> {
    let cfg = CorpusConfig {
        n_train: n,
        n_dev: 0,
        n_test: 0,
        seed,
        ..CorpusConfig::default()
    };
    generate_corpus(&cfg).unwrap().train
}

fn model(kind: VariantKind, seed: u64) -> Model {
    let cfg = ModelConfig::default();
    build_model(ModelVariant::standard(kind, &cfg), &cfg, seed).unwrap()
}

/// Minimum edits by trying every edit script.
fn brute_force(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let sub = brute_force(rr, hh) + usize::from(a != b);
            let del = brute_force(rr, h) + 1;
            let ins = brute_force(r, hh) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn all_sequences(max_len: usize, vocab: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for w in 0..vocab {
                let mut t: Vec<u8> = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn wer_equals_brute_force_on_every_short_pair() {
    let seqs = all_sequences(5, 3);
    assert_eq!(seqs.len(), 364);
    for r in &seqs {
        for h in &seqs {
            let d = brute_force(r, h);
            assert_eq!(edit_distance(r, h), d, "{r:?} {h:?}");
            if !r.is_empty() {
                assert_eq!(wer(r, h).unwrap(), d as f64 / r.len() as f64);
            }
        }
    }
}

proptest! {
    #[test]
    fn pooled_wer_ignores_utterance_order(pairs in prop::collection::vec(
        (prop::collection::vec(0u8..4, 1..6), prop::collection::vec(0u8..4, 0..6)), 1..12), seed in any::<u64>()) {
        let mut counts = WerCounts::default();
        for (r, h) in &pairs {
            counts.add(r, h).unwrap();
        }
        let mut shuffled = pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let mut again = WerCounts::default();
        for (r, h) in &shuffled {
            again.add(r, h).unwrap();
        }
        prop_assert_eq!(counts.rate().unwrap(), again.rate().unwrap());
    }

    #[test]
    fn lr_is_continuous_and_piecewise_linear(warmup in 1usize..200, extra in 1usize..500, peak in 1e-6f64..1.0) {
        let s = LrSchedule { warmup_steps: warmup, total_steps: warmup + extra, peak_lr: peak };
        let lr = |t| lr_at(t, &s).unwrap();
        prop_assert_eq!(lr(warmup), peak);
        prop_assert_eq!(lr(warmup + extra), 0.0);
        for t in 1..warmup + extra {
            // adjacent steps never jump by more than one slope unit
            let slope = peak / warmup.min(extra) as f64;
            prop_assert!((lr(t) - lr(t - 1)).abs() <= slope * (1.0 + 1e-12));
        }
        for t in 1..warmup {
            let second = lr(t + 1) - 2.0 * lr(t) + lr(t - 1);
            prop_assert!(second.abs() < 1e-12 * peak.max(1.0));
        }
        for t in warmup + 1..warmup + extra {
            let second = lr(t + 1) - 2.0 * lr(t) + lr(t - 1);
            prop_assert!(second.abs() < 1e-12 * peak.max(1.0));
        }
    }
}

#[test]
fn lr_midpoints_interpolate() {
    let s = LrSchedule {
        warmup_steps: 100,
        total_steps: 2000,
        peak_lr: 1e-3,
    };
    assert_eq!(lr_at(100, &s).unwrap(), 1e-3);
    assert_eq!(lr_at(2000, &s).unwrap(), 0.0);
    assert!((lr_at(50, &s).unwrap() - 5e-4).abs() < 1e-15);
    assert!((lr_at(1050, &s).unwrap() - 5e-4).abs() < 1e-15);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let flat = g.constant(Tensor::zeros(&[3, 32]));
    let l = g.cross_entropy(flat, &[4, 5, 6], Some(0)).unwrap();
    assert!((g.value(l).item() - 32f64.ln()).abs() < 1e-15);

    let mut sharp = vec![0.0; 2 * 32];
    sharp[7] = 100.0;
    sharp[32 + 9] = 100.0;
    let sharp = g.constant(Tensor::new(vec![2, 32], sharp).unwrap());
    let l = g.cross_entropy(sharp, &[7, 9], Some(0)).unwrap();
    assert!(g.value(l).item() < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let targets = [1, 0, 3, 5];
    let lv = g.constant(Tensor::new(vec![4, 6], logits.clone()).unwrap());
    let l = g.cross_entropy(lv, &targets, Some(0)).unwrap();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let row = &logits[i * 6..(i + 1) * 6];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    assert!((g.value(l).item() - total / 3.0).abs() < 1e-12);

    let all_pad = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(all_pad, &[0, 0], Some(0)),
        Err(Error::Contract(_))
    ));
}

/// Next-token distribution given by a function of the prefix (BOS excluded).
struct Tree<F: Fn(&[usize]) -> Vec<f64>>(F);

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for Tree<F> {
    type State = Vec<usize>;

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, prefix: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
        if token != BOS {
            prefix.push(token);
        }
        Ok((self.0)(prefix).iter().map(|p| p.ln()).collect())
    }
}

/// Sequences of up to `max_len` steps: finished ones end with EOS.
fn enumerate<S: StepScorer>(s: &S, vocab: usize, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![Vec::<usize>::new()];
    while let Some(p) = stack.pop() {
        if p.len() < max_len {
            let lp = sequence_log_prob(s, &p, true).unwrap();
            let score = normalized_score(lp, p.len() + 1, alpha);
            if score > best.1 {
                best = (p.clone(), score);
            }
            for t in 0..vocab {
                if t != EOS {
                    let mut q = p.clone();
                    q.push(t);
                    stack.push(q);
                }
            }
        } else {
            let score = normalized_score(sequence_log_prob(s, &p, false).unwrap(), p.len(), alpha);
            if score > best.1 {
                best = (p, score);
            }
        }
    }
    best
}

#[test]
fn full_width_beam_finds_the_exhaustive_best_of_a_two_step_model() {
    const D: usize = 6;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<Vec<f64>> = (0..=D)
            .map(|_| {
                let raw: Vec<f64> = (0..D).map(|_| rng.gen_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|r| r / z).collect()
            })
            .collect();
        let scorer = Tree(move |p: &[usize]| table[p.last().map_or(D, |&t| t)].clone());
        let (best, _) = enumerate(&scorer, D, 2, 0.0);
        let got = beam_search(&scorer, D, 2, 0.0).unwrap();
        assert_eq!(got.tokens, best, "seed {seed}");
    }
}

fn distribution(pairs: &[(usize, f64)]) -> Vec<f64> {
    const D: usize = 6;
    let used: f64 = pairs.iter().map(|p| p.1).sum();
    let rest = (1.0 - used) / (D - pairs.len()) as f64;
    (0..D)
        .map(|t| pairs.iter().find(|p| p.0 == t).map_or(rest, |p| p.1))
        .collect()
}

#[test]
fn length_normalisation_can_change_the_winner() {
    // Short: [3, EOS] with p = 0.5 * 0.9. Long: [4, 5, 5, EOS] with p = 0.4 * 0.97^3.
    let scorer = Tree(|p: &[usize]| match p {
        [] => distribution(&[(3, 0.5), (4, 0.4)]),
        [3] => distribution(&[(EOS, 0.9)]),
        [4] | [4, 5] => distribution(&[(5, 0.97)]),
        [4, 5, 5] => distribution(&[(EOS, 0.97)]),
        _ => distribution(&[(EOS, 0.5)]),
    });
    let plain = beam_search(&scorer, 6, 4, 0.0).unwrap();
    let normed = beam_search(&scorer, 6, 4, 1.0).unwrap();
    assert_eq!(plain.tokens, vec![3]);
    assert_eq!(normed.tokens, vec![4, 5, 5]);
    assert_eq!(enumerate(&scorer, 6, 4, 0.0).0, plain.tokens);
    assert_eq!(enumerate(&scorer, 6, 4, 1.0).0, normed.tokens);
}

#[test]
fn eos_forcing_head_gives_empty_transcript() {
    let mut m = model(VariantKind::AudioOnly, 2);
    let mut bias = vec![0.0; 32];
    bias[EOS] = 50.0;
    m.set_param("dec.head.w", Tensor::zeros(&[32, 32])).unwrap();
    m.set_param("dec.head.b", Tensor::new(vec![32], bias).unwrap()).unwrap();
    let u = &utterances(1, 2)[0];
    let s = CachedScorer::new(&m, &u.audio, None).unwrap();
    let h = greedy(&s, 10).unwrap();
    assert!(h.tokens.is_empty() && h.finished);
}

fn lightly_trained(kind: VariantKind, data: &[Utterance]) -> Model {
    let mut m = model(kind, 5);
    let cfg = TrainConfig {
        steps: 40,
        warmup_steps: 5,
        peak_lr: 3e-3,
        augmentation: None,
        ..TrainConfig::stage1()
    };
    let cfg = TrainConfig {
        stage: if kind == VariantKind::AudioOnly {
            Stage::Stage1Audio
        } else {
            Stage::Stage2Av
        },
        ..cfg
    };
    train(&mut m, data, None, &cfg).unwrap();
    m
}

#[test]
fn beam_of_one_is_greedy_and_cache_matches_recompute() {
    let data = utterances(60, 8);
    for kind in [VariantKind::AudioOnly, VariantKind::DualUse] {
        let m = lightly_trained(kind, &data);
        for u in &data[..50] {
            let xv = m.kind().is_audiovisual().then_some(&u.video);
            let cached = CachedScorer::new(&m, &u.audio, xv).unwrap();
            let g = greedy(&cached, 24).unwrap();
            assert_eq!(beam_search(&cached, 1, 24, 0.0).unwrap(), g);
            let full = FullScorer::new(&m, &u.audio, xv);
            let gf = greedy(&full, 24).unwrap();
            assert_eq!(g.tokens, gf.tokens);
            assert_eq!(g.log_prob.to_bits(), gf.log_prob.to_bits());
        }
    }
}

#[test]
fn wider_beam_scores_at_least_greedy_on_model_outputs() {
    let data = utterances(40, 9);
    let m = lightly_trained(VariantKind::AudioOnly, &data);
    for u in &data {
        let s = CachedScorer::new(&m, &u.audio, None).unwrap();
        let g = greedy(&s, 24).unwrap();
        let b = beam_search(&s, 5, 24, 0.0).unwrap();
        assert!(
            b.normalized(0.0) >= g.normalized(0.0) - 1e-12,
            "{} < {}",
            b.log_prob,
            g.log_prob
        );
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let data = utterances(5, 1);
    let mut m = model(VariantKind::AudioOnly, 1);
    let before = m.params.clone();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::stage1()
    };
    assert!(train(&mut m, &data, None, &cfg).unwrap().is_empty());
    assert_eq!(m.params.to_bytes(), before.to_bytes());
}

#[test]
fn stage_one_requires_the_audio_only_variant() {
    let data = utterances(5, 1);
    let mut m = model(VariantKind::DualUse, 1);
    let cfg = TrainConfig {
        steps: 3,
        warmup_steps: 1,
        ..TrainConfig::stage1()
    };
    assert!(matches!(train(&mut m, &data, None, &cfg), Err(Error::Contract(_))));
}

#[test]
fn overflow_is_reported_as_divergence_with_its_step() {
    let data = utterances(5, 1);
    let mut m = model(VariantKind::AudioOnly, 1);
    m.set_param("audio.frontend.fc1.w", Tensor::full(&[26, 32], 1e200))
        .unwrap();
    let cfg = TrainConfig {
        steps: 3,
        warmup_steps: 1,
        ..TrainConfig::stage1()
    };
    match train(&mut m, &data, None, &cfg) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn stage_handoff_preserves_logits_then_one_step_departs() {
    let data = utterances(20, 3);
    let stage1 = lightly_trained(VariantKind::AudioOnly, &data);
    let cfg = ModelConfig::default();
    let mut dual = build_model(ModelVariant::standard(VariantKind::DualUse, &cfg), &cfg, 99).unwrap();
    let copied = init_from_stage1(&mut dual, &stage1).unwrap();
    assert_eq!(copied, stage1.params.len());
    for u in &data[..5] {
        let prefix: Vec<usize> = std::iter::once(BOS).chain(u.tokens.iter().copied()).collect();
        let a = stage1.forward_logits(&u.audio, None, &prefix).unwrap();
        let d = dual.forward_logits(&u.audio, Some(&u.video), &prefix).unwrap();
        assert_eq!(a, d);
    }

    let bank = NoiseBank::new(NoisePool::A, 26, 3).unwrap();
    let step = TrainConfig {
        steps: 2,
        warmup_steps: 1,
        ..TrainConfig::stage2()
    };
    train(&mut dual, &data, Some(&bank), &step).unwrap();
    assert_ne!(dual.param("fusion.alpha").unwrap().item(), 0.0);
    let u = &data[0];
    let prefix: Vec<usize> = std::iter::once(BOS).chain(u.tokens.iter().copied()).collect();
    let a = stage1.forward_logits(&u.audio, None, &prefix).unwrap();
    let d = dual.forward_logits(&u.audio, Some(&u.video), &prefix).unwrap();
    assert!(a.max_abs_diff(&d) > 0.0);
}

#[test]
fn default_stage_one_run_has_a_finite_falling_loss_trace() {
    let cfg = CorpusConfig {
        n_dev: 0,
        n_test: 0,
        ..CorpusConfig::default()
    };
    let data = generate_corpus(&cfg).unwrap().train;
    let mut m = model(VariantKind::AudioOnly, 1);
    let tc = TrainConfig::stage1();
    let trace = train(&mut m, &data, None, &tc).unwrap();
    assert_eq!(trace.len(), tc.steps);
    assert!(trace.iter().all(|r| r.loss.is_finite() && r.lr.is_finite()));
    let head: f64 = trace[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    let tail: f64 = trace[trace.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
}
