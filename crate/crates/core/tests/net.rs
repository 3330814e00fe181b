//! Network contracts: shapes, fusion invariances, tag checks, init behaviour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsicl::error::Error;
use wsicl::nn::{ModelConfig, ModelState, Tensor};
use wsicl::prompt::{simulate_prompts, PromptSpec};
use wsicl::synth::{generate_sample, TaskFamily};
use wsicl::volume::{dice, ContextSet, Mask3D, PromptChannel, PromptType, Shape3, Volume3D};

fn model(shape: [usize; 3], levels: usize, base: usize) -> ModelState<f32> {
    let config = ModelConfig { levels, base_channels: base, input_shape: shape, ..ModelConfig::default() };
    ModelState::init(config, 3).unwrap()
}

fn context(shape: Shape3, l: usize, seed: u64) -> (ContextSet<f32>, Vec<(Volume3D<f32>, Mask3D)>) {
    let fam = TaskFamily::random(seed, 24, shape);
    let samples: Vec<_> = (0..l + 2).map(|i| generate_sample(&fam, i).unwrap()).collect();
    let pairs = samples[..l]
        .iter()
        .enumerate()
        .map(|(i, (x, y))| (x.clone(), simulate_prompts(y, &PromptSpec::new(PromptType::Box, 2, seed + i as u64)).unwrap()))
        .collect();
    (ContextSet::new(pairs, PromptType::Box).unwrap(), samples[l..].to_vec())
}

fn max_rel(a: &[f32], b: &[f32]) -> f64 {
    let scale = a.iter().chain(b).fold(0f64, |m, v| m.max(v.abs() as f64)).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max) / scale
}

fn feats_rel(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| max_rel(&x.data, &y.data)).fold(0.0, f64::max)
}

#[test]
fn level_extents_halve() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, _) = context(Shape3::cube(16).unwrap(), 1, 1);
    let (x, u) = &ctx.pairs()[0];
    let feats = state.encode_context_pair(x, u).unwrap();
    assert_eq!(feats.len(), 3);
    for (k, f) in feats.iter().enumerate() {
        assert_eq!(f.dims, [16 >> k; 3]);
        assert_eq!(f.channels, 2 << k);
    }
}

#[test]
fn prediction_shape_matches_input_across_configs() {
    for (shape, levels, base) in [([8, 8, 8], 1, 2), ([8, 16, 8], 2, 2), ([16, 8, 24], 3, 3), ([16, 16, 16], 3, 4), ([8, 8, 16], 4, 1)] {
        let state = model(shape, levels, base);
        let (ctx, targets) = context(Shape3(shape), 2, 4);
        let pred = state.forward_icl(&targets[0].0, &ctx).unwrap();
        assert_eq!(pred.shape().0, shape);
        assert!(pred.scores.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn mismatched_shapes_rejected() {
    let state = model([16, 16, 16], 3, 2);
    let x = Volume3D::<f32>::zeros(Shape3::cube(8).unwrap());
    let u = PromptChannel::zeros(Shape3::cube(8).unwrap());
    assert!(matches!(state.encode_context_pair(&x, &u), Err(Error::ShapeMismatch { .. })));
    let bad = ModelConfig { levels: 3, input_shape: [10, 16, 16], ..ModelConfig::default() };
    assert!(matches!(ModelState::<f32>::init(bad, 0), Err(Error::InvalidConfig { .. })));
}

#[test]
fn zero_input_gives_zero_features_at_init() {
    let state = model([16, 16, 16], 3, 4);
    let shape = Shape3::cube(16).unwrap();
    let feats = state.encode_context_pair(&Volume3D::zeros(shape), &PromptChannel::zeros(shape)).unwrap();
    assert!(feats.iter().all(|f| f.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn different_prompts_give_different_features() {
    let state = model([16, 16, 16], 3, 4);
    let (ctx, _) = context(Shape3::cube(16).unwrap(), 1, 7);
    let (x, u) = &ctx.pairs()[0];
    let a = state.encode_context_pair(x, u).unwrap();
    let b = state.encode_context_pair(x, &PromptChannel::zeros(x.shape())).unwrap();
    let diff: f64 = a.iter().zip(&b).map(|(p, q)| {
        p.data.iter().zip(&q.data).map(|(s, t)| ((s - t) as f64).powi(2)).sum::<f64>()
    }).sum();
    assert!(diff.sqrt() > 1e-3 * a[0].norm());
}

#[test]
fn single_pair_fusion_is_that_pair() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, _) = context(Shape3::cube(16).unwrap(), 1, 2);
    let (x, u) = &ctx.pairs()[0];
    assert_eq!(state.fuse_context(&ctx).unwrap(), state.encode_context_pair(x, u).unwrap());
}

#[test]
fn duplicated_pair_fuses_to_itself() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, _) = context(Shape3::cube(16).unwrap(), 1, 2);
    let pair = ctx.pairs()[0].clone();
    let twice = ContextSet::new(vec![pair.clone(), pair.clone()], PromptType::Box).unwrap();
    let single = state.encode_context_pair(&pair.0, &pair.1).unwrap();
    assert!(feats_rel(&state.fuse_context(&twice).unwrap(), &single) <= 1e-6);
}

#[test]
fn fusion_independent_of_minibatch_size() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, targets) = context(Shape3::cube(16).unwrap(), 8, 5);
    let reference = state.fuse_context_with(&ctx, 1).unwrap();
    let pred_ref = state.predict_fused(&targets[0].0, &reference).unwrap();
    for m in [2, 3, 4, 8, 100] {
        let fused = state.fuse_context_with(&ctx, m).unwrap();
        assert!(feats_rel(&fused, &reference) <= 1e-5, "m={m}");
        let pred = state.predict_fused(&targets[0].0, &fused).unwrap();
        assert!(max_rel(pred.scores.data(), pred_ref.scores.data()) <= 1e-5, "m={m}");
    }
}

#[test]
fn prediction_invariant_to_context_order() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, targets) = context(Shape3::cube(16).unwrap(), 6, 8);
    let base = state.forward_icl(&targets[0].0, &ctx).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..4 {
        let mut order: Vec<usize> = (0..ctx.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let pred = state.forward_icl(&targets[0].0, &ctx.permuted(&order)).unwrap();
        assert!(max_rel(pred.scores.data(), base.scores.data()) <= 1e-5);
    }
}

#[test]
fn prompt_type_mismatch_rejected() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, targets) = context(Shape3::cube(16).unwrap(), 2, 1);
    let points = ContextSet::new(ctx.pairs().to_vec(), PromptType::Point).unwrap();
    assert!(matches!(state.forward_icl(&targets[0].0, &points), Err(Error::PromptTypeMismatch { .. })));
}

#[test]
fn inference_is_deterministic() {
    let state = model([16, 16, 16], 3, 2);
    let (ctx, targets) = context(Shape3::cube(16).unwrap(), 3, 6);
    let a = state.forward_icl(&targets[0].0, &ctx).unwrap();
    let b = state.forward_icl(&targets[0].0, &ctx).unwrap();
    assert_eq!(a, b);
}

// An untrained network should do no better than a constant predictor.
#[test]
fn untrained_model_matches_constant_baseline() {
    let shape = Shape3::cube(16).unwrap();
    let (mut ours, mut constant) = (Vec::new(), Vec::new());
    for task in 0..20u64 {
        let state = model([16, 16, 16], 3, 2);
        let (ctx, targets) = context(shape, 2, 100 + task);
        let (x, y) = &targets[0];
        let pred = state.forward_icl(x, &ctx).unwrap();
        ours.push(dice(&pred.binarize(), y).unwrap());
        // constant score at the network's mean output, same threshold
        let mean = pred.scores.data().iter().map(|&v| v as f64).sum::<f64>() / shape.len() as f64;
        let flat = Volume3D::filled(shape, mean as f32).threshold(pred.threshold);
        constant.push(dice(&flat, y).unwrap());
    }
    let diffs: Vec<f64> = ours.iter().zip(&constant).map(|(a, b)| a - b).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean.abs() <= 3.0 * se + 0.02, "mean diff {mean}, se {se}");
}
