mod common;

use common::*;
use promptforge::kgp::{objective, objective_loss};
use promptforge::text_pipeline::prototypes_backward;
use promptforge::{
    build_prompts, compute_prototypes, default_bank, make_toy_pair, ClassifierConfig,
    LabeledEmbedding, PromptContext, TokenSequence,
};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn with_values(ctx: &PromptContext, values: &[f64]) -> PromptContext {
    PromptContext::from_rows(ctx.n(), ctx.width(), values.to_vec()).unwrap()
}

#[test]
fn text_encoder_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let pair = make_toy_pair(seed, 16, 512).unwrap();
        let n = 1 + seed as usize % 3;
        let ctx = random_context(&mut r, n, pair.token_width(), 0.02);
        let tokens = TokenSequence::new(pair.tokenize("blurred unnatural skin"), n).unwrap();
        let upstream = gaussian(&mut r, pair.dim(), 1.0);

        let analytic = pair.text_backward(&ctx, &tokens, &upstream).unwrap();
        let numeric = central_difference(ctx.as_slice(), STEP, |v| {
            let e = pair.encode_text(&with_values(&ctx, v), &tokens).unwrap();
            e.vector.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn prototype_backward_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let pair = make_toy_pair(seed, 16, 512).unwrap();
        let prompts = build_prompts(&default_bank(), 2, &pair).unwrap();
        let ctx = random_context(&mut r, 2, pair.token_width(), 0.02);
        let d_real = gaussian(&mut r, pair.dim(), 1.0);
        let d_fake = gaussian(&mut r, pair.dim(), 1.0);

        let analytic = prototypes_backward(&pair, &ctx, &prompts, &d_real, &d_fake).unwrap();
        let numeric = central_difference(ctx.as_slice(), STEP, |v| {
            let p = compute_prototypes(&pair, &with_values(&ctx, v), &prompts).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&p.g_real.vector, &d_real) + dot(&p.g_fake.vector, &d_fake)
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cls = ClassifierConfig::default();
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let pair = make_toy_pair(seed, 16, 512).unwrap();
        let n = 1 + seed as usize % 2;
        let prompts = build_prompts(&default_bank(), n, &pair).unwrap();
        let ctx = random_context(&mut r, n, pair.token_width(), 0.02);
        let data = random_batch(&mut r, 12, pair.dim());
        let batch: Vec<&LabeledEmbedding> = data.iter().collect();

        let (_, analytic) = objective(&pair, &ctx, &prompts, &batch, &cls).unwrap();
        let numeric = central_difference(ctx.as_slice(), STEP, |v| {
            objective_loss(&pair, &with_values(&ctx, v), &prompts, &batch, &cls).unwrap()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}
