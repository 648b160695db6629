mod common;

use common::*;
use promptforge::kgp::objective;
use promptforge::linalg;
use promptforge::{
    build_prompts, default_bank, init_context, make_toy_pair, train, ClassifierConfig, KgpTrainer,
    Label, LabeledEmbedding, TrainConfig,
};

/// Two tight clusters around random antipodal-ish directions.
fn separable(seed: u64, dim: usize, per_class: usize) -> Vec<LabeledEmbedding> {
    let mut r = rng(seed);
    let a = unit(&mut r, dim);
    let b = unit(&mut r, dim);
    let mut out = Vec::new();
    for i in 0..per_class {
        for (center, label, tag) in [(&a, Label::Real, "r"), (&b, Label::Fake, "f")] {
            let noisy: Vec<f64> = center
                .iter()
                .zip(gaussian(&mut r, dim, 0.05))
                .map(|(c, n)| c + n)
                .collect();
            out.push(labeled(
                &format!("{tag}{i:03}"),
                linalg::normalized(&noisy).unwrap(),
                label,
            ));
        }
    }
    out
}

#[test]
fn separable_batch_loss_falls_below_a_tenth() {
    let pair = make_toy_pair(0, 32, 4096).unwrap();
    let prompts = build_prompts(&default_bank(), 1, &pair).unwrap();
    let mut ctx = init_context(0, 1, pair.token_width(), 0.02).unwrap();
    let data = separable(0, pair.dim(), 8);
    let batch: Vec<&LabeledEmbedding> = data.iter().collect();
    let mut trainer = KgpTrainer::new(&pair, &prompts, &ctx, 1e-3, ClassifierConfig::default());
    let first = trainer.step(&mut ctx, &batch).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = trainer.step(&mut ctx, &batch).unwrap();
    }
    let (final_loss, _) =
        objective(&pair, &ctx, &prompts, &batch, &ClassifierConfig::default()).unwrap();
    println!("initial {first}, step 199 {last}, final {final_loss}");
    assert!(
        final_loss < 0.1,
        "final loss {final_loss} (started at {first})"
    );
    assert!(final_loss < first);
}

#[test]
fn first_step_moves_downhill() {
    let cls = ClassifierConfig::default();
    for seed in 0..50 {
        let mut r = rng(seed);
        let pair = make_toy_pair(seed, 16, 512).unwrap();
        let prompts = build_prompts(&default_bank(), 1, &pair).unwrap();
        let mut ctx = random_context(&mut r, 1, pair.token_width(), 0.02);
        let sample = random_batch(&mut r, 1, pair.dim());
        let batch: Vec<&LabeledEmbedding> = sample.iter().collect();
        let (_, grad) = objective(&pair, &ctx, &prompts, &batch, &cls).unwrap();
        if linalg::norm(&grad) == 0.0 {
            continue;
        }
        let before = ctx.as_slice().to_vec();
        KgpTrainer::new(&pair, &prompts, &ctx, 1e-4, cls)
            .step(&mut ctx, &batch)
            .unwrap();
        let delta: Vec<f64> = ctx
            .as_slice()
            .iter()
            .zip(&before)
            .map(|(a, b)| a - b)
            .collect();
        let projection: f64 = delta.iter().zip(&grad).map(|(d, g)| -d * g).sum();
        assert!(projection > 0.0, "seed {seed}: projection {projection}");
    }
}

#[test]
fn trajectory_is_bit_reproducible_and_finite() {
    let pair = make_toy_pair(3, 16, 512).unwrap();
    let prompts = build_prompts(&default_bank(), 1, &pair).unwrap();
    let data = separable(3, pair.dim(), 20);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let cls = ClassifierConfig::default();
    let run = || {
        let ctx = init_context(7, 1, pair.token_width(), 0.02).unwrap();
        train(&pair, &prompts, ctx, &data, &cfg, &cls, None).unwrap()
    };
    let (ctx_a, rep_a) = run();
    let (ctx_b, rep_b) = run();
    assert_eq!(ctx_a.to_bytes(), ctx_b.to_bytes());
    assert_eq!(rep_a.log_text(), rep_b.log_text());
    assert_eq!(rep_a.epoch_losses.len(), 2);
    assert!(rep_a.steps.iter().all(|s| s.loss.is_finite()));
    assert_eq!(rep_a.fingerprint_before, rep_a.fingerprint_after);
}

#[test]
fn checkpoint_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.ckpt");
    let pair = make_toy_pair(1, 8, 128).unwrap();
    let prompts = build_prompts(&default_bank(), 2, &pair).unwrap();
    let data = separable(1, pair.dim(), 4);
    let ctx = init_context(0, 2, pair.token_width(), 0.02).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let (trained, report) = train(
        &pair,
        &prompts,
        ctx,
        &data,
        &cfg,
        &ClassifierConfig::default(),
        Some(&path),
    )
    .unwrap();
    assert_eq!(report.checkpoint.as_deref(), Some(path.as_path()));
    assert_eq!(promptforge::PromptContext::load(&path).unwrap(), trained);
}
