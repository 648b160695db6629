mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use promptforge::classifier::SimilarityPair;
use promptforge::encoders::ImageEmbedding;
use promptforge::metrics::auc_scores;
use promptforge::ttp::Scored;
use promptforge::{
    build_prompts, compute_prototypes, make_toy_pair, predict_proba, select_pseudo,
    ClassifierConfig, Concept, ConceptBank, ConceptSource, EmbeddingCache, Label, PromptContext,
    SelectionConfig,
};

const WORDS: [&str; 8] = [
    "fake",
    "blurred",
    "unnatural",
    "inconsistent",
    "unrealistic",
    "warped",
    "smooth",
    "noisy",
];

fn bank(words: &[&str]) -> ConceptBank {
    let concepts = words
        .iter()
        .map(|w| Concept::new(w, ConceptSource::File).unwrap())
        .collect();
    ConceptBank::new(
        concepts,
        Concept::new("real", ConceptSource::Default).unwrap(),
        None,
    )
    .unwrap()
}

fn scored(p_real: &[f64]) -> Vec<Scored> {
    p_real
        .iter()
        .enumerate()
        .map(|(i, &p)| Scored {
            sample_id: format!("id{i:04}"),
            probs: promptforge::ProbabilityPair {
                p_real: p,
                p_fake: 1.0 - p,
            },
        })
        .collect()
}

fn selection() -> impl Strategy<Value = SelectionConfig> {
    (0.01f64..0.99, 0.0f64..1.0, 1usize..64).prop_map(|(t_real, u, top_k)| {
        // t_fake drawn from [1 - t_real, 1)
        let lo = 1.0 - t_real;
        SelectionConfig {
            t_real,
            t_fake: (lo + u * (1.0 - lo)).min(0.999_999),
            top_k,
        }
    })
}

/// Probabilities drawn from a coarse grid half the time so ties are common.
fn probability() -> impl Strategy<Value = f64> {
    prop_oneof![0.0f64..=1.0, (0u32..=20).prop_map(|k| f64::from(k) / 20.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn probabilities_sum_to_one(s_real in -1.0f64..=1.0, s_fake in -1.0f64..=1.0, tau in 0.01f64..2.0) {
        let p = predict_proba(SimilarityPair { s_real, s_fake }, &ClassifierConfig { tau });
        prop_assert!((p.p_real + p.p_fake - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&p.p_real) && (0.0..=1.0).contains(&p.p_fake));
    }

    #[test]
    fn p_real_orders_like_the_similarity_gap(
        a in (-1.0f64..=1.0, -1.0f64..=1.0),
        b in (-1.0f64..=1.0, -1.0f64..=1.0),
        tau in 0.01f64..1.0,
    ) {
        let cls = ClassifierConfig { tau };
        let pa = predict_proba(SimilarityPair { s_real: a.0, s_fake: a.1 }, &cls).p_real;
        let pb = predict_proba(SimilarityPair { s_real: b.0, s_fake: b.1 }, &cls).p_real;
        if a.0 - a.1 > b.0 - b.1 {
            prop_assert!(pa >= pb);
        }
    }

    #[test]
    fn selected_sets_are_disjoint_and_capped(ps in prop::collection::vec(probability(), 1..300), cfg in selection()) {
        let out = select_pseudo(&scored(&ps), &cfg).unwrap();
        prop_assert!(out.real_ids.len() <= cfg.top_k && out.fake_ids.len() <= cfg.top_k);
        let real: HashSet<&String> = out.real_ids.iter().collect();
        prop_assert!(out.fake_ids.iter().all(|id| !real.contains(id)));
        for id in &out.real_ids {
            prop_assert!(out.confidences[id] > cfg.t_real);
        }
        for id in &out.fake_ids {
            prop_assert!(out.confidences[id] > cfg.t_fake);
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling(pairs in prop::collection::vec((probability(), any::<bool>()), 2..200)) {
        let labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Fake } else { Label::Real }).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let halved: Vec<f64> = scores.iter().map(|s| s * 0.5).collect();
        match auc_scores(&labels, &scores) {
            Ok(a) => prop_assert_eq!(a, auc_scores(&labels, &halved).unwrap()),
            Err(_) => prop_assert!(auc_scores(&labels, &halved).is_err()),
        }
    }

    #[test]
    fn auc_flips_with_reversed_scores(pairs in prop::collection::vec((probability(), any::<bool>()), 2..200)) {
        let labels: Vec<Label> = pairs.iter().map(|p| if p.1 { Label::Fake } else { Label::Real }).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let reversed: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        if let Ok(a) = auc_scores(&labels, &scores) {
            // 1 - s can merge or split ties only through rounding, which the grid values avoid
            if scores.iter().all(|s| (s * 20.0).fract() == 0.0) {
                prop_assert!((a + auc_scores(&labels, &reversed).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cache_round_trip_is_bit_exact(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..20), digest in any::<[u8; 32]>()) {
        let embeddings: Vec<ImageEmbedding> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| promptforge::linalg::normalized(r).map(|v| (i, v)))
            .map(|(i, vector)| ImageEmbedding { sample_id: format!("img/{i}"), vector, normalized: true }.quantized())
            .filter(|e| (promptforge::linalg::norm(&e.vector) - 1.0).abs() <= 1e-6)
            .collect();
        prop_assume!(!embeddings.is_empty());
        let cache = EmbeddingCache::from_embeddings(embeddings.clone(), digest).unwrap();
        let back = EmbeddingCache::from_bytes(&cache.to_bytes()).unwrap();
        prop_assert_eq!(back.digest(), digest);
        for e in &embeddings {
            let got = back.get(&e.sample_id).unwrap();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&got.vector), bits(&e.vector));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(n in 1usize..4, width in 1usize..8, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let ctx = common::random_context(&mut r, n, width, 1.0);
        let back = PromptContext::from_bytes(&ctx.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ctx.to_bytes());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fake_prototype_ignores_concept_order(seed in any::<u64>(), perm in Just(WORDS.to_vec()).prop_shuffle()) {
        let pair = make_toy_pair(seed % 8, 8, 256).unwrap();
        let mut r = common::rng(seed);
        let ctx = common::random_context(&mut r, 1, pair.token_width(), 0.02);
        let a = compute_prototypes(&pair, &ctx, &build_prompts(&bank(&WORDS), 1, &pair).unwrap()).unwrap();
        let b = compute_prototypes(&pair, &ctx, &build_prompts(&bank(&perm), 1, &pair).unwrap()).unwrap();
        prop_assert_eq!(&a.g_real.vector, &b.g_real.vector);
        for (x, y) in a.g_fake.vector.iter().zip(&b.g_fake.vector) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_leaves_encoders_untouched(seed in any::<u64>()) {
        let pair = make_toy_pair(seed % 16, 8, 128).unwrap();
        let before = pair.fingerprint();
        let prompts = build_prompts(&bank(&WORDS[..3]), 1, &pair).unwrap();
        let mut r = common::rng(seed);
        let data = common::random_batch(&mut r, 6, pair.dim());
        let ctx = common::random_context(&mut r, 1, pair.token_width(), 0.02);
        let cfg = promptforge::TrainConfig { epochs: 1, batch_size: 3, learning_rate: 1e-2, seed };
        let (_, report) = promptforge::train(&pair, &prompts, ctx, &data, &cfg, &ClassifierConfig::default(), None).unwrap();
        prop_assert_eq!(report.fingerprint_before, before);
        prop_assert_eq!(report.fingerprint_after, before);
        prop_assert_eq!(pair.fingerprint(), before);
    }
}
