#![allow(dead_code)]

use promptforge::encoders::ImageEmbedding;
use promptforge::linalg;
use promptforge::{Label, LabeledEmbedding, PromptContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

pub fn unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    linalg::normalized(&gaussian(rng, len, 1.0)).expect("gaussian draw is non-zero")
}

pub fn labeled(id: &str, vector: Vec<f64>, label: Label) -> LabeledEmbedding {
    LabeledEmbedding {
        embedding: ImageEmbedding {
            sample_id: id.to_string(),
            vector,
            normalized: true,
        },
        label,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<LabeledEmbedding> {
    (0..n)
        .map(|i| {
            let label = if rng.random_bool(0.5) {
                Label::Fake
            } else {
                Label::Real
            };
            labeled(&format!("s{i:04}"), unit(rng, dim), label)
        })
        .collect()
}

pub fn random_context(rng: &mut ChaCha8Rng, n: usize, width: usize, std: f64) -> PromptContext {
    PromptContext::from_rows(n, width, gaussian(rng, n * width, std)).unwrap()
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = linalg::norm(a).max(linalg::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        linalg::norm(&diff) / scale
    }
}
