//! Seeded two-cluster benchmark with a train/test domain shift, generated
//! directly in the image encoder's input feature space.
//!
//! Training data: real and fake Gaussian clusters `separation` apart along a
//! random direction. Test data: the same real cluster, with the fake mean
//! moved a fraction `shift` of the way toward the real mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::Label;
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::kgp::LabeledEmbedding;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftBenchmarkConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub shift: f64,
}

impl Default for ShiftBenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_per_class: 512,
            test_per_class: 512,
            separation: 3.0,
            noise: 0.25,
            shift: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub train: Vec<LabeledEmbedding>,
    pub test: Vec<LabeledEmbedding>,
}

pub fn generate(pair: &EncoderPair, cfg: &ShiftBenchmarkConfig) -> Result<SyntheticSplit> {
    if !(0.0..=1.0).contains(&cfg.shift) {
        return Err(Error::Validation(format!(
            "shift must lie in [0, 1], got {}",
            cfg.shift
        )));
    }
    let dim = pair.image_encoder().feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.noise)
        .map_err(|e| Error::Validation(format!("invalid noise {}: {e}", cfg.noise)))?;

    let real_mean: Vec<f64> = (0..dim)
        .map(|_| 0.5 + 0.15 * unit.sample(&mut rng))
        .collect();
    let raw: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
    let direction = linalg::normalized(&raw).expect("random direction is non-zero");
    let offset = |frac: f64| -> Vec<f64> {
        real_mean
            .iter()
            .zip(&direction)
            .map(|(m, d)| m + frac * cfg.separation * d)
            .collect()
    };
    let train_fake_mean = offset(1.0);
    let test_fake_mean = offset(1.0 - cfg.shift);

    let mut draw =
        |split: &str, label: Label, mean: &[f64], count: usize| -> Result<Vec<LabeledEmbedding>> {
            let class = if label.is_fake() { "fake" } else { "real" };
            (0..count)
                .map(|i| {
                    let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
                    let id = format!("{split}/{class}/{i:05}");
                    Ok(LabeledEmbedding {
                        embedding: pair.encode_features(&x, &id)?.quantized(),
                        label,
                    })
                })
                .collect()
        };
    let mut train = draw("train", Label::Real, &real_mean, cfg.train_per_class)?;
    train.extend(draw(
        "train",
        Label::Fake,
        &train_fake_mean,
        cfg.train_per_class,
    )?);
    let mut test = draw("test", Label::Real, &real_mean, cfg.test_per_class)?;
    test.extend(draw(
        "test",
        Label::Fake,
        &test_fake_mean,
        cfg.test_per_class,
    )?);
    Ok(SyntheticSplit { train, test })
}
