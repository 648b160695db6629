//! Cosine similarities against the class prototypes, temperature-scaled
//! two-way softmax, and the binary cross-entropy objective.

use std::fmt;

use crate::encoders::ImageEmbedding;
use crate::error::{Error, Result};
use crate::linalg;
use crate::text_pipeline::Prototypes;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const LOG_CLAMP_EPS: f64 = 1e-12;

/// Default temperature, the reciprocal of CLIP's logit scale of 100.
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::Validation(format!(
                "label must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityPair {
    pub s_real: f64,
    pub s_fake: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityPair {
    pub p_real: f64,
    pub p_fake: f64,
}

impl ProbabilityPair {
    pub fn predicted(&self) -> Label {
        if self.p_fake >= 0.5 {
            Label::Fake
        } else {
            Label::Real
        }
    }

    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::Real => self.p_real,
            Label::Fake => self.p_fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub tau: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

impl ClassifierConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Validation(format!(
                "classifier.tau must be > 0, got {tau}"
            )));
        }
        Ok(Self { tau })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine with a zero-norm vector".into()));
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn similarities(x: &ImageEmbedding, protos: &Prototypes) -> Result<SimilarityPair> {
    Ok(SimilarityPair {
        s_real: cosine(&x.vector, &protos.g_real.vector)?,
        s_fake: cosine(&x.vector, &protos.g_fake.vector)?,
    })
}

/// Two-way softmax of `s / tau`, evaluated through the logit difference so
/// that tiny temperatures cannot overflow.
pub fn predict_proba(s: SimilarityPair, cfg: &ClassifierConfig) -> ProbabilityPair {
    let d = (s.s_fake - s.s_real) / cfg.tau;
    // e = exp(-|d|) <= 1; the larger class gets 1/(1+e), the other e/(1+e)
    let e = (-d.abs()).exp();
    let big = 1.0 / (1.0 + e);
    let small = e / (1.0 + e);
    if d >= 0.0 {
        ProbabilityPair {
            p_real: small,
            p_fake: big,
        }
    } else {
        ProbabilityPair {
            p_real: big,
            p_fake: small,
        }
    }
}

/// Per-sample cross-entropy and its derivative with respect to the logit
/// difference `(s_fake - s_real) / tau`. The derivative is zero where the
/// active probability is clamped.
pub fn sample_loss(p: &ProbabilityPair, y: Label) -> (f64, f64) {
    let target = p.of(y);
    let clamped = target.clamp(LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS);
    let loss = -clamped.ln();
    let grad = if clamped != target {
        0.0
    } else {
        match y {
            Label::Fake => -p.p_real,
            Label::Real => p.p_fake,
        }
    };
    (loss, grad)
}

/// Batch-mean binary cross-entropy.
pub fn bce_loss(p: &[ProbabilityPair], y: &[Label]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Contract(format!(
            "{} probabilities but {} labels",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let total: f64 = p.iter().zip(y).map(|(p, &y)| sample_loss(p, y).0).sum();
    Ok(total / p.len() as f64)
}
