//! Prompt construction, the learnable prompt context, and class prototypes.
//!
//! Every prompt is `[P_1] .. [P_N] [word tokens]`; the `N` context vectors are
//! shared between the real prompt and all fake-concept prompts.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::concept_bank::ConceptBank;
use crate::encoders::{EncoderPair, TextEmbedding, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg;

/// Default standard deviation of context initialization.
pub const DEFAULT_INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 6] = b"PFCTX1";

/// `n` learnable vectors of length `width`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    n: usize,
    width: usize,
    data: Vec<f64>,
}

impl PromptContext {
    pub fn from_rows(n: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "prompt context needs n >= 1 and width >= 1 (got n {n}, width {width})"
            )));
        }
        if data.len() != n * width {
            return Err(Error::Contract(format!(
                "context data has {} values, expected {}",
                data.len(),
                n * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "context contains non-finite values".into(),
            ));
        }
        Ok(Self { n, width, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers; callers must keep values finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 16 + self.data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 6 + 16;
        if bytes.len() < header || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a context checkpoint".into()));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let width = u64::from_le_bytes(bytes[14..22].try_into().expect("8 bytes")) as usize;
        let expected = n
            .checked_mul(width)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(header));
        if expected != Some(bytes.len()) {
            return Err(Error::Integrity(format!(
                "checkpoint size {} does not match header n={n}, width={width}",
                bytes.len()
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_rows(n, width, data).map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Draws every entry from N(0, std^2) with a generator seeded by `seed`.
pub fn init_context(seed: u64, n: usize, width: usize, std: f64) -> Result<PromptContext> {
    let normal = Normal::new(0.0, std)
        .map_err(|e| Error::Contract(format!("invalid init std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * width).map(|_| normal.sample(&mut rng)).collect();
    PromptContext::from_rows(n, width, data)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub real_prompt: TokenSequence,
    pub fake_prompts: Vec<TokenSequence>,
}

impl PromptSet {
    pub fn context_slots(&self) -> usize {
        self.real_prompt.context_slots()
    }

    pub fn len(&self) -> usize {
        1 + self.fake_prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One real prompt plus one prompt per fake concept, all with `n` context slots.
pub fn build_prompts(bank: &ConceptBank, n: usize, pair: &EncoderPair) -> Result<PromptSet> {
    if n == 0 {
        return Err(Error::Validation(
            "number of context vectors must be >= 1".into(),
        ));
    }
    if bank.fake_concepts().is_empty() {
        return Err(Error::Validation("concept bank is empty".into()));
    }
    let seq = |text: &str| {
        TokenSequence::new(pair.tokenize(text), n)
            .map_err(|_| Error::Validation(format!("concept `{text}` produced no tokens")))
    };
    Ok(PromptSet {
        real_prompt: seq(bank.real_word().text())?,
        fake_prompts: bank
            .fake_concepts()
            .iter()
            .map(|c| seq(c.text()))
            .collect::<Result<_>>()?,
    })
}

/// Class prototypes; both unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub g_real: TextEmbedding,
    pub g_fake: TextEmbedding,
}

/// Arithmetic mean of equally sized vectors.
pub fn mean_embedding(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Contract("mean of zero embeddings".into()))?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != mean.len() {
            return Err(Error::Contract("embeddings differ in dimension".into()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let k = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

fn fake_mean(pair: &EncoderPair, context: &PromptContext, prompts: &PromptSet) -> Result<Vec<f64>> {
    let encoded = prompts
        .fake_prompts
        .iter()
        .map(|p| pair.encode_text(context, p).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    mean_embedding(&encoded)
}

/// `g_real` encodes the real prompt; `g_fake` is the mean of the fake-prompt
/// embeddings, re-normalized to unit length.
pub fn compute_prototypes(
    pair: &EncoderPair,
    context: &PromptContext,
    prompts: &PromptSet,
) -> Result<Prototypes> {
    if prompts.fake_prompts.is_empty() {
        return Err(Error::Validation("prompt set has no fake prompts".into()));
    }
    let g_real = pair.encode_text(context, &prompts.real_prompt)?;
    let mean = fake_mean(pair, context, prompts)?;
    let g_fake = linalg::normalized(&mean)
        .ok_or_else(|| Error::Contract("fake prompt embeddings cancel to zero".into()))?;
    Ok(Prototypes {
        g_real,
        g_fake: TextEmbedding {
            vector: g_fake,
            normalized: true,
        },
    })
}

/// Gradient w.r.t. the context of a scalar whose gradients w.r.t. the two
/// prototypes are `d_real` and `d_fake`.
pub fn prototypes_backward(
    pair: &EncoderPair,
    context: &PromptContext,
    prompts: &PromptSet,
    d_real: &[f64],
    d_fake: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = pair.text_backward(context, &prompts.real_prompt, d_real)?;

    let mean = fake_mean(pair, context, prompts)?;
    let mean_norm = linalg::norm(&mean);
    let g_fake = linalg::normalized(&mean)
        .ok_or_else(|| Error::Contract("fake prompt embeddings cancel to zero".into()))?;
    let k = prompts.fake_prompts.len() as f64;
    let d_each: Vec<f64> = linalg::normalize_backward(&g_fake, mean_norm, d_fake)
        .into_iter()
        .map(|g| g / k)
        .collect();
    for p in &prompts.fake_prompts {
        let part = pair.text_backward(context, p, &d_each)?;
        for (g, v) in grad.iter_mut().zip(part) {
            *g += v;
        }
    }
    Ok(grad)
}
