//! Frozen text and image encoder contracts, plus a deterministic toy pair for
//! desk-scale runs.
//!
//! Only the prompt context is trainable. Text encoders therefore expose a
//! vector-Jacobian product with respect to the context, while image encoders
//! are forward-only.

use std::fmt;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::text_pipeline::PromptContext;

/// Spatial size every image is resized to before encoding.
pub const INPUT_SIZE: u32 = 224;

/// Token layout of one prompt: `context_slots` learnable positions followed by
/// the class-word token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    context_slots: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, context_slots: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract(
                "a prompt needs at least one class-word token after the context".into(),
            ));
        }
        Ok(Self { ids, context_slots })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn context_slots(&self) -> usize {
        self.context_slots
    }

    /// Total positions, context included.
    pub fn len(&self) -> usize {
        self.context_slots + self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub sample_id: String,
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl ImageEmbedding {
    /// Rounds every component through `f32`, the precision the embedding
    /// cache stores.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.vector {
            *v = f64::from(*v as f32);
        }
        self
    }
}

/// SHA-256 digest of every encoder parameter.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Frozen text encoder `G`.
pub trait TextEncoder: Send + Sync {
    /// Output embedding dimension.
    fn dim(&self) -> usize;

    /// Width of token embeddings, and therefore of each context vector.
    fn token_width(&self) -> usize;

    fn tokenize(&self, text: &str) -> Vec<u32>;

    /// Unit-normalized embedding of `context` followed by `tokens`.
    fn encode(&self, context: &PromptContext, tokens: &TokenSequence) -> Result<Vec<f64>>;

    /// Gradient of `<upstream, encode(context, tokens)>` with respect to the
    /// context, laid out like [`PromptContext::as_slice`].
    fn backward(
        &self,
        context: &PromptContext,
        tokens: &TokenSequence,
        upstream: &[f64],
    ) -> Result<Vec<f64>>;

    fn fingerprint(&self) -> [u8; 32];
}

/// Frozen image encoder `F`, split into fixed preprocessing of a 224x224
/// image into an input feature vector, and the embedding of that vector.
pub trait ImageEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn feature_dim(&self) -> usize;

    fn features(&self, image: &RgbImage) -> Vec<f64>;

    /// Unnormalized embedding of an input feature vector.
    fn embed(&self, features: &[f64]) -> Vec<f64>;

    fn fingerprint(&self) -> [u8; 32];
}

pub struct EncoderPair {
    text: Box<dyn TextEncoder>,
    image: Box<dyn ImageEncoder>,
}

impl fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderPair")
            .field("dim", &self.dim())
            .field("token_width", &self.token_width())
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl EncoderPair {
    pub fn new(text: Box<dyn TextEncoder>, image: Box<dyn ImageEncoder>) -> Result<Self> {
        if text.dim() != image.dim() {
            return Err(Error::Contract(format!(
                "text encoder dim {} differs from image encoder dim {}",
                text.dim(),
                image.dim()
            )));
        }
        Ok(Self { text, image })
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn token_width(&self) -> usize {
        self.text.token_width()
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }

    pub fn image_encoder(&self) -> &dyn ImageEncoder {
        self.image.as_ref()
    }

    /// Digest over both encoders' parameters, recomputed on every call.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update(self.text.fingerprint());
        h.update(self.image.fingerprint());
        Fingerprint(h.finalize().into())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.text.tokenize(text)
    }

    pub fn encode_text(
        &self,
        context: &PromptContext,
        tokens: &TokenSequence,
    ) -> Result<TextEmbedding> {
        check_context(self.text.as_ref(), context, tokens)?;
        Ok(TextEmbedding {
            vector: self.text.encode(context, tokens)?,
            normalized: true,
        })
    }

    /// Gradient of `<upstream, encode_text(context, tokens)>` w.r.t. the context.
    pub fn text_backward(
        &self,
        context: &PromptContext,
        tokens: &TokenSequence,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        check_context(self.text.as_ref(), context, tokens)?;
        if upstream.len() != self.dim() {
            return Err(Error::Contract(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.dim()
            )));
        }
        self.text.backward(context, tokens, upstream)
    }

    /// Resizes to 224x224 (bilinear), encodes and normalizes.
    pub fn encode_image(&self, image: &DynamicImage, sample_id: &str) -> Result<ImageEmbedding> {
        let resized = preprocess(image);
        self.encode_features(&self.image.features(&resized), sample_id)
    }

    /// Encodes a vector that already lives in the image encoder's input
    /// feature space.
    pub fn encode_features(&self, features: &[f64], sample_id: &str) -> Result<ImageEmbedding> {
        if features.len() != self.image.feature_dim() {
            return Err(Error::Contract(format!(
                "feature vector has length {}, expected {}",
                features.len(),
                self.image.feature_dim()
            )));
        }
        let raw = self.image.embed(features);
        if raw.len() != self.dim() {
            return Err(Error::Contract(format!(
                "image encoder produced dim {}, expected {}",
                raw.len(),
                self.dim()
            )));
        }
        let vector = linalg::normalized(&raw).ok_or_else(|| Error::Data {
            sample_id: sample_id.to_string(),
            message: "image embedding has zero norm".into(),
        })?;
        Ok(ImageEmbedding {
            sample_id: sample_id.to_string(),
            vector,
            normalized: true,
        })
    }

    pub fn encode_image_file(&self, path: &Path, sample_id: &str) -> Result<ImageEmbedding> {
        let image = decode_image(path, sample_id)?;
        self.encode_image(&image, sample_id)
    }
}

fn check_context(
    text: &dyn TextEncoder,
    context: &PromptContext,
    tokens: &TokenSequence,
) -> Result<()> {
    if context.n() != tokens.context_slots() {
        return Err(Error::Contract(format!(
            "prompt reserves {} context slots but the context has {} vectors",
            tokens.context_slots(),
            context.n()
        )));
    }
    if context.width() != text.token_width() {
        return Err(Error::Contract(format!(
            "context width {} does not match token width {}",
            context.width(),
            text.token_width()
        )));
    }
    Ok(())
}

pub fn decode_image(path: &Path, sample_id: &str) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Data {
        sample_id: sample_id.to_string(),
        message: e.to_string(),
    })
}

/// Bilinear resize to the fixed 224x224 encoder input.
pub fn preprocess(image: &DynamicImage) -> RgbImage {
    let rgb = image.to_rgb8();
    if rgb.dimensions() == (INPUT_SIZE, INPUT_SIZE) {
        return rgb;
    }
    image::imageops::resize(&rgb, INPUT_SIZE, INPUT_SIZE, FilterType::Triangle)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn digest_params(tag: &str, shape: &[usize], blocks: &[&[f64]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    for &s in shape {
        h.update((s as u64).to_le_bytes());
    }
    for block in blocks {
        for v in *block {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Standard deviation of toy token embeddings; matches the scale of the
/// default context initialization.
pub const TOY_TOKEN_STD: f64 = 0.02;

/// Token-embedding table, mean pooling over all positions, a fixed linear
/// projection and normalization.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    vocab: usize,
    width: usize,
    dim: usize,
    token_table: Vec<f64>,
    projection: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn new(seed: u64, dim: usize, vocab: usize) -> Result<Self> {
        if dim < 2 || vocab < 2 {
            return Err(Error::Contract(format!(
                "toy text encoder needs dim >= 2 and vocab >= 2 (got dim {dim}, vocab {vocab})"
            )));
        }
        let width = dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let token_table = gaussian_vec(&mut rng, vocab * width, TOY_TOKEN_STD);
        let projection = gaussian_vec(&mut rng, dim * width, 1.0 / (width as f64).sqrt());
        Ok(Self {
            vocab,
            width,
            dim,
            token_table,
            projection,
        })
    }

    fn pooled(&self, context: &PromptContext, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.width];
        for row in context.rows() {
            for (a, b) in h.iter_mut().zip(row) {
                *a += b;
            }
        }
        for &id in tokens.ids() {
            let id = id as usize;
            if id >= self.vocab {
                return Err(Error::Contract(format!(
                    "token id {id} outside vocab {}",
                    self.vocab
                )));
            }
            for (a, b) in h
                .iter_mut()
                .zip(&self.token_table[id * self.width..(id + 1) * self.width])
            {
                *a += b;
            }
        }
        let len = tokens.len() as f64;
        h.iter_mut().for_each(|v| *v /= len);
        Ok(h)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn token_width(&self) -> usize {
        self.width
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|word| {
                let digest = Sha256::digest(word.to_lowercase().as_bytes());
                let mut head = [0u8; 8];
                head.copy_from_slice(&digest[..8]);
                (u64::from_le_bytes(head) % self.vocab as u64) as u32
            })
            .collect()
    }

    fn encode(&self, context: &PromptContext, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let z = linalg::matvec(
            &self.projection,
            self.dim,
            self.width,
            &self.pooled(context, tokens)?,
        );
        linalg::normalized(&z).ok_or_else(|| Error::Contract("text embedding has zero norm".into()))
    }

    fn backward(
        &self,
        context: &PromptContext,
        tokens: &TokenSequence,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        let z = linalg::matvec(
            &self.projection,
            self.dim,
            self.width,
            &self.pooled(context, tokens)?,
        );
        let z_norm = linalg::norm(&z);
        let unit = linalg::normalized(&z)
            .ok_or_else(|| Error::Contract("text embedding has zero norm".into()))?;
        let dz = linalg::normalize_backward(&unit, z_norm, upstream);
        let dh = linalg::matvec_t(&self.projection, self.dim, self.width, &dz);
        // every context position enters the mean with weight 1/len
        let scale = 1.0 / tokens.len() as f64;
        let row: Vec<f64> = dh.iter().map(|g| g * scale).collect();
        Ok(row.repeat(context.n()))
    }

    fn fingerprint(&self) -> [u8; 32] {
        digest_params(
            "toy-text-v1",
            &[self.vocab, self.width, self.dim],
            &[&self.token_table, &self.projection],
        )
    }
}

/// Pooling grid of the toy image encoder; 224 / 7 = 32-pixel blocks.
pub const TOY_POOL_GRID: usize = 7;

/// Block-average pooling to a 7x7x3 grid followed by a fixed affine map.
/// Both stages are linear in the pixels, so the whole encoder is a fixed
/// linear map plus bias.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyImageEncoder {
    pub const FEATURE_DIM: usize = TOY_POOL_GRID * TOY_POOL_GRID * 3;

    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Contract(format!(
                "toy image encoder needs dim >= 2 (got {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let weights = gaussian_vec(
            &mut rng,
            dim * Self::FEATURE_DIM,
            1.0 / (Self::FEATURE_DIM as f64).sqrt(),
        );
        let bias = gaussian_vec(&mut rng, dim, 1.0);
        Ok(Self { dim, weights, bias })
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn feature_dim(&self) -> usize {
        Self::FEATURE_DIM
    }

    fn features(&self, image: &RgbImage) -> Vec<f64> {
        let (w, h) = image.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut sums = vec![0.0; Self::FEATURE_DIM];
        let mut counts = vec![0usize; TOY_POOL_GRID * TOY_POOL_GRID];
        for (x, y, px) in image.enumerate_pixels() {
            let gx = x as usize * TOY_POOL_GRID / w;
            let gy = y as usize * TOY_POOL_GRID / h;
            let cell = gy * TOY_POOL_GRID + gx;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += f64::from(px[c]) / 255.0;
            }
        }
        for (i, s) in sums.iter_mut().enumerate() {
            *s /= counts[i / 3].max(1) as f64;
        }
        sums
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        let mut out = linalg::matvec(&self.weights, self.dim, Self::FEATURE_DIM, features);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    fn fingerprint(&self) -> [u8; 32] {
        digest_params(
            "toy-image-v1",
            &[self.dim, Self::FEATURE_DIM],
            &[&self.weights, &self.bias],
        )
    }
}

/// Deterministic toy encoder pair; every parameter derives from `seed`.
pub fn make_toy_pair(seed: u64, dim: usize, vocab: usize) -> Result<EncoderPair> {
    EncoderPair::new(
        Box::new(ToyTextEncoder::new(seed, dim, vocab)?),
        Box::new(ToyImageEncoder::new(seed, dim)?),
    )
}
