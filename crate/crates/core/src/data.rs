//! Dataset scanning, cache-time augmentation, and the persistent embedding
//! cache.
//!
//! The image encoder is frozen and carries no gradient, so every image is
//! encoded once and training reads embeddings from the cache.
//!
//! Cache file layout (little-endian):
//!
//! ```text
//! "PFEMB1" | dim: u32 | count: u64 | digest: [u8; 32]
//! count x (id_len: u32 | id: utf-8 | row: u64)
//! count x dim x f32
//! ```

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::classifier::Label;
use crate::encoders::{decode_image, EncoderPair, Fingerprint, ImageEmbedding};
use crate::error::{Error, Result};
use crate::linalg;

const CACHE_MAGIC: &[u8; 6] = b"PFEMB1";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Subset tag for images that sit directly under a class directory.
pub const DEFAULT_SUBSET: &str = "default";

/// Maps class directory names to labels. The first path component matching
/// one of the names decides the label; the components before it form the
/// subset tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelingRule {
    pub real_dirs: Vec<String>,
    pub fake_dirs: Vec<String>,
}

impl Default for LabelingRule {
    fn default() -> Self {
        Self {
            real_dirs: vec!["real".into(), "0_real".into()],
            fake_dirs: vec!["fake".into(), "1_fake".into()],
        }
    }
}

impl LabelingRule {
    fn label_of(&self, component: &str) -> Option<Label> {
        if self.real_dirs.iter().any(|d| d == component) {
            Some(Label::Real)
        } else if self.fake_dirs.iter().any(|d| d == component) {
            Some(Label::Fake)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub label: Label,
    pub subset: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub recipe_digest: Option<String>,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate sample id `{}`",
                    e.sample_id
                )));
            }
            for field in [&e.sample_id, &e.path, &e.subset] {
                if field.is_empty() || field.contains(['\t', '\n']) {
                    return Err(Error::Validation(format!(
                        "invalid manifest field {field:?}"
                    )));
                }
            }
        }
        Ok(Self {
            root,
            entries,
            recipe_digest: None,
        })
    }

    pub fn label_of(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    /// Digest over the records only, so relocating the root keeps it stable.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.records_text().as_bytes()).into()
    }

    fn records_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.sample_id, e.path, e.label, e.subset
            ));
        }
        s
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("# root = {}\n", self.root.display());
        if let Some(d) = &self.recipe_digest {
            s.push_str(&format!("# recipe = {d}\n"));
        }
        s.push_str(&self.records_text());
        s
    }

    pub fn parse(content: &str) -> Result<Self> {
        let mut root = None;
        let mut recipe = None;
        let mut entries = Vec::new();
        for (lineno, line) in content.lines().enumerate() {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once('=') {
                    match k.trim() {
                        "root" => root = Some(PathBuf::from(v.trim())),
                        "recipe" => recipe = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Validation(format!("manifest line {}: `{line}`", lineno + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                sample_id: f[0].to_string(),
                path: f[1].to_string(),
                label: f[2]
                    .parse::<u8>()
                    .map_err(|_| bad())
                    .and_then(Label::from_u8)?,
                subset: f[3].to_string(),
            });
        }
        let root =
            root.ok_or_else(|| Error::Validation("manifest lacks a `# root = ` header".into()))?;
        let mut m = Self::new(root, entries)?;
        m.recipe_digest = recipe;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    /// Files that were skipped, with the reason.
    pub skipped: Vec<String>,
}

/// Walks `root` in lexicographic order and labels every image by its class
/// directory.
pub fn scan_dataset(root: &Path, rule: &LabelingRule) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.display().to_string()));
    }
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = match item {
            Ok(i) => i,
            Err(e) => {
                skipped.push(format!("unreadable entry: {e}"));
                continue;
            }
        };
        if !item.file_type().is_file() {
            continue;
        }
        let path = item.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase);
        if !ext
            .as_deref()
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walkdir stays under root");
        let parts: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let dirs = &parts[..parts.len() - 1];
        let Some((pos, label)) = dirs
            .iter()
            .enumerate()
            .find_map(|(i, d)| rule.label_of(d).map(|l| (i, l)))
        else {
            skipped.push(format!("{}: no class directory in path", rel.display()));
            continue;
        };
        if let Err(e) = std::fs::File::open(path) {
            skipped.push(format!("{}: {e}", rel.display()));
            continue;
        }
        let rel_str = parts.join("/");
        let sample_id = match rel_str.rsplit_once('.') {
            Some((stem, _)) => stem.to_string(),
            None => rel_str.clone(),
        };
        let subset = if pos == 0 {
            DEFAULT_SUBSET.to_string()
        } else {
            dirs[..pos].join("/")
        };
        entries.push(ManifestEntry {
            sample_id,
            path: rel_str,
            label,
            subset,
        });
    }
    for s in &skipped {
        log::warn!("scan skipped {s}");
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "no labeled images under {}",
            root.display()
        )));
    }
    Ok(ScanOutcome {
        manifest: DatasetManifest::new(root.to_path_buf(), entries)?,
        skipped,
    })
}

/// Augmentations sampled per image at cache-build time.
#[derive(Debug, Clone, PartialEq)]
pub enum AugmentRecipe {
    None,
    /// Each op fires independently with its probability; applied in the
    /// order flip, blur, JPEG re-encode.
    Standard {
        p_flip: f64,
        p_blur: f64,
        blur_sigma: (f64, f64),
        p_jpeg: f64,
        jpeg_quality: (u8, u8),
    },
}

impl AugmentRecipe {
    pub fn standard() -> Self {
        AugmentRecipe::Standard {
            p_flip: 0.5,
            p_blur: 0.5,
            blur_sigma: (0.0, 3.0),
            p_jpeg: 0.5,
            jpeg_quality: (30, 100),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(AugmentRecipe::None),
            "standard" => Ok(Self::standard()),
            other => Err(Error::Validation(format!(
                "unknown augmentation recipe `{other}` (expected none or standard)"
            ))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AugmentRecipe::None => "none".into(),
            AugmentRecipe::Standard {
                p_flip,
                p_blur,
                blur_sigma,
                p_jpeg,
                jpeg_quality,
            } => format!(
                "standard-v1:flip={p_flip};blur={p_blur}@{}..{};jpeg={p_jpeg}@{}..{}",
                blur_sigma.0, blur_sigma.1, jpeg_quality.0, jpeg_quality.1
            ),
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.describe().as_bytes()))
    }

    pub fn apply(&self, image: DynamicImage, rng: &mut ChaCha8Rng) -> Result<DynamicImage> {
        let AugmentRecipe::Standard {
            p_flip,
            p_blur,
            blur_sigma,
            p_jpeg,
            jpeg_quality,
        } = self
        else {
            return Ok(image);
        };
        // draw everything up front so each op's randomness is independent of the others firing
        let flip = rng.random::<f64>() < *p_flip;
        let blur = rng.random::<f64>() < *p_blur;
        let sigma = rng.random_range(blur_sigma.0..=blur_sigma.1);
        let jpeg = rng.random::<f64>() < *p_jpeg;
        let quality = rng.random_range(jpeg_quality.0..=jpeg_quality.1);

        let mut img = DynamicImage::ImageRgb8(image.to_rgb8());
        if flip {
            img = img.fliph();
        }
        if blur && sigma > 0.0 {
            img = DynamicImage::ImageRgb8(image::imageops::blur(&img.to_rgb8(), sigma as f32));
        }
        if jpeg {
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, quality)
                .encode_image(&img.to_rgb8())
                .map_err(|e| Error::Contract(format!("jpeg re-encode failed: {e}")))?;
            img = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
                .map_err(|e| Error::Contract(format!("jpeg decode failed: {e}")))?;
        }
        Ok(img)
    }
}

/// Generator for one sample's augmentations: `seed` xor the id digest.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let d = Sha256::digest(sample_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&d[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(head))
}

pub fn cache_digest(
    manifest: &DatasetManifest,
    recipe: &AugmentRecipe,
    fingerprint: Fingerprint,
    seed: u64,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(manifest.digest());
    h.update(recipe.describe().as_bytes());
    h.update(fingerprint.0);
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheBuild {
    pub cache: EmbeddingCache,
    pub skipped: Vec<String>,
}

/// Decodes, augments, resizes and encodes every manifest entry in parallel.
/// Undecodable images are skipped with a diagnostic.
pub fn build_cache(
    manifest: &DatasetManifest,
    pair: &EncoderPair,
    recipe: &AugmentRecipe,
    seed: u64,
) -> Result<CacheBuild> {
    let results: Vec<Result<ImageEmbedding>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = decode_image(&manifest.root.join(&e.path), &e.sample_id)?;
            let mut rng = sample_rng(seed, &e.sample_id);
            let img = recipe.apply(img, &mut rng)?;
            Ok(pair.encode_image(&img, &e.sample_id)?.quantized())
        })
        .collect();
    let mut embeddings = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(e) => embeddings.push(e),
            Err(Error::Data { sample_id, message }) => {
                log::warn!("skipping `{sample_id}`: {message}");
                skipped.push(format!("{sample_id}: {message}"));
            }
            Err(e) => return Err(e),
        }
    }
    let digest = cache_digest(manifest, recipe, pair.fingerprint(), seed);
    Ok(CacheBuild {
        cache: EmbeddingCache::from_embeddings(embeddings, digest)?,
        skipped,
    })
}

/// Unit-normalized image embeddings stored at `f32` precision, addressable by
/// sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<f32>,
    digest: [u8; 32],
}

const NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingCache {
    pub fn from_embeddings(embeddings: Vec<ImageEmbedding>, digest: [u8; 32]) -> Result<Self> {
        let dim = embeddings.first().map_or(0, |e| e.vector.len());
        let mut ids = Vec::with_capacity(embeddings.len());
        let mut index = HashMap::with_capacity(embeddings.len());
        let mut rows = Vec::with_capacity(embeddings.len() * dim);
        for (i, e) in embeddings.into_iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::Contract(format!(
                    "embedding `{}` has dim {}, expected {dim}",
                    e.sample_id,
                    e.vector.len()
                )));
            }
            let stored: Vec<f32> = e.vector.iter().map(|&v| v as f32).collect();
            check_norm(&stored, &e.sample_id).map_err(Error::Contract)?;
            if index.insert(e.sample_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate sample id `{}`",
                    e.sample_id
                )));
            }
            ids.push(e.sample_id);
            rows.extend(stored);
        }
        Ok(Self {
            dim,
            ids,
            index,
            rows,
            digest,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn row(&self, i: usize) -> ImageEmbedding {
        ImageEmbedding {
            sample_id: self.ids[i].clone(),
            vector: self.rows[i * self.dim..(i + 1) * self.dim]
                .iter()
                .map(|&v| f64::from(v))
                .collect(),
            normalized: true,
        }
    }

    pub fn get(&self, sample_id: &str) -> Result<ImageEmbedding> {
        self.index
            .get(sample_id)
            .map(|&i| self.row(i))
            .ok_or_else(|| Error::NotFound(format!("sample `{sample_id}` is not in the cache")))
    }

    pub fn iter(&self) -> impl Iterator<Item = ImageEmbedding> + '_ {
        (0..self.len()).map(|i| self.row(i))
    }

    pub fn verify_digest(&self, expected: [u8; 32]) -> Result<()> {
        if self.digest != expected {
            return Err(Error::Integrity(format!(
                "cache digest {} does not match expected {}",
                hex::encode(self.digest),
                hex::encode(expected)
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.digest);
        for (row, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(row as u64).to_le_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != CACHE_MAGIC {
            return Err(Error::Integrity("not an embedding cache".into()));
        }
        let dim = u32::from_le_bytes(r.array()?) as usize;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let digest: [u8; 32] = r.array()?;
        let mut ids = vec![None; count.min(bytes.len())];
        if ids.len() != count {
            return Err(Error::Integrity("cache count exceeds file size".into()));
        }
        let mut index = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(r.array()?) as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Integrity("sample id is not UTF-8".into()))?
                .to_string();
            let row = u64::from_le_bytes(r.array()?) as usize;
            if row >= count || ids[row].is_some() {
                return Err(Error::Integrity(format!("bad row number {row} for `{id}`")));
            }
            if index.insert(id.clone(), row).is_some() {
                return Err(Error::Integrity(format!("duplicate sample id `{id}`")));
            }
            ids[row] = Some(id);
        }
        let expected = count * dim * 4;
        if bytes.len() - r.pos != expected {
            return Err(Error::Integrity(format!(
                "row block has {} bytes, expected {expected}",
                bytes.len() - r.pos
            )));
        }
        let rows: Vec<f32> = bytes[r.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let ids: Vec<String> = ids
            .into_iter()
            .map(|i| i.expect("every row indexed"))
            .collect();
        if dim > 0 {
            for (row, id) in rows.chunks_exact(dim).zip(&ids) {
                check_norm(row, id).map_err(Error::Integrity)?;
            }
        }
        Ok(Self {
            dim,
            ids,
            index,
            rows,
            digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn open_cache(path: &Path) -> Result<EmbeddingCache> {
    EmbeddingCache::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn check_norm(row: &[f32], id: &str) -> std::result::Result<(), String> {
    let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
    let n = linalg::norm(&v);
    if (n - 1.0).abs() > NORM_TOLERANCE || !n.is_finite() {
        return Err(format!("row `{id}` has norm {n}, expected 1"));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("cache file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// Joins cached embeddings with manifest labels, in cache order.
pub fn labeled_from_cache(
    cache: &EmbeddingCache,
    manifest: &DatasetManifest,
) -> Result<Vec<crate::kgp::LabeledEmbedding>> {
    let labels: HashMap<&str, Label> = manifest
        .entries
        .iter()
        .map(|e| (e.sample_id.as_str(), e.label))
        .collect();
    cache
        .iter()
        .map(|embedding| {
            let label = *labels.get(embedding.sample_id.as_str()).ok_or_else(|| {
                Error::NotFound(format!(
                    "sample `{}` is not in the manifest",
                    embedding.sample_id
                ))
            })?;
            Ok(crate::kgp::LabeledEmbedding { embedding, label })
        })
        .collect()
}
