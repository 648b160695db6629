//! Stage-2 test-time prompt tuning: the stage-1 model annotates the unlabeled
//! test set, its most confident predictions become pseudo-labels, and the
//! context is tuned further on them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{predict_proba, similarities, ClassifierConfig, Label, ProbabilityPair};
use crate::data::EmbeddingCache;
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::kgp::{KgpTrainer, LabeledEmbedding, StepRecord, TrainReport};
use crate::text_pipeline::{compute_prototypes, PromptContext, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub t_real: f64,
    pub t_fake: f64,
    pub top_k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            t_real: 0.999,
            t_fake: 0.5,
            top_k: 128,
        }
    }
}

impl SelectionConfig {
    /// Thresholds must lie in (0, 1) and sum to at least 1, which keeps the two
    /// selected sets disjoint because `p_real + p_fake = 1`.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_real", self.t_real), ("t_fake", self.t_fake)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Validation(format!(
                    "{name} must lie in (0, 1), got {t}"
                )));
            }
        }
        if self.t_real + self.t_fake < 1.0 {
            return Err(Error::Validation(format!(
                "t_real + t_fake must be >= 1 (got {} + {} = {})",
                self.t_real,
                self.t_fake,
                self.t_real + self.t_fake
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Validation("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub sample_id: String,
    pub probs: ProbabilityPair,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub real_ids: Vec<String>,
    pub fake_ids: Vec<String>,
    /// Probability of the selected class for every listed id.
    pub confidences: BTreeMap<String, f64>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.real_ids.is_empty() && self.fake_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.real_ids.len() + self.fake_ids.len()
    }

    /// Real selections first, then fake, each in selection order.
    pub fn labeled(&self) -> impl Iterator<Item = (&str, Label)> {
        self.real_ids
            .iter()
            .map(|id| (id.as_str(), Label::Real))
            .chain(self.fake_ids.iter().map(|id| (id.as_str(), Label::Fake)))
    }

    /// `# key = value` header lines, then `sample_id<TAB>pseudo_label<TAB>confidence`.
    pub fn to_manifest(&self, header: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in header {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        for (id, label) in self.labeled() {
            s.push_str(&format!("{id}\t{label}\t{:.16e}\n", self.confidences[id]));
        }
        s
    }

    pub fn write_manifest(&self, path: &Path, header: &[(String, String)]) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_manifest(header).as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse_manifest(content: &str) -> Result<Self> {
        let mut out = Self::default();
        for (lineno, line) in content.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || {
                Error::Validation(format!(
                    "pseudo-label manifest line {}: `{line}`",
                    lineno + 1
                ))
            };
            if fields.len() != 3 {
                return Err(bad());
            }
            let label = fields[1]
                .parse::<u8>()
                .map_err(|_| bad())
                .and_then(Label::from_u8)?;
            let conf: f64 = fields[2].parse().map_err(|_| bad())?;
            let id = fields[0].to_string();
            if out.confidences.insert(id.clone(), conf).is_some() {
                return Err(Error::Validation(format!("sample `{id}` listed twice")));
            }
            match label {
                Label::Real => out.real_ids.push(id),
                Label::Fake => out.fake_ids.push(id),
            }
        }
        Ok(out)
    }
}

/// Higher probability first, ties by ascending sample id.
fn by_confidence(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Keeps samples whose class probability strictly exceeds the class
/// threshold, sorted by that probability, capped at `top_k` per class.
pub fn select_pseudo(scores: &[Scored], cfg: &SelectionConfig) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    if scores.is_empty() {
        return Err(Error::Contract(
            "pseudo-label selection over no scores".into(),
        ));
    }
    let mut seen = HashSet::new();
    for s in scores {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(Error::Contract(format!(
                "sample `{}` scored twice",
                s.sample_id
            )));
        }
    }

    let pick = |label: Label, threshold: f64| -> Vec<(&str, f64)> {
        let mut chosen: Vec<(&str, f64)> = scores
            .iter()
            .map(|s| (s.sample_id.as_str(), s.probs.of(label)))
            .filter(|&(_, p)| p > threshold)
            .collect();
        chosen.sort_by(|&a, &b| by_confidence(a, b));
        chosen.truncate(cfg.top_k);
        chosen
    };

    let real = pick(Label::Real, cfg.t_real);
    let fake = pick(Label::Fake, cfg.t_fake);
    let mut out = PseudoLabelSet::default();
    for (id, p) in real {
        out.real_ids.push(id.to_string());
        out.confidences.insert(id.to_string(), p);
    }
    for (id, p) in fake {
        out.fake_ids.push(id.to_string());
        out.confidences.insert(id.to_string(), p);
    }
    Ok(out)
}

/// Class probabilities for every cached sample under `context`, in cache order.
pub fn score(
    pair: &EncoderPair,
    context: &PromptContext,
    prompts: &PromptSet,
    cache: &EmbeddingCache,
    cls: &ClassifierConfig,
) -> Result<Vec<Scored>> {
    let protos = compute_prototypes(pair, context, prompts)?;
    cache
        .iter()
        .map(|emb| {
            Ok(Scored {
                sample_id: emb.sample_id.clone(),
                probs: predict_proba(similarities(&emb, &protos)?, cls),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtpConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer steps per selection round.
    pub steps: usize,
    /// Number of score-select-tune rounds; 1 selects once before tuning.
    pub rounds: usize,
    pub seed: u64,
    pub selection: SelectionConfig,
}

impl Default for TtpConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 128,
            steps: 10,
            rounds: 1,
            seed: 0,
            selection: SelectionConfig::default(),
        }
    }
}

impl TtpConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "ttp learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("ttp batch size must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Validation("ttp rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TtpOutcome {
    Tuned(TrainReport),
    /// Nothing was confident enough to pseudo-label; the context is unchanged.
    Skipped {
        reason: String,
    },
}

/// Tunes the context on a fixed pseudo-labeled set for `cfg.steps` Adam steps
/// over seeded-shuffle minibatches.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    mut context: PromptContext,
    pseudo: &PseudoLabelSet,
    cache: &EmbeddingCache,
    cfg: &TtpConfig,
    pair: &EncoderPair,
    prompts: &PromptSet,
    cls: &ClassifierConfig,
) -> Result<(PromptContext, TtpOutcome)> {
    cfg.validate()?;
    if pseudo.is_empty() {
        let reason = "no test sample passed either confidence threshold; skipping test-time tuning"
            .to_string();
        log::warn!("{reason}");
        return Ok((context, TtpOutcome::Skipped { reason }));
    }
    let started = Instant::now();
    let fingerprint_before = pair.fingerprint();
    let samples = pseudo
        .labeled()
        .map(|(id, label)| {
            Ok(LabeledEmbedding {
                embedding: cache.get(id)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trainer = KgpTrainer::new(pair, prompts, &context, cfg.learning_rate, *cls);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut epoch_losses = Vec::new();
    let mut epoch = 0;
    while steps.len() < cfg.steps {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        let remaining = cfg.steps - steps.len();
        for chunk in order.chunks(cfg.batch_size).take(remaining) {
            let batch: Vec<&LabeledEmbedding> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = trainer.step(&mut context, &batch)?;
            steps.push(StepRecord {
                epoch,
                step: steps.len(),
                loss,
            });
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
        epoch += 1;
    }
    let report = TrainReport {
        epoch_losses,
        steps,
        checkpoint: None,
        fingerprint_before,
        fingerprint_after: pair.fingerprint(),
        duration: started.elapsed(),
    };
    Ok((context, TtpOutcome::Tuned(report)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtpRound {
    pub pseudo: PseudoLabelSet,
    pub outcome: TtpOutcome,
}

/// Scores the cache with the current context, selects pseudo-labels and
/// tunes, `cfg.rounds` times. With the default of one round the selection is
/// made once, by the stage-1 model.
pub fn run_ttp(
    context: PromptContext,
    cache: &EmbeddingCache,
    cfg: &TtpConfig,
    pair: &EncoderPair,
    prompts: &PromptSet,
    cls: &ClassifierConfig,
) -> Result<(PromptContext, Vec<TtpRound>)> {
    cfg.validate()?;
    let mut context = context;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let scores = score(pair, &context, prompts, cache, cls)?;
        let pseudo = select_pseudo(&scores, &cfg.selection)?;
        let (next, outcome) = tune(context, &pseudo, cache, cfg, pair, prompts, cls)?;
        context = next;
        let skipped = matches!(outcome, TtpOutcome::Skipped { .. });
        rounds.push(TtpRound { pseudo, outcome });
        if skipped {
            break;
        }
    }
    Ok((context, rounds))
}
