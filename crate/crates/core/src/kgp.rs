//! Stage-1 training: optimize only the prompt context on labeled image
//! embeddings while both encoders stay frozen.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{predict_proba, sample_loss, similarities, ClassifierConfig, Label};
use crate::encoders::{EncoderPair, Fingerprint, ImageEmbedding};
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::Adam;
use crate::text_pipeline::{compute_prototypes, prototypes_backward, PromptContext, PromptSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: ImageEmbedding,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Batch-mean loss and its gradient w.r.t. the context.
///
/// Samples are reduced in ascending `sample_id` order so the result does not
/// depend on how the batch was assembled.
pub fn objective(
    pair: &EncoderPair,
    context: &PromptContext,
    prompts: &PromptSet,
    batch: &[&LabeledEmbedding],
    cls: &ClassifierConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("training step on an empty batch".into()));
    }
    let mut order: Vec<&LabeledEmbedding> = batch.to_vec();
    order.sort_by(|a, b| a.embedding.sample_id.cmp(&b.embedding.sample_id));

    let protos = compute_prototypes(pair, context, prompts)?;
    let dim = pair.dim();
    let scale = 1.0 / (order.len() as f64 * cls.tau);
    let mut loss = 0.0;
    let mut d_fake = vec![0.0; dim];
    for sample in &order {
        let s = similarities(&sample.embedding, &protos)?;
        let p = predict_proba(s, cls);
        let (l, dl_dlogit) = sample_loss(&p, sample.label);
        loss += l;
        if dl_dlogit != 0.0 {
            let x = &sample.embedding.vector;
            let inv = 1.0 / linalg::norm(x);
            for (d, xi) in d_fake.iter_mut().zip(x) {
                *d += dl_dlogit * scale * xi * inv;
            }
        }
    }
    // the logit difference is s_fake - s_real, so the real prototype sees the opposite sign
    let d_real: Vec<f64> = d_fake.iter().map(|v| -v).collect();
    let grad = prototypes_backward(pair, context, prompts, &d_real, &d_fake)?;
    Ok((loss / order.len() as f64, grad))
}

/// Forward-only version of [`objective`].
pub fn objective_loss(
    pair: &EncoderPair,
    context: &PromptContext,
    prompts: &PromptSet,
    batch: &[&LabeledEmbedding],
    cls: &ClassifierConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("loss on an empty batch".into()));
    }
    let mut order: Vec<&LabeledEmbedding> = batch.to_vec();
    order.sort_by(|a, b| a.embedding.sample_id.cmp(&b.embedding.sample_id));
    let protos = compute_prototypes(pair, context, prompts)?;
    let mut loss = 0.0;
    for sample in &order {
        let p = predict_proba(similarities(&sample.embedding, &protos)?, cls);
        loss += sample_loss(&p, sample.label).0;
    }
    Ok(loss / order.len() as f64)
}

/// Holds the optimizer state across steps; the encoders and prompts are
/// borrowed immutably.
pub struct KgpTrainer<'a> {
    pair: &'a EncoderPair,
    prompts: &'a PromptSet,
    cls: ClassifierConfig,
    optimizer: Adam,
}

impl<'a> KgpTrainer<'a> {
    pub fn new(
        pair: &'a EncoderPair,
        prompts: &'a PromptSet,
        context: &PromptContext,
        learning_rate: f64,
        cls: ClassifierConfig,
    ) -> Self {
        Self {
            pair,
            prompts,
            cls,
            optimizer: Adam::new(learning_rate, context.as_slice().len()),
        }
    }

    /// Recomputes prototypes from the current context, evaluates the loss and
    /// applies one Adam update to the context. Returns the pre-update loss.
    pub fn step(
        &mut self,
        context: &mut PromptContext,
        batch: &[&LabeledEmbedding],
    ) -> Result<f64> {
        let (loss, grad) = objective(self.pair, context, self.prompts, batch, &self.cls)?;
        self.optimizer.step(context.as_mut_slice(), &grad);
        if context.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(
                "context diverged to non-finite values".into(),
            ));
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
    pub fingerprint_before: Fingerprint,
    pub fingerprint_after: Fingerprint,
    pub duration: Duration,
}

impl TrainReport {
    /// Line-delimited `epoch<TAB>step<TAB>loss` records, loss at 17 significant digits.
    pub fn log_text(&self) -> String {
        let mut s = String::from("epoch\tstep\tloss\n");
        for r in &self.steps {
            s.push_str(&format!("{}\t{}\t{:.16e}\n", r.epoch, r.step, r.loss));
        }
        s
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.log_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Runs `cfg.epochs` epochs of seeded-shuffle minibatch training and
/// optionally persists the final context.
pub fn train(
    pair: &EncoderPair,
    prompts: &PromptSet,
    mut context: PromptContext,
    data: &[LabeledEmbedding],
    cfg: &TrainConfig,
    cls: &ClassifierConfig,
    checkpoint: Option<&Path>,
) -> Result<(PromptContext, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let started = Instant::now();
    let fingerprint_before = pair.fingerprint();
    let mut trainer = KgpTrainer::new(pair, prompts, &context, cfg.learning_rate, *cls);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut global_step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledEmbedding> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = trainer.step(&mut context, &batch)?;
            steps.push(StepRecord {
                epoch,
                step: global_step,
                loss,
            });
            global_step += 1;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
        log::debug!("epoch {epoch}: mean loss {:.6}", total / batches as f64);
    }
    if let Some(path) = checkpoint {
        context.save(path)?;
    }
    let report = TrainReport {
        epoch_losses,
        steps,
        checkpoint: checkpoint.map(Path::to_path_buf),
        fingerprint_before,
        fingerprint_after: pair.fingerprint(),
        duration: started.elapsed(),
    };
    Ok((context, report))
}
