//! Pipeline stages. Each reads its inputs from and writes its artifacts to the
//! run directory, so stages can be rerun or resumed independently.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use promptforge::concept_bank::{retrieve_concepts, CommandClient};
use promptforge::data::{cache_digest, labeled_from_cache, DatasetManifest};
use promptforge::metrics::MetricsReport;
use promptforge::ttp::TtpRound;
use promptforge::{
    build_cache, build_prompts, compute_prototypes, default_bank, init_context, load_bank,
    make_toy_pair, open_cache, predict_proba, report, run_ttp, save_bank, scan_dataset,
    similarities, train, AugmentRecipe, EmbeddingCache, EncoderPair, EvalRecord, Label,
    LabelingRule, PromptContext, PromptSet, TrainReport, TtpConfig, TtpOutcome,
};

use crate::config::{EvalStage, RunConfig};
use crate::error::{CliError, CliResult};

pub const BANK_FILE: &str = "bank.txt";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const TRAIN_CACHE: &str = "train.cache";
pub const TEST_MANIFEST: &str = "test.manifest";
pub const TEST_CACHE: &str = "test.cache";
pub const CONTEXT_FILE: &str = "context.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const TRAIN_REPORT: &str = "train.report";
pub const TTP_CONTEXT_FILE: &str = "ttp_context.ckpt";
pub const PSEUDO_MANIFEST: &str = "pseudo_labels.tsv";
pub const TTP_LOG: &str = "ttp.log";
pub const SWEEP_FILE: &str = "sweep.tsv";

pub fn report_file(stage: EvalStage) -> String {
    format!("report_{}.txt", stage.as_str())
}

fn require(path: PathBuf, hint: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput {
            path,
            hint: hint.to_string(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| promptforge::Error::io(path, e).into())
}

fn ensure_run_dir(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.run_dir)
        .map_err(|e| promptforge::Error::io(&cfg.run_dir, e).into())
}

pub fn encoder_pair(cfg: &RunConfig) -> CliResult<EncoderPair> {
    Ok(make_toy_pair(
        cfg.encoder.seed,
        cfg.encoder.dim,
        cfg.encoder.vocab,
    )?)
}

/// Loads the bank written by `build-prompts` and rebuilds the prompt token sequences.
fn load_prompts(cfg: &RunConfig, pair: &EncoderPair) -> CliResult<PromptSet> {
    let path = require(cfg.artifact(BANK_FILE), "run `build-prompts` first")?;
    let bank = load_bank(&path)?;
    Ok(build_prompts(&bank, cfg.context.n, pair)?)
}

/// Opens a split's manifest and cache and checks the cache was built from
/// this manifest, recipe, encoder and seed.
fn load_split(
    cfg: &RunConfig,
    pair: &EncoderPair,
    manifest_name: &str,
    cache_name: &str,
    recipe: &AugmentRecipe,
) -> CliResult<(DatasetManifest, EmbeddingCache)> {
    let manifest_path = require(cfg.artifact(manifest_name), "run `build-cache` first")?;
    let cache_path = require(cfg.artifact(cache_name), "run `build-cache` first")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let cache = open_cache(&cache_path)?;
    cache.verify_digest(cache_digest(
        &manifest,
        recipe,
        pair.fingerprint(),
        cfg.data_seed,
    ))?;
    Ok((manifest, cache))
}

fn load_context(path: PathBuf, hint: &str) -> CliResult<PromptContext> {
    Ok(PromptContext::load(&require(path, hint)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptsSummary {
    pub concepts: usize,
    pub retrieved: usize,
    pub diagnostics: Vec<String>,
}

/// Resolves the concept bank (file or default, optionally extended by the
/// language model) and writes it with the tokenized prompts.
pub fn cmd_build_prompts(cfg: &RunConfig) -> CliResult<PromptsSummary> {
    ensure_run_dir(cfg)?;
    let mut bank = match &cfg.bank_path {
        Some(path) => load_bank(&require(path.clone(), "`bank.path` does not exist")?)?,
        None => default_bank(),
    };
    let mut retrieved = 0;
    let mut diagnostics = Vec::new();
    if let Some(command) = &cfg.llm_command {
        let client = CommandClient::new(command, cfg.llm_timeout)?;
        let query = bank
            .query()
            .unwrap_or(promptforge::concept_bank::DEFAULT_QUERY)
            .to_string();
        let retrieval = retrieve_concepts(&client, &query)?;
        let before = bank.fake_concepts().len();
        bank = bank.merged(&retrieval.concepts);
        retrieved = bank.fake_concepts().len() - before;
        diagnostics = retrieval.diagnostics;
    }
    for d in &diagnostics {
        log::warn!("{d}");
    }
    save_bank(&bank, &cfg.artifact(BANK_FILE))?;

    let pair = encoder_pair(cfg)?;
    let prompts = build_prompts(&bank, cfg.context.n, &pair)?;
    let mut text = cfg.echo_comment();
    for d in &diagnostics {
        let _ = writeln!(text, "# diagnostic: {d}");
    }
    let _ = writeln!(text, "# class\tconcept\tcontext_slots\ttoken_ids");
    let ids = |seq: &promptforge::TokenSequence| {
        seq.ids()
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    let _ = writeln!(
        text,
        "real\t{}\t{}\t{}",
        bank.real_word(),
        prompts.real_prompt.context_slots(),
        ids(&prompts.real_prompt)
    );
    for (concept, seq) in bank.fake_concepts().iter().zip(&prompts.fake_prompts) {
        let _ = writeln!(
            text,
            "fake\t{}\t{}\t{}",
            concept.text(),
            seq.context_slots(),
            ids(seq)
        );
    }
    write_text(&cfg.artifact(PROMPTS_FILE), &text)?;
    Ok(PromptsSummary {
        concepts: bank.fake_concepts().len(),
        retrieved,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub split: &'static str,
    pub entries: usize,
    pub cached: usize,
    pub skipped: Vec<String>,
}

/// Scans each configured data root and caches its embeddings. The training
/// split uses the configured augmentation; the test split is never augmented.
pub fn cmd_build_cache(cfg: &RunConfig) -> CliResult<Vec<SplitSummary>> {
    if cfg.train_root.is_none() && cfg.test_root.is_none() {
        return Err(CliError::Config(
            "set `data.train_root` and/or `data.test_root` to build a cache".into(),
        ));
    }
    ensure_run_dir(cfg)?;
    let pair = encoder_pair(cfg)?;
    let splits = [
        (
            "train",
            &cfg.train_root,
            TRAIN_MANIFEST,
            TRAIN_CACHE,
            cfg.augment.clone(),
        ),
        (
            "test",
            &cfg.test_root,
            TEST_MANIFEST,
            TEST_CACHE,
            AugmentRecipe::None,
        ),
    ];
    let mut out = Vec::new();
    for (split, root, manifest_name, cache_name, recipe) in splits {
        let Some(root) = root else { continue };
        let root = require(root.clone(), &format!("`data.{split}_root` does not exist"))?;
        let scan = scan_dataset(&root, &LabelingRule::default())?;
        let mut manifest = scan.manifest;
        manifest.recipe_digest = Some(recipe.digest());
        let build = build_cache(&manifest, &pair, &recipe, cfg.data_seed)?;
        let mut skipped = scan.skipped;
        skipped.extend(build.skipped);

        let mut text = cfg.echo_comment();
        for s in &skipped {
            let _ = writeln!(text, "# skipped: {s}");
        }
        text.push_str(&manifest.to_file_string());
        write_text(&cfg.artifact(manifest_name), &text)?;
        build.cache.save(&cfg.artifact(cache_name))?;
        log::info!(
            "{split}: cached {} of {} images",
            build.cache.len(),
            manifest.entries.len()
        );
        out.push(SplitSummary {
            split,
            entries: manifest.entries.len(),
            cached: build.cache.len(),
            skipped,
        });
    }
    Ok(out)
}

fn train_report_text(cfg: &RunConfig, report: &TrainReport) -> String {
    let mut s = cfg.echo_comment();
    let _ = writeln!(s, "fingerprint.before = {}", report.fingerprint_before);
    let _ = writeln!(s, "fingerprint.after = {}", report.fingerprint_after);
    let _ = writeln!(s, "steps = {}", report.steps.len());
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(s, "epoch.{epoch}.loss = {loss:.16e}");
    }
    s
}

/// Stage 1: fits the prompt context on the labeled training cache.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainReport> {
    let pair = encoder_pair(cfg)?;
    let prompts = load_prompts(cfg, &pair)?;
    let (manifest, cache) = load_split(cfg, &pair, TRAIN_MANIFEST, TRAIN_CACHE, &cfg.augment)?;
    let data = labeled_from_cache(&cache, &manifest)?;
    let context = init_context(
        cfg.context.seed,
        cfg.context.n,
        pair.token_width(),
        cfg.context.init_std,
    )?;
    let checkpoint = cfg.artifact(CONTEXT_FILE);
    let (_, report) = train(
        &pair,
        &prompts,
        context,
        &data,
        &cfg.train,
        &cfg.classifier,
        Some(&checkpoint),
    )?;
    report.write_log(&cfg.artifact(TRAIN_LOG))?;
    write_text(
        &cfg.artifact(TRAIN_REPORT),
        &train_report_text(cfg, &report),
    )?;
    log::info!(
        "trained {} steps in {:.2?}",
        report.steps.len(),
        report.duration
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtpSummary {
    pub selected_real: usize,
    pub selected_fake: usize,
    pub tuned: bool,
}

fn ttp_on_cache(
    cfg: &RunConfig,
    ttp: &TtpConfig,
    pair: &EncoderPair,
    prompts: &PromptSet,
    context: PromptContext,
    cache: &EmbeddingCache,
) -> CliResult<(PromptContext, Vec<TtpRound>)> {
    Ok(run_ttp(
        context,
        cache,
        ttp,
        pair,
        prompts,
        &cfg.classifier,
    )?)
}

/// Stage 2: pseudo-labels confident test samples and tunes the context on them.
pub fn cmd_ttp(cfg: &RunConfig) -> CliResult<TtpSummary> {
    let pair = encoder_pair(cfg)?;
    let prompts = load_prompts(cfg, &pair)?;
    let context = load_context(cfg.artifact(CONTEXT_FILE), "run `train` first")?;
    let (_, cache) = load_split(cfg, &pair, TEST_MANIFEST, TEST_CACHE, &AugmentRecipe::None)?;
    let (context, rounds) = ttp_on_cache(cfg, &cfg.ttp, &pair, &prompts, context, &cache)?;
    context.save(&cfg.artifact(TTP_CONTEXT_FILE))?;

    let last = rounds.last().expect("at least one round");
    let mut header = cfg
        .resolved()
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect::<Vec<_>>();
    header.push(("round".into(), rounds.len().to_string()));
    last.pseudo
        .write_manifest(&cfg.artifact(PSEUDO_MANIFEST), &header)?;

    let mut log_text = cfg.echo_comment();
    for (i, round) in rounds.iter().enumerate() {
        let _ = writeln!(
            log_text,
            "# round {i}: selected {} real, {} fake",
            round.pseudo.real_ids.len(),
            round.pseudo.fake_ids.len()
        );
        match &round.outcome {
            TtpOutcome::Tuned(report) => log_text.push_str(&report.log_text()),
            TtpOutcome::Skipped { reason } => {
                let _ = writeln!(log_text, "# skipped: {reason}");
            }
        }
    }
    write_text(&cfg.artifact(TTP_LOG), &log_text)?;
    Ok(TtpSummary {
        selected_real: last.pseudo.real_ids.len(),
        selected_fake: last.pseudo.fake_ids.len(),
        tuned: matches!(last.outcome, TtpOutcome::Tuned(_)),
    })
}

fn evaluate(
    cfg: &RunConfig,
    pair: &EncoderPair,
    prompts: &PromptSet,
    context: &PromptContext,
    manifest: &DatasetManifest,
    cache: &EmbeddingCache,
) -> CliResult<MetricsReport> {
    let entries: HashMap<&str, (Label, &str)> = manifest
        .entries
        .iter()
        .map(|e| (e.sample_id.as_str(), (e.label, e.subset.as_str())))
        .collect();
    let protos = compute_prototypes(pair, context, prompts)?;
    let records = cache
        .iter()
        .map(|emb| {
            let &(label, subset) = entries.get(emb.sample_id.as_str()).ok_or_else(|| {
                promptforge::Error::NotFound(format!(
                    "sample `{}` is not in the test manifest",
                    emb.sample_id
                ))
            })?;
            let p = predict_proba(similarities(&emb, &protos)?, &cfg.classifier);
            Ok(EvalRecord {
                sample_id: emb.sample_id.clone(),
                label,
                p_fake: p.p_fake,
                subset: subset.to_string(),
            })
        })
        .collect::<promptforge::Result<Vec<_>>>()?;
    Ok(report(&records, cfg.resolved())?)
}

/// Scores the test cache with the stage-1 or tuned context and writes the
/// per-subset AUC/OA report.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<MetricsReport> {
    let pair = encoder_pair(cfg)?;
    let prompts = load_prompts(cfg, &pair)?;
    let context = match cfg.eval_stage {
        EvalStage::Kgp => load_context(cfg.artifact(CONTEXT_FILE), "run `train` first")?,
        EvalStage::Ttp => load_context(cfg.artifact(TTP_CONTEXT_FILE), "run `ttp` first")?,
    };
    let (manifest, cache) =
        load_split(cfg, &pair, TEST_MANIFEST, TEST_CACHE, &AugmentRecipe::None)?;
    let report = evaluate(cfg, &pair, &prompts, &context, &manifest, &cache)?;
    report.write(&cfg.artifact(&report_file(cfg.eval_stage)))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub selected_real: usize,
    pub selected_fake: usize,
    /// Fraction of pseudo-labels agreeing with the manifest labels.
    pub purity: Option<f64>,
    pub macro_auc: Option<f64>,
    pub macro_oa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub param: String,
    pub rows: Vec<SweepRow>,
    /// Whether the selected counts move in the expected direction along the grid.
    pub monotone: bool,
}

fn counts_monotone(param: &str, rows: &[SweepRow]) -> bool {
    let totals: Vec<(usize, usize)> = rows
        .iter()
        .map(|r| (r.selected_real, r.selected_fake))
        .collect();
    let pairs = totals.windows(2).map(|w| (w[0], w[1]));
    match param {
        // a stricter real threshold can only shrink the real set
        "ttp.t_real" => pairs.clone().all(|(a, b)| b.0 <= a.0),
        "ttp.t_fake" => pairs.clone().all(|(a, b)| b.1 <= a.1),
        "ttp.top_k" => pairs.clone().all(|(a, b)| b.0 >= a.0 && b.1 >= a.1),
        // selection happens before any update, so the learning rate cannot change it
        _ => pairs.clone().all(|(a, b)| a == b),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.16e}"))
}

pub fn sweep_text(cfg: &RunConfig, tables: &[SweepTable]) -> String {
    let mut s = cfg.echo_comment();
    for t in tables {
        let _ = writeln!(s, "## sweep {}", t.param);
        let _ = writeln!(s, "# monotone = {}", t.monotone);
        let _ = writeln!(s, "value\tselected_real\tselected_fake\tpurity\tauc\toa");
        for r in &t.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.16e}",
                r.value,
                r.selected_real,
                r.selected_fake,
                fmt_opt(r.purity),
                fmt_opt(r.macro_auc),
                r.macro_oa
            );
        }
    }
    s
}

/// Reruns test-time tuning from the stage-1 checkpoint once per grid value,
/// varying one hyper-parameter at a time with all others at their configured
/// values, and tabulates test AUC/OA.
pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<Vec<SweepTable>> {
    let pair = encoder_pair(cfg)?;
    let prompts = load_prompts(cfg, &pair)?;
    let stage1 = load_context(cfg.artifact(CONTEXT_FILE), "run `train` first")?;
    let (manifest, cache) =
        load_split(cfg, &pair, TEST_MANIFEST, TEST_CACHE, &AugmentRecipe::None)?;
    let truth: HashMap<&str, Label> = manifest
        .entries
        .iter()
        .map(|e| (e.sample_id.as_str(), e.label))
        .collect();

    let mut tables = Vec::with_capacity(cfg.sweep.len());
    for axis in &cfg.sweep {
        let mut rows = Vec::with_capacity(axis.len());
        for i in 0..axis.len() {
            let (ttp, value) = axis.apply(&cfg.ttp, i);
            let (context, rounds) =
                ttp_on_cache(cfg, &ttp, &pair, &prompts, stage1.clone(), &cache)?;
            let pseudo = &rounds.last().expect("at least one round").pseudo;
            let agree = pseudo
                .labeled()
                .filter(|(id, l)| truth.get(id) == Some(l))
                .count();
            let purity = (!pseudo.is_empty()).then(|| agree as f64 / pseudo.len() as f64);
            let metrics = evaluate(cfg, &pair, &prompts, &context, &manifest, &cache)?;
            log::info!(
                "sweep {} = {value}: auc {:?}",
                axis.key(),
                metrics.macro_auc
            );
            rows.push(SweepRow {
                value,
                selected_real: pseudo.real_ids.len(),
                selected_fake: pseudo.fake_ids.len(),
                purity,
                macro_auc: metrics.macro_auc,
                macro_oa: metrics.macro_oa,
            });
        }
        let monotone = counts_monotone(axis.key(), &rows);
        tables.push(SweepTable {
            param: axis.key().to_string(),
            rows,
            monotone,
        });
    }
    write_text(&cfg.artifact(SWEEP_FILE), &sweep_text(cfg, &tables))?;
    Ok(tables)
}
