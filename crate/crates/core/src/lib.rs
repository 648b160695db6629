//! Knowledge-guided prompt learning and test-time prompt tuning for binary
//! real/synthetic image detection on top of frozen vision-language encoders.
//!
//! Pipeline: a [`ConceptBank`] of forgery words becomes a [`PromptSet`]; the
//! shared learnable [`PromptContext`] is trained on labeled image embeddings
//! ([`kgp::train`]), then tuned again on confident pseudo-labels drawn from
//! the unlabeled test set ([`ttp::run_ttp`]).

pub mod classifier;
pub mod concept_bank;
pub mod data;
pub mod encoders;
pub mod error;
pub mod kgp;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod synthetic;
pub mod text_pipeline;
pub mod ttp;

pub use classifier::{
    bce_loss, predict_proba, similarities, ClassifierConfig, Label, ProbabilityPair, SimilarityPair,
};
pub use concept_bank::{default_bank, load_bank, save_bank, Concept, ConceptBank, ConceptSource};
pub use data::{
    build_cache, open_cache, scan_dataset, AugmentRecipe, DatasetManifest, EmbeddingCache,
    LabelingRule,
};
pub use encoders::{
    make_toy_pair, EncoderPair, Fingerprint, ImageEmbedding, TextEmbedding, TokenSequence,
};
pub use error::{Error, Result};
pub use kgp::{train, KgpTrainer, LabeledEmbedding, TrainConfig, TrainReport};
pub use metrics::{auc, overall_accuracy, report, EvalRecord, MetricsReport};
pub use text_pipeline::{
    build_prompts, compute_prototypes, init_context, PromptContext, PromptSet, Prototypes,
};
pub use ttp::{
    run_ttp, select_pseudo, tune, PseudoLabelSet, SelectionConfig, TtpConfig, TtpOutcome,
};
