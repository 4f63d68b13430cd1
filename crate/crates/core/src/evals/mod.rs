//! Memorization auditing and pairwise preference statistics.

mod distance;
mod memorization;
mod personal;
mod winrate;

use thiserror::Error;

use crate::generation::GenerationError;
use crate::text::TextError;

pub use distance::{edit_distance_ratio, levenshtein, normalized_distance};
pub use memorization::{
    audit_documents, memorization_audit, read_corpus, score_continuation, AuditParams,
    CategoryReport, Continuation, CorpusDoc, DistanceLevel, DocOutcome, MatchLevel, MemReport,
    UNCATEGORIZED,
};
pub use personal::{bundled_rules, classify_personal, PersonalDataRule, Severity, SeverityTally};
pub use winrate::{read_ratings, win_rate, win_rate_ci, Interval, RatingTally};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no document is long enough to audit")]
    NoEligibleDocuments,
    #[error("prompt plus continuation needs {needed} tokens but the context is {max_context}")]
    ContextOverflow { needed: usize, max_context: usize },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("sample size must be at least 1")]
    InvalidSampleSize,
    #[error("prompt and continuation lengths must be positive")]
    InvalidSplit,
    #[error("tally has zero total")]
    ZeroTotal,
    #[error("tally entries must be finite and non-negative")]
    InvalidTally,
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("confidence level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("ratings: {0}")]
    Ratings(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Text(#[from] TextError),
}
