//! Patient metadata: structured records, deterministic prompt rendering,
//! tokenization, and counterfactual placeholder augmentation.

mod prompt;
mod record;
mod tokenizer;

use thiserror::Error;

pub use prompt::{build_prompt, counterfactual_augment, Attribute, PromptText, Sentence, TemplateTable};
pub use record::{AgeGroup, Device, Location, MetadataRecord, Sex, ADULT_AGE_YEARS};
pub use tokenizer::{TokenSequence, Vocabulary, DEFAULT_MAX_TOKENS, UNK_ID, UNK_TOKEN};

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("invalid metadata record: {0}")]
    InvalidRecord(String),
    #[error("unknown {field} value `{value}`")]
    UnknownValue { field: &'static str, value: String },
    #[error("template table line {line}: {message}")]
    Template { line: usize, message: String },
    #[error("attribute `{0}` appears more than once in the prompt")]
    DuplicateAttribute(Attribute),
    #[error("augmentation probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("cannot tokenize an empty prompt")]
    EmptyPrompt,
    #[error("max_tokens must be at least 1")]
    InvalidMaxTokens,
    #[error("{0}")]
    Io(String),
}
