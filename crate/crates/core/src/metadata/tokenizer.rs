use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::prompt::{PromptText, TemplateTable};
use super::MetadataError;

/// Default prompt token cap.
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &str = "[unk]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits text into lowercase word runs and single punctuation marks.
fn lex(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Closed vocabulary over the template lexicon plus the ten digits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn from_templates(templates: &TemplateTable) -> Self {
        let mut lexicon = BTreeSet::new();
        for sentence in templates.sentences() {
            // Drop `{field}` slots; their contents are rendered at prompt time.
            let mut stripped = String::new();
            let mut depth = 0usize;
            for c in sentence.chars() {
                match c {
                    '{' => depth += 1,
                    '}' => depth = depth.saturating_sub(1),
                    _ if depth == 0 => stripped.push(c),
                    _ => {}
                }
            }
            lexicon.extend(lex(&stripped));
        }
        lexicon.extend((0..10).map(|d| d.to_string()));
        let tokens = std::iter::once(UNK_TOKEN.to_string()).chain(lexicon).collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenizes `prompt`, keeping at most `max_tokens` ids from the front.
    /// Digit runs missing from the lexicon are spelled digit by digit.
    pub fn tokenize(&self, prompt: &PromptText, max_tokens: usize) -> Result<TokenSequence, MetadataError> {
        self.tokenize_text(prompt.full_text(), max_tokens)
    }

    pub fn tokenize_text(&self, text: &str, max_tokens: usize) -> Result<TokenSequence, MetadataError> {
        if max_tokens == 0 {
            return Err(MetadataError::InvalidMaxTokens);
        }
        let mut ids = Vec::new();
        for word in lex(text) {
            if let Some(id) = self.id(&word) {
                ids.push(id);
            } else if word.chars().all(|c| c.is_ascii_digit()) {
                ids.extend(word.chars().map(|c| self.id(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK_ID)));
            } else {
                ids.push(UNK_ID);
            }
            if ids.len() >= max_tokens {
                break;
            }
        }
        if ids.is_empty() {
            return Err(MetadataError::EmptyPrompt);
        }
        ids.truncate(max_tokens);
        Ok(TokenSequence { ids })
    }
}
