use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const INSERT_EVIDENCE: &str = "<insert_evidence>";
pub const EVIDENCE_OPEN: &str = "<evidence>";
pub const EVIDENCE_CLOSE: &str = "</evidence>";

pub const CONTROL_TOKENS: [&str; 8] = [
    UNK,
    THINK_OPEN,
    THINK_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    INSERT_EVIDENCE,
    EVIDENCE_OPEN,
    EVIDENCE_CLOSE,
];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];

const CONTENT_WORDS: [&str; 14] = [
    "yes", "no", "color", "left", "right", "look", "find", "region", "evidence", "shows", "compare",
    "position", "image", "object",
];

pub(crate) const STOP_WORDS_TXT: &str = include_str!("../../resources/stop_words.txt");

/// Word-level vocabulary: control tokens first, then the synthetic lexicon,
/// then the stop-word list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let words = CONTROL_TOKENS
            .iter()
            .chain(SHAPES.iter())
            .chain(COLORS.iter())
            .chain(CONTENT_WORDS.iter())
            .copied()
            .chain(STOP_WORDS_TXT.lines().map(str::trim).filter(|l| !l.is_empty()));
        for w in words {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a token that must exist (control tokens, lexicon words).
    pub fn expect_id(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or_else(|| panic!("token {token:?} missing from vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk(&self) -> TokenId {
        self.expect_id(UNK)
    }

    pub fn is_control(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| CONTROL_TOKENS.contains(&t))
    }

    pub fn has_control_tokens(&self) -> bool {
        CONTROL_TOKENS.iter().all(|t| self.index.contains_key(*t))
    }

    /// Lowercases, splits `?` into its own word and collapses whitespace.
    pub fn normalize(text: &str) -> String {
        text.to_lowercase().replace('?', " ? ").split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        Self::normalize(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }
}
