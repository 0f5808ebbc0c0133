//! Closed word-level vocabulary with special tokens and attribute lexicons.
//!
//! File format: a header block of the six special tokens between `#special`
//! and `#end` lines, in id order, followed by one ordinary token per line.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEG: TokenId = 2;
pub const P_OPEN: TokenId = 3;
pub const P_CLOSE: TokenId = 4;
pub const IMAGE_ID: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<eos>", "<seg>", "<p>", "</p>", "<image_id>"];

pub const COLORS: [&str; 7] = ["red", "green", "blue", "yellow", "purple", "cyan", "white"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const LOCATIONS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

/// Words used by prompt templates, descriptions and probe questions.
pub const TEMPLATE_WORDS: [&str; 17] = [
    "segment", "ground", "answer", "with", "regions", "the", "image", "on", "one", "a", "in", "is", "yes",
    "no", "or", "please", "and",
];

/// Attribute classes probed by the attribute evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrClass {
    Category,
    Color,
    Location,
}

impl AttrClass {
    pub const ALL: [AttrClass; 3] = [AttrClass::Category, AttrClass::Color, AttrClass::Location];

    pub fn lexicon(self) -> &'static [&'static str] {
        match self {
            AttrClass::Category => &SHAPES,
            AttrClass::Color => &COLORS,
            AttrClass::Location => &LOCATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from ordinary tokens; specials take ids 0..6.
    pub fn new<I, S>(ordinary: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ordinary.into_iter().map(Into::into));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(LiraError::invalid(format!("bad token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(LiraError::invalid(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Template words plus every lexicon.
    pub fn synthetic() -> Self {
        let words = TEMPLATE_WORDS
            .iter()
            .chain(COLORS.iter())
            .chain(SHAPES.iter())
            .chain(LOCATIONS.iter())
            .copied();
        Self::new(words).expect("built-in vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| LiraError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Whitespace tokenisation; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ids of a lexicon's words that exist in this vocabulary.
    pub fn lexicon_ids(&self, class: AttrClass) -> Vec<TokenId> {
        class.lexicon().iter().filter_map(|w| self.index.get(*w).copied()).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from("#special\n");
        for t in &self.tokens[..SPECIAL_TOKENS.len()] {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str("#end\n");
        for t in &self.tokens[SPECIAL_TOKENS.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("#special") {
            return Err(LiraError::Format("vocab: missing #special header".into()));
        }
        for want in SPECIAL_TOKENS {
            match lines.next() {
                Some(got) if got == want => {}
                other => {
                    return Err(LiraError::Format(format!("vocab: expected special `{want}`, got {other:?}")));
                }
            }
        }
        if lines.next() != Some("#end") {
            return Err(LiraError::Format("vocab: missing #end after specials".into()));
        }
        Self::new(lines.filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_file_string())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}
