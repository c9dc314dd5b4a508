//! Per-language vocabularies, tokenizers, and the prompt template.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    /// Split on Unicode whitespace; tokens are words.
    WhitespaceWord,
    /// Every char (including spaces) is a token.
    Character,
}

/// Token strings <-> contiguous ids; ids 0..3 are reserved.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pub kind: TokenizerKind,
}

fn tokenize(kind: TokenizerKind, text: &str) -> Vec<String> {
    match kind {
        TokenizerKind::WhitespaceWord => text.split_whitespace().map(str::to_string).collect(),
        TokenizerKind::Character => text.chars().map(String::from).collect(),
    }
}

impl Vocabulary {
    /// Deterministic construction: reserved ids first, then corpus tokens in
    /// first-occurrence order.
    pub fn build(corpus: &[impl AsRef<str>], kind: TokenizerKind) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for line in corpus {
            for tok in tokenize(kind, line.as_ref()) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                }
            }
        }
        if tokens.len() < 5 {
            return Err(Error::data("corpus yields no tokens beyond the reserved set"));
        }
        Ok(Self { tokens, index, kind })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                Error::Range(format!(
                    "token id {id} out of range for vocabulary of size {}",
                    self.tokens.len()
                ))
            })
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Out-of-vocabulary tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(self.kind, text).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of encode for in-vocabulary text.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id)?.to_string());
        }
        Ok(match self.kind {
            TokenizerKind::WhitespaceWord => parts.join(" "),
            TokenizerKind::Character => parts.concat(),
        })
    }

    /// One token per line, line number = id; first four lines are reserved.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: TokenizerKind) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 5 {
            return Err(Error::data(format!(
                "vocabulary file {} has {} lines, need at least 5",
                path.display(),
                tokens.len()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::data(format!(
                    "vocabulary file {} line {i} is {:?}, expected {want:?}",
                    path.display(),
                    tokens[i]
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index, kind })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>, kind: TokenizerKind) -> Result<Self> {
        if tokens.len() < 5 || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::data("token list does not start with the reserved set"));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index, kind })
    }
}

/// Prompt layout: "### [<src>]: <X> ### [<tgt>]: ", byte-exact.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub src_lang: String,
    pub tgt_lang: String,
    pub include_source_text: bool,
}

impl PromptTemplate {
    pub fn render(&self, x_text: &str) -> String {
        if self.include_source_text {
            format!(
                "### [{}]: {} ### [{}]: ",
                self.src_lang, x_text, self.tgt_lang
            )
        } else {
            format!("### [{}]: ### [{}]: ", self.src_lang, self.tgt_lang)
        }
    }
}
