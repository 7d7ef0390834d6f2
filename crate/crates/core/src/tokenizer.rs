//! Surface tokenizer and vocabulary.
//!
//! Text is split on whitespace, then leading and trailing punctuation is
//! peeled off into single-character tokens. Flags such as `-type` keep their
//! dash, and interior punctuation (`*.php`, `a/b.txt`) is left alone.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const LEADING: &[char] = &['"', '\'', '`', '(', '[', '{'];
const TRAILING: &[char] = &['"', '\'', '`', ')', ']', '}', ',', ';', ':', '?', '!'];

/// Splits `text` into surface tokens.
pub fn surface_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut core = word;
        let mut lead = Vec::new();
        while let Some(c) = core.chars().next() {
            if LEADING.contains(&c) && core.len() > c.len_utf8() {
                lead.push(c);
                core = &core[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trail = Vec::new();
        while let Some(c) = core.chars().next_back() {
            let rest = &core[..core.len() - c.len_utf8()];
            if rest.is_empty() {
                break;
            }
            let splits = TRAILING.contains(&c)
                || (c == '.' && rest.chars().next_back().is_some_and(char::is_alphanumeric));
            if !splits {
                break;
            }
            trail.push(c);
            core = rest;
        }
        out.extend(lead.into_iter().map(String::from));
        out.push(core.to_string());
        out.extend(trail.into_iter().rev().map(String::from));
    }
    out
}

/// Token ids for one sequence. `PAD` may only appear as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    /// Number of non-`PAD` ids.
    pub fn len(&self) -> usize {
        self.ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids without the `PAD` suffix.
    pub fn valid(&self) -> &[u32] {
        &self.ids[..self.len()]
    }

    /// Ids with `BOS`, `EOS` and `PAD` stripped.
    pub fn content(&self) -> Vec<u32> {
        self.valid()
            .iter()
            .copied()
            .filter(|&id| id != BOS && id != EOS)
            .collect()
    }

    pub fn padded(&self, width: usize) -> TokenSequence {
        let mut ids = self.valid().to_vec();
        ids.resize(width.max(ids.len()), PAD);
        TokenSequence { ids }
    }
}

/// Token to id map with the four reserved specials at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized training text. Every token seen at
    /// least once gets an id; ids are assigned by descending frequency, ties
    /// broken lexicographically.
    pub fn build<I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq.as_ref() {
                *counts.entry(tok.clone()).or_default() += 1;
            }
        }
        for s in SPECIALS {
            counts.remove(s);
        }
        let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(by_freq.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds from a stored token list. Specials are forced into place.
    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.retain(|t| !SPECIALS.contains(&t.as_str()));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps ids back to surface tokens, dropping `PAD`/`BOS`/`EOS`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }

    /// SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Tokenizes `text` into `BOS tokens.. EOS`, mapping unknown tokens to `UNK`
/// and truncating to `max_len` ids while keeping the final `EOS`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        surface_tokens(text)
            .iter()
            .take(max_len - 2)
            .map(|t| vocab.id(t)),
    );
    ids.push(EOS);
    TokenSequence { ids }
}
