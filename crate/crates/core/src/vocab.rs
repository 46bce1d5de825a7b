use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_metrics::tokenize;

pub const PAD: &str = "<PAD>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const UNK: &str = "<UNK>";
/// Marker the language model emits after a phrase to request a box.
pub const BOX: &str = "<BOX>";

/// Dense token <-> id map. Ids 0..4 are PAD, BOS, EOS, UNK. New tokens are
/// always appended, so existing ids never move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// The four structural specials followed by the corpus words in sorted
    /// order. Has no `<BOX>` token.
    pub fn base<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocabulary::from(tokens)
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

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    pub fn box_id(&self) -> Option<u32> {
        self.id(BOX)
    }

    /// Appends `token` and returns its id.
    pub fn push(&mut self, token: &str) -> Result<u32> {
        if self.index.contains_key(token) {
            return Err(Error::DuplicateToken(token.to_string()));
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    /// Tokenizes `text` and maps each word to its id, unknown words to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Vocabulary over every report and phrase word plus the five special
/// tokens, `<BOX>` at id 4.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let mut v = Vocabulary::base(texts);
    let words: Vec<String> = v.tokens.drain(4..).collect();
    v.tokens.push(BOX.to_string());
    v.tokens.extend(words);
    Vocabulary::from(v.tokens)
}
