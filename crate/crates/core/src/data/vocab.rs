use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transformer::{BOS, PAD, UNK};

pub const RESERVED: [&str; 3] = ["<bos>", "<unk>", "<pad>"];

/// Word-level vocabulary. Ids 0..3 are BOS, UNK and PAD; the rest are words
/// ordered by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits on whitespace and detaches punctuation into single-character
/// tokens. Apostrophes stay inside words (`o'er`, `'tis`).
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = None;
        for (i, c) in chunk.char_indices() {
            if c.is_alphanumeric() || c == '\'' {
                start.get_or_insert(i);
            } else {
                if let Some(s) = start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&chunk[s..]);
        }
    }
    out
}

impl Vocab {
    /// Builds from documents; `cap` bounds the total size including the
    /// reserved ids.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>, cap: Option<usize>) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for w in split_words(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Ingestion("no words to build a vocabulary from".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(cap) = cap {
            ranked.truncate(cap.saturating_sub(RESERVED.len()));
        }
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w)))
    }

    /// Reserved ids followed by `words` in order; duplicates are skipped.
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied().map(String::from).chain(words.into_iter().map(|w| w.as_ref().to_string())) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == RESERVED.len()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Ids that never act as context words.
    pub fn special_ids() -> [usize; 2] {
        [BOS, PAD]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).into_iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<&str> = text.lines().collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!("{} does not start with the reserved ids", path.display())));
        }
        Ok(Self::from_words(&words[RESERVED.len()..]))
    }
}
