use std::fs;
use std::path::Path;

use super::vocab::{split_words, Vocab};
use crate::error::{Error, Result};
use crate::transformer::BOS;

/// Default number of predicted tokens per training sequence.
pub const SEQ_LEN: usize = 200;

/// Token sequences, each starting with BOS.
///
/// A sequence of `n + 1` ids yields `n` next-token predictions, so a chunk of
/// `SEQ_LEN` words occupies exactly `SEQ_LEN` model positions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenBatch {
    pub seqs: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Number of next-token targets across all sequences.
    pub fn num_targets(&self) -> usize {
        self.seqs.iter().map(|s| s.len().saturating_sub(1)).sum()
    }
}

/// Reads a UTF-8 corpus with one document per line, dropping blank lines.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let docs: Vec<String> = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if docs.is_empty() {
        return Err(Error::Ingestion(format!("{} holds no documents", path.display())));
    }
    Ok(docs)
}

/// Tokenizes documents into BOS-prefixed chunks of at most `chunk` words.
pub fn tokenize<S: AsRef<str>>(docs: &[S], vocab: &Vocab, chunk: usize) -> Result<TokenBatch> {
    if chunk == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    let mut seqs = Vec::new();
    for doc in docs {
        let ids: Vec<usize> = split_words(doc.as_ref()).into_iter().map(|w| vocab.id(w)).collect();
        for piece in ids.chunks(chunk) {
            let mut s = Vec::with_capacity(piece.len() + 1);
            s.push(BOS);
            s.extend_from_slice(piece);
            seqs.push(s);
        }
    }
    if seqs.is_empty() {
        return Err(Error::Ingestion("corpus produced no tokens".into()));
    }
    Ok(TokenBatch { seqs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::UNK;

    #[test]
    fn examples() {
        let v = Vocab::from_words(["a", "b"]);
        let t = tokenize(&["a a b"], &v, SEQ_LEN).unwrap();
        let (a, b) = (v.id("a"), v.id("b"));
        assert_eq!(t.seqs, vec![vec![BOS, a, a, b]]);
        assert_eq!(tokenize(&["zebra"], &v, SEQ_LEN).unwrap().seqs, vec![vec![BOS, UNK]]);
    }

    #[test]
    fn long_documents_are_chunked() {
        let v = Vocab::from_words(["w"]);
        let doc = vec!["w"; 450].join(" ");
        let t = tokenize(&[doc], &v, SEQ_LEN).unwrap();
        let lens: Vec<usize> = t.seqs.iter().map(|s| s.len() - 1).collect();
        assert_eq!(lens, vec![200, 200, 50]);
        assert_eq!(t.num_targets(), 450);
    }

    #[test]
    fn empty_input_is_an_ingestion_error() {
        let v = Vocab::from_words(["w"]);
        assert!(matches!(tokenize::<&str>(&[], &v, 10), Err(Error::Ingestion(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "\n \n").unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Ingestion(_))));
    }
}
