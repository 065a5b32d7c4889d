//! Token ids, token sequences, and the whitespace/punctuation tokenizer.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Start-of-sequence token; the decoder's input at position 0. Never emitted.
pub const BOS: TokenId = 0;
/// End-of-sequence token.
pub const EOS: TokenId = 1;
/// Out-of-vocabulary token.
pub const UNK: TokenId = 2;

pub const SPECIAL_TOKENS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Function words that never count as content for factuality scoring.
pub const STOPWORDS: [&str; 5] = ["the", "a", "an", "and", "of"];

/// An ordered list of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    /// Copy of the sequence with a trailing EOS removed, if present.
    pub fn without_eos(&self) -> TokenSequence {
        match self.0.last() {
            Some(&EOS) => TokenSequence(self.0[..self.0.len() - 1].to_vec()),
            _ => self.clone(),
        }
    }

    pub fn with_eos(&self) -> TokenSequence {
        let mut tokens = self.0.clone();
        tokens.push(EOS);
        TokenSequence(tokens)
    }

    pub fn check_range(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(tokens: Vec<TokenId>) -> Self {
        TokenSequence(tokens)
    }
}

impl AsRef<[TokenId]> for TokenSequence {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}

/// Bidirectional word/id map. Ids 0..3 are always the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    non_content: Vec<bool>,
}

impl Vocabulary {
    /// Builds a vocabulary from the special tokens followed by `words` in order.
    /// Repeated words are ignored.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
            non_content: Vec::new(),
        };
        for special in SPECIAL_TOKENS {
            vocab.push(special.to_string());
        }
        for w in words {
            vocab.push(w.into());
        }
        vocab
    }

    /// Builds a vocabulary from every token seen in `texts`, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary::from_words(Vec::<String>::new());
        for text in texts {
            for piece in split_text(text) {
                vocab.push(piece);
            }
        }
        vocab
    }

    fn push(&mut self, word: String) {
        if self.index.contains_key(&word) {
            return;
        }
        let id = self.words.len() as TokenId;
        let non_content = id < SPECIAL_TOKENS.len() as TokenId
            || STOPWORDS.contains(&word.as_str())
            || word.chars().all(|c| c.is_ascii_punctuation());
        self.index.insert(word.clone(), id);
        self.words.push(word);
        self.non_content.push(non_content);
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Content tokens are everything except specials, stopwords and punctuation.
    pub fn is_content(&self, id: TokenId) -> bool {
        !self.non_content.get(id as usize).copied().unwrap_or(true)
    }

    /// Ids of all content tokens in the vocabulary.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.words.len() as TokenId).filter(|&id| self.is_content(id))
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(
            split_text(text)
                .into_iter()
                .map(|piece| self.id(&piece).unwrap_or(UNK))
                .collect(),
        )
    }

    /// Space-joined text; the inverse of [`Vocabulary::encode`] for in-vocabulary tokens.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.tokens()
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.words[SPECIAL_TOKENS.len()..].join("\n");
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Vocabulary::from_words(
            body.lines().filter(|l| !l.is_empty()).map(str::to_string),
        ))
    }
}

/// Lowercases and splits on whitespace; every punctuation character is its own
/// piece. Special-token markers such as `<unk>` are kept whole.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if SPECIAL_TOKENS.contains(&lower.as_str()) {
            out.push(lower);
            continue;
        }
        let mut word = String::new();
        for c in lower.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_handles_case_and_punctuation() {
        assert_eq!(
            split_text("The Cat, sat.  <UNK>"),
            vec!["the", "cat", ",", "sat", ".", "<unk>"]
        );
    }

    #[test]
    fn encode_maps_unknown_words_to_unk() {
        let vocab = Vocabulary::from_words(["cat", "."]);
        let seq = vocab.encode("cat dog .");
        assert_eq!(seq.tokens(), &[3, UNK, 4]);
        assert_eq!(vocab.decode(&seq), "cat <unk> .");
        assert_eq!(vocab.encode(&vocab.decode(&seq)), seq);
    }

    #[test]
    fn content_classification() {
        let vocab = Vocabulary::from_words(["the", "cat", ".", "and"]);
        let content: Vec<_> = vocab.content_ids().collect();
        assert_eq!(content, vec![vocab.id("cat").unwrap()]);
        assert!(!vocab.is_content(EOS));
    }

    #[test]
    fn range_check_reports_offender() {
        let seq = TokenSequence::new(vec![3, 9]);
        assert!(matches!(
            seq.check_range(5),
            Err(Error::TokenOutOfRange { id: 9, vocab_size: 5 })
        ));
        assert!(seq.check_range(10).is_ok());
    }
}
