//! The closed token vocabulary shared by questions, context descriptions and
//! the text encoder.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB: &[&str] = &[
    "[PAD]", "[CLS]", "[SEP]", "[UNK]",
    // question words
    "is", "there", "a", "are", "the", "objects", "object",
    // task words
    "existence", "count", "position", "color", "scene",
    // descriptor words
    "background", "shape", "relation", "with", "and",
    // colors
    "red", "green", "blue", "yellow",
    // shapes
    "circle", "square", "triangle",
    // relations
    "above", "below", "left-of", "right-of",
    // backgrounds
    "plain-light", "plain-dark", "striped", "checker",
    // digits
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    // coarse regions, used by the full-scene description mode
    "top-left", "top", "top-right", "left", "center", "right", "bottom-left", "bottom",
    "bottom-right",
    // answers
    "yes", "no",
];

pub const PAD: Token = Token(0);
pub const CLS: Token = Token(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Token(u16);

impl Token {
    pub fn parse(word: &str) -> Result<Self> {
        VOCAB
            .iter()
            .position(|w| *w == word)
            .map(|i| Token(i as u16))
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id < VOCAB.len() {
            Ok(Token(id as u16))
        } else {
            Err(Error::TokenId(id))
        }
    }

    pub fn id(self) -> usize {
        usize::from(self.0)
    }

    pub fn as_str(self) -> &'static str {
        VOCAB[self.id()]
    }
}

/// Shorthand for vocabulary words known at compile time.
pub(crate) fn tok(word: &str) -> Token {
    Token::parse(word).unwrap_or_else(|_| panic!("`{word}` missing from vocabulary"))
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Token> for String {
    fn from(t: Token) -> Self {
        t.as_str().to_string()
    }
}

impl TryFrom<String> for Token {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Token::parse(&s)
    }
}

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn parse_words(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace().map(Token::parse).collect()
}

pub fn join(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique() {
        let mut v: Vec<_> = VOCAB.to_vec();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), VOCAB.len());
    }

    #[test]
    fn roundtrip_words() {
        let toks = parse_words("is there a red circle").unwrap();
        assert_eq!(join(&toks), "is there a red circle");
        assert!(parse_words("is there a purple circle").is_err());
        assert_eq!(Token::parse("[PAD]").unwrap(), PAD);
        assert_eq!(Token::parse("[CLS]").unwrap(), CLS);
    }
}
