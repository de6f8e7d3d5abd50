//! Word-level vocabulary shared by questions and answers.
//!
//! Layout: four specials, the template words, the ten digits, then one token
//! per glyph (`A`, `B`, ...). Numbers are always spelled digit by digit with
//! single spaces, so `encode` and `decode` are exact inverses on canonical
//! strings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
pub const WORDS: [&str; 10] = [
    "read", "row", "col", "count", "glyph", "at", "exists", "blank", "yes", "no",
];
pub const MAX_GLYPHS: usize = 26;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownToken { id: TokenId, size: usize },
    #[error("glyph alphabet must hold 1..={MAX_GLYPHS} glyphs, got {0}")]
    AlphabetSize(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    glyphs: usize,
    vocab: Vec<String>,
}

impl Tokenizer {
    pub fn new(glyphs: usize) -> Result<Self, TokenizerError> {
        if glyphs == 0 || glyphs > MAX_GLYPHS {
            return Err(TokenizerError::AlphabetSize(glyphs));
        }
        let mut vocab: Vec<String> = SPECIALS.iter().chain(WORDS.iter()).map(|s| s.to_string()).collect();
        vocab.extend((0..10).map(|d| d.to_string()));
        vocab.extend((0..glyphs).map(|g| glyph_name(g as u8 + 1)));
        Ok(Self { glyphs, vocab })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn glyph_count(&self) -> usize {
        self.glyphs
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn word(&self, word: &str) -> Result<TokenId, TokenizerError> {
        self.vocab
            .iter()
            .position(|w| w == word)
            .map(|i| i as TokenId)
            .ok_or_else(|| TokenizerError::UnknownWord(word.to_string()))
    }

    pub fn digit(&self, d: usize) -> TokenId {
        assert!(d < 10, "digit out of range");
        (SPECIALS.len() + WORDS.len() + d) as TokenId
    }

    /// Token for glyph id `glyph` (1-based; 0 is the blank cell).
    pub fn glyph(&self, glyph: u8) -> Option<TokenId> {
        let g = glyph as usize;
        (1..=self.glyphs)
            .contains(&g)
            .then(|| (SPECIALS.len() + WORDS.len() + 10 + g - 1) as TokenId)
    }

    /// Digit tokens spelling `n` in decimal.
    pub fn number(&self, n: usize) -> Vec<TokenId> {
        n.to_string().bytes().map(|b| self.digit((b - b'0') as usize)).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        text.split_whitespace().map(|w| self.word(w)).collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, TokenizerError> {
        let words = tokens
            .iter()
            .map(|&id| {
                self.vocab
                    .get(id as usize)
                    .map(String::as_str)
                    .ok_or(TokenizerError::UnknownToken {
                        id,
                        size: self.vocab.len(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<(), TokenizerError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(&id) => Err(TokenizerError::UnknownToken {
                id,
                size: self.vocab.len(),
            }),
            None => Ok(()),
        }
    }
}

/// An answer: token ids terminated by exactly one trailing EOS.
///
/// Equality compares tokens only, never the optional log-probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    logprob: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("answer must be a non-empty token list ending in EOS")]
pub struct MissingEos;

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self, MissingEos> {
        match tokens.last() {
            Some(&EOS) if !tokens[..tokens.len() - 1].contains(&EOS) => Ok(Self { tokens, logprob: None }),
            _ => Err(MissingEos),
        }
    }

    /// Appends EOS to `content`, dropping anything after an embedded EOS.
    pub fn from_content(content: &[TokenId]) -> Self {
        let mut tokens: Vec<TokenId> = content.iter().copied().take_while(|&t| t != EOS).collect();
        tokens.push(EOS);
        Self { tokens, logprob: None }
    }

    pub fn with_logprob(mut self, logprob: f64) -> Self {
        self.logprob = Some(logprob);
        self
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Tokens with the trailing EOS trimmed.
    pub fn content(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn logprob(&self) -> Option<f64> {
        self.logprob
    }
}

impl PartialEq for TokenSequence {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for TokenSequence {}

impl TryFrom<Vec<TokenId>> for TokenSequence {
    type Error = MissingEos;

    fn try_from(tokens: Vec<TokenId>) -> Result<Self, Self::Error> {
        Self::new(tokens)
    }
}

impl From<TokenSequence> for Vec<TokenId> {
    fn from(seq: TokenSequence) -> Self {
        seq.tokens
    }
}

pub fn glyph_name(glyph: u8) -> String {
    assert!((1..=MAX_GLYPHS as u8).contains(&glyph), "glyph id out of range");
    char::from(b'A' + glyph - 1).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_vocab_fits_budget() {
        let tok = Tokenizer::new(12).unwrap();
        assert_eq!(tok.vocab_size(), 36);
        assert!(tok.vocab_size() <= 64);
        assert_eq!(tok.word("<eos>").unwrap(), EOS);
        assert_eq!(tok.glyph(1), Some(tok.word("A").unwrap()));
        assert_eq!(tok.glyph(13), None);
        assert_eq!(tok.glyph(0), None);
    }

    #[test]
    fn rejects_bad_alphabet() {
        assert_eq!(Tokenizer::new(0), Err(TokenizerError::AlphabetSize(0)));
        assert!(Tokenizer::new(27).is_err());
    }

    #[test]
    fn numbers_spell_digits() {
        let tok = Tokenizer::new(12).unwrap();
        assert_eq!(tok.decode(&tok.number(12)).unwrap(), "1 2");
        assert_eq!(tok.decode(&tok.number(0)).unwrap(), "0");
    }

    #[test]
    fn sequences_require_single_trailing_eos() {
        assert!(TokenSequence::new(vec![]).is_err());
        assert!(TokenSequence::new(vec![5, 6]).is_err());
        assert!(TokenSequence::new(vec![5, EOS, 6, EOS]).is_err());
        let seq = TokenSequence::new(vec![5, 6, EOS]).unwrap();
        assert_eq!(seq.content(), &[5, 6]);
        assert_eq!(TokenSequence::from_content(&[5, 6]), seq);
        assert_eq!(seq.clone().with_logprob(-1.0), seq);
        let json = serde_json::to_string(&seq).unwrap();
        assert_eq!(json, "[5,6,2]");
        assert!(serde_json::from_str::<TokenSequence>("[5,6]").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(ids in prop::collection::vec(0u32..36, 0..12)) {
            let tok = Tokenizer::new(12).unwrap();
            let text = tok.decode(&ids).unwrap();
            prop_assert_eq!(tok.encode(&text).unwrap(), ids);
        }
    }
}
