//! Fixed text vocabulary: special markers, caption words, reserved ids.

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOI: TokenId = 1;
pub const EOI: TokenId = 2;
pub const SEP: TokenId = 3;
pub const EOS: TokenId = 4;

/// Declared vocabulary size; ids past the last word are reserved.
pub const VOCAB_SIZE: usize = 32;

const WORDS: &[&str] = &[
    "[PAD]",
    "[BOI]",
    "[EOI]",
    "[SEP]",
    "[EOS]",
    "a",
    "at",
    "small",
    "large",
    "dark",
    "bright",
    "circle",
    "square",
    "triangle",
    "cross",
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
];

/// Number of ids that carry a word or marker.
pub const USED_TOKENS: usize = WORDS.len();

pub fn is_special(id: TokenId) -> bool {
    id <= EOS
}

pub fn word(id: TokenId) -> String {
    match WORDS.get(id) {
        Some(w) => (*w).to_string(),
        None => format!("[R{id}]"),
    }
}

pub fn id_of(word: &str) -> Result<TokenId> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::UnknownWord(word.to_string()))
}

/// Whitespace tokenization over the fixed word list.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace().map(id_of).collect()
}

pub fn detokenize(ids: &[TokenId]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_fit_declared_vocabulary() {
        const { assert!(USED_TOKENS <= VOCAB_SIZE) };
        assert_eq!(word(BOI), "[BOI]");
        assert_eq!(id_of("[EOS]").unwrap(), EOS);
    }

    #[test]
    fn tokenize_round_trip() {
        let ids = tokenize("a small bright circle at top-left").unwrap();
        assert_eq!(detokenize(&ids), "a small bright circle at top-left");
        assert!(tokenize("a purple circle").is_err());
    }
}
