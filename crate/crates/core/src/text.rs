//! Closed instruction vocabulary and whitespace tokenization.

use crate::error::{Error, Result};

/// Object colours: `(word, image token)` under the flat 4-level palette,
/// token = `16 r + 4 g + b`.
pub const OBJECT_COLORS: [(&str, u32); 8] = [
    ("red", 48),
    ("green", 12),
    ("blue", 3),
    ("yellow", 60),
    ("magenta", 51),
    ("cyan", 15),
    ("orange", 56),
    ("purple", 35),
];

/// Quadrant words in raster order.
pub const QUADRANTS: [&str; 4] = ["topleft", "topright", "bottomleft", "bottomright"];

const VERBS: [&str; 5] = ["recolor", "remove", "add", "to", "at"];

/// An ordered word list; a word's index is its token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// The instruction vocabulary of the synthetic editing task.
    pub fn instructions() -> Self {
        let words = std::iter::once("<pad>")
            .chain(VERBS)
            .chain(OBJECT_COLORS.iter().map(|(w, _)| *w))
            .chain(QUADRANTS)
            .map(String::from)
            .collect();
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, token: u32) -> Option<&str> {
        self.words.get(token as usize).map(String::as_str)
    }

    /// Lower-cases and splits on whitespace.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.token(&w.to_lowercase())).collect()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.word(t).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }
}
