use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::world::{Color, Shape};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const SEP: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<sep>"];

const WORDS: [&str; 20] = [
    "how", "many", "objects", "are", "there", "is", "a", "what", "at", "row", "column", "describe", "the", "image",
    "yes", "no", "nothing", "color", "shape", "and",
];

/// Largest count answer; digits `0..=MAX_COUNT` are single tokens.
pub const MAX_COUNT: usize = 16;

/// Fixed word-level vocabulary padded with reserved symbols up to `C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(WORDS.iter().map(|s| s.to_string()));
        symbols.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        symbols.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        symbols.extend((0..=MAX_COUNT).map(|d| d.to_string()));
        if symbols.len() > size {
            return Err(Error::Config(format!(
                "vocabulary needs at least {} symbols, got {size}",
                symbols.len()
            )));
        }
        let used = symbols.len();
        symbols.extend((used..size).map(|i| format!("<unused_{i}>")));
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Tokenize(word.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.symbol(i).unwrap_or("<oov>")).collect();
        words.join(" ")
    }
}
