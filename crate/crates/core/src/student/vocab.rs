use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a vocabulary symbol.
pub type Symbol = usize;

pub const BOS: Symbol = 0;
pub const EOS: Symbol = 1;

/// Character vocabulary. Index 0 is BOS and index 1 is EOS; the remaining
/// indices map one-to-one onto characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Default for Vocabulary {
    /// Newline plus printable ASCII (space through `~`): V = 98.
    fn default() -> Self {
        let chars = std::iter::once('\n').chain((b' '..=b'~').map(char::from));
        Vocabulary::new(chars).expect("ascii set is distinct")
    }
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::contract(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocabulary { chars })
    }

    /// Number of symbols including BOS and EOS.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, c: char) -> Option<Symbol> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 2)
    }

    pub fn char_of(&self, s: Symbol) -> Option<char> {
        s.checked_sub(2).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Symbol>> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(Error::UnknownSymbol(c)))
            .collect()
    }

    /// Decodes symbols to text, dropping BOS and EOS.
    pub fn decode(&self, symbols: &[Symbol]) -> String {
        symbols.iter().filter_map(|&s| self.char_of(s)).collect()
    }
}
