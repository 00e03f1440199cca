use std::collections::HashMap;

use crate::error::{Error, Result};

/// Reserved id for characters outside the vocabulary.
pub const UNK: usize = 0;

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz .,!?'-;:";

/// Character-level symbol table. Id 0 is [`UNK`], ids from 1 follow the
/// symbol order: `a`–`z`, space, then `.,!?'-;:`.
#[derive(Clone, Debug)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_symbols(SYMBOLS)
    }
}

impl Vocab {
    pub fn from_symbols(symbols: &str) -> Self {
        let symbols: Vec<char> = symbols.chars().collect();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 1))
            .collect();
        Self { symbols, index }
    }

    /// Number of ids including [`UNK`].
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    /// One id per character of the lowercased text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::invalid("tokenize", "empty text"));
        }
        Ok(text
            .chars()
            .flat_map(char::to_lowercase)
            .map(|c| self.index.get(&c).copied().unwrap_or(UNK))
            .collect())
    }

    /// Inverse of [`Vocab::tokenize`] on in-vocabulary ids; [`UNK`] and
    /// out-of-range ids become `_`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i).unwrap_or('_')).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_start_at_one() {
        let v = Vocab::default();
        assert_eq!(v.tokenize("ab").unwrap(), vec![1, 2]);
        assert_eq!(v.tokenize("AB").unwrap(), vec![1, 2]);
        assert_eq!(v.len(), 36);
    }

    #[test]
    fn unknown_glyph_maps_to_unk() {
        let v = Vocab::default();
        assert_eq!(v.tokenize("a#é").unwrap(), vec![1, UNK, UNK]);
        assert!(v.tokenize("").is_err());
    }

    #[test]
    fn round_trip() {
        let v = Vocab::default();
        let s = "hello, world! it's a-ok; yes: no? fine.";
        assert_eq!(v.detokenize(&v.tokenize(s).unwrap()), s);
    }
}
