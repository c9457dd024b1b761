use std::collections::HashMap;

use super::DataError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const VOCAB_SIZE: usize = 86;
/// Number of printable (non-special) tokens.
pub const PAYLOAD_SIZE: usize = VOCAB_SIZE - 3;

const SYMBOLS: [char; 21] = [
    ' ', '.', ',', ':', ';', '!', '?', '-', '_', '/', '+', '*', '=', '(', ')', '[', ']', '{', '}', '@', '#',
];

/// Fixed 86-token character vocabulary.
///
/// Ids 0–2 are pad/bos/eos, 3–28 `a`–`z`, 29–54 `A`–`Z`, 55–64 `0`–`9`,
/// and 65–85 the symbols ` .,:;!?-_/+*=()[]{}@#` in that order.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_of: HashMap<char, TokenId>,
    char_of: Vec<Option<char>>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut char_of = vec![None, None, None];
        char_of.extend(('a'..='z').map(Some));
        char_of.extend(('A'..='Z').map(Some));
        char_of.extend(('0'..='9').map(Some));
        char_of.extend(SYMBOLS.iter().copied().map(Some));
        debug_assert_eq!(char_of.len(), VOCAB_SIZE);
        let id_of = char_of
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (c, i as TokenId)))
            .collect();
        Self { id_of, char_of }
    }

    pub fn len(&self) -> usize {
        self.char_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_of.is_empty()
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.id_of.get(&c).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        self.char_of.get(id as usize).copied().flatten()
    }

    /// The printable characters in id order.
    pub fn payload_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.char_of.iter().filter_map(|c| *c)
    }

    /// `[bos, ids…, eos]`, truncated so the whole sequence has at most `max_len` tokens.
    pub fn tokenize(&self, s: &str, max_len: usize) -> Result<Vec<TokenId>, DataError> {
        let keep = max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(s.len().min(keep) + 2);
        ids.push(BOS);
        for c in s.chars().take(keep) {
            ids.push(self.id_of(c).ok_or(DataError::UnknownChar(c))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize): drops bos, stops at the first eos or pad.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS && id != PAD)
            .filter_map(|&id| self.char_of(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_fixed_table() {
        let v = Vocabulary::new();
        assert_eq!(v.len(), 86);
        assert_eq!(v.id_of('a'), Some(3));
        assert_eq!(v.id_of('z'), Some(28));
        assert_eq!(v.id_of('A'), Some(29));
        assert_eq!(v.id_of('0'), Some(55));
        assert_eq!(v.id_of(' '), Some(65));
        assert_eq!(v.id_of('#'), Some(85));
        assert_eq!(v.payload_chars().count(), PAYLOAD_SIZE);
        for c in v.payload_chars() {
            assert_eq!(v.char_of(v.id_of(c).unwrap()), Some(c));
        }
        assert_eq!(v.char_of(PAD), None);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::new();
        assert_eq!(v.tokenize("a1!", 50).unwrap(), vec![1, 3, 56, 70, 2]);
        assert_eq!(v.tokenize("", 50).unwrap(), vec![1, 2]);
        let long: String = "x".repeat(60);
        let ids = v.tokenize(&long, 50).unwrap();
        assert_eq!(ids.len(), 50);
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert!(matches!(v.tokenize("é", 50), Err(DataError::UnknownChar('é'))));
    }

    #[test]
    fn detokenize_examples() {
        let v = Vocabulary::new();
        assert_eq!(v.detokenize(&[1, 3, 4, 2]), "ab");
        assert_eq!(v.detokenize(&[1, 2]), "");
        assert_eq!(v.detokenize(&[1, 3, 0, 4]), "a");
    }
}
