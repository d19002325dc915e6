use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Printable symbols in id order, starting right after the four specials.
const ALPHABET: &str = "0123456789.-+=abcdefghijklmnopqrstuvwxyz ";

/// Character-level vocabulary over a fixed alphabet.
///
/// Ids 0..4 are the specials PAD, BOS, SEP and EOS; printable symbols follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    lookup: [Option<u8>; 128],
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const SEP: usize = 2;
    pub const EOS: usize = 3;
    pub const NUM_SPECIALS: usize = 4;

    pub fn new() -> Self {
        let symbols: Vec<char> = ALPHABET.chars().collect();
        let mut lookup = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            lookup[c as usize] = Some((i + Self::NUM_SPECIALS) as u8);
        }
        Self { symbols, lookup }
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + Self::NUM_SPECIALS
    }

    pub fn contains(&self, ch: char) -> bool {
        self.id_of(ch).is_some()
    }

    pub fn id_of(&self, ch: char) -> Option<usize> {
        if (ch as u32) < 128 {
            self.lookup[ch as usize].map(usize::from)
        } else {
            None
        }
    }

    /// Printable symbol for `id`, `None` for specials and out-of-range ids.
    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(Self::NUM_SPECIALS)
            .and_then(|i| self.symbols.get(i).copied())
    }

    pub fn is_special(id: usize) -> bool {
        id < Self::NUM_SPECIALS
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| self.id_of(ch).ok_or(Error::UnknownSymbol { ch, position }))
            .collect()
    }

    /// Printable symbols of `ids`; specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.symbol(id)).collect()
    }

    /// Replaces every out-of-alphabet character by a space; returns the count.
    pub fn sanitize(&self, text: &str) -> (String, usize) {
        let mut replaced = 0;
        let out = text
            .chars()
            .map(|c| {
                if self.contains(c) {
                    c
                } else {
                    replaced += 1;
                    ' '
                }
            })
            .collect();
        (out, replaced)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceRole {
    Input,
    Gold,
    Generated,
}

/// Token ids with the role they play in a training or inference step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    role: SequenceRole,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, role: SequenceRole, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        if role == SequenceRole::Gold && ids.last() != Some(&Vocab::EOS) {
            return Err(Error::Config("gold target must end with EOS".into()));
        }
        Ok(Self { ids, role })
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<usize>, role: SequenceRole) -> Self {
        Self { ids, role }
    }

    pub fn input(vocab: &Vocab, text: &str) -> Result<Self> {
        Self::new(vocab.encode(text)?, SequenceRole::Input, vocab.size())
    }

    /// Encodes `text` and appends EOS.
    pub fn gold(vocab: &Vocab, text: &str) -> Result<Self> {
        let mut ids = vocab.encode(text)?;
        ids.push(Vocab::EOS);
        Self::new(ids, SequenceRole::Gold, vocab.size())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn role(&self) -> SequenceRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
