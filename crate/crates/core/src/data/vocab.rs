use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::record::{SampleRecord, TextKind};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const SENTINELS: usize = 3;

/// Codepoint-level vocabulary. Indices 0..3 are PAD, SOS, EOS; characters
/// follow in codepoint order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharVocab {
    fn from(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + SENTINELS)).collect();
        Self { chars, index }
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

impl CharVocab {
    pub fn len(&self) -> usize {
        self.chars.len() + SENTINELS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, i: usize) -> Option<char> {
        i.checked_sub(SENTINELS).and_then(|j| self.chars.get(j)).copied()
    }

    /// Character indices without sentinels.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.index_of(c).ok_or_else(|| Error::invalid(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    /// Characters for every non-sentinel index; decoding stops at EOS.
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .take_while(|&&i| i != EOS)
            .filter_map(|&i| self.char_at(i))
            .collect()
    }
}

pub fn build_char_vocab(records: &[SampleRecord], kind: TextKind) -> Result<CharVocab> {
    let mut set = BTreeSet::new();
    let mut any = false;
    for t in records.iter().filter_map(|r| r.text(kind)) {
        any = true;
        set.extend(t.chars());
    }
    if !any || set.is_empty() {
        return Err(Error::invalid(format!("no {kind} text to build a vocabulary from")));
    }
    Ok(CharVocab::from(set.into_iter().collect::<Vec<_>>()))
}
