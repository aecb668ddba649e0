//! Transcript cleaning and the character vocabulary.

use std::collections::{BTreeSet, HashMap};

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::PrepError;

/// Rendering of the end-of-sentence symbol in text dumps.
pub const EOS_GLYPH: char = '⏎';
pub const PAD_ID: usize = 0;

fn is_dropped(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
            | Control
            | Format
    )
}

/// Canonical composition, punctuation/control removal and whitespace
/// collapsing. The result is what the model is trained on.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.nfc() {
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if is_dropped(c) {
            // Punctuation acts as a word boundary only if spaced.
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out
}

/// Character vocabulary. Id 0 is padding, ids `1..=n` are codepoints in
/// table order and id `n + 1` is EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl SymbolTable {
    pub fn new(symbols: Vec<char>) -> Result<Self, PrepError> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i + 1).is_some() {
                return Err(PrepError::DuplicateSymbol(c));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Table of every character that appears in the cleaned `texts`, sorted
    /// by codepoint.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| clean_text(t).chars().collect::<Vec<_>>()).collect();
        Self::new(set.into_iter().collect()).expect("set has no duplicates")
    }

    /// Total number of ids including padding and EOS.
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn eos_id(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        match id {
            PAD_ID => None,
            i if i == self.eos_id() => Some(EOS_GLYPH),
            i => self.symbols.get(i - 1).copied(),
        }
    }

    /// Renders ids for debugging, with EOS shown as `⏎`.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }
}

/// Model input: symbol ids terminated by exactly one EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymbolSequence {
    ids: Vec<usize>,
}

impl SymbolSequence {
    /// Validates the EOS-terminal invariant against `eos_id`.
    pub fn from_ids(ids: Vec<usize>, eos_id: usize) -> Result<Self, PrepError> {
        let eos_count = ids.iter().filter(|&&i| i == eos_id).count();
        if ids.last() != Some(&eos_id) || eos_count != 1 {
            return Err(PrepError::MissingEos);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i > eos_id) {
            return Err(PrepError::IdOutOfRange(bad));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn normalize_text(raw: &str, table: &SymbolTable) -> Result<SymbolSequence, PrepError> {
    let cleaned = clean_text(raw);
    if cleaned.is_empty() {
        return Err(PrepError::EmptyText);
    }
    let mut ids = cleaned
        .chars()
        .map(|c| table.id(c).ok_or(PrepError::UnknownSymbol(c)))
        .collect::<Result<Vec<_>, _>>()?;
    ids.push(table.eos_id());
    Ok(SymbolSequence { ids })
}
