//! Phoneme and viseme inventories, the character lexicon, and the
//! frame-level semantic mapping used by the alignment loss.
//!
//! The bundled inventory groups 37 Mandarin IPA phonemes into 15 viseme
//! classes plus a blank/silence class at ID 0. Phoneme index 0 is the
//! blank symbol `_` and maps only to viseme 0.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Bundled phoneme/viseme inventory.
pub const DEFAULT_INVENTORY: &str = include_str!("../data/inventory.tsv");
/// Bundled single-pronunciation character lexicon.
pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

pub const BLANK_SYMBOL: &str = "_";
pub const BLANK: usize = 0;

/// Printed frequencies are rounded to 0.01%, so they only sum to one
/// within this tolerance.
const FREQUENCY_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinguisticsError {
    #[error("io error reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate phoneme symbol {symbol:?}")]
    DuplicatePhoneme { line: usize, symbol: String },
    #[error("line {line}: duplicate viseme id {id}")]
    DuplicateViseme { line: usize, id: usize },
    #[error("line {line}: unmapped phoneme {symbol:?} (no viseme id)")]
    UnmappedPhoneme { line: usize, symbol: String },
    #[error("viseme frequencies sum to {sum}, expected 1")]
    FrequencySum { sum: f64 },
    #[error("line {line}: unknown phoneme symbol {symbol:?}")]
    UnknownPhoneme { line: usize, symbol: String },
    #[error("line {line}: duplicate lexicon character {ch:?}")]
    DuplicateCharacter { line: usize, ch: char },
    #[error("character {ch:?} (U+{code:04X}) at position {position} is not in the lexicon")]
    OutOfLexicon { ch: char, code: u32, position: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class {class} out of range (limit {limit})")]
    ClassOutOfRange { class: usize, limit: usize },
}

/// Phoneme and viseme vocabularies together with the phoneme→viseme map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticInventory {
    phonemes: Vec<String>,
    phoneme_lookup: HashMap<String, usize>,
    phoneme_to_viseme: Vec<usize>,
    viseme_members: Vec<Vec<usize>>,
    printed_frequency: Vec<f64>,
    viseme_frequency: Vec<f64>,
}

impl LinguisticInventory {
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_INVENTORY).expect("bundled inventory is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LinguisticsError> {
        Self::parse(&read_text(path.as_ref())?)
    }

    /// Parses the tab-separated inventory format:
    /// `viseme_id <TAB> frequency <TAB> phoneme,phoneme,...`.
    pub fn parse(text: &str) -> Result<Self, LinguisticsError> {
        let mut rows: Vec<(usize, usize, f64, Vec<String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 3 {
                return Err(LinguisticsError::Parse {
                    line,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let symbols: Vec<String> = fields[2]
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            if symbols.iter().any(|s| s.is_empty()) {
                return Err(LinguisticsError::Parse {
                    line,
                    message: "empty phoneme symbol".into(),
                });
            }
            let id_field = fields[0].trim();
            if id_field.is_empty() {
                return Err(LinguisticsError::UnmappedPhoneme {
                    line,
                    symbol: symbols[0].clone(),
                });
            }
            let id: usize = id_field.parse().map_err(|_| LinguisticsError::Parse {
                line,
                message: format!("invalid viseme id {id_field:?}"),
            })?;
            let freq: f64 = fields[1].trim().parse().map_err(|_| LinguisticsError::Parse {
                line,
                message: format!("invalid frequency {:?}", fields[1]),
            })?;
            if !freq.is_finite() || freq < 0.0 {
                return Err(LinguisticsError::Parse {
                    line,
                    message: format!("frequency must be nonnegative, got {freq}"),
                });
            }
            rows.push((line, id, freq, symbols));
        }

        let count = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut seen = vec![false; count];
        for (line, id, _, _) in &rows {
            if seen[*id] {
                return Err(LinguisticsError::DuplicateViseme { line: *line, id: *id });
            }
            seen[*id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LinguisticsError::Parse {
                line: 0,
                message: format!("viseme ids must be contiguous from 0; missing {missing}"),
            });
        }
        rows.sort_by_key(|r| r.1);
        if count < 2 {
            return Err(LinguisticsError::Parse {
                line: 0,
                message: "inventory needs a blank row and at least one viseme".into(),
            });
        }
        let blank_row = &rows[0];
        if blank_row.3 != [BLANK_SYMBOL.to_string()] {
            return Err(LinguisticsError::Parse {
                line: blank_row.0,
                message: format!("viseme 0 must hold exactly the blank symbol {BLANK_SYMBOL:?}"),
            });
        }
        if blank_row.2 != 0.0 {
            return Err(LinguisticsError::Parse {
                line: blank_row.0,
                message: "viseme 0 frequency must be 0".into(),
            });
        }

        let mut phonemes = Vec::new();
        let mut phoneme_lookup = HashMap::new();
        let mut phoneme_to_viseme = Vec::new();
        let mut viseme_members = vec![Vec::new(); count];
        let mut printed_frequency = vec![0.0; count];
        for (line, id, freq, symbols) in &rows {
            printed_frequency[*id] = *freq;
            for sym in symbols {
                if *id != 0 && sym == BLANK_SYMBOL {
                    return Err(LinguisticsError::DuplicatePhoneme {
                        line: *line,
                        symbol: sym.clone(),
                    });
                }
                if phoneme_lookup.insert(sym.clone(), phonemes.len()).is_some() {
                    return Err(LinguisticsError::DuplicatePhoneme {
                        line: *line,
                        symbol: sym.clone(),
                    });
                }
                viseme_members[*id].push(phonemes.len());
                phonemes.push(sym.clone());
                phoneme_to_viseme.push(*id);
            }
        }

        let sum: f64 = printed_frequency[1..].iter().sum();
        if (sum - 1.0).abs() > FREQUENCY_SUM_TOLERANCE {
            return Err(LinguisticsError::FrequencySum { sum });
        }
        let mut viseme_frequency: Vec<f64> = printed_frequency.iter().map(|f| f / sum).collect();
        viseme_frequency[0] = 0.0;

        Ok(Self {
            phonemes,
            phoneme_lookup,
            phoneme_to_viseme,
            viseme_members,
            printed_frequency,
            viseme_frequency,
        })
    }

    /// Number of phoneme classes including the blank.
    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    /// Number of viseme classes including the blank.
    pub fn num_visemes(&self) -> usize {
        self.viseme_members.len()
    }

    pub fn phoneme_symbol(&self, index: usize) -> &str {
        &self.phonemes[index]
    }

    pub fn phoneme_symbols(&self) -> &[String] {
        &self.phonemes
    }

    pub fn phoneme_index(&self, symbol: &str) -> Option<usize> {
        self.phoneme_lookup.get(symbol).copied()
    }

    pub fn viseme_of(&self, phoneme: usize) -> usize {
        self.phoneme_to_viseme[phoneme]
    }

    pub fn phoneme_to_viseme(&self) -> &[usize] {
        &self.phoneme_to_viseme
    }

    /// Phoneme indices grouped under viseme `id`.
    pub fn viseme_members(&self, id: usize) -> &[usize] {
        &self.viseme_members[id]
    }

    /// Frequencies as written in the inventory file.
    pub fn printed_frequency(&self) -> &[f64] {
        &self.printed_frequency
    }

    /// Prior over viseme IDs, renormalized to sum to exactly one over
    /// the non-blank IDs.
    pub fn viseme_frequency(&self) -> &[f64] {
        &self.viseme_frequency
    }

    /// Maps a phoneme sequence to its viseme sequence.
    pub fn visemes_for(&self, phonemes: &[usize]) -> Vec<usize> {
        phonemes.iter().map(|&p| self.phoneme_to_viseme[p]).collect()
    }

    /// Renders the inventory as a Table-I style listing with the given
    /// frequencies (fractions) per viseme.
    pub fn format_frequency_table(&self, freq: &[f64]) -> String {
        let mut out = String::from("Viseme\tFrequency\tIPA\n");
        for id in 0..self.num_visemes() {
            let f = if id == 0 {
                "N/A".to_string()
            } else {
                format!("{:.2}%", 100.0 * freq.get(id).copied().unwrap_or(0.0))
            };
            let syms: Vec<&str> = self.viseme_members[id]
                .iter()
                .map(|&p| self.phonemes[p].as_str())
                .collect();
            out.push_str(&format!("{id}\t{f}\t{}\n", syms.join(", ")));
        }
        out
    }
}

/// One character with its phoneme string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub character: char,
    pub phonemes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    lookup: HashMap<char, usize>,
}

impl Lexicon {
    pub fn bundled(inv: &LinguisticInventory) -> Self {
        Self::parse(DEFAULT_LEXICON, inv).expect("bundled lexicon is valid")
    }

    pub fn load(path: impl AsRef<Path>, inv: &LinguisticInventory) -> Result<Self, LinguisticsError> {
        Self::parse(&read_text(path.as_ref())?, inv)
    }

    /// Parses `character <whitespace> phoneme phoneme ...` records.
    pub fn parse(text: &str, inv: &LinguisticInventory) -> Result<Self, LinguisticsError> {
        let mut entries = Vec::new();
        let mut lookup = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut tokens = raw.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let mut chars = head.chars();
            let character = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => {
                    return Err(LinguisticsError::Parse {
                        line,
                        message: format!("expected a single character, found {head:?}"),
                    })
                }
            };
            let mut phonemes = Vec::new();
            for sym in tokens {
                match inv.phoneme_index(sym) {
                    Some(BLANK) | None => {
                        return Err(LinguisticsError::UnknownPhoneme {
                            line,
                            symbol: sym.to_string(),
                        })
                    }
                    Some(p) => phonemes.push(p),
                }
            }
            if phonemes.is_empty() {
                return Err(LinguisticsError::Parse {
                    line,
                    message: format!("character {character:?} has no phonemes"),
                });
            }
            if lookup.insert(character, entries.len()).is_some() {
                return Err(LinguisticsError::DuplicateCharacter { line, ch: character });
            }
            entries.push(LexiconEntry { character, phonemes });
        }
        Ok(Self { entries, lookup })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &LexiconEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.lookup.get(&ch).copied()
    }

    /// Restricts the lexicon to its first `n` entries.
    pub fn truncated(&self, n: usize) -> Self {
        let entries: Vec<LexiconEntry> = self.entries.iter().take(n).cloned().collect();
        let lookup = entries.iter().enumerate().map(|(i, e)| (e.character, i)).collect();
        Self { entries, lookup }
    }

    pub fn text_of(&self, chars: &[usize]) -> String {
        chars.iter().map(|&c| self.entries[c].character).collect()
    }
}

/// Character, phoneme and viseme label sequences for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTriple {
    /// Lexicon entry indices.
    pub chars: Vec<usize>,
    pub phonemes: Vec<usize>,
    pub visemes: Vec<usize>,
}

impl LabelTriple {
    pub fn from_chars(chars: &[usize], lexicon: &Lexicon, inv: &LinguisticInventory) -> Self {
        let phonemes: Vec<usize> = chars
            .iter()
            .flat_map(|&c| lexicon.entry(c).phonemes.iter().copied())
            .collect();
        let visemes = inv.visemes_for(&phonemes);
        Self {
            chars: chars.to_vec(),
            phonemes,
            visemes,
        }
    }
}

pub fn text_to_labels(
    text: &str,
    lexicon: &Lexicon,
    inv: &LinguisticInventory,
) -> Result<LabelTriple, LinguisticsError> {
    let mut chars = Vec::new();
    for (position, ch) in text.chars().enumerate() {
        match lexicon.index_of(ch) {
            Some(i) => chars.push(i),
            None => {
                return Err(LinguisticsError::OutOfLexicon {
                    ch,
                    code: ch as u32,
                    position,
                })
            }
        }
    }
    Ok(LabelTriple::from_chars(&chars, lexicon, inv))
}

/// Row-major square 0/1 matrix.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    data: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let n = rows.len();
        Self::from_fn(n, |i, j| rows[i][j] != 0)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Elementwise AND.
    pub fn and(&self, other: &BinaryMatrix) -> Result<BinaryMatrix, LinguisticsError> {
        if self.n != other.n {
            return Err(LinguisticsError::LengthMismatch {
                left: self.n,
                right: other.n,
            });
        }
        Ok(BinaryMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }
}

impl fmt::Debug for BinaryMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMatrix({}x{})", self.n, self.n)?;
        for i in 0..self.n {
            let row: String = self.row(i).iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

/// `M[i][j] = 1` iff the phoneme class at frame `j` belongs to the
/// (non-blank) viseme class at frame `i`.
pub fn build_mapping_matrix(
    viseme_frames: &[usize],
    phoneme_frames: &[usize],
    inv: &LinguisticInventory,
) -> Result<BinaryMatrix, LinguisticsError> {
    if viseme_frames.len() != phoneme_frames.len() {
        return Err(LinguisticsError::LengthMismatch {
            left: viseme_frames.len(),
            right: phoneme_frames.len(),
        });
    }
    check_range(viseme_frames, inv.num_visemes())?;
    check_range(phoneme_frames, inv.num_phonemes())?;
    let mapped: Vec<usize> = phoneme_frames.iter().map(|&p| inv.viseme_of(p)).collect();
    let t = viseme_frames.len();
    Ok(BinaryMatrix::from_fn(t, |i, j| {
        viseme_frames[i] != 0 && mapped[j] == viseme_frames[i]
    }))
}

/// Band mask with `W[i][j] = 1` iff `|i - j| <= w / 2`.
pub fn build_window_mask(t: usize, w: usize) -> BinaryMatrix {
    let r = w / 2;
    BinaryMatrix::from_fn(t, |i, j| i.abs_diff(j) <= r)
}

fn check_range(classes: &[usize], limit: usize) -> Result<(), LinguisticsError> {
    match classes.iter().find(|&&c| c >= limit) {
        Some(&class) => Err(LinguisticsError::ClassOutOfRange { class, limit }),
        None => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String, LinguisticsError> {
    std::fs::read_to_string(path).map_err(|e| LinguisticsError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv() -> LinguisticInventory {
        LinguisticInventory::bundled()
    }

    fn ph(inv: &LinguisticInventory, s: &str) -> usize {
        inv.phoneme_index(s).unwrap()
    }

    #[test]
    fn bundled_inventory_shape() {
        let inv = inv();
        assert_eq!(inv.num_visemes(), 16);
        assert_eq!(inv.num_phonemes(), 38);
        assert_eq!(inv.phoneme_symbol(0), "_");
        assert_eq!(inv.viseme_of(0), 0);
        assert_eq!(inv.viseme_members(0), &[0]);
        for p in 1..inv.num_phonemes() {
            let v = inv.viseme_of(p);
            assert!((1..16).contains(&v));
        }
        let sum: f64 = inv.viseme_frequency()[1..].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_rows() {
        let inv = inv();
        assert_eq!(inv.viseme_of(ph(&inv, "f")), 3);
        assert_eq!(inv.viseme_of(ph(&inv, "y")), 13);
        assert_eq!(inv.viseme_of(ph(&inv, "m")), 2);
        assert_eq!(inv.viseme_of(ph(&inv, "ɑ")), 9);
        assert!((inv.printed_frequency()[4] - 0.1530).abs() < 1e-12);
    }

    #[test]
    fn missing_viseme_id_is_unmapped_phoneme() {
        let text = "0\t0\t_\n\t0.5\tm\n1\t0.5\tf\n";
        match LinguisticInventory::parse(text) {
            Err(LinguisticsError::UnmappedPhoneme { symbol, .. }) => assert_eq!(symbol, "m"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inventory_errors() {
        let dup = "0\t0\t_\n1\t0.5\tm\n2\t0.5\tm\n";
        assert!(matches!(
            LinguisticInventory::parse(dup),
            Err(LinguisticsError::DuplicatePhoneme { .. })
        ));
        let freq = "0\t0\t_\n1\t0.5\tm\n2\t0.2\tf\n";
        assert!(matches!(
            LinguisticInventory::parse(freq),
            Err(LinguisticsError::FrequencySum { .. })
        ));
        let garbage = "0\t0\t_\n1\t1\tm\textra\n";
        assert!(matches!(
            LinguisticInventory::parse(garbage),
            Err(LinguisticsError::Parse { line: 2, .. })
        ));
        let dup_id = "0\t0\t_\n1\t0.5\tm\n1\t0.5\tf\n";
        assert!(matches!(
            LinguisticInventory::parse(dup_id),
            Err(LinguisticsError::DuplicateViseme { .. })
        ));
    }

    #[test]
    fn lexicon_errors() {
        let inv = inv();
        assert!(matches!(
            Lexicon::parse("妈 m ɑ\n妈 m ɑ\n", &inv),
            Err(LinguisticsError::DuplicateCharacter { .. })
        ));
        assert!(matches!(
            Lexicon::parse("妈 m ɑ zz\n", &inv),
            Err(LinguisticsError::UnknownPhoneme { .. })
        ));
        assert!(matches!(
            Lexicon::parse("妈\n", &inv),
            Err(LinguisticsError::Parse { .. })
        ));
        assert!(matches!(
            Lexicon::parse("妈妈 m ɑ\n", &inv),
            Err(LinguisticsError::Parse { .. })
        ));
    }

    #[test]
    fn text_to_labels_examples() {
        let inv = inv();
        let lex = Lexicon::bundled(&inv);
        assert_eq!(text_to_labels("", &lex, &inv).unwrap(), LabelTriple::default());
        let l = text_to_labels("妈", &lex, &inv).unwrap();
        assert_eq!(l.phonemes, vec![ph(&inv, "m"), ph(&inv, "ɑ")]);
        assert_eq!(l.visemes, vec![2, 9]);
        match text_to_labels("妈X好", &lex, &inv) {
            Err(LinguisticsError::OutOfLexicon { ch, position, .. }) => {
                assert_eq!(ch, 'X');
                assert_eq!(position, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mapping_matrix_examples() {
        let inv = inv();
        let p = ph(&inv, "p");
        let t = ph(&inv, "t");
        let ph_asp = ph(&inv, "pʰ");
        let m = build_mapping_matrix(&[0, 0, 0], &[p, t, p], &inv).unwrap();
        assert_eq!(m.count_ones(), 0);
        let m = build_mapping_matrix(&[2, 4], &[p, t], &inv).unwrap();
        assert_eq!(m, BinaryMatrix::from_rows(&[&[1, 0], &[0, 1]]));
        let m = build_mapping_matrix(&[2, 2], &[p, ph_asp], &inv).unwrap();
        assert_eq!(m.count_ones(), 4);
        assert!(build_mapping_matrix(&[2], &[p, t], &inv).is_err());
        assert!(build_mapping_matrix(&[16], &[p], &inv).is_err());
        assert!(build_mapping_matrix(&[1], &[38], &inv).is_err());
    }

    #[test]
    fn window_mask_examples() {
        let w = build_window_mask(5, 1);
        assert_eq!(w, BinaryMatrix::from_fn(5, |i, j| i == j));
        assert_eq!(build_window_mask(3, 5).count_ones(), 9);
        let w = build_window_mask(10, 5);
        let ones: Vec<usize> = (0..10).filter(|&j| w.get(0, j)).collect();
        assert_eq!(ones, vec![0, 1, 2]);
    }

    #[test]
    fn frequency_table_layout() {
        let inv = inv();
        let table = inv.format_frequency_table(inv.printed_frequency());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[1], "0\tN/A\t_");
        assert_eq!(lines[5], "4\t15.30%\tt, tʰ, n, l");
    }
}
