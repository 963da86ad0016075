//! ROT-k substitution ciphers.
//!
//! Letters of an [`Alphabet`] are replaced by the letter `k` positions later,
//! wrapping around modulo the alphabet size. Every character outside the
//! alphabet (whitespace, digits, punctuation, combining marks, other scripts)
//! is copied through unchanged, so an enciphered sentence has exactly the same
//! length and layout as its plaintext.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{AugmentedDataset, ParallelCorpus};
use crate::exec::Execution;

/// Lowercase German letters in rotation order: `a..z`, then `ß`, then umlauts.
pub const GERMAN_LETTERS: &str = "abcdefghijklmnopqrstuvwxyzßäöü";
/// Lowercase basic Latin letters.
pub const ENGLISH_LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error)]
pub enum CipherError {
    #[error("alphabet must contain at least 2 letters, got {0}")]
    AlphabetTooShort(usize),
    #[error("alphabet contains duplicate letter {0:?}")]
    DuplicateLetter(char),
    #[error("key {0} is the identity rotation for an alphabet of size {1}")]
    IdentityKey(u32, usize),
    #[error("keys {0} and {1} are the same rotation modulo {2}")]
    DuplicateKey(u32, u32, usize),
    #[error("codepoint block size must be at least 2, got {0}")]
    BlockTooSmall(u32),
    #[error("codepoint block {start:#x}+{size} contains invalid scalar values")]
    InvalidBlock { start: u32, size: u32 },
    #[error("cannot encipher an empty corpus")]
    EmptyCorpus,
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A rotation amount. The effective rotation is `k mod |alphabet|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CipherKey(pub u32);

impl CipherKey {
    pub fn new(k: u32) -> Self {
        CipherKey(k)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    fn effective(self, n: usize) -> usize {
        (self.0 as usize) % n
    }
}

impl fmt::Display for CipherKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An ordered set of distinct letters defining a cyclic rotation group.
///
/// Uppercase letters rotate within a parallel uppercase alphabet of the same
/// ordering, unless the alphabet is lowercase-only or some letter has no
/// single-character uppercase form.
#[derive(Debug, Clone)]
pub struct Alphabet {
    name: String,
    letters: Vec<char>,
    upper: Option<Vec<char>>,
    lower_index: HashMap<char, usize>,
    upper_index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(name: impl Into<String>, letters: &str) -> Result<Self, CipherError> {
        Self::build(name.into(), letters, false)
    }

    /// An alphabet whose uppercase letters are left untouched.
    pub fn lowercase_only(name: impl Into<String>, letters: &str) -> Result<Self, CipherError> {
        Self::build(name.into(), letters, true)
    }

    pub fn german() -> Self {
        Self::new("de", GERMAN_LETTERS).expect("builtin alphabet is valid")
    }

    pub fn english() -> Self {
        Self::new("en", ENGLISH_LETTERS).expect("builtin alphabet is valid")
    }

    /// Loads an alphabet file: one UTF-8 line holding the ordered letters.
    /// The alphabet is named after the file stem.
    pub fn from_file(path: &Path, lowercase_only: bool) -> Result<Self, CipherError> {
        let text = std::fs::read_to_string(path).map_err(|source| CipherError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let line = text.lines().next().unwrap_or("").trim_end_matches('\r');
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "alphabet".to_string());
        Self::build(name, line, lowercase_only)
    }

    fn build(name: String, letters: &str, lowercase_only: bool) -> Result<Self, CipherError> {
        let letters: Vec<char> = letters.chars().collect();
        if letters.len() < 2 {
            return Err(CipherError::AlphabetTooShort(letters.len()));
        }
        let mut lower_index = HashMap::with_capacity(letters.len());
        for (i, &c) in letters.iter().enumerate() {
            if lower_index.insert(c, i).is_some() {
                return Err(CipherError::DuplicateLetter(c));
            }
        }
        let upper = if lowercase_only {
            None
        } else {
            uppercase_partner_alphabet(&letters, &lower_index)
        };
        let upper_index = upper
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        Ok(Alphabet {
            name,
            letters,
            upper,
            lower_index,
            upper_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// Rotation index of `c`, or `None` if it is not a (lowercase) letter of the alphabet.
    pub fn index_of(&self, c: char) -> Option<usize> {
        self.lower_index.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.lower_index.contains_key(&c) || self.upper_index.contains_key(&c)
    }

    pub fn preserves_case(&self) -> bool {
        self.upper.is_some()
    }

    fn rotate_char(&self, c: char, shift: usize) -> char {
        let n = self.letters.len();
        if let Some(&i) = self.lower_index.get(&c) {
            return self.letters[(i + shift) % n];
        }
        if let (Some(upper), Some(&i)) = (&self.upper, self.upper_index.get(&c)) {
            return upper[(i + shift) % n];
        }
        c
    }
}

/// Builds the uppercase counterpart alphabet, or `None` when some letter has
/// no distinct single-character uppercase form.
fn uppercase_partner_alphabet(
    letters: &[char],
    lower_index: &HashMap<char, usize>,
) -> Option<Vec<char>> {
    let mut upper = Vec::with_capacity(letters.len());
    for &c in letters {
        let mut it = c.to_uppercase();
        let u = match (it.next(), it.next()) {
            (Some(u), None) => u,
            // `ß` uppercases to "SS"; use the capital sharp s instead.
            _ if c == 'ß' => 'ẞ',
            _ => return None,
        };
        if u == c || lower_index.contains_key(&u) || upper.contains(&u) {
            return None;
        }
        upper.push(u);
    }
    Some(upper)
}

/// An alphabet together with the keys used to augment a corpus.
#[derive(Debug, Clone)]
pub struct CipherSpec {
    alphabet: Alphabet,
    keys: Vec<CipherKey>,
}

impl CipherSpec {
    /// Validates that keys are nonzero and pairwise distinct modulo the alphabet size.
    pub fn new(alphabet: Alphabet, keys: Vec<CipherKey>) -> Result<Self, CipherError> {
        let n = alphabet.len();
        for (i, k) in keys.iter().enumerate() {
            if k.effective(n) == 0 {
                return Err(CipherError::IdentityKey(k.0, n));
            }
            if let Some(prev) = keys[..i].iter().find(|p| p.effective(n) == k.effective(n)) {
                return Err(CipherError::DuplicateKey(prev.0, k.0, n));
            }
        }
        Ok(CipherSpec { alphabet, keys })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn keys(&self) -> &[CipherKey] {
        &self.keys
    }
}

/// Replaces every alphabet letter with the letter `key` positions after it.
pub fn encipher_text(text: &str, key: CipherKey, alphabet: &Alphabet) -> String {
    let shift = key.effective(alphabet.len());
    if shift == 0 {
        return text.to_string();
    }
    text.chars().map(|c| alphabet.rotate_char(c, shift)).collect()
}

/// Inverse of [`encipher_text`].
pub fn decipher_text(text: &str, key: CipherKey, alphabet: &Alphabet) -> String {
    let n = alphabet.len();
    let back = (n - key.effective(n)) % n;
    encipher_text(text, CipherKey(back as u32), alphabet)
}

/// A contiguous range of Unicode scalar values rotated as one cyclic group,
/// for scripts without a small letter alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodepointBlock {
    start: u32,
    size: u32,
}

impl CodepointBlock {
    pub fn new(start: u32, size: u32) -> Result<Self, CipherError> {
        if size < 2 {
            return Err(CipherError::BlockTooSmall(size));
        }
        let end = start
            .checked_add(size)
            .ok_or(CipherError::InvalidBlock { start, size })?;
        let overlaps_surrogates = start < 0xE000 && end > 0xD800;
        if end > 0x11_0000 || overlaps_surrogates {
            return Err(CipherError::InvalidBlock { start, size });
        }
        Ok(CodepointBlock { start, size })
    }

    /// Parses `START:SIZE`, where each part is decimal or `0x`-prefixed hex.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected START:SIZE, got {s:?}"))?;
        let num = |t: &str| -> Result<u32, String> {
            let t = t.trim();
            match t.strip_prefix("0x").or_else(|| t.strip_prefix("U+")) {
                Some(hex) => u32::from_str_radix(hex, 16),
                None => t.parse(),
            }
            .map_err(|e| format!("bad number {t:?}: {e}"))
        };
        CodepointBlock::new(num(a)?, num(b)?).map_err(|e| e.to_string())
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, c: char) -> bool {
        let c = c as u32;
        c >= self.start && c < self.start + self.size
    }

    fn rotate_char(&self, c: char, shift: u32) -> char {
        if !self.contains(c) {
            return c;
        }
        let off = (c as u32 - self.start + shift) % self.size;
        char::from_u32(self.start + off).expect("block validated against surrogates")
    }
}

/// Rotates codepoints inside `block` by `key` modulo the block size.
pub fn encipher_codepoint_block(text: &str, key: CipherKey, block: CodepointBlock) -> String {
    let shift = key.0 % block.size;
    text.chars().map(|c| block.rotate_char(c, shift)).collect()
}

/// Inverse of [`encipher_codepoint_block`].
pub fn decipher_codepoint_block(text: &str, key: CipherKey, block: CodepointBlock) -> String {
    let back = (block.size - key.0 % block.size) % block.size;
    encipher_codepoint_block(text, CipherKey(back), block)
}

/// A full text cipher: an alphabet plus optional codepoint blocks for other scripts.
/// Alphabet letters take precedence over block membership.
#[derive(Debug, Clone)]
pub struct TextCipher {
    pub alphabet: Alphabet,
    pub blocks: Vec<CodepointBlock>,
}

impl TextCipher {
    pub fn new(alphabet: Alphabet) -> Self {
        TextCipher {
            alphabet,
            blocks: Vec::new(),
        }
    }

    pub fn with_block(mut self, block: CodepointBlock) -> Self {
        self.blocks.push(block);
        self
    }

    pub fn encipher(&self, text: &str, key: CipherKey) -> String {
        let shift = key.effective(self.alphabet.len());
        text.chars()
            .map(|c| {
                if self.alphabet.contains(c) {
                    return self.alphabet.rotate_char(c, shift);
                }
                match self.blocks.iter().find(|b| b.contains(c)) {
                    Some(b) => b.rotate_char(c, key.0 % b.size),
                    None => c,
                }
            })
            .collect()
    }

    pub fn decipher(&self, text: &str, key: CipherKey) -> String {
        let n = self.alphabet.len();
        let lshift = (n - key.effective(n)) % n;
        text.chars()
            .map(|c| {
                if self.alphabet.contains(c) {
                    return self.alphabet.rotate_char(c, lshift);
                }
                match self.blocks.iter().find(|b| b.contains(c)) {
                    Some(b) => b.rotate_char(c, (b.size - key.0 % b.size) % b.size),
                    None => c,
                }
            })
            .collect()
    }
}

/// Builds one augmented dataset per key: sources enciphered, targets copied,
/// line order preserved.
pub fn encipher_corpus(
    corpus: &ParallelCorpus,
    spec: &CipherSpec,
    exec: Execution,
) -> Result<Vec<AugmentedDataset>, CipherError> {
    if corpus.is_empty() {
        return Err(CipherError::EmptyCorpus);
    }
    let alphabet = spec.alphabet();
    let datasets = spec
        .keys()
        .iter()
        .map(|&key| {
            let sources = exec.map(corpus.pairs(), |(src, _)| encipher_text(src, key, alphabet));
            let pairs = sources
                .into_iter()
                .zip(corpus.pairs())
                .map(|(s, (_, tgt))| (s, tgt.clone()))
                .collect::<Vec<_>>();
            let ds = AugmentedDataset::new(key, format!("{}{}", corpus.src_lang, key), pairs);
            assert_eq!(ds.len(), corpus.len());
            ds
        })
        .collect();
    Ok(datasets)
}
