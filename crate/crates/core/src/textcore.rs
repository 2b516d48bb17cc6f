//! Word-level tokenization, the vocabulary and embedding lookup.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Splits text into lowercase word tokens. Runs of alphanumerics (and
/// apostrophes inside a word) form one token; every other non-space
/// character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || (ch == '\'' && !current.is_empty()) {
            current.push(ch);
        } else {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Number of tokens [`split_words`] produces.
pub fn token_count(text: &str) -> usize {
    split_words(text).len()
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "," | "." | "!" | "?" | ";" | ":" | ")" | "]")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[")
}

/// Canonical spacing: one space between tokens, none before closing
/// punctuation or after opening brackets.
pub fn join_words<S: AsRef<str>>(words: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for w in words {
        let w = w.as_ref();
        if !glue_next && !attaches_left(w) {
            out.push(' ');
        }
        out.push_str(w);
        glue_next = attaches_right(w);
    }
    out
}

/// Lowercased, canonically spaced form of `text`.
pub fn canonicalize(text: &str) -> String {
    join_words(&split_words(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;

    /// Specials first, then the distinct non-special words in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !w.is_empty() && !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_token_list(tokens).expect("specials are well formed")
    }

    /// Builds a vocabulary covering every word of `texts`.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::from_words(texts.into_iter().flat_map(|t| split_words(t.as_ref())))
    }

    fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::Config(format!(
                "vocabulary must start with the special tokens {SPECIALS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.len() < 5 {
            return Err(Error::Config("vocabulary needs at least one ordinary token".into()));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            writeln!(out, "{t}").unwrap();
        }
        out
    }

    pub fn parse(contents: &str) -> Result<Self> {
        Self::from_token_list(contents.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids: Vec<usize> = split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(Self::UNK_ID))
            .collect();
        TokenSequence::new(ids)
    }

    /// Drops padding and special tokens other than `<unk>`.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let words: Vec<&str> = seq
            .real_ids()
            .iter()
            .filter(|&&id| !Self::is_special(id) || id == Self::UNK_ID)
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect();
        join_words(&words)
    }

    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }

    /// Right-pads with `<pad>` up to `len`.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(Vocabulary::PAD_ID);
            out.mask.push(false);
        }
        out
    }

    /// `<bos> ids <eos>`
    pub fn framed(ids: &[usize]) -> Self {
        let mut all = Vec::with_capacity(ids.len() + 2);
        all.push(Vocabulary::BOS_ID);
        all.extend_from_slice(ids);
        all.push(Vocabulary::EOS_ID);
        Self::new(all)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable(pub Matrix);

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// Row `i` of the result is row `seq.ids[i]` of the table.
pub fn embed_lookup(seq: &TokenSequence, table: &EmbeddingTable) -> Result<Matrix> {
    let mut out = Matrix::zeros(seq.len(), table.width());
    for (i, &id) in seq.ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Index {
                index: id,
                size: table.rows(),
            });
        }
        out.row_mut(i).copy_from_slice(table.0.row(id));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["a green tree, watercolor painting", "red car"])
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        let seq = vocab().tokenize("");
        assert!(seq.ids.is_empty() && seq.mask.is_empty());
    }

    #[test]
    fn round_trip_canonicalizes_case() {
        let v = vocab();
        let seq = v.tokenize("A green tree");
        assert_eq!(seq.real_len(), 3);
        assert_eq!(v.detokenize(&seq), "a green tree");
        assert_eq!(v.detokenize(&v.tokenize("red car ,watercolor")), "red car, watercolor");
    }

    #[test]
    fn out_of_vocabulary_word_maps_to_unk() {
        let v = vocab();
        let words = split_words("a purple tree");
        let seq = v.tokenize("a purple tree");
        for (w, id) in words.iter().zip(&seq.ids) {
            let expected = v.id(w).unwrap_or(Vocabulary::UNK_ID);
            assert_eq!(*id, expected);
        }
        assert_eq!(seq.ids.iter().filter(|&&i| i == Vocabulary::UNK_ID).count(), 1);
        assert_eq!(seq.ids[1], Vocabulary::UNK_ID);
    }

    #[test]
    fn file_form_has_special_header() {
        let v = vocab();
        let text = v.to_file_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(&lines[..4], &[PAD, BOS, EOS, UNK]);
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn lookup_rows() {
        let table = EmbeddingTable(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        assert_eq!(embed_lookup(&TokenSequence::new(vec![0]), &table).unwrap().data(), &[1.0, 2.0]);
        let pads = TokenSequence::new(vec![]).padded(3);
        let out = embed_lookup(&pads, &table).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            embed_lookup(&TokenSequence::new(vec![3]), &table),
            Err(Error::Index { index: 3, size: 3 })
        ));
    }

    proptest! {
        #[test]
        fn lookup_matches_gather_and_concatenation(ids in proptest::collection::vec(0usize..6, 0..12),
                                                   split in 0usize..12) {
            let table = EmbeddingTable(Matrix::from_vec(6, 3, (0..18).map(|x| x as f64 * 0.5 - 2.0).collect()));
            let seq = TokenSequence::new(ids.clone());
            let out = embed_lookup(&seq, &table).unwrap();
            for (i, &id) in ids.iter().enumerate() {
                for c in 0..3 {
                    prop_assert_eq!(out.get(i, c), table.0.get(id, c));
                }
            }
            let k = split.min(ids.len());
            let a = embed_lookup(&TokenSequence::new(ids[..k].to_vec()), &table).unwrap();
            let b = embed_lookup(&TokenSequence::new(ids[k..].to_vec()), &table).unwrap();
            prop_assert_eq!(Matrix::vstack(&[&a, &b]), out);
        }

        #[test]
        fn canonical_text_round_trips(words in proptest::collection::vec(
            prop_oneof![Just("a"), Just("green"), Just("tree"), Just(","), Just("watercolor"), Just("painting"), Just("red"), Just("car")], 0..10)) {
            let v = vocab();
            let text = join_words(&words);
            prop_assert_eq!(v.detokenize(&v.tokenize(&text)), text.clone());
            prop_assert_eq!(canonicalize(&text), text);
        }
    }
}
