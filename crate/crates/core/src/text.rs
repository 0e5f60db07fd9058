//! Word-level vocabulary and fixed-length tokenization with a leading `[CLS]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
/// Ids below this are special tokens.
pub const NUM_SPECIAL: usize = 3;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("vocabulary file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits at whitespace and punctuation; each punctuation
/// character becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Tokens with count >= `min_frequency`, most frequent first (ties
    /// lexicographic), at most `max_size` of them after the specials.
    pub fn build<'a, I>(corpus: I, min_frequency: usize, max_size: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_frequency).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(ranked.into_iter().map(|(w, _)| w), min_frequency))
    }

    fn from_tokens(regular: impl IntoIterator<Item = String>, min_frequency: usize) -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(regular);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-special tokens; the size of the prediction vocabulary.
    pub fn num_regular(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Vocabulary file body: one token per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn parse_file(contents: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = contents.lines().collect();
        if lines.len() < NUM_SPECIAL || lines[..NUM_SPECIAL] != [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN] {
            return Err(TextError::BadVocabFile(
                "missing special tokens on the first three lines".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (n, l) in lines.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabFile(format!("line {}: invalid token", n + 1)));
            }
            if !seen.insert(*l) {
                return Err(TextError::BadVocabFile(format!("line {}: duplicate token {l}", n + 1)));
            }
        }
        Ok(Self::from_tokens(lines[NUM_SPECIAL..].iter().map(|s| s.to_string()), 0))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::parse_file(&std::fs::read_to_string(path)?)
    }

    /// Word ids for `text` without `[CLS]`, truncation or padding.
    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK_ID)).collect()
    }

    /// `[CLS]` + words, truncated and padded to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence, TextError> {
        if max_len < 2 {
            return Err(TextError::MaxLenTooSmall(max_len));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(self.word_ids(text).into_iter().take(max_len - 1));
        let true_length = ids.len();
        ids.resize(max_len, PAD_ID);
        Ok(TokenSequence {
            ids,
            true_length,
            note_id: None,
        })
    }

    /// Splits a long text into consecutive windows of `max_len - 1` words,
    /// each tokenized with its own `[CLS]`. Always returns at least one.
    pub fn tokenize_chunks(&self, text: &str, max_len: usize) -> Result<Vec<TokenSequence>, TextError> {
        if max_len < 2 {
            return Err(TextError::MaxLenTooSmall(max_len));
        }
        let words = self.word_ids(text);
        if words.is_empty() {
            return Ok(vec![self.tokenize("", max_len)?]);
        }
        Ok(words
            .chunks(max_len - 1)
            .map(|chunk| {
                let mut ids = Vec::with_capacity(max_len);
                ids.push(CLS_ID);
                ids.extend_from_slice(chunk);
                let true_length = ids.len();
                ids.resize(max_len, PAD_ID);
                TokenSequence {
                    ids,
                    true_length,
                    note_id: None,
                }
            })
            .collect())
    }

    /// Space-joined tokens of the non-padding, non-`[CLS]` positions.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .skip(1)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids for one note: `ids[0]` is `[CLS]`, positions at and after
/// `true_length` are `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
    pub note_id: Option<u64>,
}

impl TokenSequence {
    pub fn with_note_id(mut self, id: u64) -> Self {
        self.note_id = Some(id);
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The unpadded prefix.
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }

    pub fn is_well_formed(&self) -> bool {
        self.true_length >= 1
            && self.true_length <= self.ids.len()
            && self.ids[0] == CLS_ID
            && self.ids[self.true_length..].iter().all(|&i| i == PAD_ID)
            && self.ids[1..self.true_length]
                .iter()
                .all(|&i| i != PAD_ID && i != CLS_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_handles_punctuation_and_case() {
        assert_eq!(
            split_words("Pt on Vent, O2 sat 98%."),
            ["pt", "on", "vent", ",", "o2", "sat", "98", "%", "."]
        );
        assert!(split_words("   ").is_empty());
    }

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocabulary::build(["a a b"], 1, 100).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.id("a").unwrap() < v.id("b").unwrap());
        assert_eq!(v.id("a"), Some(NUM_SPECIAL));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(["zeta alpha mid mid"], 1, 100).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIAL..], ["mid", "alpha", "zeta"]);
    }

    #[test]
    fn threshold_above_all_counts_leaves_specials() {
        let v = Vocabulary::build(["a a b"], 3, 100).unwrap();
        assert_eq!(v.len(), NUM_SPECIAL);
        assert_eq!(v.num_regular(), 0);
    }

    #[test]
    fn max_size_caps_regular_tokens() {
        let v = Vocabulary::build(["a a a b b c"], 1, 2).unwrap();
        assert_eq!(&v.tokens()[NUM_SPECIAL..], ["a", "b"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocabulary::build(std::iter::empty::<&str>(), 1, 10),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn rebuild_is_deterministic() {
        let corpus = ["pt on vent", "vent settings unchanged", "pt resting"];
        assert_eq!(
            Vocabulary::build(corpus, 1, 50).unwrap(),
            Vocabulary::build(corpus, 1, 50).unwrap()
        );
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(["pt on vent"], 1, 10).unwrap();
        let empty = v.tokenize("", 6).unwrap();
        assert_eq!(empty.ids, [CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(empty.true_length, 1);

        let s = v.tokenize("pt on vent", 8).unwrap();
        let (pt, on, vent) = (v.id("pt").unwrap(), v.id("on").unwrap(), v.id("vent").unwrap());
        assert_eq!(s.ids, [CLS_ID, pt, on, vent, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);

        let s = v.tokenize("pt on sedation", 8).unwrap();
        assert_eq!(s.ids[3], UNK_ID);

        let s = v.tokenize("pt on vent pt on vent", 4).unwrap();
        assert_eq!(s.ids, [CLS_ID, pt, on, vent]);
        assert_eq!(s.true_length, 4);
        assert!(v.tokenize("x", 1).is_err());
    }

    #[test]
    fn chunks_cover_all_words() {
        let v = Vocabulary::build(["a b c d e"], 1, 10).unwrap();
        let chunks = v.tokenize_chunks("a b c d e", 3).unwrap();
        assert_eq!(chunks.len(), 3);
        assert!(chunks.iter().all(TokenSequence::is_well_formed));
        assert_eq!(chunks[2].true_length, 2);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(["pt on vent, pt"], 1, 10).unwrap();
        let back = Vocabulary::parse_file(&v.to_file_string()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert!(Vocabulary::parse_file("a\nb\nc\n").is_err());
    }

    proptest! {
        #[test]
        fn sequences_are_well_formed(text in "\\PC{0,200}", max_len in 2usize..40) {
            let v = Vocabulary::build(["the pt is on the vent"], 1, 10).unwrap();
            let s = v.tokenize(&text, max_len).unwrap();
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert!(s.is_well_formed());
        }

        #[test]
        fn retokenizing_known_text_is_stable(words in proptest::collection::vec(0usize..6, 0..30)) {
            let v = Vocabulary::build(["the pt is on the vent ."], 1, 10).unwrap();
            let vocab_words = ["the", "pt", "is", "on", "vent", "."];
            let text = words.iter().map(|&i| vocab_words[i]).collect::<Vec<_>>().join(" ");
            let s = v.tokenize(&text, 64).unwrap();
            let again = v.tokenize(&v.detokenize(&s), 64).unwrap();
            prop_assert_eq!(s, again);
        }
    }
}
