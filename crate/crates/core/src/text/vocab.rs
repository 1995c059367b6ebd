use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const N_SPECIAL: usize = 5;

pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Word,
    Char,
}

impl TokenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            other => Err(Error::InvalidArgument(format!("token mode `{other}`"))),
        }
    }
}

/// Token ↔ id bijection shared by the encoder and decoder of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits text into tokens for `mode`. Whitespace is never a token.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Word => text.split_whitespace().map(str::to_string).collect(),
        TokenMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

impl Vocab {
    /// Tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically, after the reserved specials.
    pub fn build<'a, I>(texts: I, mode: TokenMode, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text, mode) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Empty("vocabulary corpus".into()));
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens, mode)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, mode: TokenMode) -> Result<Self> {
        if tokens.len() < N_SPECIAL
            || tokens[..N_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            mode,
            tokens,
            index,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text, self.mode)
            .iter()
            .map(|t| self.id(t))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let sep = match self.mode {
            TokenMode::Word => " ",
            TokenMode::Char => "",
        };
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(sep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_counts_and_specials() {
        let v = Vocab::build(["a b", "a"], TokenMode::Word, 1).unwrap();
        assert_eq!(v.len(), N_SPECIAL + 2);
        assert_eq!(v.token(N_SPECIAL), "a");
        assert_eq!(v.token(N_SPECIAL + 1), "b");
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<mask>"), MASK);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = Vocab::build(["a b", "a"], TokenMode::Word, 2).unwrap();
        assert_eq!(v.len(), N_SPECIAL + 1);
        assert_eq!(v.encode("a b"), vec![N_SPECIAL, UNK]);
    }

    #[test]
    fn deterministic_ids() {
        let corpus = ["z y x", "y x", "x w", "w v"];
        let a = Vocab::build(corpus, TokenMode::Word, 1).unwrap();
        let b = Vocab::build(corpus, TokenMode::Word, 1).unwrap();
        assert_eq!(a, b);
        // x:3, w:2, y:2, v:1, z:1
        assert_eq!(&a.tokens()[N_SPECIAL..], &["x", "w", "y", "v", "z"]);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(Vocab::build(std::iter::empty::<&str>(), TokenMode::Word, 1).is_err());
    }

    #[test]
    fn empty_text_roundtrip() {
        let v = Vocab::build(["a"], TokenMode::Word, 1).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]), "");
    }

    #[test]
    fn oov_renders_unk_marker() {
        let v = Vocab::build(["a"], TokenMode::Word, 1).unwrap();
        let ids = v.encode("a zz");
        assert_eq!(ids[1], UNK);
        assert_eq!(v.decode(&ids), "a <unk>");
    }

    #[test]
    fn char_mode() {
        let v = Vocab::build(["abc", "ab"], TokenMode::Char, 1).unwrap();
        assert_eq!(v.decode(&v.encode("cab")), "cab");
        assert_eq!(v.encode("a b").len(), 2);
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocab::from_tokens(vec!["a".into()], TokenMode::Word).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.push("x".into());
        toks.push("x".into());
        assert!(Vocab::from_tokens(toks, TokenMode::Word).is_err());
    }

    proptest! {
        #[test]
        fn in_vocab_roundtrip(words in proptest::collection::vec("[a-z]{1,6}", 0..8)) {
            let text = words.join(" ");
            let v = Vocab::build([text.as_str(), "filler"], TokenMode::Word, 1).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }

        #[test]
        fn whitespace_normalized_roundtrip(words in proptest::collection::vec("[a-z]{1,4}", 1..6)) {
            let messy = format!("  {}  ", words.join("   \t "));
            let v = Vocab::build([messy.as_str()], TokenMode::Word, 1).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&messy)), words.join(" "));
        }
    }
}
