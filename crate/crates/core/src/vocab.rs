//! Tokenization, frequency-ranked vocabularies, and per-example extended
//! vocabularies for copying source tokens that fall outside the vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::NdArray;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Lowercases, splits on whitespace, and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_lowercase().collect());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Dense token ↔ id association. Ids `0..4` are the specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials followed by the `max_size - 4` most frequent corpus tokens,
    /// ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], max_size: usize) -> Result<Self> {
        if max_size < 5 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least 5, got {max_size}"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Degenerate("empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq {
                let tok = tok.as_ref();
                if !SPECIALS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Self::from_tokens(
            SPECIALS
                .iter()
                .copied()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .map(str::to_owned)
                .collect(),
        )
    }

    /// Vocabulary from an explicit id-ordered token list; the first four
    /// entries must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Config(
                "vocabulary must start with <pad>, <unk>, <s>, </s>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn encode(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Keeps the padding row of an embedding matrix at zero.
pub fn zero_pad_row(embedding: &mut NdArray) {
    let d = embedding.cols();
    embedding.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
}

/// Per-example ids `V, V+1, …` for source tokens missing from the
/// vocabulary, in first-occurrence order over the passages and then the
/// question.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtendedVocabMap {
    base_size: usize,
    oov: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Output of [`map_extended`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedSource {
    pub map: ExtendedVocabMap,
    /// Extended-or-base id for every passage position.
    pub passages: Vec<Vec<TokenId>>,
    /// Extended-or-base id for every question position.
    pub question: Vec<TokenId>,
}

pub fn map_extended<S: AsRef<str>>(
    passages: &[Vec<S>],
    question: &[S],
    vocab: &Vocabulary,
) -> ExtendedSource {
    let mut map = ExtendedVocabMap {
        base_size: vocab.len(),
        ..Default::default()
    };
    let mut assign = |tok: &str| -> TokenId {
        if let Some(id) = vocab.get(tok) {
            return id;
        }
        if let Some(&id) = map.index.get(tok) {
            return id;
        }
        let id = map.base_size + map.oov.len();
        map.oov.push(tok.to_owned());
        map.index.insert(tok.to_owned(), id);
        id
    };
    let passages = passages
        .iter()
        .map(|p| p.iter().map(|t| assign(t.as_ref())).collect())
        .collect();
    let question = question.iter().map(|t| assign(t.as_ref())).collect();
    ExtendedSource {
        map,
        passages,
        question,
    }
}

impl ExtendedVocabMap {
    /// Size of the extended vocabulary (`V + U`).
    pub fn size(&self) -> usize {
        self.base_size + self.oov.len()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn len(&self) -> usize {
        self.oov.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oov.is_empty()
    }

    /// Extended id of a source OOV token.
    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn oov_tokens(&self) -> &[String] {
        &self.oov
    }

    /// Surface form of a base or extended id.
    pub fn token<'a>(&'a self, id: TokenId, vocab: &'a Vocabulary) -> &'a str {
        if id < self.base_size {
            vocab.decode(id).unwrap_or(SPECIALS[UNK])
        } else {
            self.oov
                .get(id - self.base_size)
                .map_or(SPECIALS[UNK], String::as_str)
        }
    }
}
