//! Sentence encoding, class prototypes and query–class pair vectors.
//!
//! The encoder is a trainable bag of token embeddings: a sentence maps to the
//! mean of its token rows. Anything implementing the same `Sentence → ℝ^d1`
//! contract could replace it without touching the relation stage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{axpy, mean_of, Matrix};
use crate::retrieval::tokenize;
use crate::rng::Rng;

pub const UNK: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id map; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            tokens: vec![UNK_TOKEN.to_owned()],
            index: HashMap::from([(UNK_TOKEN.to_owned(), UNK)]),
        }
    }
}

impl Vocabulary {
    /// Every token of `texts`, in first-seen order after UNK.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Vocabulary::default();
        for text in texts {
            for token in tokenize(text) {
                vocab.insert(token);
            }
        }
        vocab
    }

    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn sentence(&self, text: &str) -> Result<Sentence> {
        let tokens: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if tokens.is_empty() {
            return Err(Error::Encoding(format!("no tokens in `{text}`")));
        }
        Ok(Sentence {
            raw_text: text.to_owned(),
            tokens,
        })
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(UNK_TOKEN) => {}
            other => {
                return Err(Error::parse(
                    origin,
                    1,
                    format!("first line must be `{UNK_TOKEN}`, found {other:?}"),
                ))
            }
        }
        let mut vocab = Vocabulary::default();
        for (i, line) in lines.enumerate() {
            if line.is_empty() || vocab.index.contains_key(line) {
                return Err(Error::parse(origin, i + 2, format!("empty or duplicate token `{line}`")));
            }
            vocab.insert(line.to_owned());
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub raw_text: String,
    pub tokens: Vec<usize>,
}

/// Token table of shape `V × d1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub table: Matrix,
}

impl EncoderParams {
    pub fn init(vocab_size: usize, dim: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::Config("encoder needs a non-empty vocabulary and d1 > 0".into()));
        }
        let data = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Ok(EncoderParams {
            table: Matrix::from_vec(vocab_size, dim, data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }
}

/// Mean of the token-table rows of `s`.
pub fn encode_sentence(enc: &EncoderParams, s: &Sentence) -> Result<Vec<f64>> {
    if s.tokens.is_empty() {
        return Err(Error::Encoding(format!("empty sentence `{}`", s.raw_text)));
    }
    if let Some(&bad) = s.tokens.iter().find(|&&t| t >= enc.vocab_size()) {
        return Err(Error::Lookup {
            kind: "token id",
            name: bad.to_string(),
        });
    }
    let mean = mean_of(s.tokens.iter().map(|&t| enc.table.row(t)))?;
    Ok(mean.expect("non-empty"))
}

/// Adds `d_encoding / T` to each token row of `s`.
pub fn accumulate_encoding_gradient(s: &Sentence, d_encoding: &[f64], d_table: &mut Matrix) {
    let share = 1.0 / s.tokens.len() as f64;
    for &t in &s.tokens {
        axpy(share, d_encoding, d_table.row_mut(t));
    }
}

/// Mean of the encodings of one class's sample examples.
pub fn class_prototype(encoded: &[&[f64]]) -> Result<Vec<f64>> {
    mean_of(encoded.iter().copied())?
        .ok_or_else(|| Error::EpisodeConstruction("class has no sample examples".into()))
}

/// `[class ; query]`, class first.
pub fn pair_representation(class: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    if class.len() != query.len() {
        return Err(Error::dim("query encoding", class.len(), query.len()));
    }
    let mut p = Vec::with_capacity(2 * class.len());
    p.extend_from_slice(class);
    p.extend_from_slice(query);
    Ok(p)
}
