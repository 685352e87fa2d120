//! Closed vocabulary with structural token classes.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural tag carried by every token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Function,
    Open,
    Close,
    Connective,
    Content,
}

impl TokenClass {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "function" => Self::Function,
            "open" => Self::Open,
            "close" => Self::Close,
            "connective" => Self::Connective,
            "content" => Self::Content,
            other => return Err(Error::Data(format!("unknown token class {other:?}"))),
        })
    }
}

/// Sentence terminator; drives the sentence count of the density feature.
pub const PERIOD: &str = ".";

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    index: HashMap<String, usize>,
    period: usize,
}

/// A tokenized input with one structural marker per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub markers: Vec<TokenClass>,
    /// Number of sentence terminators in `tokens`.
    pub sentences: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Vocab {
    /// The vocabulary shipped with the crate.
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| Vocab::parse(include_str!("../data/vocab.tsv")).expect("bundled vocab is valid"))
    }

    /// Parse `id<TAB>token<TAB>class` lines; `#` lines are comments. Ids must
    /// be dense and in order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut classes = Vec::new();
        let mut index = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, tok, class] = cols[..] else {
                return Err(Error::Data(format!("malformed vocab line {line:?}")));
            };
            let id: usize = id.parse().map_err(|_| Error::Data(format!("bad vocab id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::Data(format!("vocab id {id} out of order")));
            }
            if index.insert(tok.to_string(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {tok:?}")));
            }
            tokens.push(tok.to_string());
            classes.push(TokenClass::parse(class)?);
        }
        let period = *index.get(PERIOD).ok_or_else(|| Error::Data("vocab lacks a period token".into()))?;
        Ok(Self { tokens, classes, index, period })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Result<usize> {
        self.index.get(tok).copied().ok_or_else(|| Error::Data(format!("unknown token {tok:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn class(&self, id: usize) -> TokenClass {
        self.classes[id]
    }

    /// Build a sequence from ids, tagging each token with its class.
    pub fn sequence(&self, tokens: Vec<usize>) -> Result<TokenSequence> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.len()) {
            return Err(Error::Data(format!("token id {bad} outside vocab of {}", self.len())));
        }
        let markers = tokens.iter().map(|&t| self.classes[t]).collect();
        let sentences = tokens.iter().filter(|&&t| t == self.period).count();
        Ok(TokenSequence { tokens, markers, sentences })
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = text.split_whitespace().map(|w| self.id(w)).collect::<Result<Vec<_>>>()?;
        self.sequence(ids)
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.tokens[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}
