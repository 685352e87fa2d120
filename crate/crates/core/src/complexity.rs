//! Input complexity indicators and the weighted complexity score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenClass, TokenSequence};

/// Structural depth, concept density and clause-chaining count of one input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityFeatures {
    pub d_syn: usize,
    pub c_sem: f64,
    pub r: usize,
}

impl ComplexityFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.d_syn as f64, self.c_sem, self.r as f64]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ComplexityWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl ComplexityWeights {
    pub fn from_array(w: [f64; 3]) -> Self {
        Self { alpha: w[0], beta: w[1], gamma: w[2] }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

pub fn extract_features(seq: &TokenSequence) -> Result<ComplexityFeatures> {
    if seq.is_empty() {
        return Err(Error::Features("empty sequence".into()));
    }
    let mut depth = 0usize;
    let mut d_syn = 0usize;
    let mut r = 0usize;
    let mut content: Vec<usize> = Vec::new();
    for (pos, (&tok, &m)) in seq.tokens.iter().zip(&seq.markers).enumerate() {
        match m {
            TokenClass::Open => {
                depth += 1;
                d_syn = d_syn.max(depth);
            }
            TokenClass::Close => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| Error::Features(format!("unmatched close marker at position {pos}")))?;
            }
            TokenClass::Connective => r += 1,
            TokenClass::Content => content.push(tok),
            TokenClass::Function => {}
        }
    }
    if depth != 0 {
        return Err(Error::Features(format!("{depth} unclosed nest marker(s)")));
    }
    content.sort_unstable();
    content.dedup();
    let c_sem = content.len() as f64 / seq.sentences.max(1) as f64;
    Ok(ComplexityFeatures { d_syn, c_sem, r })
}

pub fn complexity_score(f: &ComplexityFeatures, w: &ComplexityWeights) -> Result<f64> {
    if !w.as_array().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("complexity weights {w:?}")));
    }
    Ok(w.alpha * f.d_syn as f64 + w.beta * f.c_sem + w.gamma * f.r as f64)
}
