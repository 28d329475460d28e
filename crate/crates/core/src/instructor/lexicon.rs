//! Closed token set for synthetic questions.
//!
//! A content token is tied to its concept: its embedding is the (trainable)
//! concept row plus a small fixed offset. Function tokens are free vectors
//! drawn near the default embedding `c′`; a token naming a property group
//! starts at `c′` plus that group's property embedding, so "color" and the
//! color property begin related.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::{decode_f64, encode_f64, ConceptError, ConceptVocabulary};

pub const LEXICON_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CONTENT_NOISE: f64 = 0.01;
pub const DEFAULT_FUNCTION_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    pub token: String,
    /// Concept the token is tied to; `None` for function words.
    pub concept: Option<String>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    dim: usize,
    entries: Vec<LexEntry>,
    index: HashMap<String, usize>,
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Lexicon {
    /// Every concept name becomes a content token; `function_words` get
    /// vectors at `c′ + N(0, function_noise²)`, except group names, which
    /// start at `c′ + D_g`.
    pub fn build(
        vocab: &ConceptVocabulary,
        function_words: &[String],
        seed: u64,
        content_noise: f64,
        function_noise: f64,
    ) -> Result<Self, ConceptError> {
        let d = vocab.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content = Normal::new(0.0, content_noise.max(0.0)).expect("valid std");
        let function = Normal::new(0.0, function_noise.max(0.0)).expect("valid std");
        let mut entries = Vec::new();
        for g in vocab.groups() {
            for name in &g.concepts {
                let offset = (0..d).map(|_| content.sample(&mut rng)).collect();
                entries.push(LexEntry {
                    token: name.clone(),
                    concept: Some(name.clone()),
                    offset,
                });
            }
        }
        for w in function_words {
            let group = vocab.groups().iter().position(|g| g.name == *w);
            let offset = match group {
                Some(g) => vocab
                    .default_embedding()
                    .iter()
                    .zip(&vocab.property_embeddings()[g])
                    .map(|(c, p)| c + p)
                    .collect(),
                None => vocab
                    .default_embedding()
                    .iter()
                    .map(|c| c + function.sample(&mut rng))
                    .collect(),
            };
            entries.push(LexEntry {
                token: w.clone(),
                concept: None,
                offset,
            });
        }
        Self::from_entries(d, entries, vocab)
    }

    pub fn from_entries(
        dim: usize,
        entries: Vec<LexEntry>,
        vocab: &ConceptVocabulary,
    ) -> Result<Self, ConceptError> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.offset.len() != dim {
                return Err(ConceptError::DimMismatch {
                    token: e.token.clone(),
                    expected: dim,
                    found: e.offset.len(),
                });
            }
            if let Some(c) = &e.concept {
                if vocab.lookup(c).is_none() {
                    return Err(ConceptError::Unknown(c.clone()));
                }
            }
            if index.insert(e.token.clone(), i).is_some() {
                return Err(ConceptError::Duplicate(e.token.clone()));
            }
        }
        Ok(Self {
            dim,
            entries,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, ConceptError> {
        tokens
            .iter()
            .map(|t| {
                self.token_id(t)
                    .ok_or_else(|| ConceptError::Unknown(t.clone()))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, ConceptError> {
        let file = LexiconFile {
            version: LEXICON_FORMAT_VERSION,
            dim: self.dim,
            tokens: self
                .entries
                .iter()
                .map(|e| TokenFile {
                    token: e.token.clone(),
                    concept: e.concept.clone(),
                    offset: encode_f64(e.offset.iter().copied()),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str, vocab: &ConceptVocabulary) -> Result<Self, ConceptError> {
        let file: LexiconFile = serde_json::from_str(text)?;
        if file.version != LEXICON_FORMAT_VERSION {
            return Err(ConceptError::Version {
                found: file.version,
                expected: LEXICON_FORMAT_VERSION,
            });
        }
        let entries = file
            .tokens
            .into_iter()
            .map(|t| {
                Ok(LexEntry {
                    token: t.token,
                    concept: t.concept,
                    offset: decode_f64(&t.offset)?,
                })
            })
            .collect::<Result<_, ConceptError>>()?;
        Self::from_entries(file.dim, entries, vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConceptError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &ConceptVocabulary) -> Result<Self, ConceptError> {
        Self::from_json(&fs::read_to_string(path)?, vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    version: u32,
    dim: usize,
    tokens: Vec<TokenFile>,
}

#[derive(Serialize, Deserialize)]
struct TokenFile {
    token: String,
    concept: Option<String>,
    offset: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(
            tokenize("What color is the Cat?"),
            vec!["what", "color", "is", "the", "cat"]
        );
    }
}
