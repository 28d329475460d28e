//! The machine's alphabet: embedded concepts grouped into property types,
//! the property-type embeddings, and the default (non-content) embedding.
//!
//! Group `0` holds object identities, groups `1..=L` the attribute types and
//! group `L+1` the relations.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::Tensor;

pub const VOCAB_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_INIT_STD: f64 = 0.1;
pub const IDENTITY_GROUP: &str = "identity";
pub const RELATION_GROUP: &str = "relation";

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("duplicate concept name `{0}`")]
    Duplicate(String),
    #[error("concept group `{0}` is empty")]
    EmptyGroup(String),
    #[error("ontology must list at least one object, one attribute group and one relation")]
    IncompleteOntology,
    #[error("vector for `{token}` has {found} components, expected {expected}")]
    DimMismatch {
        token: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocabulary file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown concept `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectType {
    pub name: String,
    /// Coarse category used by content holdouts (e.g. `animal`).
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeType {
    pub name: String,
    pub values: Vec<String>,
}

/// Names of everything the vocabulary must embed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologySpec {
    pub objects: Vec<ObjectType>,
    pub attributes: Vec<AttributeType>,
    pub relations: Vec<String>,
}

impl OntologySpec {
    pub fn category_of(&self, object: &str) -> Option<&str> {
        self.objects
            .iter()
            .find(|o| o.name == object)
            .map(|o| o.category.as_str())
    }

    pub fn objects_in(&self, category: &str) -> Vec<&str> {
        self.objects
            .iter()
            .filter(|o| o.category == category)
            .map(|o| o.name.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConceptId {
    pub group: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGroup {
    pub name: String,
    pub concepts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    dim: usize,
    groups: Vec<ConceptGroup>,
    default_embedding: Vec<f64>,
    property_embeddings: Vec<Vec<f64>>,
    index: HashMap<String, ConceptId>,
}

/// Builds a vocabulary with seeded Gaussian embeddings (σ = 0.1).
pub fn build_vocabulary(
    ontology: &OntologySpec,
    dim: usize,
    seed: u64,
) -> Result<ConceptVocabulary, ConceptError> {
    build_vocabulary_with_std(ontology, dim, seed, DEFAULT_INIT_STD)
}

pub fn build_vocabulary_with_std(
    ontology: &OntologySpec,
    dim: usize,
    seed: u64,
    std: f64,
) -> Result<ConceptVocabulary, ConceptError> {
    if ontology.objects.is_empty()
        || ontology.attributes.is_empty()
        || ontology.relations.is_empty()
    {
        return Err(ConceptError::IncompleteOntology);
    }
    let mut names: Vec<(String, Vec<String>)> = Vec::new();
    names.push((
        IDENTITY_GROUP.to_string(),
        ontology.objects.iter().map(|o| o.name.clone()).collect(),
    ));
    for a in &ontology.attributes {
        names.push((a.name.clone(), a.values.clone()));
    }
    names.push((RELATION_GROUP.to_string(), ontology.relations.clone()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| normal.sample(&mut rng)).collect() };

    let mut groups = Vec::with_capacity(names.len());
    for (name, concepts) in names {
        let embeddings = concepts.iter().map(|_| draw()).collect();
        groups.push(ConceptGroup {
            name,
            concepts,
            embeddings,
        });
    }
    let default_embedding = draw();
    let property_embeddings = (0..groups.len()).map(|_| draw()).collect();
    ConceptVocabulary::from_parts(dim, groups, default_embedding, property_embeddings)
}

impl ConceptVocabulary {
    pub fn from_parts(
        dim: usize,
        groups: Vec<ConceptGroup>,
        default_embedding: Vec<f64>,
        property_embeddings: Vec<Vec<f64>>,
    ) -> Result<Self, ConceptError> {
        let mut index = HashMap::new();
        if groups.len() < 3 {
            return Err(ConceptError::IncompleteOntology);
        }
        let check_dim = |token: &str, v: &[f64]| {
            if v.len() == dim {
                Ok(())
            } else {
                Err(ConceptError::DimMismatch {
                    token: token.to_string(),
                    expected: dim,
                    found: v.len(),
                })
            }
        };
        for (g, group) in groups.iter().enumerate() {
            if group.concepts.is_empty() {
                return Err(ConceptError::EmptyGroup(group.name.clone()));
            }
            for (i, (name, emb)) in group.concepts.iter().zip(&group.embeddings).enumerate() {
                check_dim(name, emb)?;
                if index
                    .insert(name.clone(), ConceptId { group: g, index: i })
                    .is_some()
                {
                    return Err(ConceptError::Duplicate(name.clone()));
                }
            }
            if group.embeddings.len() != group.concepts.len() {
                return Err(ConceptError::Parse {
                    line: 0,
                    msg: format!("group `{}` embedding count mismatch", group.name),
                });
            }
        }
        check_dim("<default>", &default_embedding)?;
        if property_embeddings.len() != groups.len() {
            return Err(ConceptError::Parse {
                line: 0,
                msg: format!(
                    "{} property embeddings for {} groups",
                    property_embeddings.len(),
                    groups.len()
                ),
            });
        }
        for (g, p) in groups.iter().zip(&property_embeddings) {
            check_dim(&g.name, p)?;
        }
        Ok(Self {
            dim,
            groups,
            default_embedding,
            property_embeddings,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of attribute types `L`.
    pub fn attribute_count(&self) -> usize {
        self.groups.len() - 2
    }

    /// `L + 2`.
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[ConceptGroup] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &ConceptGroup {
        &self.groups[g]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.concepts.len()).collect()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn relation_group(&self) -> usize {
        self.groups.len() - 1
    }

    pub fn concept_count(&self) -> usize {
        self.groups.iter().map(|g| g.concepts.len()).sum()
    }

    pub fn lookup(&self, name: &str) -> Option<ConceptId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.groups[id.group].concepts[id.index]
    }

    pub fn embedding(&self, id: ConceptId) -> &[f64] {
        &self.groups[id.group].embeddings[id.index]
    }

    pub fn default_embedding(&self) -> &[f64] {
        &self.default_embedding
    }

    pub fn property_embeddings(&self) -> &[Vec<f64>] {
        &self.property_embeddings
    }

    /// First row of group `g` inside [`concept_matrix`].
    pub fn group_offset(&self, g: usize) -> usize {
        self.groups[..g].iter().map(|g| g.concepts.len()).sum()
    }

    pub fn row_of(&self, id: ConceptId) -> usize {
        self.group_offset(id.group) + id.index
    }

    /// Row index of `c′` in [`concept_matrix`].
    pub fn default_row(&self) -> usize {
        self.concept_count()
    }

    /// Embedding matrix of one group, `|C_g| × d`.
    pub fn group_matrix(&self, g: usize) -> Tensor {
        Tensor::from_rows(&self.groups[g].embeddings).expect("validated dims")
    }

    pub fn property_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.property_embeddings).expect("validated dims")
    }

    /// Overrides concept embeddings from a `token v1 … vd` text file.
    /// Tokens that are not concepts are ignored; returns how many were applied.
    pub fn apply_vector_file(&mut self, path: &Path) -> Result<usize, ConceptError> {
        let vectors = read_vector_file(path)?;
        let mut applied = 0;
        for (token, v) in vectors {
            if v.len() != self.dim {
                return Err(ConceptError::DimMismatch {
                    token,
                    expected: self.dim,
                    found: v.len(),
                });
            }
            if let Some(id) = self.lookup(&token) {
                self.groups[id.group].embeddings[id.index] = v;
                applied += 1;
            }
        }
        Ok(applied)
    }

    /// Writes every concept embedding in the `token v1 … vd` format.
    pub fn export_vector_file(&self, path: &Path) -> Result<(), ConceptError> {
        let mut out = fs::File::create(path)?;
        for g in &self.groups {
            for (name, emb) in g.concepts.iter().zip(&g.embeddings) {
                write!(out, "{name}")?;
                for v in emb {
                    // `{:?}` prints the shortest round-tripping decimal.
                    write!(out, " {v:?}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ConceptError> {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            dim: self.dim,
            groups: self
                .groups
                .iter()
                .map(|g| GroupFile {
                    name: g.name.clone(),
                    concepts: g.concepts.clone(),
                    embeddings: encode_f64(g.embeddings.iter().flatten().copied()),
                })
                .collect(),
            default_embedding: encode_f64(self.default_embedding.iter().copied()),
            property_embeddings: encode_f64(self.property_embeddings.iter().flatten().copied()),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ConceptError> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(ConceptError::Version {
                found: file.version,
                expected: VOCAB_FORMAT_VERSION,
            });
        }
        let d = file.dim;
        let mut groups = Vec::new();
        for g in file.groups {
            let flat = decode_f64(&g.embeddings)?;
            if flat.len() != g.concepts.len() * d {
                return Err(ConceptError::DimMismatch {
                    token: g.name,
                    expected: g.concepts.len() * d,
                    found: flat.len(),
                });
            }
            groups.push(ConceptGroup {
                name: g.name,
                concepts: g.concepts,
                embeddings: flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            });
        }
        let default_embedding = decode_f64(&file.default_embedding)?;
        let props = decode_f64(&file.property_embeddings)?;
        let property_embeddings = props.chunks(d.max(1)).map(<[f64]>::to_vec).collect();
        Self::from_parts(d, groups, default_embedding, property_embeddings)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConceptError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConceptError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Row-stacked concept embeddings in group order with `c′` as the last row.
pub fn concept_matrix(vocab: &ConceptVocabulary) -> Tensor {
    let mut rows: Vec<Vec<f64>> = vocab
        .groups
        .iter()
        .flat_map(|g| g.embeddings.iter().cloned())
        .collect();
    rows.push(vocab.default_embedding.clone());
    Tensor::from_rows(&rows).expect("validated dims")
}

/// Parses a whitespace separated `token v1 … vd` file. All rows must share a
/// dimension.
pub fn read_vector_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>, ConceptError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut dim = None;
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let v: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| ConceptError::Parse {
                    line: ln + 1,
                    msg: format!("`{p}`: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(ConceptError::DimMismatch {
                    token: token.to_string(),
                    expected: d,
                    found: v.len(),
                })
            }
            _ => {}
        }
        out.push((token.to_string(), v));
    }
    Ok(out)
}

pub(crate) fn encode_f64(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_f64(text: &str) -> Result<Vec<f64>, ConceptError> {
    let bytes = B64.decode(text).map_err(|e| ConceptError::Parse {
        line: 0,
        msg: format!("base64: {e}"),
    })?;
    if bytes.len() % 8 != 0 {
        return Err(ConceptError::Parse {
            line: 0,
            msg: "embedding byte length is not a multiple of 8".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    dim: usize,
    groups: Vec<GroupFile>,
    default_embedding: String,
    property_embeddings: String,
}

#[derive(Serialize, Deserialize)]
struct GroupFile {
    name: String,
    concepts: Vec<String>,
    embeddings: String,
}
