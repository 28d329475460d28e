//! Synthetic worlds, templated questions, the symbolic executor that labels
//! them, and the generalization splits.

mod dataset;
mod program;
mod question;
mod scene;
mod splits;

use thiserror::Error;

use crate::concepts::{AttributeType, ConceptError, ConceptVocabulary, ObjectType, OntologySpec};
use crate::worldgraph::GraphError;

pub use dataset::{
    load_split, save_split, stream_seed, Dataset, DatasetConfig, DatasetSummary, DATASET_FILE,
    GRAPHS_FILE, LEXICON_FILE, QUESTIONS_FILE, SCENES_FILE, SPLIT_FILE, VOCAB_FILE,
};
pub use program::{execute_program, ExecError, Execution, Program, ProgramStep, NO, YES};
pub use question::{
    function_words, generate_question, relation_phrase, QuestionRecord, Template,
    DEFAULT_MAX_RETRIES, FUNCTION_WORDS,
};
pub use scene::{
    generate_scene, proximity_relations, scene_to_graph, soften, spatial_relation,
    within_proximity, SceneConfig, SceneObject, SceneRelation, SymbolicScene, DEFAULT_EPSILON,
    DEFAULT_MAX_OBJECTS, PROXIMITY_FRACTION,
};
pub use splits::{
    build_splits, held_out_objects, touches_objects, Split, SplitMode, SplitSpec,
    IID_TRAIN_FRACTION,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{requested} objects requested but the cap is {cap}")]
    TooManyObjects { requested: usize, cap: usize },
    #[error("`{0}` is not a concept of the expected group")]
    UnknownConcept(String),
    #[error("template `{template}` has no unique instantiation on this scene")]
    Skip { template: String },
    #[error("holdout leaves no training data")]
    EmptyTrain,
    #[error("question {id}: {msg}")]
    Corrupt { id: usize, msg: String },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Small household ontology used by the CLI and the experiments.
pub fn default_ontology() -> OntologySpec {
    let objects = [
        ("animals", ["cat", "dog", "bird"]),
        ("furniture", ["table", "chair", "bed"]),
        ("items", ["cup", "book", "lamp"]),
        ("plants", ["tree", "flower", "bush"]),
    ]
    .iter()
    .flat_map(|(cat, names)| {
        names.iter().map(move |n| ObjectType {
            name: n.to_string(),
            category: cat.to_string(),
        })
    })
    .collect();
    let attr = |name: &str, values: &[&str]| AttributeType {
        name: name.to_string(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    OntologySpec {
        objects,
        attributes: vec![
            attr("color", &["red", "blue", "green", "yellow"]),
            attr("material", &["wood", "metal", "plastic", "glass"]),
            attr("size", &["small", "large"]),
        ],
        relations: ["left", "right", "above", "below"]
            .iter()
            .map(|r| r.to_string())
            .collect(),
    }
}

/// Identities, attribute values, then `yes` / `no`.
pub fn answer_vocabulary(vocab: &ConceptVocabulary) -> Vec<String> {
    let mut out = Vec::new();
    for g in 0..=vocab.attribute_count() {
        out.extend(vocab.group(g).concepts.iter().cloned());
    }
    out.push(YES.to_string());
    out.push(NO.to_string());
    out
}
