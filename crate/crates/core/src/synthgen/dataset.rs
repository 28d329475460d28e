use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::question::{function_words, generate_question, QuestionRecord, Template};
use super::scene::{generate_scene, SceneConfig, SymbolicScene, DEFAULT_EPSILON};
use super::splits::Split;
use super::{default_ontology, execute_program, SynthError};
use crate::concepts::{
    build_vocabulary_with_std, ConceptVocabulary, OntologySpec, DEFAULT_INIT_STD,
};
use crate::instructor::{Lexicon, DEFAULT_CONTENT_NOISE, DEFAULT_FUNCTION_NOISE};
use crate::worldgraph::{SceneGraph, LOAD_SUM_TOLERANCE};

pub const DATASET_FILE: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LEXICON_FILE: &str = "lexicon.json";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const GRAPHS_FILE: &str = "graphs.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const SPLIT_FILE: &str = "split.json";

const DOMAIN_VOCAB: u64 = 1;
const DOMAIN_LEXICON: u64 = 2;
const DOMAIN_SCENE: u64 = 3;
const DOMAIN_QUESTION: u64 = 4;

/// Candidates tried per requested question before giving up.
const MAX_CANDIDATE_FACTOR: usize = 50;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of record `index` in stream `domain`: a per-domain base plus the
/// record index, so each record is reproducible on its own.
pub fn stream_seed(base: u64, domain: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(domain)).wrapping_add(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_questions: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_cap: usize,
    pub dim: usize,
    /// Standard deviation of the initial concept and property embeddings.
    pub embedding_std: f64,
    pub epsilon: f64,
    pub dense_features: bool,
    /// Template ids; questions draw a template uniformly from this list.
    pub templates: Vec<String>,
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 1000,
            n_questions: 5000,
            min_objects: 5,
            max_objects: 9,
            object_cap: super::DEFAULT_MAX_OBJECTS,
            dim: 32,
            embedding_std: DEFAULT_INIT_STD,
            epsilon: DEFAULT_EPSILON,
            dense_features: true,
            templates: Template::all().iter().map(Template::id).collect(),
            max_retries: super::DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    ontology: OntologySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub ontology: OntologySpec,
    pub vocab: ConceptVocabulary,
    pub lexicon: Lexicon,
    pub scenes: Vec<SymbolicScene>,
    pub graphs: Vec<SceneGraph>,
    pub questions: Vec<QuestionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub questions: usize,
    pub per_template: BTreeMap<String, usize>,
    pub per_hop: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self, SynthError> {
        Self::generate_with(config, default_ontology())
    }

    pub fn generate_with(
        config: &DatasetConfig,
        ontology: OntologySpec,
    ) -> Result<Self, SynthError> {
        if config.n_scenes == 0 || config.n_questions == 0 {
            return Err(SynthError::Config(
                "n_scenes and n_questions must be positive".into(),
            ));
        }
        if config.min_objects == 0 || config.min_objects > config.max_objects {
            return Err(SynthError::Config(format!(
                "object range {}..={} is empty",
                config.min_objects, config.max_objects
            )));
        }
        let templates = config
            .templates
            .iter()
            .map(|t| {
                Template::parse(t)
                    .ok_or_else(|| SynthError::Config(format!("unknown template `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if templates.is_empty() {
            return Err(SynthError::Config("no templates selected".into()));
        }

        let vocab = build_vocabulary_with_std(
            &ontology,
            config.dim,
            stream_seed(config.seed, DOMAIN_VOCAB, 0),
            config.embedding_std,
        )?;
        let lexicon = Lexicon::build(
            &vocab,
            &function_words(&vocab),
            stream_seed(config.seed, DOMAIN_LEXICON, 0),
            DEFAULT_CONTENT_NOISE,
            DEFAULT_FUNCTION_NOISE,
        )?;

        let scene_config = SceneConfig {
            epsilon: config.epsilon,
            max_objects: config.object_cap,
            dense_features: config.dense_features,
        };
        let generated = (0..config.n_scenes)
            .into_par_iter()
            .map(|i| {
                let seed = stream_seed(config.seed, DOMAIN_SCENE, i as u64);
                let n = ChaCha8Rng::seed_from_u64(seed)
                    .random_range(config.min_objects..=config.max_objects);
                generate_scene(&vocab, n, seed, &scene_config)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (scenes, graphs): (Vec<_>, Vec<_>) = generated.into_iter().unzip();

        let questions = generate_questions(config, &templates, &vocab, &scenes)?;
        Ok(Self {
            config: config.clone(),
            ontology,
            vocab,
            lexicon,
            scenes,
            graphs,
            questions,
        })
    }

    /// Vocabulary and lexicon at dimension `dim`: the stored ones when the
    /// size matches, otherwise fresh ones drawn from the dataset seed.
    pub fn embeddings_for(&self, dim: usize) -> Result<(ConceptVocabulary, Lexicon), SynthError> {
        if dim == self.vocab.dim() {
            return Ok((self.vocab.clone(), self.lexicon.clone()));
        }
        let vocab = build_vocabulary_with_std(
            &self.ontology,
            dim,
            stream_seed(self.config.seed, DOMAIN_VOCAB, dim as u64),
            self.config.embedding_std,
        )?;
        let lexicon = Lexicon::build(
            &vocab,
            &function_words(&vocab),
            stream_seed(self.config.seed, DOMAIN_LEXICON, dim as u64),
            DEFAULT_CONTENT_NOISE,
            DEFAULT_FUNCTION_NOISE,
        )?;
        Ok((vocab, lexicon))
    }

    pub fn answer_vocabulary(&self) -> Vec<String> {
        super::answer_vocabulary(&self.vocab)
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut per_template = BTreeMap::new();
        let mut per_hop = BTreeMap::new();
        for q in &self.questions {
            *per_template.entry(q.template.clone()).or_insert(0) += 1;
            *per_hop.entry(q.hop_count).or_insert(0) += 1;
        }
        DatasetSummary {
            scenes: self.scenes.len(),
            questions: self.questions.len(),
            per_template,
            per_hop,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = Manifest {
            config: self.config.clone(),
            ontology: self.ontology.clone(),
        };
        write_text(
            &dir.join(DATASET_FILE),
            &serde_json::to_string_pretty(&manifest)?,
        )?;
        write_text(&dir.join(VOCAB_FILE), &self.vocab.to_json()?)?;
        write_text(&dir.join(LEXICON_FILE), &self.lexicon.to_json()?)?;
        write_jsonl(&dir.join(SCENES_FILE), &self.scenes)?;
        let graph_lines: Vec<String> = self.graphs.iter().map(SceneGraph::to_json_line).collect();
        write_lines(&dir.join(GRAPHS_FILE), &graph_lines)?;
        write_jsonl(&dir.join(QUESTIONS_FILE), &self.questions)?;
        Ok(())
    }

    /// Loads a dataset and re-executes every question against its scene.
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let manifest: Manifest = serde_json::from_str(&read_text(&dir.join(DATASET_FILE))?)?;
        let vocab = ConceptVocabulary::from_json(&read_text(&dir.join(VOCAB_FILE))?)?;
        let lexicon = Lexicon::from_json(&read_text(&dir.join(LEXICON_FILE))?, &vocab)?;
        let scenes: Vec<SymbolicScene> = read_jsonl(&dir.join(SCENES_FILE))?;
        let graphs = crate::worldgraph::load_graphs(&dir.join(GRAPHS_FILE))?;
        let questions: Vec<QuestionRecord> = read_jsonl(&dir.join(QUESTIONS_FILE))?;
        if scenes.len() != graphs.len() {
            return Err(SynthError::Config(format!(
                "{} scenes but {} graphs",
                scenes.len(),
                graphs.len()
            )));
        }
        for g in &graphs {
            g.validate(LOAD_SUM_TOLERANCE)?;
            g.check_vocab(&vocab)?;
        }
        let data = Self {
            config: manifest.config,
            ontology: manifest.ontology,
            vocab,
            lexicon,
            scenes,
            graphs,
            questions,
        };
        data.verify_answers()?;
        Ok(data)
    }

    /// Every record must re-execute to its stored answer and ground to real
    /// objects.
    pub fn verify_answers(&self) -> Result<(), SynthError> {
        for (k, q) in self.questions.iter().enumerate() {
            if q.id != k {
                return Err(SynthError::Corrupt {
                    id: q.id,
                    msg: format!("stored at position {k}"),
                });
            }
            let scene = self
                .scenes
                .get(q.graph_id)
                .ok_or_else(|| SynthError::Corrupt {
                    id: q.id,
                    msg: format!("graph {} does not exist", q.graph_id),
                })?;
            let got = execute_program(scene, &q.program).map_err(|e| SynthError::Corrupt {
                id: q.id,
                msg: e.to_string(),
            })?;
            if got.answer != q.answer {
                return Err(SynthError::Corrupt {
                    id: q.id,
                    msg: format!(
                        "stored answer `{}` but program yields `{}`",
                        q.answer, got.answer
                    ),
                });
            }
            if let Some((pos, obj)) = q
                .groundings
                .iter()
                .find(|(&p, &o)| p >= q.text.len() || o >= scene.objects.len())
            {
                return Err(SynthError::Corrupt {
                    id: q.id,
                    msg: format!("grounding {pos} → {obj} out of range"),
                });
            }
        }
        Ok(())
    }

    /// Restricts to the given record ids (keeping scenes and ids intact).
    pub fn select(&self, ids: &[usize]) -> Vec<&QuestionRecord> {
        ids.iter().filter_map(|&i| self.questions.get(i)).collect()
    }
}

fn generate_questions(
    config: &DatasetConfig,
    templates: &[Template],
    vocab: &ConceptVocabulary,
    scenes: &[SymbolicScene],
) -> Result<Vec<QuestionRecord>, SynthError> {
    let want = config.n_questions;
    let limit = want.saturating_mul(MAX_CANDIDATE_FACTOR);
    let mut out: Vec<QuestionRecord> = Vec::with_capacity(want);
    let mut next = 0usize;
    while out.len() < want && next < limit {
        let batch = (want - out.len()).max(64).min(limit - next);
        let found: Vec<Option<QuestionRecord>> = (next..next + batch)
            .into_par_iter()
            .map(|k| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(config.seed, DOMAIN_QUESTION, k as u64));
                let template = templates[rng.random_range(0..templates.len())];
                let scene_id = k % scenes.len();
                generate_question(
                    &scenes[scene_id],
                    vocab,
                    template,
                    rng.next_u64(),
                    config.max_retries,
                )
                .ok()
                .map(|mut q| {
                    q.graph_id = scene_id;
                    q
                })
            })
            .collect();
        for mut q in found.into_iter().flatten() {
            if out.len() == want {
                break;
            }
            q.id = out.len();
            out.push(q);
        }
        next += batch;
    }
    if out.len() < want {
        return Err(SynthError::Config(format!(
            "only {} of {want} questions could be instantiated",
            out.len()
        )));
    }
    Ok(out)
}

pub fn save_split(dir: &Path, split: &Split) -> Result<(), SynthError> {
    write_text(&dir.join(SPLIT_FILE), &serde_json::to_string_pretty(split)?)
}

pub fn load_split(dir: &Path) -> Result<Split, SynthError> {
    Ok(serde_json::from_str(&read_text(&dir.join(SPLIT_FILE))?)?)
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), SynthError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String, SynthError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), SynthError> {
    let lines = items
        .iter()
        .map(serde_json::to_string)
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(path, &lines)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SynthError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                SynthError::Config(format!("{}: line {}: {e}", path.display(), n + 1))
            })?,
        );
    }
    Ok(out)
}
