use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::question::{QuestionRecord, Template};
use super::scene::SymbolicScene;
use super::SynthError;
use crate::concepts::OntologySpec;

/// Share of records kept for training in the iid split.
pub const IID_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Content,
    Structure,
    Iid,
}

impl FromStr for SplitMode {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "content" => Ok(SplitMode::Content),
            "structure" => Ok(SplitMode::Structure),
            "iid" => Ok(SplitMode::Iid),
            other => Err(SynthError::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Content => "content",
            SplitMode::Structure => "structure",
            SplitMode::Iid => "iid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Object categories or names (content) or template ids (structure).
    pub holdout: Vec<String>,
    pub seed: u64,
}

/// Record ids on each side of a split, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Object names named by a content holdout (categories expand to members).
pub fn held_out_objects(
    ontology: &OntologySpec,
    holdout: &[String],
) -> Result<BTreeSet<String>, SynthError> {
    let mut held = BTreeSet::new();
    for h in holdout {
        let members = ontology.objects_in(h);
        if !members.is_empty() {
            held.extend(members.into_iter().map(str::to_string));
        } else if ontology.objects.iter().any(|o| &o.name == h) {
            held.insert(h.clone());
        } else {
            return Err(SynthError::Config(format!(
                "content holdout `{h}` is neither a category nor an object"
            )));
        }
    }
    Ok(held)
}

/// Whether a question mentions, grounds to, or answers with a held-out object.
pub fn touches_objects(
    record: &QuestionRecord,
    scene: &SymbolicScene,
    held: &BTreeSet<String>,
) -> bool {
    record.text.iter().any(|t| held.contains(t))
        || held.contains(&record.answer)
        || record
            .groundings
            .values()
            .any(|&o| held.contains(&scene.objects[o].identity))
}

pub fn build_splits(
    records: &[QuestionRecord],
    scenes: &[SymbolicScene],
    ontology: &OntologySpec,
    spec: &SplitSpec,
) -> Result<Split, SynthError> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    match spec.mode {
        SplitMode::Content => {
            let held = held_out_objects(ontology, &spec.holdout)?;
            for r in records {
                if touches_objects(r, &scenes[r.graph_id], &held) {
                    test.push(r.id);
                } else {
                    train.push(r.id);
                }
            }
        }
        SplitMode::Structure => {
            for h in &spec.holdout {
                if Template::parse(h).is_none() {
                    return Err(SynthError::Config(format!("unknown template id `{h}`")));
                }
            }
            for r in records {
                if spec.holdout.contains(&r.template) {
                    test.push(r.id);
                } else {
                    train.push(r.id);
                }
            }
        }
        SplitMode::Iid => {
            let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let cut = (ids.len() as f64 * IID_TRAIN_FRACTION).round() as usize;
            test = ids.split_off(cut);
            train = ids;
            train.sort_unstable();
            test.sort_unstable();
        }
    }
    if train.is_empty() {
        return Err(SynthError::EmptyTrain);
    }
    Ok(Split {
        spec: spec.clone(),
        train,
        test,
    })
}
