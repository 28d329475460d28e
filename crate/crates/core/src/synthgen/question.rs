use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::program::{execute_program, Program, ProgramStep};
use super::scene::SymbolicScene;
use super::SynthError;
use crate::concepts::ConceptVocabulary;

pub const DEFAULT_MAX_RETRIES: usize = 20;

/// Question families. Relational families carry their hop count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Template {
    QueryAttribute,
    RelateIdentity(u8),
    RelateAttribute(u8),
    VerifyAttribute,
    VerifyRelation,
}

impl Template {
    pub fn all() -> Vec<Template> {
        let mut v = vec![
            Template::QueryAttribute,
            Template::VerifyAttribute,
            Template::VerifyRelation,
        ];
        for h in 1..=3 {
            v.push(Template::RelateIdentity(h));
            v.push(Template::RelateAttribute(h));
        }
        v
    }

    pub fn id(&self) -> String {
        match self {
            Template::QueryAttribute => "query_attr".into(),
            Template::RelateIdentity(h) => format!("relate_id_{h}hop"),
            Template::RelateAttribute(h) => format!("relate_attr_{h}hop"),
            Template::VerifyAttribute => "verify_attr".into(),
            Template::VerifyRelation => "verify_rel".into(),
        }
    }

    pub fn parse(id: &str) -> Option<Template> {
        Template::all().into_iter().find(|t| t.id() == id)
    }

    pub fn hops(&self) -> usize {
        match self {
            Template::QueryAttribute | Template::VerifyAttribute => 0,
            Template::VerifyRelation => 1,
            Template::RelateIdentity(h) | Template::RelateAttribute(h) => *h as usize,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: usize,
    /// Line index of the scene graph in the dataset's graph file.
    pub graph_id: usize,
    pub template: String,
    pub text: Vec<String>,
    pub program: Program,
    pub answer: String,
    pub hop_count: usize,
    /// Token position → object index.
    pub groundings: BTreeMap<usize, usize>,
}

/// Words spelling out a relation concept.
pub fn relation_phrase(relation: &str) -> Vec<String> {
    match relation {
        "left" | "right" => vec![relation.to_string(), "of".to_string()],
        other => vec![other.to_string()],
    }
}

/// Fixed set of non-content words the templates use, besides attribute
/// group names.
pub const FUNCTION_WORDS: &[&str] = &["what", "is", "the", "thing", "of"];

/// The closed function-word set for `vocab`: [`FUNCTION_WORDS`] plus the
/// attribute group names.
pub fn function_words(vocab: &ConceptVocabulary) -> Vec<String> {
    let mut out: Vec<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    out.extend((1..=vocab.attribute_count()).map(|g| vocab.group(g).name.clone()));
    out
}

struct Draft {
    text: Vec<String>,
    steps: Vec<ProgramStep>,
    groundings: BTreeMap<usize, usize>,
}

impl Draft {
    fn new() -> Self {
        Self {
            text: Vec::new(),
            steps: Vec::new(),
            groundings: BTreeMap::new(),
        }
    }

    fn word(&mut self, w: &str) {
        self.text.push(w.to_string());
    }

    fn grounded(&mut self, w: &str, obj: usize) {
        self.groundings.insert(self.text.len(), obj);
        self.word(w);
    }
}

fn unique_objects(scene: &SymbolicScene) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|&i| scene.with_identity(&scene.objects[i].identity).len() == 1)
        .collect()
}

/// Random walk of `hops` relation steps from `anchor`, only along relations
/// that pick out a single unvisited object.
fn relation_walk(
    scene: &SymbolicScene,
    anchor: usize,
    hops: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(String, usize)>> {
    let mut path = Vec::with_capacity(hops);
    let mut visited = vec![anchor];
    let mut cur = anchor;
    for _ in 0..hops {
        let mut labels: Vec<&str> = scene
            .relations
            .iter()
            .filter(|r| r.src == cur)
            .map(|r| r.relation.as_str())
            .collect();
        labels.sort_unstable();
        labels.dedup();
        let options: Vec<(&str, usize)> = labels
            .into_iter()
            .filter_map(|l| match scene.related(cur, l).as_slice() {
                [one] if !visited.contains(one) => Some((l, *one)),
                _ => None,
            })
            .collect();
        let &(label, next) = options.choose(rng)?;
        path.push((label.to_string(), next));
        visited.push(next);
        cur = next;
    }
    Some(path)
}

fn draft_question(
    scene: &SymbolicScene,
    vocab: &ConceptVocabulary,
    template: Template,
    rng: &mut ChaCha8Rng,
) -> Option<Draft> {
    let anchors = unique_objects(scene);
    let anchor = *anchors.choose(rng)?;
    let anchor_name = scene.objects[anchor].identity.clone();
    let attr_groups = vocab.attribute_count();
    let mut d = Draft::new();
    match template {
        Template::QueryAttribute => {
            let g = rng.random_range(1..=attr_groups);
            for w in ["what", &vocab.group(g).name, "is", "the"] {
                d.word(w);
            }
            d.grounded(&anchor_name, anchor);
            d.steps.push(ProgramStep::Select {
                identity: anchor_name,
            });
            d.steps.push(ProgramStep::Query { group: g });
        }
        Template::VerifyAttribute => {
            let g = rng.random_range(1..=attr_groups);
            let truth = scene.property(anchor, g).to_string();
            let value = pick_claim(&vocab.group(g).concepts, &truth, rng);
            d.word("is");
            d.word("the");
            d.grounded(&anchor_name, anchor);
            d.word(&value);
            d.steps.push(ProgramStep::Select {
                identity: anchor_name,
            });
            d.steps.push(ProgramStep::Verify { group: g, value });
        }
        Template::VerifyRelation => {
            let path = relation_walk(scene, anchor, 1, rng)?;
            let (rel, target) = &path[0];
            let truth = scene.objects[*target].identity.clone();
            let claim = pick_claim(&vocab.group(0).concepts, &truth, rng);
            d.word("is");
            d.word("the");
            d.grounded(&claim, *target);
            for w in relation_phrase(rel) {
                d.word(&w);
            }
            d.word("the");
            d.grounded(&anchor_name, anchor);
            d.steps.push(ProgramStep::Select {
                identity: anchor_name,
            });
            d.steps.push(ProgramStep::Relate {
                relation: rel.clone(),
            });
            d.steps.push(ProgramStep::Verify {
                group: 0,
                value: claim,
            });
        }
        Template::RelateIdentity(h) | Template::RelateAttribute(h) => {
            let path = relation_walk(scene, anchor, h as usize, rng)?;
            let group = match template {
                Template::RelateAttribute(_) => rng.random_range(1..=attr_groups),
                _ => 0,
            };
            d.word("what");
            if group > 0 {
                d.word(&vocab.group(group).name);
            }
            d.word("is");
            for (rel, obj) in path.iter().rev() {
                d.word("the");
                d.grounded("thing", *obj);
                for w in relation_phrase(rel) {
                    d.word(&w);
                }
            }
            d.word("the");
            d.grounded(&anchor_name, anchor);
            d.steps.push(ProgramStep::Select {
                identity: anchor_name,
            });
            for (rel, _) in &path {
                d.steps.push(ProgramStep::Relate {
                    relation: rel.clone(),
                });
            }
            d.steps.push(ProgramStep::Query { group });
        }
    }
    Some(d)
}

/// True value or, with probability ½, a different value from `options`.
fn pick_claim(options: &[String], truth: &str, rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.5) || options.len() < 2 {
        return truth.to_string();
    }
    let others: Vec<&String> = options.iter().filter(|o| *o != truth).collect();
    (*others.choose(rng).expect("at least one alternative")).clone()
}

/// Instantiates `template` on `scene`; the answer comes from the executor.
/// Retries up to `max_retries` times before signalling a skip.
pub fn generate_question(
    scene: &SymbolicScene,
    vocab: &ConceptVocabulary,
    template: Template,
    seed: u64,
    max_retries: usize,
) -> Result<QuestionRecord, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_retries.max(1) {
        let Some(draft) = draft_question(scene, vocab, template, &mut rng) else {
            continue;
        };
        let program = Program { steps: draft.steps };
        let Ok(exec) = execute_program(scene, &program) else {
            continue;
        };
        return Ok(QuestionRecord {
            id: 0,
            graph_id: 0,
            template: template.id(),
            hop_count: program.hop_count(),
            text: draft.text,
            program,
            answer: exec.answer,
            groundings: draft.groundings,
        });
    }
    Err(SynthError::Skip {
        template: template.id(),
    })
}
