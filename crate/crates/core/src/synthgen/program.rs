//! Symbolic query programs and their executor, the ground-truth oracle for
//! every generated answer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scene::SymbolicScene;

pub const YES: &str = "yes";
pub const NO: &str = "no";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ProgramStep {
    /// Pick the single object with this identity.
    Select { identity: String },
    /// Move to the single object reached over a `relation` edge.
    Relate { relation: String },
    /// Read property group `group` (0 = identity) of the current object.
    Query { group: usize },
    /// Compare property `group` of the current object with `value`.
    Verify { group: usize, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub steps: Vec<ProgramStep>,
}

impl Program {
    pub fn hop_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, ProgramStep::Relate { .. }))
            .count()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("step {step}: `{what}` matches no object")]
    Empty { step: usize, what: String },
    #[error("step {step}: `{what}` matches {count} objects")]
    Ambiguous {
        step: usize,
        what: String,
        count: usize,
    },
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// Result of running a program, with the object visited after each
/// selecting step (used for groundings).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub answer: String,
    pub visited: Vec<usize>,
}

fn single(step: usize, what: &str, matches: Vec<usize>) -> Result<usize, ExecError> {
    match matches.len() {
        0 => Err(ExecError::Empty {
            step,
            what: what.to_string(),
        }),
        1 => Ok(matches[0]),
        count => Err(ExecError::Ambiguous {
            step,
            what: what.to_string(),
            count,
        }),
    }
}

pub fn execute_program(scene: &SymbolicScene, program: &Program) -> Result<Execution, ExecError> {
    let mut current: Option<usize> = None;
    let mut visited = Vec::new();
    let last = program.steps.len().saturating_sub(1);
    for (k, step) in program.steps.iter().enumerate() {
        let terminal = matches!(step, ProgramStep::Query { .. } | ProgramStep::Verify { .. });
        if terminal != (k == last) {
            return Err(ExecError::Malformed(
                "query/verify must be the final step and only there".into(),
            ));
        }
        match step {
            ProgramStep::Select { identity } => {
                let obj = single(k, identity, scene.with_identity(identity))?;
                visited.push(obj);
                current = Some(obj);
            }
            ProgramStep::Relate { relation } => {
                let from =
                    current.ok_or_else(|| ExecError::Malformed("relate before select".into()))?;
                let obj = single(k, relation, scene.related(from, relation))?;
                visited.push(obj);
                current = Some(obj);
            }
            ProgramStep::Query { group } | ProgramStep::Verify { group, .. } => {
                let obj =
                    current.ok_or_else(|| ExecError::Malformed("query before select".into()))?;
                let groups = scene.objects[obj].attributes.len() + 1;
                if *group >= groups {
                    return Err(ExecError::Malformed(format!("no property group {group}")));
                }
                let value = scene.property(obj, *group).to_string();
                let answer = match step {
                    ProgramStep::Verify { value: want, .. } => {
                        if *want == value { YES } else { NO }.to_string()
                    }
                    _ => value,
                };
                return Ok(Execution { answer, visited });
            }
        }
    }
    Err(ExecError::Malformed(
        "program has no query or verify step".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::scene::{SceneObject, SceneRelation};

    fn obj(identity: &str, color: &str) -> SceneObject {
        SceneObject {
            identity: identity.into(),
            attributes: vec![color.into()],
            bbox: [0.0, 0.0, 0.1, 0.1],
        }
    }

    #[test]
    fn select_then_query() {
        let scene = SymbolicScene {
            objects: vec![obj("cat", "red"), obj("table", "blue")],
            relations: vec![],
        };
        let p = Program {
            steps: vec![
                ProgramStep::Select {
                    identity: "cat".into(),
                },
                ProgramStep::Query { group: 1 },
            ],
        };
        assert_eq!(execute_program(&scene, &p).unwrap().answer, "red");
    }

    #[test]
    fn empty_and_ambiguous_select() {
        let scene = SymbolicScene {
            objects: vec![obj("cat", "red"), obj("cat", "blue")],
            relations: vec![],
        };
        let q = |id: &str| Program {
            steps: vec![
                ProgramStep::Select {
                    identity: id.into(),
                },
                ProgramStep::Query { group: 1 },
            ],
        };
        assert!(matches!(
            execute_program(&scene, &q("dog")),
            Err(ExecError::Empty { step: 0, .. })
        ));
        assert!(matches!(
            execute_program(&scene, &q("cat")),
            Err(ExecError::Ambiguous { count: 2, .. })
        ));
    }

    #[test]
    fn verify_false_fact() {
        let scene = SymbolicScene {
            objects: vec![obj("cat", "red"), obj("table", "blue")],
            relations: vec![SceneRelation {
                src: 1,
                relation: "on".into(),
                dst: 0,
            }],
        };
        let p = Program {
            steps: vec![
                ProgramStep::Select {
                    identity: "table".into(),
                },
                ProgramStep::Relate {
                    relation: "on".into(),
                },
                ProgramStep::Verify {
                    group: 1,
                    value: "blue".into(),
                },
            ],
        };
        assert_eq!(execute_program(&scene, &p).unwrap().answer, NO);
        assert_eq!(p.hop_count(), 1);
    }

    #[test]
    fn malformed_programs() {
        let scene = SymbolicScene {
            objects: vec![obj("cat", "red")],
            relations: vec![],
        };
        let p = Program {
            steps: vec![ProgramStep::Query { group: 0 }],
        };
        assert!(matches!(
            execute_program(&scene, &p),
            Err(ExecError::Malformed(_))
        ));
        let p = Program {
            steps: vec![ProgramStep::Select {
                identity: "cat".into(),
            }],
        };
        assert!(matches!(
            execute_program(&scene, &p),
            Err(ExecError::Malformed(_))
        ));
    }
}
