use std::collections::BTreeSet;
use std::fs;

use nsm_core::concepts::build_vocabulary;
use nsm_core::synthgen::*;
use proptest::prelude::*;
use serde::Deserialize;

fn vocab() -> nsm_core::concepts::ConceptVocabulary {
    build_vocabulary(&default_ontology(), 8, 3).unwrap()
}

fn object(identity: &str, attrs: [&str; 3], cx: f64, cy: f64) -> SceneObject {
    SceneObject {
        identity: identity.into(),
        attributes: attrs.iter().map(|a| a.to_string()).collect(),
        bbox: [cx - 0.02, cy - 0.02, 0.04, 0.04],
    }
}

fn small_dataset(seed: u64) -> Dataset {
    Dataset::generate(&DatasetConfig {
        seed,
        n_scenes: 40,
        n_questions: 300,
        dim: 8,
        ..DatasetConfig::default()
    })
    .unwrap()
}

#[test]
fn proximity_rule_examples() {
    let near = [
        object("cat", ["red", "wood", "small"], 0.30, 0.30),
        object("dog", ["red", "wood", "small"], 0.40, 0.35),
    ];
    let rels = proximity_relations(&near);
    assert_eq!(rels.len(), 2);
    assert!(rels.iter().any(|r| r.src == 0 && r.dst == 1));
    assert!(rels.iter().any(|r| r.src == 1 && r.dst == 0));

    let far = [
        object("cat", ["red", "wood", "small"], 0.2, 0.2),
        object("dog", ["red", "wood", "small"], 0.7, 0.7),
    ];
    assert!(proximity_relations(&far).is_empty());
}

#[test]
fn spatial_labels_follow_dominant_axis() {
    assert_eq!(spatial_relation((0.5, 0.5), (0.4, 0.52)), "left");
    assert_eq!(spatial_relation((0.5, 0.5), (0.6, 0.52)), "right");
    assert_eq!(spatial_relation((0.5, 0.5), (0.52, 0.4)), "above");
    assert_eq!(spatial_relation((0.5, 0.5), (0.52, 0.6)), "below");
}

#[test]
fn zero_epsilon_gives_one_hot_graph() {
    let v = vocab();
    let cfg = SceneConfig {
        epsilon: 0.0,
        ..SceneConfig::default()
    };
    let (scene, graph) = generate_scene(&v, 6, 11, &cfg).unwrap();
    for (i, node) in graph.nodes.iter().enumerate() {
        for (g, dist) in node.property_dists.iter().enumerate() {
            let truth = v.lookup(scene.property(i, g)).unwrap().index;
            for (k, p) in dist.iter().enumerate() {
                assert_eq!(*p, if k == truth { 1.0 } else { 0.0 });
            }
        }
    }
    assert_eq!(graph.edges.len(), scene.relations.len());
}

#[test]
fn object_cap_is_enforced() {
    let v = vocab();
    let err = generate_scene(&v, 51, 0, &SceneConfig::default()).unwrap_err();
    assert!(matches!(
        err,
        SynthError::TooManyObjects {
            requested: 51,
            cap: 50
        }
    ));
    assert!(generate_scene(&v, 0, 0, &SceneConfig::default()).is_err());
}

#[derive(Deserialize)]
struct Golden {
    scene: SymbolicScene,
    program: Program,
    manual_trace: ManualTrace,
}

#[derive(Deserialize)]
struct ManualTrace {
    visited: Vec<usize>,
    answer: String,
}

#[test]
fn three_hop_chain_matches_manual_trace() {
    let text = fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/golden/line_trace.json"
    ))
    .unwrap();
    let golden: Golden = serde_json::from_str(&text).unwrap();
    // the stored relations are exactly what the proximity rule produces
    assert_eq!(
        proximity_relations(&golden.scene.objects),
        golden.scene.relations
    );
    let exec = execute_program(&golden.scene, &golden.program).unwrap();
    assert_eq!(golden.program.hop_count(), 3);
    assert_eq!(exec.visited, golden.manual_trace.visited);
    assert_eq!(exec.answer, golden.manual_trace.answer);
}

#[test]
fn attribute_query_reads_off_the_scene() {
    let v = vocab();
    let scene = SymbolicScene {
        objects: vec![
            object("cat", ["red", "wood", "small"], 0.40, 0.40),
            object("table", ["blue", "metal", "large"], 0.40, 0.48),
        ],
        relations: vec![],
    };
    let q = (0..200)
        .map(|s| generate_question(&scene, &v, Template::QueryAttribute, s, 20).unwrap())
        .find(|q| q.text.join(" ") == "what color is the cat")
        .expect("some seed asks about the cat's color");
    assert_eq!(q.answer, "red");
    assert_eq!(q.groundings.get(&4), Some(&0));
}

#[test]
fn false_claim_answers_no() {
    let v = vocab();
    let scene = SymbolicScene {
        objects: vec![object("cat", ["red", "wood", "small"], 0.4, 0.4)],
        relations: vec![],
    };
    let q = (0..200)
        .map(|s| generate_question(&scene, &v, Template::VerifyAttribute, s, 20).unwrap())
        .find(|q| q.text[3] == "blue")
        .expect("some seed claims the cat is blue");
    assert_eq!(q.text.join(" "), "is the cat blue");
    assert_eq!(q.answer, NO);
}

#[test]
fn impossible_template_signals_skip() {
    let v = vocab();
    let scene = SymbolicScene {
        objects: vec![object("cat", ["red", "wood", "small"], 0.4, 0.4)],
        relations: vec![],
    };
    let err = generate_question(&scene, &v, Template::RelateIdentity(2), 0, 5).unwrap_err();
    assert!(matches!(err, SynthError::Skip { .. }));
}

/// Independent relational walk: follow relation labels one at a time over
/// the scene's edge list.
fn brute_force(scene: &SymbolicScene, program: &Program) -> Option<String> {
    let mut cur: Option<usize> = None;
    for step in &program.steps {
        match step {
            ProgramStep::Select { identity } => {
                let hits: Vec<usize> = (0..scene.objects.len())
                    .filter(|&i| &scene.objects[i].identity == identity)
                    .collect();
                if hits.len() != 1 {
                    return None;
                }
                cur = Some(hits[0]);
            }
            ProgramStep::Relate { relation } => {
                let from = cur?;
                let mut hits = Vec::new();
                for r in &scene.relations {
                    if r.src == from && &r.relation == relation {
                        hits.push(r.dst);
                    }
                }
                if hits.len() != 1 {
                    return None;
                }
                cur = Some(hits[0]);
            }
            ProgramStep::Query { group } => {
                let o = &scene.objects[cur?];
                return Some(if *group == 0 {
                    o.identity.clone()
                } else {
                    o.attributes[group - 1].clone()
                });
            }
            ProgramStep::Verify { group, value } => {
                let o = &scene.objects[cur?];
                let actual = if *group == 0 {
                    &o.identity
                } else {
                    &o.attributes[group - 1]
                };
                return Some(if actual == value { "yes" } else { "no" }.to_string());
            }
        }
    }
    None
}

#[test]
fn every_generated_answer_matches_brute_force() {
    let data = small_dataset(5);
    let mut two_hop = 0;
    for q in &data.questions {
        let scene = &data.scenes[q.graph_id];
        assert_eq!(
            brute_force(scene, &q.program).as_deref(),
            Some(q.answer.as_str()),
            "{q:?}"
        );
        for (&pos, &obj) in &q.groundings {
            assert!(pos < q.text.len() && obj < scene.objects.len());
        }
        two_hop += usize::from(q.hop_count == 2);
    }
    assert!(two_hop > 0);
}

#[test]
fn dataset_files_are_byte_identical_and_reload() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_dataset(9).save(a.path()).unwrap();
    small_dataset(9).save(b.path()).unwrap();
    for f in [
        DATASET_FILE,
        VOCAB_FILE,
        LEXICON_FILE,
        SCENES_FILE,
        GRAPHS_FILE,
        QUESTIONS_FILE,
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let loaded = Dataset::load(a.path()).unwrap();
    assert_eq!(loaded, small_dataset(9));
}

#[test]
fn tampered_answer_fails_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_dataset(2);
    let q = &mut data.questions[7];
    q.answer = if q.answer == "zebra" {
        "yak".into()
    } else {
        "zebra".into()
    };
    data.save(dir.path()).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, SynthError::Corrupt { id: 7, .. }), "{err}");
}

#[test]
fn content_holdout_keeps_animals_out_of_train() {
    let data = small_dataset(4);
    let spec = SplitSpec {
        mode: SplitMode::Content,
        holdout: vec!["animals".into()],
        seed: 0,
    };
    let split = build_splits(&data.questions, &data.scenes, &data.ontology, &spec).unwrap();
    let animals: BTreeSet<&str> = ["cat", "dog", "bird"].into_iter().collect();
    assert!(!split.test.is_empty());
    for &id in &split.train {
        let q = &data.questions[id];
        let scene = &data.scenes[q.graph_id];
        for &o in q.groundings.values() {
            assert!(!animals.contains(scene.objects[o].identity.as_str()));
        }
        assert!(q.text.iter().all(|t| !animals.contains(t.as_str())));
        assert!(!animals.contains(q.answer.as_str()));
    }
    assert_eq!(split.train.len() + split.test.len(), data.questions.len());
}

#[test]
fn structure_holdout_removes_two_hop_templates() {
    let data = small_dataset(4);
    let spec = SplitSpec {
        mode: SplitMode::Structure,
        holdout: vec!["relate_id_2hop".into(), "relate_attr_2hop".into()],
        seed: 0,
    };
    let split = build_splits(&data.questions, &data.scenes, &data.ontology, &spec).unwrap();
    assert!(split
        .train
        .iter()
        .all(|&i| data.questions[i].hop_count != 2));
    assert!(split.test.iter().all(|&i| data.questions[i].hop_count == 2));
}

#[test]
fn iid_split_is_seeded_eighty_twenty() {
    let data = small_dataset(4);
    let spec = SplitSpec {
        mode: SplitMode::Iid,
        holdout: vec![],
        seed: 3,
    };
    let a = build_splits(&data.questions, &data.scenes, &data.ontology, &spec).unwrap();
    let b = build_splits(&data.questions, &data.scenes, &data.ontology, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train.len(), 240);
    assert_eq!(a.test.len(), 60);
}

#[test]
fn holdout_of_everything_is_an_error() {
    let data = small_dataset(4);
    let spec = SplitSpec {
        mode: SplitMode::Structure,
        holdout: data.config.templates.clone(),
        seed: 0,
    };
    let err = build_splits(&data.questions, &data.scenes, &data.ontology, &spec).unwrap_err();
    assert!(matches!(err, SynthError::EmptyTrain));
    let bad = SplitSpec {
        mode: SplitMode::Content,
        holdout: vec!["spaceships".into()],
        seed: 0,
    };
    assert!(build_splits(&data.questions, &data.scenes, &data.ontology, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edges_are_exactly_the_close_pairs(seed in 0u64..10_000, n in 1usize..20) {
        let v = vocab();
        let (scene, graph) = generate_scene(&v, n, seed, &SceneConfig::default()).unwrap();
        let mut expected = BTreeSet::new();
        for (i, a) in scene.objects.iter().enumerate() {
            for (j, b) in scene.objects.iter().enumerate() {
                let (ca, cb) = (a.center(), b.center());
                if i != j && (ca.0 - cb.0).abs() < 0.15 && (ca.1 - cb.1).abs() < 0.15 {
                    expected.insert((i, j));
                }
            }
            prop_assert!(a.bbox.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!(a.bbox[0] + a.bbox[2] <= 1.0 + 1e-12 && a.bbox[1] + a.bbox[3] <= 1.0 + 1e-12);
        }
        let got: BTreeSet<(usize, usize)> = graph.edges.iter().map(|e| (e.source, e.target)).collect();
        prop_assert_eq!(got, expected);
        prop_assert!(graph.validate(1e-6).is_ok());
    }
}
