//! Shared fixtures: a dense-loop reference implementation of the state
//! machine and a tiny end-to-end model for gradient checks.
#![allow(dead_code, clippy::needless_range_loop)]

use std::time::Instant;

use nsm_core::concepts::{build_vocabulary_with_std, AttributeType, ObjectType, OntologySpec};
use nsm_core::diffmath::gradcheck::{numerical_gradient, relative_error};
use nsm_core::diffmath::{Tape, Tensor};
use nsm_core::instructor::Lexicon;
use nsm_core::machine::{
    instruction_type, project, readout, simulate, AblationMode, GraphReps, ModelConfig, ModelInput,
    NsmModel, ParamSet,
};
use nsm_core::synthgen::{answer_vocabulary, function_words};
use nsm_core::worldgraph::{SceneGraph, StateNode, TransitionEdge};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..r).map(|_| randv(rng, c, scale)).collect()
}

fn mat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Everything the machine reads, as plain nested vectors.
#[derive(Debug, Clone)]
pub struct Toy {
    pub d: usize,
    pub steps: usize,
    pub nodes: usize,
    /// Property embeddings `D`, last row = relation.
    pub props: Vec<Vec<f64>>,
    /// `r_0 … r_N`.
    pub instr: Vec<Vec<f64>>,
    /// `states[j][s]` = `sʲ` of node `s`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub edges: Vec<Vec<f64>>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub w_props: Vec<Vec<Vec<f64>>>,
    pub w_rel: Vec<Vec<f64>>,
    pub w_s: Vec<f64>,
    pub w_r: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Run {
    /// `p_0 … p_N`.
    pub p: Vec<Vec<f64>>,
    /// `R_0 … R_{N−1}` then the readout's `R_N`.
    pub types: Vec<Vec<f64>>,
    pub m: Vec<f64>,
}

impl Toy {
    /// Random machine over `nodes` nodes with `lp` node properties; every
    /// ordered pair becomes an edge with probability one half.
    pub fn random(seed: u64, nodes: usize, lp: usize, d: usize, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for a in 0..nodes {
            for b in 0..nodes {
                if a != b && rng.random_bool(0.5) {
                    src.push(a);
                    dst.push(b);
                }
            }
        }
        let e = src.len();
        Self {
            d,
            steps,
            nodes,
            props: randm(&mut rng, lp + 1, d, 1.5),
            instr: randm(&mut rng, steps + 1, d, 1.5),
            states: (0..lp).map(|_| randm(&mut rng, nodes, d, 1.0)).collect(),
            edges: randm(&mut rng, e, d, 1.0),
            src,
            dst,
            w_props: (0..lp).map(|_| randm(&mut rng, d, d, 1.0)).collect(),
            w_rel: randm(&mut rng, d, d, 1.0),
            w_s: randv(&mut rng, d, 1.5),
            w_r: randv(&mut rng, d, 1.5),
        }
    }

    fn type_dist(&self, r: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self
            .props
            .iter()
            .map(|row| (0..self.d).map(|a| row[a] * r[a]).sum())
            .collect();
        softmax(&scores)
    }

    /// Straight nested loops over nodes, edges and coordinates.
    pub fn oracle(&self) -> Run {
        let (d, n, lp) = (self.d, self.nodes, self.states.len());
        let mut p = vec![1.0 / n as f64; n];
        let mut out = Run {
            p: vec![p.clone()],
            types: Vec::new(),
            m: Vec::new(),
        };
        for i in 0..self.steps {
            let r = &self.instr[i];
            let rd = self.type_dist(r);
            let gate = rd[lp];
            let mut state_logits = vec![0.0; n];
            for s in 0..n {
                for a in 0..d {
                    let mut x = 0.0;
                    for j in 0..lp {
                        let mut ws = 0.0;
                        for b in 0..d {
                            ws += self.w_props[j][a][b] * self.states[j][s][b];
                        }
                        x += rd[j] * r[a] * ws;
                    }
                    state_logits[s] += self.w_s[a] * elu(x);
                }
            }
            let p_state = softmax(&state_logits);
            let p_rel = if self.src.is_empty() {
                vec![1.0 / n as f64; n]
            } else {
                let mut agg = vec![vec![0.0; d]; n];
                for (k, (&a_node, &b_node)) in self.src.iter().zip(&self.dst).enumerate() {
                    for a in 0..d {
                        let mut we = 0.0;
                        for b in 0..d {
                            we += self.w_rel[a][b] * self.edges[k][b];
                        }
                        agg[b_node][a] += p[a_node] * elu(r[a] * we);
                    }
                }
                let logits: Vec<f64> = agg
                    .iter()
                    .map(|v| (0..d).map(|a| self.w_r[a] * v[a]).sum())
                    .collect();
                softmax(&logits)
            };
            p = (0..n)
                .map(|s| gate * p_rel[s] + (1.0 - gate) * p_state[s])
                .collect();
            out.p.push(p.clone());
            out.types.push(rd);
        }
        let rd = self.type_dist(&self.instr[self.steps]);
        let mut m = vec![0.0; d];
        for s in 0..n {
            for a in 0..d {
                for j in 0..lp {
                    m[a] += p[s] * rd[j] * self.states[j][s][a];
                }
            }
        }
        out.types.push(rd);
        out.m = m;
        out
    }

    /// The same quantities through the library on a tape.
    pub fn run(&self) -> Run {
        let mut tape = Tape::new();
        let props = tape.constant(mat(&self.props));
        let instr: Vec<_> = self
            .instr
            .iter()
            .map(|r| tape.constant(Tensor::vector(r.clone())))
            .collect();
        let states = self.states.iter().map(|s| tape.constant(mat(s))).collect();
        let edges = (!self.edges.is_empty()).then(|| tape.constant(mat(&self.edges)));
        let reps = GraphReps {
            states,
            edges,
            src: self.src.clone(),
            dst: self.dst.clone(),
            nodes: self.nodes,
        };
        let w_props: Vec<_> = self.w_props.iter().map(|w| tape.constant(mat(w))).collect();
        let w_rel = tape.constant(mat(&self.w_rel));
        let w_s = tape.constant(Tensor::vector(self.w_s.clone()));
        let w_r = tape.constant(Tensor::vector(self.w_r.clone()));
        let proj = project(&mut tape, &reps, &w_props, w_rel).unwrap();
        let (last, steps) =
            simulate(&mut tape, &instr, self.steps, props, &proj, &reps, w_s, w_r).unwrap();
        let (rd, _) = instruction_type(&mut tape, instr[self.steps], props).unwrap();
        let m = readout(&mut tape, last, rd, &reps).unwrap();
        let mut p = vec![vec![1.0 / self.nodes as f64; self.nodes]];
        p.extend(steps.iter().map(|s| tape.value(s.p_next).data().to_vec()));
        let mut types: Vec<Vec<f64>> = steps
            .iter()
            .map(|s| tape.value(s.type_dist).data().to_vec())
            .collect();
        types.push(tape.value(rd).data().to_vec());
        Run {
            p,
            types,
            m: tape.value(m).data().to_vec(),
        }
    }
}

/// Largest absolute difference between two runs.
pub fn run_gap(a: &Run, b: &Run) -> f64 {
    let flat = |r: &Run| {
        r.p.iter()
            .chain(&r.types)
            .flatten()
            .chain(&r.m)
            .copied()
            .collect::<Vec<f64>>()
    };
    let (x, y) = (flat(a), flat(b));
    assert_eq!(x.len(), y.len());
    x.iter()
        .zip(&y)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

/// Two-object ontology: `cat`/`dog`, one colour group, `left`/`right`.
pub fn tiny_ontology() -> OntologySpec {
    OntologySpec {
        objects: ["cat", "dog"]
            .iter()
            .map(|n| ObjectType {
                name: n.to_string(),
                category: "animals".into(),
            })
            .collect(),
        attributes: vec![AttributeType {
            name: "color".into(),
            values: vec!["red".into(), "blue".into()],
        }],
        relations: vec!["left".into(), "right".into()],
    }
}

/// A two-node graph with one edge each way and soft distributions.
pub fn tiny_graph(vocab: &nsm_core::concepts::ConceptVocabulary) -> SceneGraph {
    let names = (0..vocab.group_count() - 1)
        .map(|g| vocab.group(g).name.clone())
        .collect();
    SceneGraph {
        property_names: names,
        nodes: vec![
            StateNode {
                bbox: [0.1, 0.1, 0.2, 0.2],
                property_dists: vec![vec![0.9, 0.1], vec![0.3, 0.7]],
                dense_features: None,
            },
            StateNode {
                bbox: [0.6, 0.1, 0.2, 0.2],
                property_dists: vec![vec![0.2, 0.8], vec![0.6, 0.4]],
                dense_features: None,
            },
        ],
        edges: vec![
            TransitionEdge {
                source: 0,
                target: 1,
                relation_dist: vec![0.25, 0.75],
            },
            TransitionEdge {
                source: 1,
                target: 0,
                relation_dist: vec![0.8, 0.2],
            },
        ],
        image_size: (1.0, 1.0),
    }
}

/// Full model at `d = 8`, `N = 2` with a four-word question on a two-node
/// graph. Every parameter is jittered so no gradient sits at a symmetric
/// point.
pub fn tiny_model(seed: u64) -> (NsmModel, ModelInput, usize) {
    let d = 8;
    let vocab = build_vocabulary_with_std(&tiny_ontology(), d, seed, 0.5).unwrap();
    let lexicon = Lexicon::build(&vocab, &function_words(&vocab), seed, 0.01, 0.1).unwrap();
    let config = ModelConfig {
        dim: d,
        steps: 2,
        ablation: AblationMode::Full,
        dropout: 0.0,
        answers: answer_vocabulary(&vocab),
        group_sizes: vocab.group_sizes(),
        tokens: lexicon.len(),
        dense_dim: None,
        seed,
    };
    let mut model = NsmModel::new(config, &vocab, &lexicon).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let text: Vec<String> = ["what", "color", "is", "cat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let input = ModelInput::new(&lexicon, &vocab, &text, &tiny_graph(&vocab)).unwrap();
    let target = model.answer_id("red").unwrap();
    (model, input, target)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub worst_param: String,
    pub scalars: usize,
}

/// Checks every scalar of every parameter against central differences.
pub fn full_gradient_check(
    model: &NsmModel,
    input: &ModelInput,
    target: usize,
    eps: f64,
) -> GradReport {
    let params = model.params().clone();
    let (_, _, grads) = model.loss_and_grads(&params, input, target, None).unwrap();
    let mut report = GradReport {
        worst: 0.0,
        worst_param: String::new(),
        scalars: 0,
    };
    for (k, name) in params.names().iter().enumerate() {
        let base = &params.tensors()[k];
        let numeric = numerical_gradient(base, eps, |probe| {
            let mut p: ParamSet = params.clone();
            p.tensors_mut()[k] = probe.clone();
            -model.predict_with(&p, input).unwrap()[target].ln()
        });
        for (a, n) in grads[k].data().iter().zip(numeric.data()) {
            let err = relative_error(*a, *n);
            if err > report.worst {
                report.worst = err;
                report.worst_param = name.clone();
            }
        }
        report.scalars += base.len();
    }
    report
}

/// Median over trials of time(2V, 2E) / time(V, E) for the graph-dependent
/// part of a forward pass.
pub fn doubling_ratio(v: usize, e: usize, trials: usize) -> f64 {
    let time = |toy: &Toy| {
        let t = Instant::now();
        std::hint::black_box(toy.run());
        t.elapsed().as_secs_f64()
    };
    let build = |nodes: usize, edges: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || {
            (0..16)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let mut toy = Toy::random(seed, 1, 3, 16, 4);
        toy.nodes = nodes;
        toy.states = (0..3)
            .map(|_| (0..nodes).map(|_| row()).collect())
            .collect();
        toy.edges = (0..edges).map(|_| row()).collect();
        toy.src = (0..edges).map(|k| k % nodes).collect();
        toy.dst = (0..edges).map(|k| (k * 7 + 1) % nodes).collect();
        toy
    };
    let small = build(v, e, 1);
    let large = build(2 * v, 2 * e, 2);
    // warm the allocator so large buffers are not fresh page faults
    for _ in 0..3 {
        time(&small);
        time(&large);
    }
    let mut ratios: Vec<f64> = (0..trials).map(|_| time(&large) / time(&small)).collect();
    ratios.sort_by(f64::total_cmp);
    ratios[trials / 2]
}
