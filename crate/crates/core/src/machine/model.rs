use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::ParamSet;
use super::{
    classifier_logits, instruction_type, project, readout, simulate, ClassifierVars, GraphReps,
    StepVars, TraversalStep,
};
use crate::concepts::{concept_matrix, ConceptError, ConceptVocabulary};
use crate::diffmath::{kernels, lstm_init, LstmVars, MathError, Tape, Tensor, Var};
use crate::instructor::{
    decode_instructions, encode_question, tag_words, Decoded, InstructionSequence, Lexicon, Tagged,
};
use crate::worldgraph::SceneGraph;

/// Weights are drawn from `N(0, (scale/√fan_in)²)`.
pub const WEIGHT_INIT_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoConcepts,
    NoRelations,
    NoTraversal,
}

impl AblationMode {
    pub fn all() -> [AblationMode; 4] {
        [
            AblationMode::Full,
            AblationMode::NoConcepts,
            AblationMode::NoRelations,
            AblationMode::NoTraversal,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoConcepts => "no_concepts",
            AblationMode::NoRelations => "no_relations",
            AblationMode::NoTraversal => "no_traversal",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationMode::all()
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    /// Number of transitions `N`.
    pub steps: usize,
    pub ablation: AblationMode,
    pub dropout: f64,
    pub answers: Vec<String>,
    /// Concepts per property type, relations last.
    pub group_sizes: Vec<usize>,
    pub tokens: usize,
    /// Width of the node feature vectors used by the no-concepts variant.
    pub dense_dim: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.dim == 0 || self.steps == 0 || self.tokens == 0 {
            return fail("dim, steps and token count must be positive");
        }
        if self.answers.is_empty() {
            return fail("empty answer vocabulary");
        }
        if self.group_sizes.len() < 3 || self.group_sizes.contains(&0) {
            return fail(
                "need identity, at least one attribute and relation groups, all non-empty",
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.ablation == AblationMode::NoConcepts && self.dense_dim.is_none() {
            return fail("no_concepts needs dense node features");
        }
        Ok(())
    }

    /// Number of non-relation properties, `L+1`.
    pub fn node_properties(&self) -> usize {
        self.group_sizes.len() - 1
    }
}

/// Constant per-graph inputs: distributions, edge lists and dense features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub nodes: usize,
    pub props: Vec<Tensor>,
    pub relations: Option<Tensor>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub dense: Option<Tensor>,
}

impl GraphInput {
    pub fn from_graph(g: &SceneGraph) -> Self {
        let dense = g.nodes[0].dense_features.as_ref().and_then(|first| {
            let rows: Option<Vec<Vec<f64>>> =
                g.nodes.iter().map(|n| n.dense_features.clone()).collect();
            rows.filter(|r| r.iter().all(|x| x.len() == first.len()))
                .map(|r| Tensor::from_rows(&r).expect("non-empty rows"))
        });
        Self {
            nodes: g.node_count(),
            props: (0..g.property_names.len())
                .map(|j| g.property_matrix(j))
                .collect(),
            relations: g.relation_matrix(),
            src: g.edges.iter().map(|e| e.source).collect(),
            dst: g.edges.iter().map(|e| e.target).collect(),
            dense,
        }
    }
}

/// A question (token ids plus tied concept rows) over one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    /// Row of the concept matrix each content token is tied to.
    pub ties: Vec<Option<usize>>,
    pub graph: GraphInput,
}

impl ModelInput {
    pub fn new(
        lexicon: &Lexicon,
        vocab: &ConceptVocabulary,
        text: &[String],
        graph: &SceneGraph,
    ) -> Result<Self, ModelError> {
        if text.is_empty() {
            return Err(MathError::Contract("empty question".into()).into());
        }
        let tokens = lexicon.encode(text)?;
        let ties = tokens
            .iter()
            .map(|&t| match &lexicon.entries()[t].concept {
                Some(c) => vocab
                    .lookup(c)
                    .map(|id| Some(vocab.row_of(id)))
                    .ok_or_else(|| ConceptError::Unknown(c.clone())),
                None => Ok(None),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            tokens,
            ties,
            graph: GraphInput::from_graph(graph),
        })
    }
}

#[derive(Debug, Clone)]
struct Slots {
    concepts: usize,
    properties: usize,
    offsets: usize,
    tagger: usize,
    encoder: [usize; 3],
    decoder: [usize; 3],
    step_inputs: usize,
    w_props: Vec<usize>,
    w_rel: usize,
    w_state: usize,
    w_relproj: usize,
    classifier: [usize; 4],
    dense_proj: Vec<usize>,
    rel_proj: Option<usize>,
}

impl Slots {
    fn resolve(config: &ModelConfig, params: &ParamSet) -> Result<Self, ModelError> {
        let at = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
        };
        let lp = config.node_properties();
        let no_concepts = config.ablation == AblationMode::NoConcepts;
        Ok(Self {
            concepts: at("concepts")?,
            properties: at("properties")?,
            offsets: at("word_offsets")?,
            tagger: at("tagger")?,
            encoder: [
                at("encoder.w_input")?,
                at("encoder.w_hidden")?,
                at("encoder.bias")?,
            ],
            decoder: [
                at("decoder.w_input")?,
                at("decoder.w_hidden")?,
                at("decoder.bias")?,
            ],
            step_inputs: at("step_inputs")?,
            w_props: (0..lp)
                .map(|j| at(&format!("w_prop.{j}")))
                .collect::<Result<_, _>>()?,
            w_rel: at("w_rel")?,
            w_state: at("w_state")?,
            w_relproj: at("w_relproj")?,
            classifier: [
                at("classifier.w1")?,
                at("classifier.b1")?,
                at("classifier.w2")?,
                at("classifier.b2")?,
            ],
            dense_proj: if no_concepts {
                (0..lp)
                    .map(|j| at(&format!("dense_proj.{j}")))
                    .collect::<Result<_, _>>()?
            } else {
                Vec::new()
            },
            rel_proj: if no_concepts {
                Some(at("rel_proj")?)
            } else {
                None
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct NsmModel {
    config: ModelConfig,
    params: ParamSet,
    slots: Slots,
    answer_index: HashMap<String, usize>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub params: Vec<Var>,
    pub logits: Var,
    pub tagged: Tagged,
    pub q: Var,
    pub decoded: Decoded,
    pub steps: Vec<StepVars>,
    pub final_p: Var,
    pub readout_type: Var,
    pub m: Var,
}

/// Everything a `trace` call reports for one question.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub instructions: InstructionSequence,
    /// `p_0 … p_N`.
    pub distributions: Vec<Vec<f64>>,
    pub steps: Vec<TraversalStep>,
    pub readout_type: Vec<f64>,
    /// Most attended nodes after each step as `(node, probability)`.
    pub top_nodes: Vec<Vec<(usize, f64)>>,
    pub answer_probs: Vec<(String, f64)>,
    pub predicted: String,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

fn fan_in_std(fan_in: usize) -> f64 {
    WEIGHT_INIT_SCALE / (fan_in as f64).sqrt()
}

impl NsmModel {
    /// Fresh parameters: concept and property embeddings copied from the
    /// vocabulary, word offsets from the lexicon, the tagger and property
    /// bilinears at identity, everything else Gaussian.
    pub fn new(
        config: ModelConfig,
        vocab: &ConceptVocabulary,
        lexicon: &Lexicon,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        if vocab.dim() != d || lexicon.dim() != d || lexicon.len() != config.tokens {
            return Err(ModelError::Config(format!(
                "dimension/token mismatch: model d={d} tokens={}, vocab d={}, lexicon d={} tokens={}",
                config.tokens,
                vocab.dim(),
                lexicon.dim(),
                lexicon.len()
            )));
        }
        if vocab.group_sizes() != config.group_sizes {
            return Err(ModelError::Config(
                "vocabulary groups differ from the model's".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        p.push("concepts", concept_matrix(vocab));
        p.push("properties", vocab.property_matrix());
        let offsets: Vec<Vec<f64>> = lexicon.entries().iter().map(|e| e.offset.clone()).collect();
        p.push("word_offsets", Tensor::from_rows(&offsets)?);
        p.push("tagger", Tensor::identity(d));
        for name in ["encoder", "decoder"] {
            let normal = Normal::new(0.0, fan_in_std(d)).expect("valid std");
            let [wi, wh, b] = lstm_init(d, d, || normal.sample(&mut rng));
            p.push(format!("{name}.w_input"), wi);
            p.push(format!("{name}.w_hidden"), wh);
            p.push(format!("{name}.bias"), b);
        }
        p.push(
            "step_inputs",
            gaussian(&mut rng, &[config.steps + 1, d], fan_in_std(d)),
        );
        for j in 0..config.node_properties() {
            p.push(format!("w_prop.{j}"), Tensor::identity(d));
        }
        p.push("w_rel", Tensor::identity(d));
        p.push("w_state", gaussian(&mut rng, &[d], fan_in_std(d)));
        p.push("w_relproj", gaussian(&mut rng, &[d], fan_in_std(d)));
        let a = config.answers.len();
        p.push(
            "classifier.w1",
            gaussian(&mut rng, &[d, 2 * d], fan_in_std(2 * d)),
        );
        p.push("classifier.b1", Tensor::zeros(&[d]));
        p.push("classifier.w2", gaussian(&mut rng, &[a, d], fan_in_std(d)));
        p.push("classifier.b2", Tensor::zeros(&[a]));
        if config.ablation == AblationMode::NoConcepts {
            let f = config.dense_dim.expect("validated");
            for j in 0..config.node_properties() {
                p.push(
                    format!("dense_proj.{j}"),
                    gaussian(&mut rng, &[f, d], fan_in_std(f)),
                );
            }
            let r = *config.group_sizes.last().expect("validated");
            p.push("rel_proj", gaussian(&mut rng, &[r, d], fan_in_std(r)));
        }
        Self::from_parts(config, p)
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let slots = Slots::resolve(&config, &params)?;
        let answer_index = config
            .answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        Ok(Self {
            config,
            params,
            slots,
            answer_index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answer_index.get(answer).copied()
    }

    fn group_rows(&self, tape: &mut Tape<'_>, concepts: Var, g: usize) -> Result<Var, MathError> {
        let start: usize = self.config.group_sizes[..g].iter().sum();
        let idx: Vec<usize> = (start..start + self.config.group_sizes[g]).collect();
        tape.gather_rows(concepts, &idx)
    }

    /// Records a forward pass using `params` (same layout as the model's own,
    /// e.g. its EMA shadow). Dropout is active iff `rng` is given.
    pub fn forward_with<'a>(
        &self,
        tape: &mut Tape<'a>,
        params: &'a ParamSet,
        input: &ModelInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Pass, ModelError> {
        let cfg = &self.config;
        let s = &self.slots;
        if input.tokens.is_empty() {
            return Err(MathError::Contract("empty question".into()).into());
        }
        let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param(t)).collect();
        let rate = cfg.dropout;
        let mut drop = |tape: &mut Tape<'a>, v: Var| -> Result<Var, MathError> {
            match rng.as_deref_mut() {
                Some(r) => tape.dropout(v, rate, r),
                None => Ok(v),
            }
        };
        let concepts = vars[s.concepts];
        let properties = vars[s.properties];

        let offsets = tape.gather_rows(vars[s.offsets], &input.tokens)?;
        let words = if input.ties.iter().any(Option::is_some) {
            let k = tape.value(concepts).rows();
            let mut tie = vec![0.0; input.tokens.len() * k];
            for (i, t) in input.ties.iter().enumerate() {
                if let Some(row) = t {
                    tie[i * k + row] = 1.0;
                }
            }
            let tie = tape.constant(Tensor::matrix(input.tokens.len(), k, tie)?);
            let tied = tape.matmul(tie, concepts)?;
            tape.add(offsets, tied)?
        } else {
            offsets
        };
        let tagged = tag_words(tape, words, vars[s.tagger], concepts)?;
        let enc = LstmVars {
            w_input: vars[s.encoder[0]],
            w_hidden: vars[s.encoder[1]],
            bias: vars[s.encoder[2]],
        };
        let dec = LstmVars {
            w_input: vars[s.decoder[0]],
            w_hidden: vars[s.decoder[1]],
            bias: vars[s.decoder[2]],
        };
        let (q, _) = encode_question(tape, &enc, tagged.words)?;
        let decoded =
            decode_instructions(tape, &dec, vars[s.step_inputs], q, tagged.words, cfg.steps)?;

        let g = &input.graph;
        if g.props.len() != cfg.node_properties() {
            return Err(ModelError::Config(format!(
                "graph has {} properties, model expects {}",
                g.props.len(),
                cfg.node_properties()
            )));
        }
        let mut states = Vec::with_capacity(g.props.len());
        let edges = if cfg.ablation == AblationMode::NoConcepts {
            let dense = g
                .dense
                .clone()
                .ok_or_else(|| ModelError::Config("graph lacks dense features".into()))?;
            let dense = tape.constant(dense);
            for &w in &s.dense_proj {
                let rep = tape.matmul(dense, vars[w])?;
                states.push(drop(tape, rep)?);
            }
            match &g.relations {
                Some(rel) => {
                    let rel = tape.constant(rel.clone());
                    let rep = tape.matmul(rel, vars[s.rel_proj.expect("resolved")])?;
                    Some(drop(tape, rep)?)
                }
                None => None,
            }
        } else {
            for (j, pj) in g.props.iter().enumerate() {
                let cj = self.group_rows(tape, concepts, j)?;
                let pj = tape.constant(pj.clone());
                let rep = tape.matmul(pj, cj)?;
                states.push(drop(tape, rep)?);
            }
            match &g.relations {
                Some(rel) => {
                    let cr = self.group_rows(tape, concepts, cfg.node_properties())?;
                    let rel = tape.constant(rel.clone());
                    let rep = tape.matmul(rel, cr)?;
                    Some(drop(tape, rep)?)
                }
                None => None,
            }
        };
        let reps = GraphReps {
            states,
            edges,
            src: g.src.clone(),
            dst: g.dst.clone(),
            nodes: g.nodes,
        };

        let (final_p, steps) = if cfg.ablation == AblationMode::NoTraversal {
            (
                tape.constant(Tensor::filled(&[g.nodes], 1.0 / g.nodes as f64)),
                Vec::new(),
            )
        } else {
            let w_props: Vec<Var> = s.w_props.iter().map(|&i| vars[i]).collect();
            let proj = project(tape, &reps, &w_props, vars[s.w_rel])?;
            simulate(
                tape,
                &decoded.instructions,
                cfg.steps,
                properties,
                &proj,
                &reps,
                vars[s.w_state],
                vars[s.w_relproj],
            )?
        };
        let r_last = *decoded.instructions.last().expect("N+1 instructions");
        let (readout_type, _) = instruction_type(tape, r_last, properties)?;
        let m = readout(tape, final_p, readout_type, &reps)?;
        let x = tape.concat(&[q, m])?;
        let x = drop(tape, x)?;
        let cls = ClassifierVars {
            w1: vars[s.classifier[0]],
            b1: vars[s.classifier[1]],
            w2: vars[s.classifier[2]],
            b2: vars[s.classifier[3]],
        };
        let logits = classifier_logits(tape, x, &cls)?;
        Ok(Pass {
            params: vars,
            logits,
            tagged,
            q,
            decoded,
            steps,
            final_p,
            readout_type,
            m,
        })
    }

    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Pass, ModelError> {
        self.forward_with(tape, &self.params, input, rng)
    }

    /// Answer distribution under `params` with dropout off.
    pub fn predict_with(
        &self,
        params: &ParamSet,
        input: &ModelInput,
    ) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward_with(&mut tape, params, input, None)?;
        Ok(kernels::softmax_slice(tape.value(pass.logits).data())?)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Vec<f64>, ModelError> {
        self.predict_with(&self.params, input)
    }

    /// Cross-entropy loss, the answer distribution and one gradient per
    /// parameter (zeros where a parameter is unused).
    pub fn loss_and_grads(
        &self,
        params: &ParamSet,
        input: &ModelInput,
        target: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward_with(&mut tape, params, input, rng)?;
        let probs = kernels::softmax_slice(tape.value(pass.logits).data())?;
        let loss = tape.cross_entropy(pass.logits, target)?;
        let loss_value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = pass
            .params
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((loss_value, probs, out))
    }

    pub fn trace_with(
        &self,
        params: &ParamSet,
        input: &ModelInput,
        top_k: usize,
    ) -> Result<Trace, ModelError> {
        let mut tape = Tape::new();
        let pass = self.forward_with(&mut tape, params, input, None)?;
        let instructions = InstructionSequence::read(&tape, &pass.tagged, pass.q, &pass.decoded);
        let n = input.graph.nodes;
        let mut distributions = vec![vec![1.0 / n as f64; n]];
        let steps: Vec<TraversalStep> = pass
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| TraversalStep::read(&tape, i, s))
            .collect();
        distributions.extend(steps.iter().map(|s| s.p_next.clone()));
        if steps.is_empty() {
            distributions = vec![tape.value(pass.final_p).data().to_vec()];
        }
        let top = |p: &[f64]| {
            let mut ranked: Vec<(usize, f64)> = p.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(top_k);
            ranked
        };
        let top_nodes = distributions.iter().map(|p| top(p)).collect();
        let probs = kernels::softmax_slice(tape.value(pass.logits).data())?;
        let ranked = top(&probs);
        let answer_probs: Vec<(String, f64)> = ranked
            .iter()
            .map(|&(i, p)| (self.config.answers[i].clone(), p))
            .collect();
        Ok(Trace {
            instructions,
            distributions,
            steps,
            readout_type: tape.value(pass.readout_type).data().to_vec(),
            top_nodes,
            predicted: answer_probs[0].0.clone(),
            answer_probs,
        })
    }
}
