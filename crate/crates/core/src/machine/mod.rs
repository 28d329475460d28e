//! The state machine proper: instruction typing, relevance scoring, soft
//! transitions over the scene graph, readout and the answer classifier.
//!
//! Every operation records onto a [`Tape`] so the same code serves training,
//! evaluation and tracing.

mod model;
mod params;

pub use model::{
    AblationMode, GraphInput, ModelConfig, ModelError, ModelInput, NsmModel, Pass, Trace,
    WEIGHT_INIT_SCALE,
};
pub use params::ParamSet;

use serde::Serialize;

use crate::diffmath::{MathError, Tape, Tensor, Var};

/// Concept-weighted representations of one graph on the tape.
#[derive(Debug, Clone)]
pub struct GraphReps {
    /// `S_j` (n×d) for every non-relation property `j = 0..=L`.
    pub states: Vec<Var>,
    /// `e′` rows (E×d); `None` for an edgeless graph.
    pub edges: Option<Var>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub nodes: usize,
}

/// Bilinear images `S_j W_jᵀ` and `e′ W_{L+1}ᵀ`, computed once per graph.
#[derive(Debug, Clone)]
pub struct Projected {
    pub states: Vec<Var>,
    pub edges: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for one transition step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub type_dist: Var,
    pub relation_weight: Var,
    pub node_relevance: Var,
    pub edge_relevance: Option<Var>,
    pub p_state: Var,
    pub p_relation: Var,
    pub p_next: Var,
}

/// Values of one transition step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraversalStep {
    pub step_index: usize,
    pub type_dist: Vec<f64>,
    pub relation_weight: f64,
    pub node_relevance: Vec<Vec<f64>>,
    pub edge_relevance: Vec<Vec<f64>>,
    pub p_next: Vec<f64>,
}

impl TraversalStep {
    pub fn read(tape: &Tape<'_>, i: usize, s: &StepVars) -> Self {
        let rows = |t: &Tensor| (0..t.rows()).map(|k| t.row(k).to_vec()).collect();
        Self {
            step_index: i,
            type_dist: tape.value(s.type_dist).data().to_vec(),
            relation_weight: tape.value(s.relation_weight).item(),
            node_relevance: rows(tape.value(s.node_relevance)),
            edge_relevance: s
                .edge_relevance
                .map(|e| rows(tape.value(e)))
                .unwrap_or_default(),
            p_next: tape.value(s.p_next).data().to_vec(),
        }
    }
}

fn uniform(n: usize) -> Tensor {
    Tensor::filled(&[n], 1.0 / n as f64)
}

/// `R_i = softmax(D r_i)` over the `L+2` property types and
/// `r′_i = R_i(L+1)`, the weight of the relation type.
pub fn instruction_type(
    tape: &mut Tape<'_>,
    r: Var,
    properties: Var,
) -> Result<(Var, Var), MathError> {
    let scores = tape.matvec(properties, r)?;
    let dist = tape.softmax(scores)?;
    let last = tape.value(properties).rows() - 1;
    let rel = tape.index(dist, last)?;
    Ok((dist, rel))
}

/// Applies `W_j` to every state representation and `W_{L+1}` to the edges.
pub fn project(
    tape: &mut Tape<'_>,
    reps: &GraphReps,
    w_props: &[Var],
    w_rel: Var,
) -> Result<Projected, MathError> {
    if w_props.len() != reps.states.len() {
        return Err(MathError::Contract(format!(
            "{} property matrices for {} properties",
            w_props.len(),
            reps.states.len()
        )));
    }
    let states = reps
        .states
        .iter()
        .zip(w_props)
        .map(|(&s, &w)| tape.matmul_bt(s, w))
        .collect::<Result<_, _>>()?;
    let edges = reps.edges.map(|e| tape.matmul_bt(e, w_rel)).transpose()?;
    Ok(Projected { states, edges })
}

/// `γ(s) = ELU(Σ_j R(j)·(r ∘ W_j sʲ))` per node and `γ(e) = ELU(r ∘ W_{L+1} e′)`
/// per edge.
pub fn relevance_scores(
    tape: &mut Tape<'_>,
    r: Var,
    type_dist: Var,
    proj: &Projected,
) -> Result<(Var, Option<Var>), MathError> {
    let weights = tape.slice(type_dist, 0, proj.states.len())?;
    let blended = tape.combine(weights, &proj.states)?;
    let masked = tape.mul_rows(blended, r)?;
    let nodes = tape.elu(masked);
    let edges = match proj.edges {
        Some(y) => {
            let masked = tape.mul_rows(y, r)?;
            Some(tape.elu(masked))
        }
        None => None,
    };
    Ok((nodes, edges))
}

/// One soft transition. Returns `(p_{i+1}, p^s, p^r)`.
///
/// `p^r` aggregates `p_i(s′)·γ(e)` over the incoming edges of every node; a
/// node without incoming edges gets the zero aggregate.
#[allow(clippy::too_many_arguments)]
pub fn transition(
    tape: &mut Tape<'_>,
    p: Var,
    node_rel: Var,
    edge_rel: Option<Var>,
    relation_weight: Var,
    w_state: Var,
    w_rel: Var,
    src: &[usize],
    dst: &[usize],
) -> Result<(Var, Var, Var), MathError> {
    let n = tape.value(p).len();
    let state_logits = tape.matvec(node_rel, w_state)?;
    let p_state = tape.softmax(state_logits)?;
    let p_rel = match edge_rel {
        Some(g) if !src.is_empty() => {
            let from = tape.gather(p, src)?;
            let carried = tape.scale_rows(g, from)?;
            let incoming = tape.scatter_add_rows(carried, dst, n)?;
            let logits = tape.matvec(incoming, w_rel)?;
            tape.softmax(logits)?
        }
        _ => tape.constant(uniform(n)),
    };
    let next = tape.mix(relation_weight, p_rel, p_state)?;
    Ok((next, p_state, p_rel))
}

/// Runs `N` transitions from the uniform `p₀` using `r₀ … r_{N−1}`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    tape: &mut Tape<'_>,
    instructions: &[Var],
    n_steps: usize,
    properties: Var,
    proj: &Projected,
    reps: &GraphReps,
    w_state: Var,
    w_rel: Var,
) -> Result<(Var, Vec<StepVars>), MathError> {
    if n_steps == 0 || instructions.len() != n_steps + 1 {
        return Err(MathError::Contract(format!(
            "simulate: {} instructions for N = {n_steps} (need N+1, N ≥ 1)",
            instructions.len()
        )));
    }
    let mut p = tape.constant(uniform(reps.nodes));
    let mut steps = Vec::with_capacity(n_steps);
    for &r in &instructions[..n_steps] {
        let (type_dist, relation_weight) = instruction_type(tape, r, properties)?;
        let (node_rel, edge_rel) = relevance_scores(tape, r, type_dist, proj)?;
        let (next, p_state, p_relation) = transition(
            tape,
            p,
            node_rel,
            edge_rel,
            relation_weight,
            w_state,
            w_rel,
            &reps.src,
            &reps.dst,
        )?;
        steps.push(StepVars {
            type_dist,
            relation_weight,
            node_relevance: node_rel,
            edge_relevance: edge_rel,
            p_state,
            p_relation,
            p_next: next,
        });
        p = next;
    }
    Ok((p, steps))
}

/// `m = Σ_s p(s) Σ_j R(j)·sʲ`.
pub fn readout(
    tape: &mut Tape<'_>,
    p: Var,
    type_dist: Var,
    reps: &GraphReps,
) -> Result<Var, MathError> {
    let weights = tape.slice(type_dist, 0, reps.states.len())?;
    let blended = tape.combine(weights, &reps.states)?;
    tape.vecmat(p, blended)
}

/// Answer logits of the 2-layer ELU classifier on an already formed input.
pub fn classifier_logits(
    tape: &mut Tape<'_>,
    x: Var,
    cls: &ClassifierVars,
) -> Result<Var, MathError> {
    let h = tape.matvec(cls.w1, x)?;
    let h = tape.add(h, cls.b1)?;
    let h = tape.elu(h);
    let out = tape.matvec(cls.w2, h)?;
    tape.add(out, cls.b2)
}

/// Answer logits from `[q; m]`; `softmax` of these is the answer distribution.
pub fn classify(
    tape: &mut Tape<'_>,
    q: Var,
    m: Var,
    cls: &ClassifierVars,
) -> Result<Var, MathError> {
    let x = tape.concat(&[q, m])?;
    classifier_logits(tape, x, cls)
}
