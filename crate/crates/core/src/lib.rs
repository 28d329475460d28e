//! Neural State Machine: a differentiable automaton that answers questions
//! by moving soft attention over a probabilistic scene graph.

pub mod concepts;
pub mod diffmath;
pub mod instructor;
pub mod machine;
pub mod synthgen;
pub mod trainer;
pub mod worldgraph;
