//! Probabilistic scene graphs: the machine's states and transitions, and
//! their concept-weighted representations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::concepts::ConceptVocabulary;
use crate::diffmath::kernels::axpy;
use crate::diffmath::Tensor;

/// Tolerance on distribution mass when reading graphs from disk.
pub const LOAD_SUM_TOLERANCE: f64 = 1e-4;
/// Tolerance on distribution mass for graphs built in memory.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("edge {edge}: {msg}")]
    InvalidEdge { edge: usize, msg: String },
    #[error("{what}: distribution sums to {sum} (or has negative mass)")]
    Distribution { what: String, sum: f64 },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An object in the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNode {
    /// `(x, y, w, h)` in relative image units.
    pub bbox: [f64; 4],
    /// One categorical distribution per non-relation property group.
    pub property_dists: Vec<Vec<f64>>,
    /// Raw feature vector, only read by the no-concepts ablation.
    pub dense_features: Option<Vec<f64>>,
}

impl StateNode {
    pub fn center(&self) -> (f64, f64) {
        (
            self.bbox[0] + self.bbox[2] / 2.0,
            self.bbox[1] + self.bbox[3] / 2.0,
        )
    }
}

/// A directed relation `source → target`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEdge {
    pub source: usize,
    pub target: usize,
    pub relation_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    /// Names of the node property groups, in vocabulary order.
    pub property_names: Vec<String>,
    pub nodes: Vec<StateNode>,
    pub edges: Vec<TransitionEdge>,
    pub image_size: (f64, f64),
}

fn check_dist(what: impl FnOnce() -> String, p: &[f64], tol: f64) -> Result<(), GraphError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > tol {
        return Err(GraphError::Distribution { what: what(), sum });
    }
    Ok(())
}

impl SceneGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Structural checks plus normalization within `tol`.
    pub fn validate(&self, tol: f64) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Schema("graph has no nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.property_dists.len() != self.property_names.len() {
                return Err(GraphError::Schema(format!(
                    "node {i} has {} property distributions, expected {}",
                    n.property_dists.len(),
                    self.property_names.len()
                )));
            }
            for (j, p) in n.property_dists.iter().enumerate() {
                check_dist(
                    || format!("node {i} property `{}`", self.property_names[j]),
                    p,
                    tol,
                )?;
            }
        }
        let n = self.nodes.len();
        for (e, edge) in self.edges.iter().enumerate() {
            if edge.source >= n || edge.target >= n {
                return Err(GraphError::InvalidEdge {
                    edge: e,
                    msg: format!(
                        "endpoint {}→{} out of range for {n} nodes",
                        edge.source, edge.target
                    ),
                });
            }
            if edge.source == edge.target {
                return Err(GraphError::InvalidEdge {
                    edge: e,
                    msg: format!("self-loop on node {}", edge.source),
                });
            }
            check_dist(|| format!("edge {e} relation"), &edge.relation_dist, tol)?;
        }
        Ok(())
    }

    /// Checks that distribution lengths match the vocabulary's groups.
    pub fn check_vocab(&self, vocab: &ConceptVocabulary) -> Result<(), GraphError> {
        let sizes = vocab.group_sizes();
        let node_groups = sizes.len() - 1;
        if self.property_names.len() != node_groups {
            return Err(GraphError::Schema(format!(
                "graph has {} property groups, vocabulary has {node_groups}",
                self.property_names.len()
            )));
        }
        for (j, name) in self.property_names.iter().enumerate() {
            if vocab.group(j).name != *name {
                return Err(GraphError::Schema(format!(
                    "property {j} is `{name}`, vocabulary expects `{}`",
                    vocab.group(j).name
                )));
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for (j, p) in n.property_dists.iter().enumerate() {
                if p.len() != sizes[j] {
                    return Err(GraphError::Schema(format!(
                        "node {i} property `{}` has length {}, expected {}",
                        self.property_names[j],
                        p.len(),
                        sizes[j]
                    )));
                }
            }
        }
        let rel = sizes[sizes.len() - 1];
        for (e, edge) in self.edges.iter().enumerate() {
            if edge.relation_dist.len() != rel {
                return Err(GraphError::InvalidEdge {
                    edge: e,
                    msg: format!(
                        "relation distribution has length {}, expected {rel}",
                        edge.relation_dist.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// `V × |C_j|` matrix of the nodes' distributions for property `j`.
    pub fn property_matrix(&self, j: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| n.property_dists[j].clone())
            .collect();
        Tensor::from_rows(&rows).expect("validated graph")
    }

    /// `E × |C_R|` matrix of edge relation distributions, `None` without edges.
    pub fn relation_matrix(&self) -> Option<Tensor> {
        if self.edges.is_empty() {
            return None;
        }
        let rows: Vec<Vec<f64>> = self.edges.iter().map(|e| e.relation_dist.clone()).collect();
        Some(Tensor::from_rows(&rows).expect("validated graph"))
    }

    pub fn to_json_value(&self) -> Value {
        let nodes: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                let mut props = Map::new();
                for (name, p) in self.property_names.iter().zip(&n.property_dists) {
                    props.insert(name.clone(), json!(p));
                }
                let mut obj = Map::new();
                obj.insert("bbox".into(), json!(n.bbox));
                obj.insert("props".into(), Value::Object(props));
                if let Some(d) = &n.dense_features {
                    obj.insert("dense".into(), json!(d));
                }
                Value::Object(obj)
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| json!({"src": e.source, "dst": e.target, "rel": e.relation_dist}))
            .collect();
        json!({
            "nodes": nodes,
            "edges": edges,
            "image_size": [self.image_size.0, self.image_size.1],
        })
    }

    pub fn to_json_line(&self) -> String {
        self.to_json_value().to_string()
    }

    /// Parses one JSON-lines record; `line` is used for error messages.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self, GraphError> {
        let perr = |msg: String| GraphError::Parse { line, msg };
        let v: Value = serde_json::from_str(text).map_err(|e| perr(e.to_string()))?;
        let floats = |v: &Value, what: &str| -> Result<Vec<f64>, GraphError> {
            v.as_array()
                .ok_or_else(|| perr(format!("{what} must be an array")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| perr(format!("{what} must hold numbers")))
                })
                .collect()
        };
        let nodes_v = v
            .get("nodes")
            .and_then(Value::as_array)
            .ok_or_else(|| perr("missing `nodes` array".into()))?;
        let mut property_names: Option<Vec<String>> = None;
        let mut nodes = Vec::with_capacity(nodes_v.len());
        for (i, n) in nodes_v.iter().enumerate() {
            let bbox = floats(n.get("bbox").unwrap_or(&Value::Null), "bbox")?;
            let bbox: [f64; 4] = bbox
                .try_into()
                .map_err(|_| perr(format!("node {i}: bbox needs 4 numbers")))?;
            let props = n
                .get("props")
                .and_then(Value::as_object)
                .ok_or_else(|| perr(format!("node {i}: missing `props` object")))?;
            let names: Vec<String> = props.keys().cloned().collect();
            match &property_names {
                None => property_names = Some(names),
                Some(prev) if *prev != names => {
                    return Err(perr(format!(
                        "node {i}: property groups differ from node 0"
                    )))
                }
                _ => {}
            }
            let property_dists = props
                .iter()
                .map(|(k, p)| floats(p, &format!("node {i} `{k}`")))
                .collect::<Result<_, _>>()?;
            let dense_features = match n.get("dense") {
                None | Some(Value::Null) => None,
                Some(d) => Some(floats(d, "dense")?),
            };
            nodes.push(StateNode {
                bbox,
                property_dists,
                dense_features,
            });
        }
        let edges_v = v
            .get("edges")
            .and_then(Value::as_array)
            .ok_or_else(|| perr("missing `edges` array".into()))?;
        let mut edges = Vec::with_capacity(edges_v.len());
        for (e, ev) in edges_v.iter().enumerate() {
            let idx = |k: &str| -> Result<usize, GraphError> {
                ev.get(k)
                    .and_then(Value::as_u64)
                    .map(|x| x as usize)
                    .ok_or_else(|| GraphError::InvalidEdge {
                        edge: e,
                        msg: format!("`{k}` must be a non-negative integer"),
                    })
            };
            edges.push(TransitionEdge {
                source: idx("src")?,
                target: idx("dst")?,
                relation_dist: floats(ev.get("rel").unwrap_or(&Value::Null), "rel")?,
            });
        }
        let size = floats(v.get("image_size").unwrap_or(&Value::Null), "image_size")?;
        if size.len() != 2 {
            return Err(perr("image_size needs 2 numbers".into()));
        }
        let g = SceneGraph {
            property_names: property_names.unwrap_or_default(),
            nodes,
            edges,
            image_size: (size[0], size[1]),
        };
        g.validate(LOAD_SUM_TOLERANCE).map_err(|err| match err {
            GraphError::Distribution { what, sum } => GraphError::Distribution {
                what: format!("line {line}: {what}"),
                sum,
            },
            other => other,
        })?;
        Ok(g)
    }
}

/// `sʲ = Σ_k P_j(k)·c_k` for every node property `j`.
pub fn state_representation(
    node: &StateNode,
    vocab: &ConceptVocabulary,
) -> Result<Vec<Vec<f64>>, GraphError> {
    if node.property_dists.len() != vocab.group_count() - 1 {
        return Err(GraphError::Schema(format!(
            "node has {} properties, vocabulary has {}",
            node.property_dists.len(),
            vocab.group_count() - 1
        )));
    }
    node.property_dists
        .iter()
        .enumerate()
        .map(|(j, p)| blend(vocab, j, p))
        .collect()
}

/// `e′ = Σ_k P_{L+1}(k)·c_k`.
pub fn edge_representation(
    edge: &TransitionEdge,
    vocab: &ConceptVocabulary,
) -> Result<Vec<f64>, GraphError> {
    blend(vocab, vocab.relation_group(), &edge.relation_dist)
}

fn blend(vocab: &ConceptVocabulary, group: usize, p: &[f64]) -> Result<Vec<f64>, GraphError> {
    let g = vocab.group(group);
    if p.len() != g.concepts.len() {
        return Err(GraphError::Schema(format!(
            "distribution over `{}` has length {}, expected {}",
            g.name,
            p.len(),
            g.concepts.len()
        )));
    }
    let mut out = vec![0.0; vocab.dim()];
    for (w, c) in p.iter().zip(&g.embeddings) {
        axpy(*w, c, &mut out);
    }
    Ok(out)
}

pub fn save_graphs(path: &Path, graphs: &[SceneGraph]) -> Result<(), GraphError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for g in graphs {
        writeln!(f, "{}", g.to_json_line())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_graphs(path: &Path) -> Result<Vec<SceneGraph>, GraphError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(SceneGraph::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_graph(graph: &SceneGraph, path: &Path) -> Result<(), GraphError> {
    save_graphs(path, std::slice::from_ref(graph))
}

/// Reads the first graph of a JSON-lines file.
pub fn load_graph(path: &Path) -> Result<SceneGraph, GraphError> {
    load_graphs(path)?
        .into_iter()
        .next()
        .ok_or_else(|| GraphError::Parse {
            line: 1,
            msg: "file holds no graph".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{build_vocabulary, AttributeType, ObjectType, OntologySpec};

    fn vocab() -> ConceptVocabulary {
        let o = OntologySpec {
            objects: vec![
                ObjectType {
                    name: "cat".into(),
                    category: "animal".into(),
                },
                ObjectType {
                    name: "table".into(),
                    category: "furniture".into(),
                },
                ObjectType {
                    name: "door".into(),
                    category: "structure".into(),
                },
            ],
            attributes: vec![AttributeType {
                name: "color".into(),
                values: vec!["red".into(), "blue".into()],
            }],
            relations: vec!["on".into(), "near".into()],
        };
        build_vocabulary(&o, 6, 4).unwrap()
    }

    fn node(p0: Vec<f64>, p1: Vec<f64>) -> StateNode {
        StateNode {
            bbox: [0.1, 0.1, 0.2, 0.2],
            property_dists: vec![p0, p1],
            dense_features: None,
        }
    }

    fn graph(nodes: Vec<StateNode>, edges: Vec<TransitionEdge>) -> SceneGraph {
        SceneGraph {
            property_names: vec!["identity".into(), "color".into()],
            nodes,
            edges,
            image_size: (1.0, 1.0),
        }
    }

    #[test]
    fn one_hot_and_midpoint() {
        let v = vocab();
        let n = node(vec![1.0, 0.0, 0.0], vec![0.5, 0.5]);
        let s = state_representation(&n, &v).unwrap();
        assert_eq!(s[0], v.embedding(v.lookup("cat").unwrap()));
        let red = v.embedding(v.lookup("red").unwrap());
        let blue = v.embedding(v.lookup("blue").unwrap());
        for k in 0..v.dim() {
            assert!((s[1][k] - 0.5 * (red[k] + blue[k])).abs() < 1e-15);
        }
        let e = TransitionEdge {
            source: 0,
            target: 1,
            relation_dist: vec![1.0, 0.0],
        };
        assert_eq!(
            edge_representation(&e, &v).unwrap(),
            v.embedding(v.lookup("on").unwrap())
        );
        let e = TransitionEdge {
            source: 0,
            target: 1,
            relation_dist: vec![0.5, 0.5],
        };
        let on = v.embedding(v.lookup("on").unwrap());
        let near = v.embedding(v.lookup("near").unwrap());
        let r = edge_representation(&e, &v).unwrap();
        for k in 0..v.dim() {
            assert!((r[k] - 0.5 * (on[k] + near[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch_is_schema_error() {
        let v = vocab();
        let n = node(vec![1.0, 0.0], vec![0.5, 0.5]);
        assert!(matches!(
            state_representation(&n, &v),
            Err(GraphError::Schema(_))
        ));
    }

    #[test]
    fn minimal_graph_round_trips() {
        let g = graph(
            vec![node(vec![0.2, 0.3, 0.5], vec![1.0 / 3.0, 2.0 / 3.0])],
            vec![],
        );
        let line = g.to_json_line();
        let back = SceneGraph::from_json_line(&line, 1).unwrap();
        assert_eq!(g, back);
        assert_eq!(back.to_json_line(), line);
    }

    #[test]
    fn malformed_edge_names_edge() {
        let g = graph(
            vec![
                node(vec![1.0, 0.0, 0.0], vec![1.0, 0.0]),
                node(vec![0.0, 1.0, 0.0], vec![0.0, 1.0]),
            ],
            vec![
                TransitionEdge {
                    source: 0,
                    target: 1,
                    relation_dist: vec![1.0, 0.0],
                },
                TransitionEdge {
                    source: 1,
                    target: 5,
                    relation_dist: vec![1.0, 0.0],
                },
            ],
        );
        let err = SceneGraph::from_json_line(&g.to_json_line(), 3).unwrap_err();
        assert!(
            matches!(err, GraphError::InvalidEdge { edge: 1, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("edge 1"));
    }

    #[test]
    fn unnormalized_distribution_rejected() {
        let g = graph(vec![node(vec![0.5, 0.3, 0.1], vec![1.0, 0.0])], vec![]);
        let err = SceneGraph::from_json_line(&g.to_json_line(), 7).unwrap_err();
        assert!(matches!(err, GraphError::Distribution { .. }));
        assert!(err.to_string().contains("line 7"));
        let bad =
            r#"{"nodes": [{"bbox": [0,0,1], "props": {}}], "edges": [], "image_size": [1,1]}"#;
        assert!(matches!(
            SceneGraph::from_json_line(bad, 2),
            Err(GraphError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn self_loop_rejected() {
        let g = graph(
            vec![node(vec![1.0, 0.0, 0.0], vec![1.0, 0.0])],
            vec![TransitionEdge {
                source: 0,
                target: 0,
                relation_dist: vec![1.0, 0.0],
            }],
        );
        assert!(matches!(
            g.validate(SUM_TOLERANCE),
            Err(GraphError::InvalidEdge { edge: 0, .. })
        ));
    }
}
