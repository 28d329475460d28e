use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::concepts::ConceptVocabulary;
use crate::worldgraph::{SceneGraph, StateNode, TransitionEdge};

/// Relative distance (per axis, as a fraction of the image size) below which
/// two objects are connected.
pub const PROXIMITY_FRACTION: f64 = 0.15;
/// Detection cap for a single scene.
pub const DEFAULT_MAX_OBJECTS: usize = 50;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub identity: String,
    /// One value per attribute group, in vocabulary order.
    pub attributes: Vec<String>,
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn center(&self) -> (f64, f64) {
        (
            self.bbox[0] + self.bbox[2] / 2.0,
            self.bbox[1] + self.bbox[3] / 2.0,
        )
    }
}

/// `src → dst` labelled `relation` reads "dst is `relation` src"; e.g.
/// `(table, left, cat)` says the cat is left of the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRelation {
    pub src: usize,
    pub relation: String,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicScene {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<SceneRelation>,
}

impl SymbolicScene {
    /// Objects `dst` with a `src → dst` edge labelled `relation`.
    pub fn related(&self, src: usize, relation: &str) -> Vec<usize> {
        self.relations
            .iter()
            .filter(|r| r.src == src && r.relation == relation)
            .map(|r| r.dst)
            .collect()
    }

    pub fn with_identity(&self, identity: &str) -> Vec<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.identity == identity)
            .map(|(i, _)| i)
            .collect()
    }

    /// Value of property group `group` (0 = identity) for object `i`.
    pub fn property(&self, i: usize, group: usize) -> &str {
        let o = &self.objects[i];
        if group == 0 {
            &o.identity
        } else {
            &o.attributes[group - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Probability mass moved off the true concept (spread uniformly).
    pub epsilon: f64,
    pub max_objects: usize,
    /// Attach raw feature vectors for the no-concepts ablation.
    pub dense_features: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_objects: DEFAULT_MAX_OBJECTS,
            dense_features: true,
        }
    }
}

/// Spatial relation of `b` relative to `a`, from box centers (y grows down).
pub fn spatial_relation(a: (f64, f64), b: (f64, f64)) -> &'static str {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "above"
    } else {
        "below"
    }
}

/// Proximity rule: both axis offsets strictly under 15% of the image size.
pub fn within_proximity(a: (f64, f64), b: (f64, f64), image: (f64, f64)) -> bool {
    (a.0 - b.0).abs() < PROXIMITY_FRACTION * image.0
        && (a.1 - b.1).abs() < PROXIMITY_FRACTION * image.1
}

/// All proximity edges with their spatial labels.
pub fn proximity_relations(objects: &[SceneObject]) -> Vec<SceneRelation> {
    let mut out = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for (j, b) in objects.iter().enumerate() {
            if i != j && within_proximity(a.center(), b.center(), (1.0, 1.0)) {
                out.push(SceneRelation {
                    src: i,
                    relation: spatial_relation(a.center(), b.center()).to_string(),
                    dst: j,
                });
            }
        }
    }
    out
}

/// Random objects placed in loose clusters so that the proximity rule yields
/// a connected-ish graph.
pub fn generate_scene(
    vocab: &ConceptVocabulary,
    n_objects: usize,
    seed: u64,
    config: &SceneConfig,
) -> Result<(SymbolicScene, SceneGraph), SynthError> {
    if n_objects == 0 {
        return Err(SynthError::Config(
            "a scene needs at least one object".into(),
        ));
    }
    if n_objects > config.max_objects {
        return Err(SynthError::TooManyObjects {
            requested: n_objects,
            cap: config.max_objects,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for k in 0..n_objects {
        let (w, h) = (rng.random_range(0.04..0.10), rng.random_range(0.04..0.10));
        let mut center = (0.5, 0.5);
        for _ in 0..50 {
            center = if k == 0 {
                (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75))
            } else {
                let base = *centers.choose(&mut rng).expect("non-empty");
                let off = |rng: &mut ChaCha8Rng| {
                    let m = rng.random_range(0.0..0.13);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                };
                let dx = off(&mut rng);
                let dy = off(&mut rng);
                (
                    (base.0 + dx).clamp(w / 2.0, 1.0 - w / 2.0),
                    (base.1 + dy).clamp(h / 2.0, 1.0 - h / 2.0),
                )
            };
            let clear = centers.iter().all(|c| {
                let (dx, dy) = ((c.0 - center.0).abs(), (c.1 - center.1).abs());
                dx.max(dy) > 0.03 && (dx - dy).abs() > 0.01
            });
            if clear {
                break;
            }
        }
        centers.push(center);
        let identity = vocab
            .group(0)
            .concepts
            .choose(&mut rng)
            .expect("non-empty")
            .clone();
        let attributes = (1..=vocab.attribute_count())
            .map(|g| {
                vocab
                    .group(g)
                    .concepts
                    .choose(&mut rng)
                    .expect("non-empty")
                    .clone()
            })
            .collect();
        objects.push(SceneObject {
            identity,
            attributes,
            bbox: [center.0 - w / 2.0, center.1 - h / 2.0, w, h],
        });
    }
    let relations = proximity_relations(&objects);
    let scene = SymbolicScene { objects, relations };
    let graph = scene_to_graph(&scene, vocab, config.epsilon, config.dense_features)?;
    Ok((scene, graph))
}

/// Softened one-hot: the true concept keeps `1 − ε`, the rest share `ε`.
pub fn soften(size: usize, truth: usize, epsilon: f64) -> Vec<f64> {
    if size == 1 {
        return vec![1.0];
    }
    let rest = epsilon / (size - 1) as f64;
    let mut p = vec![rest; size];
    p[truth] = 1.0 - epsilon;
    p
}

pub fn scene_to_graph(
    scene: &SymbolicScene,
    vocab: &ConceptVocabulary,
    epsilon: f64,
    dense: bool,
) -> Result<SceneGraph, SynthError> {
    let groups = vocab.group_count() - 1;
    let index_in = |g: usize, name: &str| -> Result<usize, SynthError> {
        vocab
            .lookup(name)
            .filter(|id| id.group == g)
            .map(|id| id.index)
            .ok_or_else(|| SynthError::UnknownConcept(name.to_string()))
    };
    let mut nodes = Vec::with_capacity(scene.objects.len());
    for (i, o) in scene.objects.iter().enumerate() {
        let mut dists = Vec::with_capacity(groups);
        for g in 0..groups {
            let size = vocab.group(g).concepts.len();
            dists.push(soften(size, index_in(g, scene.property(i, g))?, epsilon));
        }
        let dense_features = dense.then(|| {
            let mut f: Vec<f64> = dists.iter().flatten().copied().collect();
            f.extend_from_slice(&o.bbox);
            f
        });
        nodes.push(StateNode {
            bbox: o.bbox,
            property_dists: dists,
            dense_features,
        });
    }
    let rel_group = vocab.relation_group();
    let rel_size = vocab.group(rel_group).concepts.len();
    let edges = scene
        .relations
        .iter()
        .map(|r| {
            Ok(TransitionEdge {
                source: r.src,
                target: r.dst,
                relation_dist: soften(rel_size, index_in(rel_group, &r.relation)?, epsilon),
            })
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(SceneGraph {
        property_names: (0..groups).map(|g| vocab.group(g).name.clone()).collect(),
        nodes,
        edges,
        image_size: (1.0, 1.0),
    })
}
