//! Semantic tree over seen classes and similarity-based selection of
//! predicted unseen classes.
//!
//! Seen classes hang under their superclass; candidate classes from a static
//! pool are attached as siblings. Candidates are ranked by how close their
//! text embedding is to the seen leaves and the top `k0` become the predicted
//! unseen classes. Selection is global across superclasses.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_raw, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Superclass,
    SeenLeaf,
    CandidateLeaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub name: String,
    pub parent: Option<usize>,
    pub kind: NodeKind,
}

/// Two-level hierarchy: superclass roots with seen and candidate leaves.
/// Immutable; expansion returns a new tree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticTree {
    nodes: Vec<TreeNode>,
}

impl SemanticTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn find(&self, name: &str, kind: NodeKind) -> Option<&TreeNode> {
        self.nodes.iter().find(|n| n.kind == kind && n.name == name)
    }

    fn leaves(&self, kind: NodeKind) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    pub fn superclasses(&self) -> Vec<&str> {
        self.leaves(NodeKind::Superclass)
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn seen_leaves(&self) -> Vec<&str> {
        self.leaves(NodeKind::SeenLeaf)
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn candidate_leaves(&self) -> Vec<&str> {
        self.leaves(NodeKind::CandidateLeaf)
            .map(|n| n.name.as_str())
            .collect()
    }

    /// Names of the children of superclass `name`.
    pub fn children(&self, name: &str) -> Vec<&str> {
        let Some(parent) = self.find(name, NodeKind::Superclass) else {
            return Vec::new();
        };
        self.nodes
            .iter()
            .filter(|n| n.parent == Some(parent.id))
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn parent_of(&self, leaf: &str) -> Option<&str> {
        let node = self
            .nodes
            .iter()
            .find(|n| n.kind != NodeKind::Superclass && n.name == leaf)?;
        node.parent.map(|p| self.nodes[p].name.as_str())
    }

    fn push(&mut self, name: &str, parent: Option<usize>, kind: NodeKind) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            name: name.to_string(),
            parent,
            kind,
        });
        id
    }
}

/// Builds superclass nodes (first-seen order) with one seen leaf per class.
pub fn build_tree<S: AsRef<str>>(seen: &[(S, S)]) -> Result<SemanticTree> {
    let mut tree = SemanticTree::default();
    let mut supers: HashMap<String, usize> = HashMap::new();
    let mut names: HashMap<String, ()> = HashMap::new();
    for (class, superclass) in seen {
        let (class, superclass) = (class.as_ref(), superclass.as_ref());
        if superclass.is_empty() {
            return Err(Error::InvalidParams(format!(
                "class {class} has an empty superclass"
            )));
        }
        if names.insert(class.to_string(), ()).is_some() {
            return Err(Error::DuplicateClass(class.to_string()));
        }
        let parent = match supers.get(superclass) {
            Some(&id) => id,
            None => {
                let id = tree.push(superclass, None, NodeKind::Superclass);
                supers.insert(superclass.to_string(), id);
                id
            }
        };
        tree.push(class, Some(parent), NodeKind::SeenLeaf);
    }
    Ok(tree)
}

/// Attaches candidates as leaves under existing superclasses. Repeated
/// candidate names are ignored after the first insert.
pub fn expand_candidates<S: AsRef<str>>(
    tree: &SemanticTree,
    pool: &[(S, S)],
) -> Result<SemanticTree> {
    let mut out = tree.clone();
    for (name, superclass) in pool {
        let (name, superclass) = (name.as_ref(), superclass.as_ref());
        if out.find(name, NodeKind::SeenLeaf).is_some() {
            return Err(Error::NameCollision(name.to_string()));
        }
        let parent = out
            .find(superclass, NodeKind::Superclass)
            .ok_or_else(|| Error::UnknownSuperclass(superclass.to_string()))?
            .id;
        if out.find(name, NodeKind::CandidateLeaf).is_some() {
            continue;
        }
        out.push(name, Some(parent), NodeKind::CandidateLeaf);
    }
    Ok(out)
}

/// Class name with a unit-norm text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedClass {
    pub name: String,
    pub embedding: FeatureVector,
}

impl EmbeddedClass {
    /// Normalizes `raw` to unit length.
    pub fn new(name: impl Into<String>, raw: FeatureVector) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            embedding: raw.normalized()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Candidates closest to the seen classes.
    HighSim,
    /// Candidates farthest from the seen classes (ablation).
    LowSim,
}

/// How a candidate's similarities to the seen leaves are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreAggregation {
    #[default]
    Max,
    Mean,
}

/// Score of every candidate leaf, keyed by name.
pub fn candidate_scores(
    tree: &SemanticTree,
    embeddings: &HashMap<String, EmbeddedClass>,
    aggregation: ScoreAggregation,
) -> Result<BTreeMap<String, f64>> {
    let lookup = |name: &str| {
        embeddings
            .get(name)
            .map(|e| e.embedding.as_slice())
            .ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    };
    let seen: Vec<&[f64]> = tree
        .seen_leaves()
        .into_iter()
        .map(lookup)
        .collect::<Result<_>>()?;
    let mut scores = BTreeMap::new();
    for cand in tree.candidate_leaves() {
        let c = lookup(cand)?;
        let sims: Vec<f64> = seen
            .iter()
            .map(|s| cosine_raw(c, s))
            .collect::<Result<_>>()?;
        let score = match aggregation {
            _ if sims.is_empty() => 0.0,
            ScoreAggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ScoreAggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
        };
        scores.insert(cand.to_string(), score);
    }
    Ok(scores)
}

/// Top-`k0` candidates by max cosine similarity to any seen leaf (highest for
/// [`SelectionMode::HighSim`], lowest for [`SelectionMode::LowSim`]). Ties go
/// to the lexicographically smaller name.
pub fn predict_unseen(
    tree: &SemanticTree,
    embeddings: &HashMap<String, EmbeddedClass>,
    k0: usize,
    mode: SelectionMode,
) -> Result<Vec<String>> {
    predict_unseen_with(tree, embeddings, k0, mode, ScoreAggregation::Max)
}

pub fn predict_unseen_with(
    tree: &SemanticTree,
    embeddings: &HashMap<String, EmbeddedClass>,
    k0: usize,
    mode: SelectionMode,
    aggregation: ScoreAggregation,
) -> Result<Vec<String>> {
    if k0 < 1 {
        return Err(Error::InvalidParams("k0 must be at least 1".into()));
    }
    let scores = candidate_scores(tree, embeddings, aggregation)?;
    let mut ranked: Vec<(String, f64)> = scores.into_iter().collect();
    ranked.sort_by(|(na, sa), (nb, sb)| {
        let by_score = match mode {
            SelectionMode::HighSim => sb.total_cmp(sa),
            SelectionMode::LowSim => sa.total_cmp(sb),
        };
        by_score.then_with(|| na.cmp(nb))
    });
    ranked.truncate(k0);
    Ok(ranked.into_iter().map(|(n, _)| n).collect())
}

/// Uniformly random choice of `k0` candidates, in lexicographic order. Stands
/// in for candidate discovery without the tree.
pub fn random_candidates<R: Rng>(tree: &SemanticTree, k0: usize, rng: &mut R) -> Vec<String> {
    let mut pool: Vec<String> = tree
        .candidate_leaves()
        .into_iter()
        .map(String::from)
        .collect();
    pool.sort();
    pool.shuffle(rng);
    pool.truncate(k0);
    pool.sort();
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fish_tree() -> SemanticTree {
        build_tree(&[("Goldfish", "Fish"), ("Tench", "Fish")]).unwrap()
    }

    fn emb(name: &str, v: &[f64]) -> (String, EmbeddedClass) {
        (
            name.to_string(),
            EmbeddedClass::new(name, FeatureVector::new(v.to_vec()).unwrap()).unwrap(),
        )
    }

    #[test]
    fn build_examples() {
        let t = fish_tree();
        assert_eq!(t.superclasses(), vec!["Fish"]);
        assert_eq!(t.seen_leaves(), vec!["Goldfish", "Tench"]);
        assert!(build_tree::<&str>(&[]).unwrap().is_empty());
        assert_eq!(
            build_tree(&[("A", "S"), ("A", "T")]),
            Err(Error::DuplicateClass("A".into()))
        );
    }

    #[test]
    fn tree_structure_invariants() {
        let t = expand_candidates(
            &build_tree(&[("a", "S"), ("b", "T"), ("c", "S")]).unwrap(),
            &[("x", "S"), ("y", "T")],
        )
        .unwrap();
        for n in t.nodes() {
            match n.kind {
                NodeKind::Superclass => assert!(n.parent.is_none()),
                _ => {
                    let p = &t.nodes()[n.parent.unwrap()];
                    assert_eq!(p.kind, NodeKind::Superclass);
                }
            }
            if n.kind != NodeKind::Superclass {
                assert!(t.nodes().iter().all(|m| m.parent != Some(n.id)));
            }
        }
        assert_eq!(t.children("S"), vec!["a", "c", "x"]);
        assert_eq!(t.parent_of("y"), Some("T"));
    }

    #[test]
    fn expand_examples() {
        let t = expand_candidates(&fish_tree(), &[("Salmon", "Fish")]).unwrap();
        assert_eq!(t.candidate_leaves(), vec!["Salmon"]);
        assert_eq!(t.parent_of("Salmon"), t.parent_of("Tench"));
        let twice =
            expand_candidates(&fish_tree(), &[("Salmon", "Fish"), ("Salmon", "Fish")]).unwrap();
        assert_eq!(twice, t);
        let again = expand_candidates(&t, &[("Salmon", "Fish")]).unwrap();
        assert_eq!(again, t);
        assert_eq!(
            expand_candidates(&fish_tree(), &[("X", "NoSuchSuper")]),
            Err(Error::UnknownSuperclass("NoSuchSuper".into()))
        );
        assert_eq!(
            expand_candidates(&fish_tree(), &[("Tench", "Fish")]),
            Err(Error::NameCollision("Tench".into()))
        );
    }

    fn salmon_setup() -> (SemanticTree, HashMap<String, EmbeddedClass>) {
        let t = expand_candidates(
            &build_tree(&[("Tench", "Fish")]).unwrap(),
            &[("Salmon", "Fish"), ("Shark", "Fish")],
        )
        .unwrap();
        let e: HashMap<_, _> = [
            emb("Tench", &[1.0, 0.0]),
            emb("Salmon", &[0.95, 0.312]),
            emb("Shark", &[0.0, 1.0]),
        ]
        .into_iter()
        .collect();
        (t, e)
    }

    #[test]
    fn predict_examples() {
        let (t, e) = salmon_setup();
        assert_eq!(
            predict_unseen(&t, &e, 1, SelectionMode::HighSim).unwrap(),
            vec!["Salmon"]
        );
        assert_eq!(
            predict_unseen(&t, &e, 1, SelectionMode::LowSim).unwrap(),
            vec!["Shark"]
        );
        assert_eq!(
            predict_unseen(&t, &e, 5, SelectionMode::HighSim).unwrap(),
            vec!["Salmon", "Shark"]
        );
        assert_eq!(
            predict_unseen(&t, &e, 5, SelectionMode::LowSim).unwrap(),
            vec!["Shark", "Salmon"]
        );
    }

    #[test]
    fn predict_reports_missing_embedding() {
        let (t, mut e) = salmon_setup();
        e.remove("Shark");
        assert_eq!(
            predict_unseen(&t, &e, 1, SelectionMode::HighSim),
            Err(Error::MissingEmbedding("Shark".into()))
        );
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = expand_candidates(
            &build_tree(&[("s", "S")]).unwrap(),
            &[("b", "S"), ("a", "S"), ("c", "S")],
        )
        .unwrap();
        let e: HashMap<_, _> = [
            emb("s", &[1.0, 0.0]),
            emb("a", &[0.0, 1.0]),
            emb("b", &[0.0, -1.0]),
            emb("c", &[0.0, 2.0]),
        ]
        .into_iter()
        .collect();
        assert_eq!(
            predict_unseen(&t, &e, 2, SelectionMode::HighSim).unwrap(),
            vec!["a", "b"]
        );
        assert_eq!(
            predict_unseen(&t, &e, 2, SelectionMode::LowSim).unwrap(),
            vec!["a", "b"]
        );
    }

    #[test]
    fn mean_aggregation_differs_from_max() {
        let t = expand_candidates(
            &build_tree(&[("s1", "S"), ("s2", "S")]).unwrap(),
            &[("near_one", "S"), ("between", "S")],
        )
        .unwrap();
        let e: HashMap<_, _> = [
            emb("s1", &[1.0, 0.0]),
            emb("s2", &[0.0, 1.0]),
            emb("near_one", &[1.0, -0.2]),
            emb("between", &[1.0, 1.0]),
        ]
        .into_iter()
        .collect();
        let by_max =
            predict_unseen_with(&t, &e, 1, SelectionMode::HighSim, ScoreAggregation::Max).unwrap();
        let by_mean =
            predict_unseen_with(&t, &e, 1, SelectionMode::HighSim, ScoreAggregation::Mean).unwrap();
        assert_eq!(by_max, vec!["near_one"]);
        assert_eq!(by_mean, vec!["between"]);
    }

    #[test]
    fn random_selection_is_seeded() {
        let (t, _) = salmon_setup();
        let a = random_candidates(&t, 1, &mut crate::rng::stream(1, "tree", 0));
        let b = random_candidates(&t, 1, &mut crate::rng::stream(1, "tree", 0));
        assert_eq!(a, b);
        assert_eq!(
            random_candidates(&t, 9, &mut crate::rng::stream(1, "tree", 0)).len(),
            2
        );
    }
}
