//! Additive binary-tree ensemble inference.
//!
//! Trees are loaded into a recursive [`TreeNode`] form, validated, and then
//! flattened into parallel arrays for scoring. The recursive form is kept for
//! [`TreeEnsemble::score_recursive`], which serves as the traversal oracle.
//!
//! Traversal rule: go left iff `features[feature] < threshold`; equality goes
//! right. There is no missing-value branch since inputs are dense.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::lstm::sigmoid;
use crate::modelio::quote_nonfinite_literals;

/// Logistic link kept strictly inside `(0, 1)`: the plain formula rounds to
/// exactly 0 or 1 once `|raw|` exceeds roughly 37 (resp. 745).
#[inline]
pub fn probability(raw: f64) -> f64 {
    sigmoid(raw).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub const DEFAULT_MAX_DEPTH: usize = 64;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("feature vector has length {actual}, model expects {expected}")]
    Length { expected: usize, actual: usize },
    #[error("tree {tree}: feature index {feature} out of range (n_features = {n_features})")]
    FeatureOutOfRange {
        tree: usize,
        feature: usize,
        n_features: usize,
    },
    #[error("tree {tree}: depth exceeds the limit of {limit}")]
    TooDeep { tree: usize, limit: usize },
    #[error("tree {tree}: non-finite {what}")]
    NonFinite { tree: usize, what: &'static str },
    #[error("non-finite base_score")]
    NonFiniteBase,
    #[error("n_features must be positive")]
    NoFeatures,
    #[error("tree {tree}: malformed node: {reason}")]
    Malformed { tree: usize, reason: String },
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse model file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf(f64),
}

impl TreeNode {
    fn eval(&self, features: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf(v) => *v,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if features[*feature] < *threshold {
                    left.eval(features)
                } else {
                    right.eval(features)
                }
            }
        }
    }

    fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf(_) => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Array layout of one tree. Leaves are encoded with `feature == LEAF`, and
/// the leaf value is kept in `threshold`.
#[derive(Debug, Clone)]
struct FlatTree {
    feature: Vec<u32>,
    threshold: Vec<f64>,
    left: Vec<u32>,
    right: Vec<u32>,
}

const LEAF: u32 = u32::MAX;

impl FlatTree {
    fn from_node(root: &TreeNode) -> Self {
        let mut t = FlatTree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
        };
        t.push(root);
        t
    }

    fn push(&mut self, node: &TreeNode) -> u32 {
        let id = self.feature.len();
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        match node {
            TreeNode::Leaf(v) => self.threshold[id] = *v,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                self.feature[id] = *feature as u32;
                self.threshold[id] = *threshold;
                let l = self.push(left);
                let r = self.push(right);
                self.left[id] = l;
                self.right[id] = r;
            }
        }
        id as u32
    }

    #[inline]
    fn eval(&self, features: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let f = self.feature[i];
            if f == LEAF {
                return self.threshold[i];
            }
            i = if features[f as usize] < self.threshold[i] {
                self.left[i]
            } else {
                self.right[i]
            } as usize;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TreeEnsemble {
    n_features: usize,
    base_score: f64,
    trees: Vec<TreeNode>,
    flat: Vec<FlatTree>,
}

impl PartialEq for TreeEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.n_features == other.n_features
            && self.base_score == other.base_score
            && self.trees == other.trees
    }
}

impl TreeEnsemble {
    pub fn new(n_features: usize, base_score: f64, trees: Vec<TreeNode>) -> Result<Self, GbdtError> {
        Self::with_max_depth(n_features, base_score, trees, DEFAULT_MAX_DEPTH)
    }

    pub fn with_max_depth(
        n_features: usize,
        base_score: f64,
        trees: Vec<TreeNode>,
        max_depth: usize,
    ) -> Result<Self, GbdtError> {
        if n_features == 0 {
            return Err(GbdtError::NoFeatures);
        }
        if !base_score.is_finite() {
            return Err(GbdtError::NonFiniteBase);
        }
        for (tree, root) in trees.iter().enumerate() {
            if root.depth() > max_depth {
                return Err(GbdtError::TooDeep {
                    tree,
                    limit: max_depth,
                });
            }
            validate_node(root, tree, n_features)?;
        }
        let flat = trees.iter().map(FlatTree::from_node).collect();
        Ok(Self {
            n_features,
            base_score,
            trees,
            flat,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    fn check_len(&self, features: &[f64]) -> Result<(), GbdtError> {
        if features.len() == self.n_features {
            Ok(())
        } else {
            Err(GbdtError::Length {
                expected: self.n_features,
                actual: features.len(),
            })
        }
    }

    /// Sum of base score and reached leaves, using the flattened trees.
    pub fn raw_score(&self, features: &[f64]) -> Result<f64, GbdtError> {
        self.check_len(features)?;
        let mut raw = self.base_score;
        for tree in &self.flat {
            raw += tree.eval(features);
        }
        Ok(raw)
    }

    /// Probability of the positive class.
    pub fn score(&self, features: &[f64]) -> Result<f64, GbdtError> {
        self.raw_score(features).map(probability)
    }

    /// Raw score via the recursive node form.
    pub fn raw_score_recursive(&self, features: &[f64]) -> Result<f64, GbdtError> {
        self.check_len(features)?;
        let mut raw = self.base_score;
        for tree in &self.trees {
            raw += tree.eval(features);
        }
        Ok(raw)
    }

    pub fn score_recursive(&self, features: &[f64]) -> Result<f64, GbdtError> {
        self.raw_score_recursive(features).map(probability)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GbdtError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GbdtError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GbdtError> {
        let value: Value = serde_json::from_str(&quote_nonfinite_literals(text))
            .map_err(|e| GbdtError::Parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| GbdtError::Parse("top level must be an object".into()))?;
        let n_features = obj
            .get("n_features")
            .and_then(Value::as_u64)
            .ok_or_else(|| GbdtError::Parse("missing or invalid n_features".into()))?
            as usize;
        let base_score = match obj.get("base_score") {
            None => 0.0,
            Some(v) => number(v).ok_or_else(|| GbdtError::Parse("invalid base_score".into()))?,
        };
        let trees_json = obj
            .get("trees")
            .and_then(Value::as_array)
            .ok_or_else(|| GbdtError::Parse("missing trees array".into()))?;
        let mut trees = Vec::with_capacity(trees_json.len());
        for (tree, t) in trees_json.iter().enumerate() {
            trees.push(parse_node(t, tree, 0)?);
        }
        Self::new(n_features, base_score, trees)
    }

    pub fn to_json(&self) -> String {
        let trees: Vec<Value> = self.trees.iter().map(node_to_json).collect();
        let mut obj = Map::new();
        obj.insert("n_features".into(), self.n_features.into());
        obj.insert("base_score".into(), self.base_score.into());
        obj.insert("trees".into(), Value::Array(trees));
        serde_json::to_string(&Value::Object(obj)).expect("ensemble serializes to JSON")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GbdtError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| GbdtError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn validate_node(node: &TreeNode, tree: usize, n_features: usize) -> Result<(), GbdtError> {
    match node {
        TreeNode::Leaf(v) => {
            if v.is_finite() {
                Ok(())
            } else {
                Err(GbdtError::NonFinite { tree, what: "leaf" })
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if *feature >= n_features {
                return Err(GbdtError::FeatureOutOfRange {
                    tree,
                    feature: *feature,
                    n_features,
                });
            }
            if threshold.is_nan() {
                return Err(GbdtError::NonFinite {
                    tree,
                    what: "threshold",
                });
            }
            validate_node(left, tree, n_features)?;
            validate_node(right, tree, n_features)
        }
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.as_str() {
            "NaN" => Some(f64::NAN),
            "Infinity" => Some(f64::INFINITY),
            "-Infinity" => Some(f64::NEG_INFINITY),
            _ => None,
        },
        _ => None,
    }
}

fn parse_node(v: &Value, tree: usize, depth: usize) -> Result<TreeNode, GbdtError> {
    if depth > DEFAULT_MAX_DEPTH {
        return Err(GbdtError::TooDeep {
            tree,
            limit: DEFAULT_MAX_DEPTH,
        });
    }
    let malformed = |reason: &str| GbdtError::Malformed {
        tree,
        reason: reason.to_string(),
    };
    let obj = v.as_object().ok_or_else(|| malformed("node is not an object"))?;
    if let Some(leaf) = obj.get("leaf") {
        let value = number(leaf).ok_or_else(|| malformed("leaf is not a number"))?;
        return Ok(TreeNode::Leaf(value));
    }
    let feature = obj
        .get("feature")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing feature"))? as usize;
    let threshold = obj
        .get("threshold")
        .and_then(number)
        .ok_or_else(|| malformed("missing threshold"))?;
    let left = obj.get("left").ok_or_else(|| malformed("missing left"))?;
    let right = obj.get("right").ok_or_else(|| malformed("missing right"))?;
    Ok(TreeNode::Split {
        feature,
        threshold,
        left: Box::new(parse_node(left, tree, depth + 1)?),
        right: Box::new(parse_node(right, tree, depth + 1)?),
    })
}

fn node_to_json(node: &TreeNode) -> Value {
    let mut obj = Map::new();
    match node {
        TreeNode::Leaf(v) => {
            obj.insert("leaf".into(), (*v).into());
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            obj.insert("feature".into(), (*feature).into());
            obj.insert("threshold".into(), (*threshold).into());
            obj.insert("left".into(), node_to_json(left));
            obj.insert("right".into(), node_to_json(right));
        }
    }
    Value::Object(obj)
}

/// A full binary tree of the given depth with random splits and leaves.
pub fn random_tree<R: rand::Rng>(
    rng: &mut R,
    depth: usize,
    n_features: usize,
    leaf_scale: f64,
) -> TreeNode {
    if depth == 0 {
        return TreeNode::Leaf(rng.gen_range(-leaf_scale..=leaf_scale));
    }
    TreeNode::Split {
        feature: rng.gen_range(0..n_features),
        threshold: 0.5,
        left: Box::new(random_tree(rng, depth - 1, n_features, leaf_scale)),
        right: Box::new(random_tree(rng, depth - 1, n_features, leaf_scale)),
    }
}
