use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sigmoid, GbdtError, Result};
use crate::data_model::{FeatureKind, FeatureSchema, LoanRecord, Portfolio, Value};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "loanscreen-gbdt";

/// Smallest/largest probability returned by the model.
const PROBA_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SplitCondition {
    /// Go left iff `value < threshold`.
    LessThan { threshold: f64 },
    /// Go left iff the category is in the set; unseen categories go right.
    InSet { categories: BTreeSet<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "node")]
pub enum TreeNode {
    Split {
        /// Index into [`BoostedModel::feature_names`].
        feature: usize,
        condition: SplitCondition,
        missing_left: bool,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        weight: f64,
    },
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Follows the path of `value_of(feature)` down to a leaf.
    pub fn leaf_for<'v, F>(&self, value_of: &F) -> &TreeNode
    where
        F: Fn(usize) -> &'v Value,
    {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { .. } => return node,
                TreeNode::Split {
                    feature,
                    condition,
                    missing_left,
                    left,
                    right,
                } => {
                    let go_left = match (value_of(*feature), condition) {
                        (Value::Number(x), SplitCondition::LessThan { threshold }) => {
                            *x < *threshold
                        }
                        (Value::Symbol(s), SplitCondition::InSet { categories }) => {
                            categories.contains(s)
                        }
                        _ => *missing_left,
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        f(self);
        if let TreeNode::Split { left, right, .. } = self {
            left.visit(f);
            right.visit(f);
        }
    }
}

/// A trained ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    pub trees: Vec<TreeNode>,
    pub base_margin: f64,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: usize,
}

impl BoostedModel {
    /// A model with no trees predicting `prior` everywhere.
    pub fn constant(prior: f64, feature_names: Vec<String>, feature_kinds: Vec<FeatureKind>) -> Self {
        BoostedModel {
            feature_names,
            feature_kinds,
            trees: Vec::new(),
            base_margin: super::logit(prior),
            learning_rate: 1.0,
            lambda: 0.0,
            gamma: 0.0,
            max_depth: 1,
        }
    }

    /// Margin from values indexed like `feature_names`.
    pub fn margin_from<'v, F>(&self, value_of: F) -> f64
    where
        F: Fn(usize) -> &'v Value,
    {
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| match t.leaf_for(&value_of) {
                TreeNode::Leaf { weight } => *weight,
                TreeNode::Split { .. } => unreachable!(),
            })
            .sum();
        self.base_margin + self.learning_rate * sum
    }

    /// Binds the model to a schema so records can be scored.
    pub fn predictor<'m>(&'m self, schema: &FeatureSchema) -> Result<Predictor<'m>> {
        let columns = self
            .feature_names
            .iter()
            .zip(&self.feature_kinds)
            .map(|(name, &kind)| {
                let idx = schema
                    .index_of(name)
                    .ok_or_else(|| crate::data_model::DataError::UnknownFeature(name.clone()))?;
                let found = schema.features()[idx].kind;
                let numeric = |k| matches!(k, FeatureKind::Numeric | FeatureKind::Boolean);
                if found != kind && !(numeric(found) && numeric(kind)) {
                    return Err(GbdtError::KindMismatch {
                        feature: name.clone(),
                        expected: kind.to_string(),
                        found: found.to_string(),
                    });
                }
                Ok(idx)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictor {
            model: self,
            columns,
        })
    }

    /// Calibration-free probabilities for every record of `p`.
    pub fn predict_proba_portfolio(&self, p: &Portfolio) -> Result<Vec<f64>> {
        let pred = self.predictor(p.schema())?;
        Ok(p.records().iter().map(|r| pred.predict_proba(r)).collect())
    }

    /// Names of features actually used by some split.
    pub fn used_features(&self) -> BTreeSet<&str> {
        let mut used = BTreeSet::new();
        for t in &self.trees {
            t.visit(&mut |n| {
                if let TreeNode::Split { feature, .. } = n {
                    used.insert(self.feature_names[*feature].as_str());
                }
            });
        }
        used
    }

    /// SHA-256 over the compact JSON encoding of the model.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            format_version: MODEL_FORMAT_VERSION,
            content_sha256: self.content_hash(),
            model: self.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| {
            GbdtError::Data(crate::data_model::DataError::Io {
                path: path.display().to_string(),
                source,
            })
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| {
            GbdtError::Data(crate::data_model::DataError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        Self::from_json(&text)
    }
}

/// Versioned, hashed model envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub format_version: u32,
    pub content_sha256: String,
    pub model: BoostedModel,
}

impl ModelFile {
    pub fn into_model(self) -> Result<BoostedModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(GbdtError::UnsupportedVersion(self.format_version));
        }
        let computed = self.model.content_hash();
        if computed != self.content_sha256 {
            return Err(GbdtError::HashMismatch {
                expected: self.content_sha256,
                computed,
            });
        }
        Ok(self.model)
    }
}

/// A model bound to a schema's column layout.
#[derive(Debug, Clone)]
pub struct Predictor<'m> {
    model: &'m BoostedModel,
    columns: Vec<usize>,
}

impl Predictor<'_> {
    pub fn predict_margin(&self, r: &LoanRecord) -> f64 {
        self.model.margin_from(|f| &r.values[self.columns[f]])
    }

    /// `sigmoid(margin)`, kept strictly inside (0, 1).
    pub fn predict_proba(&self, r: &LoanRecord) -> f64 {
        sigmoid(self.predict_margin(r)).clamp(PROBA_FLOOR, 1.0 - PROBA_FLOOR)
    }
}
