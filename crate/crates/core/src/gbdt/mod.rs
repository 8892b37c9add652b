//! Regularized second-order gradient boosting for binary outcomes.
//!
//! Each round fits a regression tree to the gradient `g = p - y` and hessian
//! `h = p(1 - p)` of the logistic loss at the current margins. A split of a
//! node into left/right children is scored by
//!
//! ```text
//! gain = 1/2 [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - (GL+GR)^2/(HL+HR+lambda) ] - gamma
//! ```
//!
//! and leaves carry `-G/(H+lambda)`. The model margin is
//! `base_margin + learning_rate * sum(tree outputs)` with `base_margin` the
//! log-odds of the training prior.
//!
//! Split search is exact: candidate thresholds are every boundary between
//! distinct sorted values. Missing values are sent to whichever side yields
//! the larger gain and the choice is stored on the node.

mod train;
mod tree;

pub use train::{train, train_with_history, TrainingRun};
pub use tree::{BoostedModel, ModelFile, Predictor, SplitCondition, TreeNode, MODEL_FORMAT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("training data contains a single outcome class")]
    SingleClass,
    #[error("no features to train on")]
    NoFeatures,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("direct identifier `{0}` present; anonymize first")]
    DirectIdentifierPresent(String),
    #[error("feature `{feature}` has kind {found} but the model expects {expected}")]
    KindMismatch {
        feature: String,
        expected: String,
        found: String,
    },
    #[error("model content hash mismatch (expected {expected}, computed {computed})")]
    HashMismatch { expected: String, computed: String },
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("thread pool error: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Data(#[from] crate::data_model::DataError),
}

pub type Result<T> = std::result::Result<T, GbdtError>;

/// Logistic function.
pub fn sigmoid(margin: f64) -> f64 {
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of `p`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Gradient and hessian of the logistic loss
/// `-y ln p - (1 - y) ln(1 - p)` with respect to the margin.
pub fn logistic_loss_grad_hess(margin: f64, outcome: u8) -> (f64, f64) {
    let p = sigmoid(margin);
    (p - outcome as f64, (p * (1.0 - p)).max(f64::MIN_POSITIVE))
}

/// Logistic loss at `margin`, computed stably.
pub fn logistic_loss(margin: f64, outcome: u8) -> f64 {
    // ln(1 + e^m) - y m
    let softplus = if margin > 0.0 {
        margin + (-margin).exp().ln_1p()
    } else {
        margin.exp().ln_1p()
    };
    softplus - outcome as f64 * margin
}

fn structure_term(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        g * g / denom
    } else {
        0.0
    }
}

/// Reduction of the regularized objective obtained by a split.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (structure_term(gl, hl, lambda) + structure_term(gr, hr, lambda)
        - structure_term(gl + gr, hl + hr, lambda))
        - gamma
}

/// Optimal leaf weight `-G/(H+lambda)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 {
        -g / denom
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Boosting rounds, `>= 0`.
    pub n_trees: usize,
    /// Maximum depth, `>= 1`.
    pub max_depth: usize,
    /// Shrinkage in `(0, 1]`.
    pub learning_rate: f64,
    /// Leaf L2 penalty, `>= 0`.
    pub lambda: f64,
    /// Per-split penalty, `>= 0`.
    pub gamma: f64,
    /// Minimum hessian sum in each child, `>= 0`.
    pub min_child_hessian: f64,
    /// Row fraction per round in `(0, 1]`.
    pub subsample: f64,
    pub seed: u64,
    /// Worker threads for split search; 0 uses the global pool.
    pub n_threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_hessian: 1.0,
            subsample: 1.0,
            seed: 0,
            n_threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GbdtError::InvalidConfig(msg.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 0");
        }
        if !(self.min_child_hessian >= 0.0 && self.min_child_hessian.is_finite()) {
            return bad("min_child_hessian must be finite and >= 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        Ok(())
    }
}
