//! Bias-mitigated minimal-optimal feature selection.
//!
//! Eligibility removes identifiers, protected-category features and features
//! missing from either dataset. The survivors are ranked greedily by the
//! mRMR mean-difference criterion:
//!
//! ```text
//! step 1:  argmax_x  I(x; outcome)
//! step j:  argmax_x  I(x; outcome) - (1/|S|) * sum_{s in S} I(x; s)
//! ```
//!
//! Ties are broken by higher relevance, then by lexicographically smaller
//! name. Mutual information is the plug-in estimate (nats) over a joint
//! histogram; numeric columns are cut into equal-frequency bins, categorical
//! columns are used as-is and missing values form their own level.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    Availability, BiasClass, FeatureSchema, Portfolio, PrivacyClass, Value,
};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two observations are required, got {0}")]
    TooShort(usize),
    #[error("column mixes numeric and categorical values")]
    MixedColumn,
    #[error("k must be positive")]
    ZeroK,
    #[error("k = {k} exceeds the {available} candidates")]
    TooManyRequested { k: usize, available: usize },
    #[error("candidate `{0}` listed twice")]
    DuplicateCandidate(String),
    #[error("direct identifier `{0}` present; anonymize first")]
    DirectIdentifierPresent(String),
    #[error(transparent)]
    Data(#[from] crate::data_model::DataError),
}

pub type Result<T> = std::result::Result<T, SelectError>;

/// Default cap on equal-frequency bins.
pub const DEFAULT_MAX_BINS: usize = 32;
/// Default selection size.
pub const DEFAULT_K: usize = 10;

/// Discretization applied to numeric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BinningRule {
    /// `min(ceil(sqrt(n)), max_bins)` equal-frequency bins, `n` counting
    /// non-missing values.
    EqualFrequency { max_bins: usize },
    /// Exactly this many equal-frequency cut positions (ties may merge bins).
    FixedBins { bins: usize },
}

impl Default for BinningRule {
    fn default() -> Self {
        BinningRule::EqualFrequency {
            max_bins: DEFAULT_MAX_BINS,
        }
    }
}

impl BinningRule {
    fn bin_count(self, n: usize) -> usize {
        match self {
            BinningRule::EqualFrequency { max_bins } => {
                ((n as f64).sqrt().ceil() as usize).clamp(1, max_bins.max(1))
            }
            BinningRule::FixedBins { bins } => bins.max(1),
        }
    }
}

/// A column mapped to dense level codes `0..levels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteColumn {
    pub codes: Vec<u32>,
    pub levels: usize,
}

/// Level codes for `values`. Missing values share one extra level.
pub fn discretize<'a, I>(values: I, rule: BinningRule) -> Result<DiscreteColumn>
where
    I: IntoIterator<Item = &'a Value>,
{
    let values: Vec<&Value> = values.into_iter().collect();
    let numeric = values.iter().any(|v| matches!(v, Value::Number(_)));
    let symbolic = values.iter().any(|v| matches!(v, Value::Symbol(_)));
    if numeric && symbolic {
        return Err(SelectError::MixedColumn);
    }
    // raw codes; u32::MAX marks missing
    let raw: Vec<u32> = if numeric {
        let mut sorted: Vec<f64> = values.iter().filter_map(|v| v.as_number()).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let bins = rule.bin_count(n);
        let mut edges: Vec<f64> = (1..bins).map(|i| sorted[i * n / bins]).collect();
        edges.dedup();
        values
            .iter()
            .map(|v| match v.as_number() {
                Some(x) => edges.partition_point(|&e| e <= x) as u32,
                None => u32::MAX,
            })
            .collect()
    } else {
        let mut dict: BTreeMap<&str, u32> = BTreeMap::new();
        for v in &values {
            if let Some(s) = v.as_symbol() {
                dict.entry(s).or_insert(0);
            }
        }
        for (i, code) in dict.values_mut().enumerate() {
            *code = i as u32;
        }
        values
            .iter()
            .map(|v| v.as_symbol().map_or(u32::MAX, |s| dict[s]))
            .collect()
    };
    Ok(compact(raw))
}

fn compact(raw: Vec<u32>) -> DiscreteColumn {
    let mut used: Vec<u32> = raw.clone();
    used.sort_unstable();
    used.dedup();
    let codes = raw
        .iter()
        .map(|c| used.binary_search(c).expect("present") as u32)
        .collect();
    DiscreteColumn {
        codes,
        levels: used.len(),
    }
}

/// Plug-in mutual information (nats) of two discrete columns of equal length.
///
/// Terms are summed in ascending order of value so that the result is
/// bit-identical under argument swap.
pub fn mutual_information_discrete(a: &DiscreteColumn, b: &DiscreteColumn) -> f64 {
    let n = a.codes.len();
    debug_assert_eq!(n, b.codes.len());
    if n == 0 || a.levels <= 1 || b.levels <= 1 {
        return 0.0;
    }
    let mut count_a = vec![0u64; a.levels];
    let mut count_b = vec![0u64; b.levels];
    let kb = b.levels as u64;
    let mut pairs: Vec<u64> = Vec::with_capacity(n);
    for (&x, &y) in a.codes.iter().zip(&b.codes) {
        count_a[x as usize] += 1;
        count_b[y as usize] += 1;
        pairs.push(x as u64 * kb + y as u64);
    }
    pairs.sort_unstable();
    let nf = n as f64;
    let mut terms = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let key = pairs[i];
        let mut j = i;
        while j < pairs.len() && pairs[j] == key {
            j += 1;
        }
        let c = (j - i) as f64;
        let ca = count_a[(key / kb) as usize] as f64;
        let cb = count_b[(key % kb) as usize] as f64;
        terms.push((c / nf) * ((c * nf) / (ca * cb)).ln());
        i = j;
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutualInformationEstimate {
    pub feature_a: String,
    pub feature_b: String,
    /// Nats, never negative.
    pub value: f64,
    pub bins_a: usize,
    pub bins_b: usize,
}

impl MutualInformationEstimate {
    pub fn named(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.feature_a = a.into();
        self.feature_b = b.into();
        self
    }
}

/// Plug-in MI of two value vectors.
pub fn mutual_information(
    x: &[Value],
    y: &[Value],
    binning: BinningRule,
) -> Result<MutualInformationEstimate> {
    if x.len() != y.len() {
        return Err(SelectError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(SelectError::TooShort(x.len()));
    }
    let a = discretize(x, binning)?;
    let b = discretize(y, binning)?;
    Ok(MutualInformationEstimate {
        feature_a: "x".into(),
        feature_b: "y".into(),
        value: mutual_information_discrete(&a, &b),
        bins_a: a.levels,
        bins_b: b.levels,
    })
}

/// Features usable for selection: unbiased, present in both datasets and not
/// direct identifiers. Schema order is preserved.
pub fn eligible_features(schema: &FeatureSchema) -> Vec<String> {
    schema
        .features()
        .iter()
        .filter(|f| {
            f.bias_class == BiasClass::None
                && f.availability == Availability::Common
                && f.privacy_class != PrivacyClass::DirectIdentifier
        })
        .map(|f| f.name.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub step: usize,
    pub feature: String,
    pub relevance: f64,
    /// Mean MI with the already selected features (0 at step 1).
    pub redundancy: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimoptSelection {
    /// Greedy selection order.
    pub selected: Vec<String>,
    pub steps: Vec<SelectionStep>,
    pub k: usize,
}

/// Greedy mRMR with the default binning rule.
pub fn mrmr_select(p: &Portfolio, candidates: &[String], k: usize) -> Result<BimoptSelection> {
    mrmr_select_with(p, candidates, k, BinningRule::default())
}

pub fn mrmr_select_with(
    p: &Portfolio,
    candidates: &[String],
    k: usize,
    binning: BinningRule,
) -> Result<BimoptSelection> {
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    if k > candidates.len() {
        return Err(SelectError::TooManyRequested {
            k,
            available: candidates.len(),
        });
    }
    if let Some(f) = p
        .schema()
        .features()
        .iter()
        .find(|f| f.privacy_class == PrivacyClass::DirectIdentifier)
    {
        return Err(SelectError::DirectIdentifierPresent(f.name.clone()));
    }
    let mut seen = HashSet::new();
    for c in candidates {
        if !seen.insert(c.as_str()) {
            return Err(SelectError::DuplicateCandidate(c.clone()));
        }
    }
    let labels = p.labels()?;
    let outcome = compact(labels.iter().map(|&l| l as u32).collect());

    let columns: Vec<DiscreteColumn> = candidates
        .par_iter()
        .map(|name| Ok(discretize(p.column(name)?, binning)?))
        .collect::<Result<_>>()?;

    let relevance: Vec<f64> = columns
        .par_iter()
        .map(|c| mutual_information_discrete(c, &outcome))
        .collect();

    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let mut redundancy_sum = vec![0.0f64; candidates.len()];
    let mut selected = Vec::with_capacity(k);
    let mut steps = Vec::with_capacity(k);

    for step in 1..=k {
        let n_sel = selected.len();
        let score_of = |i: usize| -> (f64, f64) {
            if n_sel == 0 {
                (relevance[i], 0.0)
            } else {
                let red = redundancy_sum[i] / n_sel as f64;
                (relevance[i] - red, red)
            }
        };
        let best_pos = (0..remaining.len())
            .max_by(|&a, &b| {
                let (ia, ib) = (remaining[a], remaining[b]);
                score_of(ia)
                    .0
                    .total_cmp(&score_of(ib).0)
                    .then(relevance[ia].total_cmp(&relevance[ib]))
                    .then_with(|| candidates[ib].cmp(&candidates[ia]))
            })
            .expect("k <= candidates");
        let best = remaining.remove(best_pos);
        let (score, redundancy) = score_of(best);
        steps.push(SelectionStep {
            step,
            feature: candidates[best].clone(),
            relevance: relevance[best],
            redundancy,
            score,
        });
        selected.push(best);

        if step < k {
            let increments: Vec<f64> = remaining
                .par_iter()
                .map(|&i| mutual_information_discrete(&columns[i], &columns[best]))
                .collect();
            for (&i, inc) in remaining.iter().zip(increments) {
                redundancy_sum[i] += inc;
            }
        }
    }

    Ok(BimoptSelection {
        selected: selected.iter().map(|&i| candidates[i].clone()).collect(),
        steps,
        k,
    })
}
