use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::tree::{BoostedModel, SplitCondition, TreeNode};
use super::{
    leaf_weight, logistic_loss, logistic_loss_grad_hess, logit, split_gain, GbdtError, Result,
    TrainConfig,
};
use crate::data_model::{FeatureKind, Portfolio, PrivacyClass, Value};
use crate::rng::{self, Domain};

const MISSING_CODE: u32 = u32::MAX;

enum Column {
    /// NaN marks missing.
    Numeric(Vec<f64>),
    Categorical { codes: Vec<u32>, dictionary: Vec<String> },
}

/// Model plus the mean training loss before any tree (`[0]`) and after each
/// round.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: BoostedModel,
    pub loss_history: Vec<f64>,
}

pub fn train(p: &Portfolio, features: &[String], cfg: &TrainConfig) -> Result<BoostedModel> {
    Ok(train_with_history(p, features, cfg)?.model)
}

pub fn train_with_history(
    p: &Portfolio,
    features: &[String],
    cfg: &TrainConfig,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(GbdtError::NoFeatures);
    }
    if let Some(f) = p
        .schema()
        .features()
        .iter()
        .find(|f| f.privacy_class == PrivacyClass::DirectIdentifier)
    {
        return Err(GbdtError::DirectIdentifierPresent(f.name.clone()));
    }
    let labels = p.labels()?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(GbdtError::SingleClass);
    }

    let mut kinds = Vec::with_capacity(features.len());
    let mut columns = Vec::with_capacity(features.len());
    for name in features {
        let spec = p
            .schema()
            .get(name)
            .ok_or_else(|| crate::data_model::DataError::UnknownFeature(name.clone()))?;
        kinds.push(spec.kind);
        let values = p.column(name)?;
        columns.push(match spec.kind {
            FeatureKind::Numeric | FeatureKind::Boolean => Column::Numeric(
                values
                    .iter()
                    .map(|v| v.as_number().unwrap_or(f64::NAN))
                    .collect(),
            ),
            FeatureKind::Categorical => {
                let dictionary: Vec<String> = values
                    .iter()
                    .filter_map(|v| v.as_symbol())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .map(str::to_string)
                    .collect();
                let codes = values
                    .iter()
                    .map(|v| match v {
                        Value::Symbol(s) => dictionary
                            .binary_search_by(|d| d.as_str().cmp(s))
                            .expect("in dictionary") as u32,
                        _ => MISSING_CODE,
                    })
                    .collect();
                Column::Categorical { codes, dictionary }
            }
        });
    }

    let run = || grow_ensemble(&labels, features, &kinds, &columns, cfg);
    if cfg.n_threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.n_threads)
            .build()
            .map_err(|e| GbdtError::ThreadPool(e.to_string()))?;
        Ok(pool.install(run))
    } else {
        Ok(run())
    }
}

fn mean_loss(margins: &[f64], labels: &[u8]) -> f64 {
    margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| logistic_loss(m, y))
        .sum::<f64>()
        / margins.len() as f64
}

fn grow_ensemble(
    labels: &[u8],
    names: &[String],
    kinds: &[FeatureKind],
    columns: &[Column],
    cfg: &TrainConfig,
) -> TrainingRun {
    let n = labels.len();
    let prior = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
    let base_margin = logit(prior);
    let mut margins = vec![base_margin; n];
    let mut loss_history = vec![mean_loss(&margins, labels)];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);

    for round in 0..cfg.n_trees {
        for i in 0..n {
            let (g, h) = logistic_loss_grad_hess(margins[i], labels[i]);
            grad[i] = g;
            hess[i] = h;
        }
        let rows: Vec<u32> = if cfg.subsample < 1.0 {
            let mut all: Vec<u32> = (0..n as u32).collect();
            all.shuffle(&mut rng::substream(cfg.seed, Domain::Subsample, round as u64));
            let take = ((n as f64 * cfg.subsample).round() as usize).max(1);
            let mut rows = all[..take].to_vec();
            rows.sort_unstable();
            rows
        } else {
            (0..n as u32).collect()
        };
        let grower = Grower {
            names,
            columns,
            grad: &grad,
            hess: &hess,
            cfg,
        };
        let tree = grower.grow(rows, 0);
        for (i, m) in margins.iter_mut().enumerate() {
            *m += cfg.learning_rate * route(&tree, columns, i);
        }
        loss_history.push(mean_loss(&margins, labels));
        trees.push(tree);
    }

    TrainingRun {
        model: BoostedModel {
            feature_names: names.to_vec(),
            feature_kinds: kinds.to_vec(),
            trees,
            base_margin,
            learning_rate: cfg.learning_rate,
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            max_depth: cfg.max_depth,
        },
        loss_history,
    }
}

fn route(tree: &TreeNode, columns: &[Column], row: usize) -> f64 {
    let mut node = tree;
    loop {
        match node {
            TreeNode::Leaf { weight } => return *weight,
            TreeNode::Split {
                feature,
                condition,
                missing_left,
                left,
                right,
            } => {
                let go_left = match (&columns[*feature], condition) {
                    (Column::Numeric(x), SplitCondition::LessThan { threshold }) => {
                        let v = x[row];
                        if v.is_nan() {
                            *missing_left
                        } else {
                            v < *threshold
                        }
                    }
                    (Column::Categorical { codes, dictionary }, SplitCondition::InSet { categories }) => {
                        match codes[row] {
                            MISSING_CODE => *missing_left,
                            c => categories.contains(&dictionary[c as usize]),
                        }
                    }
                    _ => unreachable!("condition matches column type"),
                };
                node = if go_left { left } else { right };
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Rule {
    Threshold(f64),
    /// Category codes sent left.
    Codes(Vec<u32>),
}

#[derive(Debug, Clone)]
struct Candidate {
    gain: f64,
    feature: usize,
    /// Threshold value, or prefix length for categorical splits.
    order_key: f64,
    rule: Rule,
    missing_left: bool,
}

struct Grower<'a> {
    names: &'a [String],
    columns: &'a [Column],
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a TrainConfig,
}

impl Grower<'_> {
    fn grow(&self, rows: Vec<u32>, depth: usize) -> TreeNode {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        if depth < self.cfg.max_depth && rows.len() >= 2 {
            if let Some(best) = self.best_split(&rows) {
                if best.gain > 0.0 {
                    let (left_rows, right_rows) = self.partition(&rows, &best);
                    let condition = match &best.rule {
                        Rule::Threshold(t) => SplitCondition::LessThan { threshold: *t },
                        Rule::Codes(codes) => {
                            let Column::Categorical { dictionary, .. } = &self.columns[best.feature]
                            else {
                                unreachable!()
                            };
                            SplitCondition::InSet {
                                categories: codes
                                    .iter()
                                    .map(|&c| dictionary[c as usize].clone())
                                    .collect(),
                            }
                        }
                    };
                    return TreeNode::Split {
                        feature: best.feature,
                        condition,
                        missing_left: best.missing_left,
                        left: Box::new(self.grow(left_rows, depth + 1)),
                        right: Box::new(self.grow(right_rows, depth + 1)),
                    };
                }
            }
        }
        TreeNode::Leaf {
            weight: leaf_weight(g, h, self.cfg.lambda),
        }
    }

    fn partition(&self, rows: &[u32], c: &Candidate) -> (Vec<u32>, Vec<u32>) {
        rows.iter().partition(|&&r| {
            let r = r as usize;
            match (&self.columns[c.feature], &c.rule) {
                (Column::Numeric(x), Rule::Threshold(t)) => {
                    if x[r].is_nan() {
                        c.missing_left
                    } else {
                        x[r] < *t
                    }
                }
                (Column::Categorical { codes, .. }, Rule::Codes(left)) => match codes[r] {
                    MISSING_CODE => c.missing_left,
                    code => left.contains(&code),
                },
                _ => unreachable!(),
            }
        })
    }

    /// Best split over all features. Per-feature searches may run in
    /// parallel; the reduction is sequential in feature order so the result
    /// does not depend on the thread count.
    fn best_split(&self, rows: &[u32]) -> Option<Candidate> {
        let per_feature: Vec<Option<Candidate>> = (0..self.columns.len())
            .into_par_iter()
            .map(|f| match &self.columns[f] {
                Column::Numeric(x) => self.scan_numeric(f, x, rows),
                Column::Categorical { codes, .. } => self.scan_categorical(f, codes, rows),
            })
            .collect();
        per_feature
            .into_iter()
            .flatten()
            .reduce(|best, c| match self.compare(&c, &best) {
                Ordering::Greater => c,
                _ => best,
            })
    }

    /// Higher gain wins; ties go to the smaller feature name, then the smaller
    /// threshold.
    fn compare(&self, a: &Candidate, b: &Candidate) -> Ordering {
        a.gain
            .total_cmp(&b.gain)
            .then_with(|| self.names[b.feature].cmp(&self.names[a.feature]))
            .then_with(|| b.order_key.total_cmp(&a.order_key))
    }

    /// Scores the candidate boundary with both missing directions and keeps
    /// it in `best` if it improves the gain.
    #[allow(clippy::too_many_arguments)]
    fn consider(
        &self,
        best: &mut Option<Candidate>,
        feature: usize,
        order_key: f64,
        rule: impl FnOnce() -> Rule,
        (gl, hl, gr, hr): (f64, f64, f64, f64),
        (gm, hm, n_missing): (f64, f64, usize),
    ) {
        let options: [(bool, f64, f64, f64, f64); 2];
        let opts: &[(bool, f64, f64, f64, f64)] = if n_missing > 0 {
            options = [
                (false, gl, hl, gr + gm, hr + hm),
                (true, gl + gm, hl + hm, gr, hr),
            ];
            &options
        } else {
            options = [(hl >= hr, gl, hl, gr, hr); 2];
            &options[..1]
        };
        let mut rule = Some(rule);
        for &(missing_left, gl, hl, gr, hr) in opts {
            let min = self.cfg.min_child_hessian;
            if hl < min || hr < min {
                continue;
            }
            let gain = split_gain(gl, hl, gr, hr, self.cfg.lambda, self.cfg.gamma);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let r = match (rule.take(), best.as_ref()) {
                    (Some(f), _) => f(),
                    (None, Some(b)) => b.rule.clone(),
                    (None, None) => unreachable!(),
                };
                *best = Some(Candidate {
                    gain,
                    feature,
                    order_key,
                    rule: r,
                    missing_left,
                });
            }
        }
    }

    fn scan_numeric(&self, feature: usize, x: &[f64], rows: &[u32]) -> Option<Candidate> {
        let mut present: Vec<(f64, u32)> = Vec::with_capacity(rows.len());
        let (mut gm, mut hm, mut n_missing) = (0.0, 0.0, 0usize);
        for &r in rows {
            let v = x[r as usize];
            if v.is_nan() {
                gm += self.grad[r as usize];
                hm += self.hess[r as usize];
                n_missing += 1;
            } else {
                present.push((v, r));
            }
        }
        if present.len() < 2 {
            return None;
        }
        // stable: ties keep row order
        present.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (gt, ht) = present.iter().fold((0.0, 0.0), |(g, h), &(_, r)| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        let mut best = None;
        let (mut gl, mut hl) = (0.0, 0.0);
        for i in 0..present.len() - 1 {
            let r = present[i].1 as usize;
            gl += self.grad[r];
            hl += self.hess[r];
            let next = present[i + 1].0;
            if present[i].0 == next {
                continue;
            }
            self.consider(
                &mut best,
                feature,
                next,
                || Rule::Threshold(next),
                (gl, hl, gt - gl, ht - hl),
                (gm, hm, n_missing),
            );
        }
        best
    }

    fn scan_categorical(&self, feature: usize, codes: &[u32], rows: &[u32]) -> Option<Candidate> {
        let mut stats: std::collections::BTreeMap<u32, (f64, f64)> = Default::default();
        let (mut gm, mut hm, mut n_missing) = (0.0, 0.0, 0usize);
        for &r in rows {
            let (g, h) = (self.grad[r as usize], self.hess[r as usize]);
            match codes[r as usize] {
                MISSING_CODE => {
                    gm += g;
                    hm += h;
                    n_missing += 1;
                }
                c => {
                    let e = stats.entry(c).or_insert((0.0, 0.0));
                    e.0 += g;
                    e.1 += h;
                }
            }
        }
        if stats.len() < 2 {
            return None;
        }
        let mut order: Vec<(u32, f64, f64)> = stats.into_iter().map(|(c, (g, h))| (c, g, h)).collect();
        order.sort_by(|a, b| (a.1 / a.2).total_cmp(&(b.1 / b.2)).then(a.0.cmp(&b.0)));
        let (gt, ht) = order.iter().fold((0.0, 0.0), |(g, h), e| (g + e.1, h + e.2));
        let mut best = None;
        let (mut gl, mut hl) = (0.0, 0.0);
        for m in 0..order.len() - 1 {
            gl += order[m].1;
            hl += order[m].2;
            let prefix = &order[..=m];
            self.consider(
                &mut best,
                feature,
                (m + 1) as f64,
                || {
                    let mut left: Vec<u32> = prefix.iter().map(|e| e.0).collect();
                    left.sort_unstable();
                    Rule::Codes(left)
                },
                (gl, hl, gt - gl, ht - hl),
                (gm, hm, n_missing),
            );
        }
        best
    }
}
