//! Probability calibration and reliability diagrams.
//!
//! Two calibrators are offered. The sigmoid (Platt) map is
//! `logistic(slope * logit(f) + intercept)`, fitted by damped Newton steps on
//! the logistic loss. The isotonic map is the pool-adjacent-violators fit of
//! outcomes against scores, stored as a non-decreasing step function.
//!
//! Reliability diagrams use equal-width bins over `[0, 1]`. Under the
//! Freedman-Diaconis rule the width is `2 * IQR(f) / N^(1/3)` and the bin
//! count is `clamp(ceil(1 / width), 1, 100)`. When every score is identical
//! a single bin is used; when the IQR is zero otherwise, ten bins.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gbdt::{logit, sigmoid};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("prediction set is empty")]
    Empty,
    #[error("{predictions} predictions but {outcomes} outcomes")]
    LengthMismatch { predictions: usize, outcomes: usize },
    #[error("prediction {index} is {value}, outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("outcome {index} is {value}, expected 0 or 1")]
    InvalidOutcome { index: usize, value: u8 },
    #[error("calibration needs both outcome classes")]
    SingleClass,
    #[error("sigmoid fit did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },
    #[error("bin count must be between 1 and {max}, got {got}")]
    InvalidBinCount { got: usize, max: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

pub const MAX_BINS: usize = 100;
/// Bin count used when the IQR vanishes but scores still differ.
pub const DEGENERATE_IQR_BINS: usize = 10;

const NEWTON_TOLERANCE: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
/// Scores are clipped this far from 0 and 1 before taking the logit.
const LOGIT_CLIP: f64 = 1e-12;

/// Paired predicted probabilities and binary outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    f: Vec<f64>,
    o: Vec<u8>,
}

impl PredictionSet {
    pub fn new(f: Vec<f64>, o: Vec<u8>) -> Result<Self> {
        if f.len() != o.len() {
            return Err(CalibrationError::LengthMismatch {
                predictions: f.len(),
                outcomes: o.len(),
            });
        }
        if f.is_empty() {
            return Err(CalibrationError::Empty);
        }
        if let Some((index, &value)) = f
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
        {
            return Err(CalibrationError::OutOfRange { index, value });
        }
        if let Some((index, &value)) = o.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(CalibrationError::InvalidOutcome { index, value });
        }
        Ok(PredictionSet { f, o })
    }

    pub fn predictions(&self) -> &[f64] {
        &self.f
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.o
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.o.iter().filter(|&&o| o == 1).count()
    }

    fn has_both_classes(&self) -> bool {
        let pos = self.positives();
        pos > 0 && pos < self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    #[default]
    Sigmoid,
    Isotonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Calibrator {
    Sigmoid {
        slope: f64,
        intercept: f64,
    },
    /// Input `f` maps to `values[i]` for the last `i` with
    /// `breakpoints[i] <= f`, or to `values[0]` below the first breakpoint.
    Isotonic {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Calibrator {
    pub fn method(&self) -> CalibrationMethod {
        match self {
            Calibrator::Sigmoid { .. } => CalibrationMethod::Sigmoid,
            Calibrator::Isotonic { .. } => CalibrationMethod::Isotonic,
        }
    }

    pub fn apply(&self, f: f64) -> f64 {
        match self {
            Calibrator::Sigmoid { slope, intercept } => {
                sigmoid(slope * clipped_logit(f) + intercept)
            }
            Calibrator::Isotonic { breakpoints, values } => {
                let i = breakpoints.partition_point(|&b| b <= f);
                values[i.saturating_sub(1)]
            }
        }
        .clamp(0.0, 1.0)
    }

    /// Calibrated copy of `s` with outcomes unchanged.
    pub fn apply_set(&self, s: &PredictionSet) -> PredictionSet {
        PredictionSet {
            f: s.f.iter().map(|&f| self.apply(f)).collect(),
            o: s.o.clone(),
        }
    }
}

fn clipped_logit(f: f64) -> f64 {
    logit(f.clamp(LOGIT_CLIP, 1.0 - LOGIT_CLIP))
}

pub fn fit_calibrator(s: &PredictionSet, method: CalibrationMethod) -> Result<Calibrator> {
    if !s.has_both_classes() {
        return Err(CalibrationError::SingleClass);
    }
    match method {
        CalibrationMethod::Sigmoid => fit_sigmoid(s, NEWTON_MAX_ITER),
        CalibrationMethod::Isotonic => Ok(fit_isotonic(s)),
    }
}

fn sigmoid_loss(x: &[f64], o: &[u8], a: f64, b: f64) -> f64 {
    x.iter()
        .zip(o)
        .map(|(&x, &o)| crate::gbdt::logistic_loss(a * x + b, o))
        .sum::<f64>()
        / x.len() as f64
}

fn fit_sigmoid(s: &PredictionSet, max_iter: usize) -> Result<Calibrator> {
    let x: Vec<f64> = s.f.iter().map(|&f| clipped_logit(f)).collect();
    let n = x.len() as f64;
    let (mut a, mut b) = (1.0, 0.0);
    let mut loss = sigmoid_loss(&x, &s.o, a, b);
    let mut gradient_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &o) in x.iter().zip(&s.o) {
            let p = sigmoid(a * x + b);
            let r = p - o as f64;
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        let (ga, gb, haa, hab, hbb) = (ga / n, gb / n, haa / n, hab / n, hbb / n);
        gradient_norm = ga.hypot(gb);
        if gradient_norm < NEWTON_TOLERANCE {
            return Ok(Calibrator::Sigmoid {
                slope: a,
                intercept: b,
            });
        }
        // Levenberg damping keeps the system solvable when the hessian is
        // near singular.
        let ridge = 1e-12 * (1.0 + haa + hbb);
        let (haa, hbb) = (haa + ridge, hbb + ridge);
        let det = haa * hbb - hab * hab;
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a - step * da, b - step * db);
            let nl = sigmoid_loss(&x, &s.o, na, nb);
            if nl <= loss || step < 1e-10 {
                a = na;
                b = nb;
                loss = nl;
                break;
            }
            step *= 0.5;
        }
        if !(a.is_finite() && b.is_finite()) {
            break;
        }
    }
    Err(CalibrationError::NonConvergence {
        iterations: max_iter,
        gradient_norm,
    })
}

fn fit_isotonic(s: &PredictionSet) -> Calibrator {
    let mut pairs: Vec<(f64, u8)> = s.f.iter().copied().zip(s.o.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (x_min, sum of outcomes, weight); equal scores pooled up front
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let x = pairs[i].0;
        let (mut sum, mut w) = (0.0, 0.0);
        while i < pairs.len() && pairs[i].0 == x {
            sum += pairs[i].1 as f64;
            w += 1.0;
            i += 1;
        }
        blocks.push((x, sum, w));
        while blocks.len() >= 2 {
            let (_, s1, w1) = blocks[blocks.len() - 1];
            let (x0, s0, w0) = blocks[blocks.len() - 2];
            if s0 / w0 <= s1 / w1 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().expect("two blocks") = (x0, s0 + s1, w0 + w1);
        }
    }
    Calibrator::Isotonic {
        breakpoints: blocks.iter().map(|b| b.0).collect(),
        values: blocks.iter().map(|b| b.1 / b.2).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinRule {
    #[default]
    FreedmanDiaconis,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Sums are kept so that weighted errors can be formed without
    /// re-dividing.
    pub sum_predicted: f64,
    pub positives: usize,
}

impl ReliabilityBin {
    pub fn mean_predicted(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_predicted / self.count as f64)
    }

    pub fn fraction_positive(&self) -> Option<f64> {
        (self.count > 0).then(|| self.positives as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub rule: BinRule,
    pub bins: Vec<ReliabilityBin>,
    pub n: usize,
}

impl ReliabilityDiagram {
    /// Columns: `lower,upper,count,mean_predicted,fraction_positive`; the
    /// last two are blank for empty bins.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lower", "upper", "count", "mean_predicted", "fraction_positive"])?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for b in &self.bins {
            w.write_record([
                format!("{:.6}", b.lower),
                format!("{:.6}", b.upper),
                b.count.to_string(),
                opt(b.mean_predicted()),
                opt(b.fraction_positive()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

const RANK_BUCKETS: usize = 1024;

/// Order statistics of scores in `[0, 1]`, looked up by rank.
///
/// One counting pass sorts values into equal-width buckets; a rank is then
/// resolved inside its bucket, by selection only when the bucket holds more
/// than one distinct value. Linear in `n` and cheap on heavily tied scores.
struct RankIndex<'a> {
    values: &'a [f64],
    /// Values before each bucket, plus a final total.
    starts: Vec<usize>,
    lowest: Vec<f64>,
    highest: Vec<f64>,
}

impl<'a> RankIndex<'a> {
    fn bucket(x: f64) -> usize {
        ((x * RANK_BUCKETS as f64) as usize).min(RANK_BUCKETS - 1)
    }

    fn new(values: &'a [f64]) -> Self {
        let mut counts = vec![0usize; RANK_BUCKETS];
        let mut lowest = vec![f64::INFINITY; RANK_BUCKETS];
        let mut highest = vec![f64::NEG_INFINITY; RANK_BUCKETS];
        for &x in values {
            let b = Self::bucket(x);
            counts[b] += 1;
            if x < lowest[b] {
                lowest[b] = x;
            }
            if x > highest[b] {
                highest[b] = x;
            }
        }
        let mut starts = Vec::with_capacity(RANK_BUCKETS + 1);
        let mut total = 0;
        starts.push(0);
        for c in counts {
            total += c;
            starts.push(total);
        }
        RankIndex {
            values,
            starts,
            lowest,
            highest,
        }
    }

    fn min(&self) -> f64 {
        self.lowest.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn max(&self) -> f64 {
        self.highest.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// The `rank`-th smallest value (0-based).
    fn at(&self, rank: usize) -> f64 {
        let b = self.starts.partition_point(|&s| s <= rank) - 1;
        if self.lowest[b] == self.highest[b] {
            return self.lowest[b];
        }
        let mut members: Vec<f64> = self
            .values
            .iter()
            .copied()
            .filter(|&x| Self::bucket(x) == b)
            .collect();
        let (_, &mut v, _) = members.select_nth_unstable_by(rank - self.starts[b], f64::total_cmp);
        v
    }

    /// Linear-interpolation quantile, `q` in `[0, 1]`.
    fn quantile(&self, q: f64) -> f64 {
        let n = self.values.len();
        let pos = q * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let at_lo = self.at(lo);
        if pos == lo as f64 {
            return at_lo;
        }
        at_lo + (pos - lo as f64) * (self.at(lo + 1) - at_lo)
    }
}

/// Number of equal-width bins over `[0, 1]` chosen by the
/// Freedman-Diaconis rule for the scores `f`.
pub fn freedman_diaconis_bins(f: &[f64]) -> usize {
    if f.is_empty() {
        return 1;
    }
    let index = RankIndex::new(f);
    if index.min() == index.max() {
        return 1;
    }
    let iqr = index.quantile(0.75) - index.quantile(0.25);
    if iqr <= 0.0 {
        return DEGENERATE_IQR_BINS;
    }
    let width = 2.0 * iqr / (f.len() as f64).cbrt();
    ((1.0 / width).ceil() as usize).clamp(1, MAX_BINS)
}

pub fn reliability_bins(s: &PredictionSet, rule: BinRule) -> Result<ReliabilityDiagram> {
    let k = match rule {
        BinRule::FreedmanDiaconis => freedman_diaconis_bins(&s.f),
        BinRule::Fixed(k) if (1..=MAX_BINS).contains(&k) => k,
        BinRule::Fixed(k) => return Err(CalibrationError::InvalidBinCount { got: k, max: MAX_BINS }),
    };
    let edges: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let mut bins: Vec<ReliabilityBin> = edges
        .windows(2)
        .map(|w| ReliabilityBin {
            lower: w[0],
            upper: w[1],
            count: 0,
            sum_predicted: 0.0,
            positives: 0,
        })
        .collect();
    let scale = k as f64;
    for (&f, &o) in s.f.iter().zip(&s.o) {
        let mut i = ((f * scale) as usize).min(k - 1);
        // floor(f * k) can be off by one next to an edge
        if f < edges[i] {
            i -= 1;
        } else if i + 1 < k && f >= edges[i + 1] {
            i += 1;
        }
        let b = &mut bins[i];
        b.count += 1;
        b.sum_predicted += f;
        b.positives += o as usize;
    }
    Ok(ReliabilityDiagram {
        rule,
        bins,
        n: s.len(),
    })
}

/// Count-weighted mean of `|fraction_positive - mean_predicted|`.
pub fn expected_calibration_error(d: &ReliabilityDiagram) -> f64 {
    if d.n == 0 {
        return 0.0;
    }
    d.bins
        .iter()
        .filter_map(|b| {
            let gap = (b.fraction_positive()? - b.mean_predicted()?).abs();
            Some(b.count as f64 / d.n as f64 * gap)
        })
        .sum()
}
