//! Synthetic loan portfolios.
//!
//! Every record is drawn from one latent-factor model:
//!
//! ```text
//! z   ~ N(0, 1)                       shared factor
//! a   ~ Bernoulli(1/2)                protected attribute (never emitted)
//! s_j = sqrt(rho) z + sqrt(1-rho) e_j,  e_j ~ N(0, 1)   signal features
//! P(bad loan) = logistic(intercept + sum_j c_j s_j + effect (a - 1/2))
//! proxy_k = a + proxy_noise * N(0, 1)                     bias-tagged proxies
//! ```
//!
//! Noise features are independent of everything. The intercept is solved by
//! bisection on a probe sample so the expected positive share matches the
//! target.
//!
//! Candidate record `i` is drawn from its own random substream, so the
//! candidate sequence is the same however the work is split across threads.
//! In exact-count mode candidates are accepted by class until the requested
//! numbers of positives and negatives are reached; this keeps the
//! class-conditional feature distributions of the underlying model. In
//! Bernoulli mode the first `n` candidates are taken as drawn.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::data_model::{
    Availability, BiasClass, DataError, FeatureKind, FeatureSchema, FeatureSpec, LoanRecord,
    Outcome, Portfolio, PortfolioKind, PrivacyClass, Value,
};
use crate::gbdt::sigmoid;
use crate::rng::{self, Domain};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("prevalence {target} is unreachable with these coefficients (reachable range {low:.6}..{high:.6})")]
    UnachievablePrevalence { target: f64, low: f64, high: f64 },
    #[error("drift shift names unknown or non-numeric feature `{0}`")]
    UnknownShiftFeature(String),
    #[error("gave up after {0} candidates without filling the class counts")]
    CandidatesExhausted(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Default signal coefficients, strongest first.
pub const DEFAULT_COEFFICIENTS: [f64; 10] = [1.08, 0.99, 0.9, 0.81, 0.72, 0.72, 0.63, 0.54, 0.45, 0.45];

const PROBE_SAMPLES: u64 = 200_000;
const INTERCEPT_BRACKET: f64 = 60.0;
const BISECTION_STEPS: usize = 200;
const CANDIDATE_BATCH: usize = 16_384;
/// Candidates per requested record before exact-count generation gives up.
const MAX_CANDIDATE_FACTOR: usize = 2_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n_records: usize,
    /// Target positive share in `(0, 1)`.
    pub prevalence: f64,
    pub n_signal_features: usize,
    pub n_noise_features: usize,
    pub n_bias_features: usize,
    /// One per signal feature.
    pub signal_coefficients: Vec<f64>,
    /// Solved from `prevalence` when absent.
    pub intercept: Option<f64>,
    /// Share of each signal's variance from the shared factor, in `[0, 1)`.
    pub latent_loading: f64,
    /// Log-odds gap between the two protected groups.
    pub protected_effect: f64,
    /// Noise standard deviation of the bias proxies.
    pub proxy_noise: f64,
    /// Offsets added to named numeric features after drawing.
    pub drift_shift: BTreeMap<String, f64>,
    pub exact_counts: bool,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(n_records: usize, prevalence: f64, seed: u64) -> Self {
        GeneratorSpec {
            n_records,
            prevalence,
            n_signal_features: DEFAULT_COEFFICIENTS.len(),
            n_noise_features: 5,
            n_bias_features: 0,
            signal_coefficients: DEFAULT_COEFFICIENTS.to_vec(),
            intercept: None,
            latent_loading: 0.3,
            protected_effect: 3.5,
            proxy_noise: 0.35,
            drift_shift: BTreeMap::new(),
            exact_counts: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence {} outside (0, 1)", self.prevalence));
        }
        if self.signal_coefficients.len() != self.n_signal_features {
            return bad(format!(
                "{} coefficients for {} signal features",
                self.signal_coefficients.len(),
                self.n_signal_features
            ));
        }
        if self.signal_coefficients.iter().any(|c| !c.is_finite()) {
            return bad("signal coefficients must be finite".into());
        }
        if !(0.0..1.0).contains(&self.latent_loading) {
            return bad(format!("latent_loading {} outside [0, 1)", self.latent_loading));
        }
        if !self.protected_effect.is_finite() {
            return bad("protected_effect must be finite".into());
        }
        if !(self.proxy_noise > 0.0 && self.proxy_noise.is_finite()) {
            return bad("proxy_noise must be positive".into());
        }
        if let Some(b) = self.intercept {
            if !b.is_finite() {
                return bad("intercept must be finite".into());
            }
        }
        if self.drift_shift.values().any(|v| !v.is_finite()) {
            return bad("drift shifts must be finite".into());
        }
        Ok(())
    }
}

/// How one emitted column is drawn.
#[derive(Debug, Clone)]
enum Source {
    Signal(usize),
    Proxy,
    Gaussian,
    Levels(&'static [&'static str]),
    Flag(f64),
    Age,
    Postcode,
    Identifier(&'static str),
}

#[derive(Debug, Clone)]
struct Column {
    spec: FeatureSpec,
    source: Source,
}

const BIAS_CYCLE: [(BiasClass, &str); 3] = [
    (BiasClass::Gender, "gender"),
    (BiasClass::RaceEthnicity, "race_ethnicity"),
    (BiasClass::CreditHistory, "credit_history"),
];

fn signal_columns(n: usize) -> Vec<Column> {
    (0..n)
        .map(|j| Column {
            spec: FeatureSpec::new(format!("signal_{:02}", j + 1), FeatureKind::Numeric),
            source: Source::Signal(j),
        })
        .collect()
}

fn proxy_columns(n: usize) -> Vec<Column> {
    (0..n)
        .map(|k| {
            let (class, tag) = BIAS_CYCLE[k % BIAS_CYCLE.len()];
            Column {
                spec: FeatureSpec::new(
                    format!("proxy_{tag}_{}", k / BIAS_CYCLE.len() + 1),
                    FeatureKind::Numeric,
                )
                .with_bias(class),
                source: Source::Proxy,
            }
        })
        .collect()
}

fn standard_layout(spec: &GeneratorSpec) -> Vec<Column> {
    let mut cols = signal_columns(spec.n_signal_features);
    cols.extend(proxy_columns(spec.n_bias_features));
    cols.extend((0..spec.n_noise_features).map(|j| Column {
        spec: FeatureSpec::new(format!("noise_{:02}", j + 1), FeatureKind::Numeric),
        source: Source::Gaussian,
    }));
    cols
}

/// Per-record latent draws; consumes the start of the record's substream.
struct Latent {
    protected: f64,
    signals: Vec<f64>,
    margin: f64,
    label: u8,
}

struct Model<'a> {
    spec: &'a GeneratorSpec,
    intercept: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_latent(spec: &GeneratorSpec, intercept: f64, rng: &mut ChaCha8Rng) -> Latent {
    let z = normal(rng);
    let protected = if rng.random::<bool>() { 1.0 } else { 0.0 };
    let (shared, own) = (spec.latent_loading.sqrt(), (1.0 - spec.latent_loading).sqrt());
    let signals: Vec<f64> = (0..spec.n_signal_features)
        .map(|_| shared * z + own * normal(rng))
        .collect();
    let margin = spec
        .signal_coefficients
        .iter()
        .zip(&signals)
        .map(|(c, s)| c * s)
        .sum::<f64>()
        + spec.protected_effect * (protected - 0.5);
    let u: f64 = rng.random();
    Latent {
        protected,
        signals,
        margin,
        label: (u < sigmoid(intercept + margin)) as u8,
    }
}

/// Intercept whose expected positive share over the probe sample is
/// `target`.
fn solve_intercept(spec: &GeneratorSpec) -> Result<f64> {
    let margins: Vec<f64> = (0..PROBE_SAMPLES)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(spec.seed, Domain::InterceptProbe, i);
            draw_latent(spec, 0.0, &mut rng).margin
        })
        .collect();
    let share = |b: f64| margins.iter().map(|&m| sigmoid(b + m)).sum::<f64>() / margins.len() as f64;
    let (mut lo, mut hi) = (-INTERCEPT_BRACKET, INTERCEPT_BRACKET);
    let (low, high) = (share(lo), share(hi));
    if !(low < spec.prevalence && spec.prevalence < high) {
        return Err(SynthError::UnachievablePrevalence {
            target: spec.prevalence,
            low,
            high,
        });
    }
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if share(mid) < spec.prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

enum Counts {
    Exact { positives: usize, negatives: usize },
    Bernoulli(usize),
}

impl Model<'_> {
    fn label_of(&self, domain: Domain, i: usize) -> u8 {
        let mut rng = rng::substream(self.spec.seed, domain, i as u64);
        draw_latent(self.spec, self.intercept, &mut rng).label
    }

    /// Candidate indices accepted under `counts`, in candidate order.
    fn accept(&self, domain: Domain, counts: &Counts) -> Result<Vec<usize>> {
        let (mut need_pos, mut need_neg) = match *counts {
            Counts::Exact {
                positives,
                negatives,
            } => (positives, negatives),
            Counts::Bernoulli(n) => return Ok((0..n).collect()),
        };
        let total = need_pos + need_neg;
        let cap = total.max(1) * MAX_CANDIDATE_FACTOR;
        let mut accepted = Vec::with_capacity(total);
        let mut start = 0;
        while need_pos + need_neg > 0 {
            if start >= cap {
                return Err(SynthError::CandidatesExhausted(start));
            }
            let labels: Vec<u8> = (start..start + CANDIDATE_BATCH)
                .into_par_iter()
                .map(|i| self.label_of(domain, i))
                .collect();
            for (offset, y) in labels.into_iter().enumerate() {
                let need = if y == 1 { &mut need_pos } else { &mut need_neg };
                if *need > 0 {
                    *need -= 1;
                    accepted.push(start + offset);
                    if need_pos + need_neg == 0 {
                        break;
                    }
                }
            }
            start += CANDIDATE_BATCH;
        }
        Ok(accepted)
    }

    fn record(&self, domain: Domain, i: usize, id: String, layout: &[Column]) -> LoanRecord {
        let mut rng = rng::substream(self.spec.seed, domain, i as u64);
        let latent = draw_latent(self.spec, self.intercept, &mut rng);
        let values = layout
            .iter()
            .map(|c| {
                let v = match &c.source {
                    Source::Signal(j) => Value::Number(latent.signals[*j]),
                    Source::Proxy => {
                        Value::Number(latent.protected + self.spec.proxy_noise * normal(&mut rng))
                    }
                    Source::Gaussian => Value::Number(normal(&mut rng)),
                    Source::Levels(levels) => {
                        Value::Symbol(levels[rng.random_range(0..levels.len())].to_string())
                    }
                    Source::Flag(p) => Value::Number((rng.random::<f64>() < *p) as u8 as f64),
                    Source::Age => {
                        Value::Number((45.0 + 12.0 * normal(&mut rng)).round().clamp(18.0, 90.0))
                    }
                    Source::Postcode => Value::Number(rng.random_range(0..100u32) as f64),
                    Source::Identifier(prefix) => {
                        Value::Symbol(format!("{prefix}{:010}", rng.random_range(0..10_000_000_000u64)))
                    }
                };
                match (&v, self.spec.drift_shift.get(&c.spec.name)) {
                    (Value::Number(x), Some(shift)) => Value::Number(x + shift),
                    _ => v,
                }
            })
            .collect();
        LoanRecord {
            record_id: id,
            values,
            outcome: Outcome::from_label(latent.label),
        }
    }

    fn portfolio(
        &self,
        domain: Domain,
        counts: Counts,
        layout: &[Column],
        id_prefix: &str,
        kind: PortfolioKind,
    ) -> Result<Portfolio> {
        for name in self.spec.drift_shift.keys() {
            let numeric = layout.iter().any(|c| {
                &c.spec.name == name && !matches!(c.source, Source::Levels(_) | Source::Identifier(_))
            });
            if !numeric {
                return Err(SynthError::UnknownShiftFeature(name.clone()));
            }
        }
        let accepted = self.accept(domain, &counts)?;
        let records: Vec<LoanRecord> = accepted
            .par_iter()
            .enumerate()
            .map(|(k, &i)| self.record(domain, i, format!("{id_prefix}{:06}", k + 1), layout))
            .collect();
        let schema = FeatureSchema::new(layout.iter().map(|c| c.spec.clone()).collect())?;
        Ok(Portfolio::new(schema, records, kind)?)
    }
}

fn counts_for(spec: &GeneratorSpec) -> Counts {
    if spec.exact_counts {
        let positives = (spec.n_records as f64 * spec.prevalence).round() as usize;
        Counts::Exact {
            positives,
            negatives: spec.n_records - positives,
        }
    } else {
        Counts::Bernoulli(spec.n_records)
    }
}

/// Intercept used by `spec`: the fixed value or the solved one.
pub fn resolve_intercept(spec: &GeneratorSpec) -> Result<f64> {
    spec.validate()?;
    match spec.intercept {
        Some(b) => Ok(b),
        None => solve_intercept(spec),
    }
}

/// Portfolio with `signal_XX`, `proxy_<class>_N` and `noise_XX` columns.
pub fn generate(spec: &GeneratorSpec) -> Result<Portfolio> {
    let model = Model {
        spec,
        intercept: resolve_intercept(spec)?,
    };
    model.portfolio(
        Domain::GenericCandidates,
        counts_for(spec),
        &standard_layout(spec),
        "S",
        PortfolioKind::Synthetic,
    )
}

pub const TABLE1_TRAIN_TEST_RECORDS: usize = 7_289;
pub const TABLE1_TRAIN_TEST_POSITIVES: usize = 4_224;
pub const TABLE1_VALIDATION_RECORDS: usize = 63_763;
pub const TABLE1_VALIDATION_POSITIVES: usize = 1_613;
pub const TABLE1_SIGNAL_FEATURES: usize = 10;
pub const TABLE1_BIAS_FEATURES: usize = 6;
pub const TABLE1_VALIDATION_ONLY_FEATURES: usize = 50;

const REGIONS: &[&str] = &[
    "Abruzzo", "Basilicata", "Calabria", "Campania", "Emilia-Romagna", "Friuli-Venezia Giulia",
    "Lazio", "Liguria", "Lombardia", "Marche", "Molise", "Piemonte", "Puglia", "Sardegna",
    "Sicilia", "Toscana", "Trentino-Alto Adige", "Umbria", "Valle d'Aosta", "Veneto",
];
const SECTORS: &[&str] = &[
    "agriculture", "construction", "manufacturing", "wholesale", "transport", "hospitality",
    "real_estate", "professional_services",
];
const NOISE_FEATURES: usize = 9;

fn table1_layout() -> Vec<Column> {
    let ident = |name: &str, prefix: &'static str| Column {
        spec: FeatureSpec::new(name, FeatureKind::Categorical)
            .with_privacy(PrivacyClass::DirectIdentifier)
            .with_availability(Availability::ValidationOnly),
        source: Source::Identifier(prefix),
    };
    let quasi = |name: &str, kind, source| Column {
        spec: FeatureSpec::new(name, kind).with_privacy(PrivacyClass::QuasiIdentifier),
        source,
    };
    let mut cols = vec![
        ident("tax_code", "TC"),
        ident("customer_name", "CN"),
        ident("phone_number", "PH"),
        ident("iban", "IT"),
    ];
    cols.extend(signal_columns(TABLE1_SIGNAL_FEATURES));
    cols.extend(proxy_columns(TABLE1_BIAS_FEATURES));
    cols.push(quasi("region", FeatureKind::Categorical, Source::Levels(REGIONS)));
    cols.push(quasi("sector", FeatureKind::Categorical, Source::Levels(SECTORS)));
    cols.push(quasi("age_years", FeatureKind::Numeric, Source::Age));
    cols.push(quasi("postcode_area", FeatureKind::Numeric, Source::Postcode));
    cols.push(Column {
        spec: FeatureSpec::new("has_cosigner", FeatureKind::Boolean),
        source: Source::Flag(0.3),
    });
    cols.extend((0..NOISE_FEATURES).map(|j| Column {
        spec: FeatureSpec::new(format!("noise_{:02}", j + 1), FeatureKind::Numeric),
        source: Source::Gaussian,
    }));
    cols.extend((0..TABLE1_VALIDATION_ONLY_FEATURES).map(|j| Column {
        spec: FeatureSpec::new(format!("validation_extra_{:02}", j + 1), FeatureKind::Numeric)
            .with_availability(Availability::ValidationOnly),
        source: Source::Gaussian,
    }));
    cols
}

/// Noise scales for the numeric quasi-identifiers of [`table1_scenario`].
pub fn table1_noise_scales() -> BTreeMap<String, f64> {
    BTreeMap::from([("age_years".to_string(), 2.0), ("postcode_area".to_string(), 1.0)])
}

/// The generator settings behind [`table1_scenario`].
pub fn table1_spec(seed: u64) -> GeneratorSpec {
    GeneratorSpec {
        n_records: TABLE1_VALIDATION_RECORDS,
        prevalence: TABLE1_VALIDATION_POSITIVES as f64 / TABLE1_VALIDATION_RECORDS as f64,
        n_signal_features: TABLE1_SIGNAL_FEATURES,
        n_noise_features: NOISE_FEATURES,
        n_bias_features: TABLE1_BIAS_FEATURES,
        exact_counts: true,
        ..GeneratorSpec::new(TABLE1_VALIDATION_RECORDS, 0.0253, seed)
    }
}

/// A train-test portfolio of 7,289 records (4,224 positives) and a disjoint
/// validation portfolio of 63,763 records (1,613 positives) from the same
/// model. Validation carries all 84 features; train-test carries the 30 not
/// marked validation-only.
pub fn table1_scenario(seed: u64) -> Result<(Portfolio, Portfolio)> {
    table1_scenario_with(&table1_spec(seed))
}

/// [`table1_scenario`] with adjusted generator settings (the record counts
/// are always those of the table).
pub fn table1_scenario_with(spec: &GeneratorSpec) -> Result<(Portfolio, Portfolio)> {
    let model = Model {
        spec,
        intercept: resolve_intercept(spec)?,
    };
    let layout = table1_layout();
    let validation = model.portfolio(
        Domain::ValidationCandidates,
        Counts::Exact {
            positives: TABLE1_VALIDATION_POSITIVES,
            negatives: TABLE1_VALIDATION_RECORDS - TABLE1_VALIDATION_POSITIVES,
        },
        &layout,
        "V",
        PortfolioKind::Validation,
    )?;
    let full = model.portfolio(
        Domain::TrainTestCandidates,
        Counts::Exact {
            positives: TABLE1_TRAIN_TEST_POSITIVES,
            negatives: TABLE1_TRAIN_TEST_RECORDS - TABLE1_TRAIN_TEST_POSITIVES,
        },
        &layout,
        "T",
        PortfolioKind::TrainTest,
    )?;
    let keep: Vec<String> = full
        .schema()
        .for_kind(PortfolioKind::TrainTest)
        .names()
        .map(str::to_string)
        .collect();
    Ok((full.project(&keep)?, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = GeneratorSpec::new(10, 0.3, 1);
        assert!(s.validate().is_ok());
        s.prevalence = 1.0;
        assert!(s.validate().is_err());
        let mut s = GeneratorSpec::new(10, 0.3, 1);
        s.signal_coefficients.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn exact_counts_are_exact() {
        let mut s = GeneratorSpec::new(500, 0.2, 3);
        s.exact_counts = true;
        let p = generate(&s).unwrap();
        assert_eq!(p.class_counts(), (100, 400));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = GeneratorSpec::new(300, 0.4, 9);
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.records(), b.records());
        let c = generate(&GeneratorSpec::new(300, 0.4, 10)).unwrap();
        assert_ne!(a.records(), c.records());
    }

    #[test]
    fn fixed_intercept_skips_solving() {
        let mut s = GeneratorSpec::new(50, 0.5, 2);
        s.intercept = Some(-1.0);
        assert_eq!(resolve_intercept(&s).unwrap(), -1.0);
    }

    #[test]
    fn saturated_model_cannot_reach_extreme_prevalence() {
        let mut s = GeneratorSpec::new(50, 1e-300, 2);
        s.signal_coefficients = vec![0.0; 10];
        s.protected_effect = 0.0;
        assert!(matches!(
            resolve_intercept(&s),
            Err(SynthError::UnachievablePrevalence { .. })
        ));
    }

    #[test]
    fn drift_shift_must_name_a_numeric_feature() {
        let mut s = GeneratorSpec::new(50, 0.5, 2);
        s.drift_shift.insert("nope".into(), 1.0);
        assert!(matches!(generate(&s), Err(SynthError::UnknownShiftFeature(_))));
    }

    #[test]
    fn table1_layout_counts() {
        let layout = table1_layout();
        assert_eq!(layout.len(), 84);
        let common = layout
            .iter()
            .filter(|c| c.spec.availability == Availability::Common)
            .count();
        assert_eq!(common, 30);
        let proxies = layout
            .iter()
            .filter(|c| c.spec.bias_class != BiasClass::None)
            .count();
        assert_eq!(proxies, TABLE1_BIAS_FEATURES);
    }
}
