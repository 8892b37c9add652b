//! Anonymization and pseudonymization.
//!
//! * [`anonymize`] drops every `direct_identifier` feature.
//! * [`pseudonymize`] replaces quasi-identifier categoricals (and booleans)
//!   with keyed tokens and adds zero-mean Gaussian noise to quasi-identifier
//!   numerics. The token for a value is
//!   `"m" + hex(HMAC-SHA256(secret, feature 0x1f value 0x1f attempt)[..10])`,
//!   where `attempt` starts at 0 and is bumped until the token does not
//!   contain the original value as a substring. The literal value `m` gets
//!   the prefix `n` instead.
//! * [`re_identify`] reverses masking with the [`MaskMap`]; noising is one-way.
//!
//! The mask map is the "additional information" that must be stored apart
//! from the pseudonymized data. Its file layout is CSV with one section per
//! feature:
//!
//! ```text
//! #feature,region
//! token,original
//! m3f0c...,north
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use hmac::{KeyInit, Mac};
use rand_distr::{Distribution, Normal};
use sha2::Sha256;
use thiserror::Error;

use crate::data_model::{
    FeatureKind, FeatureSchema, LoanRecord, Portfolio, PrivacyClass, Value,
};
use crate::rng::{self, Domain};

type HmacSha256 = hmac::Hmac<Sha256>;

const TOKEN_BYTES: usize = 10;
const SECTION_MARKER: &str = "#feature";

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("pseudonymization secret must be 32 non-zero bytes")]
    InvalidSecret,
    #[error("noise scale for `{feature}` must be a positive finite number, got {scale}")]
    InvalidNoiseScale { feature: String, scale: f64 },
    #[error("direct identifier `{0}` still present; anonymize first")]
    DirectIdentifierPresent(String),
    #[error("no noise scale configured for quasi-identifier `{0}`")]
    NoiseScaleMissing(String),
    #[error("token collision in feature `{0}`")]
    TokenCollision(String),
    #[error("token `{token}` of feature `{feature}` is not in the mask map")]
    TokenNotFound { feature: String, token: String },
    #[error("malformed mask map: {0}")]
    MalformedMap(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] crate::data_model::DataError),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Secret plus per-feature noise scales.
#[derive(Clone)]
pub struct PseudonymizationKey {
    secret: [u8; 32],
    noise_scale: BTreeMap<String, f64>,
}

impl fmt::Debug for PseudonymizationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PseudonymizationKey")
            .field("secret", &"<redacted>")
            .field("noise_scale", &self.noise_scale)
            .finish()
    }
}

impl PseudonymizationKey {
    pub fn new(secret: [u8; 32], noise_scale: BTreeMap<String, f64>) -> Result<Self> {
        if secret.iter().all(|&b| b == 0) {
            return Err(PrivacyError::InvalidSecret);
        }
        for (feature, &scale) in &noise_scale {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(PrivacyError::InvalidNoiseScale {
                    feature: feature.clone(),
                    scale,
                });
            }
        }
        Ok(PseudonymizationKey {
            secret,
            noise_scale,
        })
    }

    /// Parses a 64-character hex secret (surrounding whitespace ignored).
    pub fn from_hex(secret_hex: &str, noise_scale: BTreeMap<String, f64>) -> Result<Self> {
        let bytes = hex::decode(secret_hex.trim()).map_err(|_| PrivacyError::InvalidSecret)?;
        let secret: [u8; 32] = bytes.try_into().map_err(|_| PrivacyError::InvalidSecret)?;
        Self::new(secret, noise_scale)
    }

    pub fn noise_scale(&self, feature: &str) -> Option<f64> {
        self.noise_scale.get(feature).copied()
    }

    fn token(&self, feature: &str, original: &str) -> String {
        // hex digits never spell "m" or "n", so one of the two prefixes
        // always leaves room for a token that avoids the original
        let prefix = if original == "m" { "n" } else { "m" };
        for attempt in 0u32.. {
            let mut mac = HmacSha256::new_from_slice(&self.secret).expect("any key length");
            mac.update(feature.as_bytes());
            mac.update(&[0x1f]);
            mac.update(original.as_bytes());
            mac.update(&[0x1f]);
            mac.update(&attempt.to_le_bytes());
            let digest = mac.finalize().into_bytes();
            let token = format!("{prefix}{}", hex::encode(&digest[..TOKEN_BYTES]));
            if original.is_empty() || !token.contains(original) {
                return token;
            }
        }
        unreachable!("token attempts exhausted")
    }
}

/// Token -> original associations, per feature.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskMap {
    entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl MaskMap {
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|m| m.is_empty())
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn original(&self, feature: &str, token: &str) -> Option<&str> {
        self.entries.get(feature)?.get(token).map(String::as_str)
    }

    /// Adds the entries of `other`. Maps built with the same key agree on
    /// every shared token; a disagreement is reported as a collision.
    pub fn merge(&mut self, other: MaskMap) -> Result<()> {
        for (feature, entries) in other.entries {
            let section = self.entries.entry(feature.clone()).or_default();
            for (token, original) in entries {
                match section.get(&token) {
                    Some(existing) if *existing != original => {
                        return Err(PrivacyError::TokenCollision(feature));
                    }
                    _ => {
                        section.insert(token, original);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn tokens(&self, feature: &str) -> impl Iterator<Item = &str> {
        self.entries
            .get(feature)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(false).from_writer(writer);
        for (feature, map) in &self.entries {
            w.write_record([SECTION_MARKER, feature.as_str()])?;
            w.write_record(["token", "original"])?;
            for (token, original) in map {
                w.write_record([token.as_str(), original.as_str()])?;
            }
        }
        w.flush().map_err(|e| PrivacyError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(reader);
        let mut entries: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for row in rdr.records() {
            let row = row?;
            if row.len() != 2 {
                return Err(PrivacyError::MalformedMap(format!(
                    "expected 2 fields, found {}",
                    row.len()
                )));
            }
            let (a, b) = (&row[0], &row[1]);
            if a == SECTION_MARKER {
                entries.entry(b.to_string()).or_default();
                current = Some(b.to_string());
            } else if a == "token" && b == "original" {
                continue;
            } else {
                let feature = current
                    .as_ref()
                    .ok_or_else(|| PrivacyError::MalformedMap("row before section".into()))?;
                entries
                    .get_mut(feature)
                    .expect("section created")
                    .insert(a.to_string(), b.to_string());
            }
        }
        Ok(MaskMap { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|source| PrivacyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|source| PrivacyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Removes every direct-identifier feature; everything else is untouched.
pub fn anonymize(p: &Portfolio) -> Portfolio {
    let keep: Vec<&str> = p
        .schema()
        .features()
        .iter()
        .filter(|f| f.privacy_class != PrivacyClass::DirectIdentifier)
        .map(|f| f.name.as_str())
        .collect();
    if keep.len() == p.schema().len() {
        return p.clone();
    }
    p.project(&keep).expect("names come from the schema")
}

/// Fails if the schema still carries a direct identifier.
pub fn ensure_no_direct_identifiers(schema: &FeatureSchema) -> Result<()> {
    match schema
        .features()
        .iter()
        .find(|f| f.privacy_class == PrivacyClass::DirectIdentifier)
    {
        Some(f) => Err(PrivacyError::DirectIdentifierPresent(f.name.clone())),
        None => Ok(()),
    }
}

enum Treatment {
    Keep,
    Mask,
    Noise(Normal<f64>),
}

pub fn pseudonymize(
    p: &Portfolio,
    key: &PseudonymizationKey,
    seed: u64,
) -> Result<(Portfolio, MaskMap)> {
    ensure_no_direct_identifiers(p.schema())?;

    let mut treatments = Vec::with_capacity(p.schema().len());
    let mut out_features = Vec::with_capacity(p.schema().len());
    for spec in p.schema().features() {
        let mut out = spec.clone();
        let t = match (spec.privacy_class, spec.kind) {
            (PrivacyClass::QuasiIdentifier, FeatureKind::Numeric) => {
                let scale = key
                    .noise_scale(&spec.name)
                    .ok_or_else(|| PrivacyError::NoiseScaleMissing(spec.name.clone()))?;
                Treatment::Noise(Normal::new(0.0, scale).expect("validated scale"))
            }
            (PrivacyClass::QuasiIdentifier, _) => {
                out.kind = FeatureKind::Categorical;
                Treatment::Mask
            }
            _ => Treatment::Keep,
        };
        treatments.push(t);
        out_features.push(out);
    }
    let out_schema = FeatureSchema::new(out_features)?;

    let mut maps: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    // original -> token cache per feature; also detects collisions
    let mut forward: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); treatments.len()];
    let mut noise_rngs: Vec<_> = (0..treatments.len())
        .map(|j| rng::substream(seed, Domain::Noise, j as u64))
        .collect();

    let mut records = Vec::with_capacity(p.len());
    for r in p.records() {
        let mut values = Vec::with_capacity(r.values.len());
        for (j, (v, t)) in r.values.iter().zip(&treatments).enumerate() {
            let spec = &p.schema().features()[j];
            let nv = match (t, v) {
                (_, Value::Missing) => Value::Missing,
                (Treatment::Keep, v) => v.clone(),
                (Treatment::Noise(normal), Value::Number(x)) => {
                    Value::Number(x + normal.sample(&mut noise_rngs[j]))
                }
                (Treatment::Mask, v) => {
                    let original = match v {
                        Value::Symbol(s) => s.clone(),
                        Value::Number(x) => if *x == 1.0 { "1" } else { "0" }.to_string(),
                        Value::Missing => unreachable!(),
                    };
                    let token = match forward[j].get(&original) {
                        Some(t) => t.clone(),
                        None => {
                            let token = key.token(&spec.name, &original);
                            let section = maps.entry(spec.name.clone()).or_default();
                            if section.contains_key(&token) {
                                return Err(PrivacyError::TokenCollision(spec.name.clone()));
                            }
                            section.insert(token.clone(), original.clone());
                            forward[j].insert(original, token.clone());
                            token
                        }
                    };
                    Value::Symbol(token)
                }
                (Treatment::Noise(_), other) => other.clone(),
            };
            values.push(nv);
        }
        records.push(LoanRecord {
            record_id: r.record_id.clone(),
            values,
            outcome: r.outcome,
        });
    }

    let mut perturbed = p.perturbed_features().clone();
    for (spec, t) in p.schema().features().iter().zip(&treatments) {
        if let Treatment::Noise(_) = t {
            perturbed.insert(spec.name.clone());
        }
    }
    let out = Portfolio::from_parts_unchecked(out_schema, records, p.kind(), perturbed);
    Ok((out, MaskMap { entries: maps }))
}

/// Restores masked categoricals; noised numerics stay perturbed and remain
/// listed in [`Portfolio::perturbed_features`].
pub fn re_identify(p: &Portfolio, map: &MaskMap) -> Result<Portfolio> {
    let masked: Vec<usize> = p
        .schema()
        .features()
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            f.privacy_class == PrivacyClass::QuasiIdentifier && f.kind == FeatureKind::Categorical
        })
        .map(|(i, _)| i)
        .collect();
    let mut perturbed: BTreeSet<String> = p.perturbed_features().clone();
    for f in p.schema().features() {
        if f.privacy_class == PrivacyClass::QuasiIdentifier && f.kind == FeatureKind::Numeric {
            perturbed.insert(f.name.clone());
        }
    }
    let mut records = p.records().to_vec();
    for r in &mut records {
        for &j in &masked {
            if let Value::Symbol(token) = &r.values[j] {
                let feature = &p.schema().features()[j].name;
                let original =
                    map.original(feature, token)
                        .ok_or_else(|| PrivacyError::TokenNotFound {
                            feature: feature.clone(),
                            token: token.clone(),
                        })?;
                r.values[j] = Value::Symbol(original.to_string());
            }
        }
    }
    Ok(Portfolio::from_parts_unchecked(
        p.schema().clone(),
        records,
        p.kind(),
        perturbed,
    ))
}
