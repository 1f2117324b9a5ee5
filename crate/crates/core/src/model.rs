//! Shared domain types: hosts, vantage points, RTT samples and emulated links.
//!
//! Measurement data is kept in milliseconds; link and model parameters are in
//! seconds. Conversions happen explicitly where the two meet.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid domain {0:?}: {1}")]
    Domain(String, &'static str),
    #[error("invalid vantage id {0:?}: {1}")]
    Vantage(String, &'static str),
    #[error("invalid rtt sample: {0}")]
    Sample(String),
    #[error("duplicate sample for ({domain}, {vantage}, {measured_at})")]
    DuplicateSample {
        domain: String,
        vantage: String,
        measured_at: u64,
    },
    #[error("invalid {field}: {value} (expected {expected})")]
    OutOfRange {
        field: &'static str,
        value: f64,
        expected: &'static str,
    },
}

/// A registrable host name, lower-cased at construction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Domain(String);

impl Domain {
    pub fn new(name: &str) -> Result<Self, ModelError> {
        let lower = name.to_ascii_lowercase();
        if lower.is_empty() {
            return Err(ModelError::Domain(name.to_string(), "empty"));
        }
        if lower.starts_with('.') || lower.ends_with('.') {
            return Err(ModelError::Domain(name.to_string(), "leading or trailing dot"));
        }
        if lower.chars().any(|c| c.is_whitespace()) {
            return Err(ModelError::Domain(name.to_string(), "contains whitespace"));
        }
        if !lower
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'))
        {
            return Err(ModelError::Domain(name.to_string(), "non host-name character"));
        }
        Ok(Domain(lower))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Domain {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Domain::new(&s)
    }
}

impl From<Domain> for String {
    fn from(d: Domain) -> String {
        d.0
    }
}

/// Identifier of a measurement or proxy location.
///
/// Ids appear as bare tokens in the mapping and CSV formats, so whitespace
/// and commas are rejected.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VantageId(String);

impl VantageId {
    pub fn new(id: &str) -> Result<Self, ModelError> {
        if id.is_empty() {
            return Err(ModelError::Vantage(id.to_string(), "empty"));
        }
        if id.chars().any(|c| c.is_whitespace() || c == ',' || c.is_control()) {
            return Err(ModelError::Vantage(id.to_string(), "whitespace or comma"));
        }
        Ok(VantageId(id.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VantageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for VantageId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        VantageId::new(&s)
    }
}

impl From<VantageId> for String {
    fn from(v: VantageId) -> String {
        v.0
    }
}

/// One round-trip observation from a vantage point to a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub domain: Domain,
    pub vantage: VantageId,
    pub rtt_ms: f64,
    /// Unix seconds.
    pub measured_at: u64,
}

impl RttSample {
    pub fn new(
        domain: Domain,
        vantage: VantageId,
        rtt_ms: f64,
        measured_at: u64,
    ) -> Result<Self, ModelError> {
        if !rtt_ms.is_finite() || rtt_ms < 0.0 {
            return Err(ModelError::Sample(format!("rtt_ms must be finite and >= 0, got {rtt_ms}")));
        }
        if measured_at == 0 {
            return Err(ModelError::Sample("measured_at must be > 0".into()));
        }
        Ok(RttSample {
            domain,
            vantage,
            rtt_ms,
            measured_at,
        })
    }
}

/// Census substrate: RTT samples keyed by (domain, vantage, measured_at).
#[derive(Debug, Clone, Default)]
pub struct RttTable {
    samples: Vec<RttSample>,
    keys: HashSet<(Domain, VantageId, u64)>,
}

impl RttTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: impl IntoIterator<Item = RttSample>) -> Result<Self, ModelError> {
        let mut t = RttTable::new();
        for s in samples {
            t.insert(s)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, sample: RttSample) -> Result<(), ModelError> {
        let key = (sample.domain.clone(), sample.vantage.clone(), sample.measured_at);
        if !self.keys.insert(key) {
            return Err(ModelError::DuplicateSample {
                domain: sample.domain.to_string(),
                vantage: sample.vantage.to_string(),
                measured_at: sample.measured_at,
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Merges another table (e.g. one worker's results) into this one.
    pub fn merge(&mut self, other: RttTable) -> Result<(), ModelError> {
        for s in other.samples {
            self.insert(s)?;
        }
        Ok(())
    }

    pub fn samples(&self) -> &[RttSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples_for<'a>(&'a self, domain: &'a Domain) -> impl Iterator<Item = &'a RttSample> + 'a {
        self.samples.iter().filter(move |s| &s.domain == domain)
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.samples.iter().map(|s| s.domain.clone()).collect()
    }

    pub fn vantages(&self) -> BTreeSet<VantageId> {
        self.samples.iter().map(|s| s.vantage.clone()).collect()
    }

    /// Groups samples by domain, then by vantage.
    pub fn grouped(&self) -> BTreeMap<&Domain, BTreeMap<&VantageId, Vec<&RttSample>>> {
        let mut out: BTreeMap<&Domain, BTreeMap<&VantageId, Vec<&RttSample>>> = BTreeMap::new();
        for s in &self.samples {
            out.entry(&s.domain)
                .or_default()
                .entry(&s.vantage)
                .or_default()
                .push(s);
        }
        out
    }
}

/// Gilbert-Elliott two-state loss channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeParams {
    /// Good to bad transition probability.
    pub p: f64,
    /// Bad to good transition probability.
    pub r: f64,
    /// Loss probability in the bad state.
    pub one_minus_h: f64,
    /// Loss probability in the good state.
    pub one_minus_k: f64,
}

impl GeParams {
    /// Reference bursty configurations, all averaging 1.6% loss.
    pub const SET_1: GeParams = GeParams::raw(0.01096, 0.50, 0.70, 0.001);
    pub const SET_2: GeParams = GeParams::raw(0.00877, 0.40, 0.70, 0.001);
    pub const SET_3: GeParams = GeParams::raw(0.00658, 0.30, 0.70, 0.001);
    pub const SET_4: GeParams = GeParams::raw(0.00438, 0.20, 0.70, 0.001);

    pub const REFERENCE_SETS: [GeParams; 4] = [Self::SET_1, Self::SET_2, Self::SET_3, Self::SET_4];

    const fn raw(p: f64, r: f64, one_minus_h: f64, one_minus_k: f64) -> Self {
        GeParams {
            p,
            r,
            one_minus_h,
            one_minus_k,
        }
    }

    pub fn new(p: f64, r: f64, one_minus_h: f64, one_minus_k: f64) -> Result<Self, ModelError> {
        let g = GeParams::raw(p, r, one_minus_h, one_minus_k);
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_probability("p", self.p)?;
        check_probability("r", self.r)?;
        check_probability("one_minus_h", self.one_minus_h)?;
        check_probability("one_minus_k", self.one_minus_k)?;
        Ok(())
    }
}

fn check_probability(field: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfRange {
            field,
            value,
            expected: "a probability in [0, 1]",
        })
    }
}

/// Stationary average loss probability of a Gilbert-Elliott channel.
///
/// With `p = 0` the chain never leaves the good state and the result is
/// `one_minus_k`.
pub fn ge_stationary_loss(g: &GeParams) -> Result<f64, ModelError> {
    g.validate()?;
    if g.p == 0.0 {
        return Ok(g.one_minus_k);
    }
    let pi_bad = g.p / (g.p + g.r);
    Ok(pi_bad * g.one_minus_h + (1.0 - pi_bad) * g.one_minus_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossModel {
    #[default]
    None,
    Uniform { rate: f64 },
    GilbertElliott(GeParams),
}

impl LossModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            LossModel::None => Ok(()),
            LossModel::Uniform { rate } => check_probability("uniform loss rate", *rate),
            LossModel::GilbertElliott(g) => g.validate(),
        }
    }

    /// Long-run average loss probability.
    pub fn mean_loss(&self) -> Result<f64, ModelError> {
        match self {
            LossModel::None => Ok(0.0),
            LossModel::Uniform { rate } => {
                check_probability("uniform loss rate", *rate)?;
                Ok(*rate)
            }
            LossModel::GilbertElliott(g) => ge_stationary_loss(g),
        }
    }
}

/// An emulated network path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// One full round trip, seconds.
    pub rtt_s: f64,
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub loss: LossModel,
    #[serde(default = "default_init_cwnd")]
    pub init_cwnd_segments: u32,
    #[serde(default = "default_mss")]
    pub mss_bytes: u32,
}

fn default_init_cwnd() -> u32 {
    LinkSpec::LINUX_INIT_CWND
}

fn default_mss() -> u32 {
    LinkSpec::DEFAULT_MSS
}

impl LinkSpec {
    pub const LINUX_INIT_CWND: u32 = 10;
    pub const DEFAULT_MSS: u32 = 1460;

    /// Loss-free link with the Linux default initial window.
    pub fn lossless(rtt_s: f64, bandwidth_bps: f64) -> Self {
        LinkSpec {
            rtt_s,
            bandwidth_bps,
            loss: LossModel::None,
            init_cwnd_segments: Self::LINUX_INIT_CWND,
            mss_bytes: Self::DEFAULT_MSS,
        }
    }

    pub fn with_loss(mut self, loss: LossModel) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.rtt_s.is_finite() || self.rtt_s < 0.0 {
            return Err(ModelError::OutOfRange {
                field: "rtt_s",
                value: self.rtt_s,
                expected: ">= 0",
            });
        }
        if !(self.bandwidth_bps > 0.0) || !self.bandwidth_bps.is_finite() {
            return Err(ModelError::OutOfRange {
                field: "bandwidth_bps",
                value: self.bandwidth_bps,
                expected: "> 0",
            });
        }
        if self.init_cwnd_segments == 0 {
            return Err(ModelError::OutOfRange {
                field: "init_cwnd_segments",
                value: 0.0,
                expected: ">= 1",
            });
        }
        if self.mss_bytes == 0 {
            return Err(ModelError::OutOfRange {
                field: "mss_bytes",
                value: 0.0,
                expected: ">= 1",
            });
        }
        self.loss.validate()
    }

    pub fn init_cwnd_bytes(&self) -> u64 {
        self.init_cwnd_segments as u64 * self.mss_bytes as u64
    }

    /// Bandwidth-delay product in bytes.
    pub fn bdp_bytes(&self) -> f64 {
        self.bandwidth_bps * self.rtt_s / 8.0
    }
}

/// Milliseconds to seconds.
pub fn ms_to_s(ms: f64) -> f64 {
    ms / 1000.0
}

pub fn s_to_ms(s: f64) -> f64 {
    s * 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_normalizes_and_validates() {
        assert_eq!(Domain::new("Example.COM").unwrap().as_str(), "example.com");
        assert!(Domain::new("").is_err());
        assert!(Domain::new(".example.com").is_err());
        assert!(Domain::new("example.com.").is_err());
        assert!(Domain::new("exa mple.com").is_err());
        assert!(Domain::new("a,b.com").is_err());
        assert_eq!(Domain::new("A.com").unwrap(), Domain::new("a.COM").unwrap());
    }

    #[test]
    fn vantage_validates() {
        assert!(VantageId::new("us-west-2").is_ok());
        assert!(VantageId::new("").is_err());
        assert!(VantageId::new("a b").is_err());
        assert!(VantageId::new("a,b").is_err());
    }

    #[test]
    fn sample_rejects_bad_fields() {
        let d = Domain::new("x.test").unwrap();
        let v = VantageId::new("a").unwrap();
        assert!(RttSample::new(d.clone(), v.clone(), -1.0, 10).is_err());
        assert!(RttSample::new(d.clone(), v.clone(), f64::NAN, 10).is_err());
        assert!(RttSample::new(d.clone(), v.clone(), 1.0, 0).is_err());
        assert!(RttSample::new(d, v, 0.0, 1).is_ok());
    }

    #[test]
    fn table_rejects_duplicate_triples() {
        let d = Domain::new("x.test").unwrap();
        let v = VantageId::new("a").unwrap();
        let mut t = RttTable::new();
        t.insert(RttSample::new(d.clone(), v.clone(), 5.0, 100).unwrap()).unwrap();
        assert!(t.insert(RttSample::new(d.clone(), v.clone(), 6.0, 100).unwrap()).is_err());
        t.insert(RttSample::new(d, v, 6.0, 101).unwrap()).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn ge_params_validate_each_field() {
        assert!(GeParams::new(-0.1, 0.5, 0.7, 0.001).is_err());
        assert!(GeParams::new(0.1, 1.5, 0.7, 0.001).is_err());
        assert!(GeParams::new(0.1, 0.5, 1.7, 0.001).is_err());
        assert!(GeParams::new(0.1, 0.5, 0.7, -0.001).is_err());
        assert!(GeParams::new(0.0, 0.0, 0.7, 0.001).is_ok());
    }

    #[test]
    fn ge_reference_sets_average_one_point_six_percent() {
        for g in GeParams::REFERENCE_SETS {
            let loss = ge_stationary_loss(&g).unwrap();
            assert!((loss - 0.016).abs() <= 0.0005, "{g:?} -> {loss}");
        }
    }

    #[test]
    fn ge_never_leaving_good_state() {
        let g = GeParams::new(0.0, 0.3, 0.70, 0.001).unwrap();
        assert_eq!(ge_stationary_loss(&g).unwrap(), 0.001);
    }

    #[test]
    fn ge_stationary_loss_is_bounded_by_state_losses() {
        let g = GeParams::new(0.2, 0.1, 0.9, 0.05).unwrap();
        let l = ge_stationary_loss(&g).unwrap();
        assert!((0.05..=0.9).contains(&l));
    }

    #[test]
    fn link_validation() {
        let ok = LinkSpec::lossless(0.1, 10e6);
        assert!(ok.validate().is_ok());
        assert!(LinkSpec { rtt_s: -1.0, ..ok }.validate().is_err());
        assert!(LinkSpec { bandwidth_bps: 0.0, ..ok }.validate().is_err());
        assert!(LinkSpec { init_cwnd_segments: 0, ..ok }.validate().is_err());
        assert!(LinkSpec { mss_bytes: 0, ..ok }.validate().is_err());
        assert!(ok.with_loss(LossModel::Uniform { rate: 1.2 }).validate().is_err());
        assert_eq!(ok.init_cwnd_bytes(), 14_600);
    }
}
