//! Latency census: per-domain RTT aggregation, stability checks, byte-weighted
//! RTT and hosting-provider shares.

mod io;
mod probe;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::{Domain, RttSample, RttTable, VantageId};
use crate::stats::nearest_rank;

pub use io::{
    read_alias_csv, read_geo_csv, read_org_csv, read_rtt_csv, read_targets, write_location_csv,
    write_rtt_csv,
};
pub use probe::{probe_domain, run_census, CensusOutcome, ProbeConfig, ProbeNetwork, TcpNetwork};

#[derive(Debug, Error)]
pub enum CensusError {
    #[error("no samples for domain {0}")]
    MissingDomain(Domain),
    #[error("no samples to aggregate")]
    NoSamples,
    #[error("no domain is present in both tables on its paired vantage")]
    EmptyIntersection,
    #[error("total byte weight is zero; weighted mean is undefined")]
    ZeroWeight,
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error("no rows with a valid orgname")]
    NoValidOrgs,
    #[error("alias map is not idempotent: canonical {canonical:?} maps to {maps_to:?}")]
    AliasNotIdempotent { canonical: String, maps_to: String },
    #[error("could not resolve {0}")]
    Unresolvable(Domain),
    #[error("all probe attempts to {0} failed")]
    Unreachable(Domain),
    #[error("invalid probe config: {0}")]
    Config(&'static str),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Minimum RTT for a domain over all vantages; ties go to the smallest id.
pub fn min_rtt(table: &RttTable, domain: &Domain) -> Result<(VantageId, f64), CensusError> {
    let mut best: Option<(&VantageId, f64)> = None;
    for s in table.samples_for(domain) {
        best = match best {
            None => Some((&s.vantage, s.rtt_ms)),
            Some((v, r)) if s.rtt_ms < r || (s.rtt_ms == r && &s.vantage < v) => {
                Some((&s.vantage, s.rtt_ms))
            }
            keep => keep,
        };
    }
    best.map(|(v, r)| (v.clone(), r))
        .ok_or_else(|| CensusError::MissingDomain(domain.clone()))
}

/// The definitive RTT of repeated measurements of one (domain, vantage) pair
/// is their minimum.
pub fn definitive_rtt(samples: &[RttSample]) -> Result<f64, CensusError> {
    samples
        .iter()
        .map(|s| s.rtt_ms)
        .min_by(f64::total_cmp)
        .ok_or(CensusError::NoSamples)
}

fn definitive_on(table: &RttTable, domain: &Domain, vantage: &VantageId) -> Option<f64> {
    table
        .samples_for(domain)
        .filter(|s| &s.vantage == vantage)
        .map(|s| s.rtt_ms)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// Absolute change in definitive RTT per domain, milliseconds.
    pub changes: BTreeMap<Domain, f64>,
    /// Domains that lacked data on the paired vantage in either table.
    pub missing: Vec<Domain>,
    pub median_ms: f64,
    pub p80_ms: f64,
}

/// Compares two measurement rounds on each domain's paired vantage.
pub fn stability_diff(
    before: &RttTable,
    after: &RttTable,
    pairing: &BTreeMap<Domain, VantageId>,
) -> Result<StabilityReport, CensusError> {
    let mut changes = BTreeMap::new();
    let mut missing = Vec::new();
    for (domain, vantage) in pairing {
        match (
            definitive_on(before, domain, vantage),
            definitive_on(after, domain, vantage),
        ) {
            (Some(b), Some(a)) => {
                changes.insert(domain.clone(), (a - b).abs());
            }
            _ => missing.push(domain.clone()),
        }
    }
    if changes.is_empty() {
        return Err(CensusError::EmptyIntersection);
    }
    let mut sorted: Vec<f64> = changes.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    Ok(StabilityReport {
        median_ms: nearest_rank(&sorted, 0.5).unwrap_or(0.0),
        p80_ms: nearest_rank(&sorted, 0.8).unwrap_or(0.0),
        changes,
        missing,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEntry {
    pub domain: Domain,
    pub bytes: u64,
    pub rtt_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedRttInput {
    pub entries: Vec<WeightedEntry>,
}

impl WeightedRttInput {
    pub fn push(&mut self, domain: Domain, bytes: u64, rtt_ms: f64) {
        self.entries.push(WeightedEntry {
            domain,
            bytes,
            rtt_ms,
        });
    }
}

/// Mean RTT weighted by the bytes fetched from each domain.
pub fn mean_weighted_rtt(input: &WeightedRttInput) -> Result<f64, CensusError> {
    let total: f64 = input.entries.iter().map(|e| e.bytes as f64).sum();
    if total <= 0.0 {
        return Err(CensusError::ZeroWeight);
    }
    let weighted: f64 = input
        .entries
        .iter()
        .map(|e| e.bytes as f64 * e.rtt_ms)
        .sum();
    Ok(weighted / total)
}

/// Whois-style organization rows plus an alias map folding related names.
#[derive(Debug, Clone, Default)]
pub struct OrgTable {
    rows: Vec<(Domain, String)>,
    aliases: BTreeMap<String, String>,
}

impl OrgTable {
    pub fn new(
        rows: Vec<(Domain, String)>,
        aliases: BTreeMap<String, String>,
    ) -> Result<Self, CensusError> {
        for canonical in aliases.values() {
            if let Some(target) = aliases.get(canonical) {
                if target != canonical {
                    return Err(CensusError::AliasNotIdempotent {
                        canonical: canonical.clone(),
                        maps_to: target.clone(),
                    });
                }
            }
        }
        Ok(OrgTable { rows, aliases })
    }

    pub fn canonical<'a>(&'a self, org: &'a str) -> &'a str {
        self.aliases.get(org).map(String::as_str).unwrap_or(org)
    }
}

/// Ranks organizations by the fraction of domains (with a valid orgname)
/// they host. Each domain counts once, by its first row.
pub fn provider_share(table: &OrgTable, top_k: usize) -> Result<Vec<(String, f64)>, CensusError> {
    if top_k == 0 {
        return Err(CensusError::ZeroTopK);
    }
    let mut seen = BTreeSet::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut valid = 0usize;
    for (domain, org) in &table.rows {
        if !seen.insert(domain) {
            continue;
        }
        let org = org.trim();
        if org.is_empty() {
            continue;
        }
        valid += 1;
        *counts.entry(table.canonical(org)).or_default() += 1;
    }
    if valid == 0 {
        return Err(CensusError::NoValidOrgs);
    }
    let mut ranked: Vec<(String, f64)> = counts
        .into_iter()
        .map(|(org, n)| (org.to_string(), n as f64 / valid as f64))
        .collect();
    // BTreeMap order already gives ascending names for equal fractions.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.truncate(top_k);
    Ok(ranked)
}

/// Per-location aggregate for map plotting; coordinates rounded to 0.1 degree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationAggregate {
    pub lat: f64,
    pub lon: f64,
    pub domain_count: usize,
    pub mean_rtt_ms: f64,
}

/// Groups each domain's minimum RTT by rounded location. Domains without a
/// geolocation row are skipped.
pub fn location_aggregates(
    table: &RttTable,
    geo: &BTreeMap<Domain, (f64, f64)>,
) -> Vec<LocationAggregate> {
    let mut cells: BTreeMap<(i64, i64), (usize, f64)> = BTreeMap::new();
    for domain in table.domains() {
        let Some(&(lat, lon)) = geo.get(&domain) else {
            continue;
        };
        let Ok((_, rtt)) = min_rtt(table, &domain) else {
            continue;
        };
        let key = ((lat * 10.0).round() as i64, (lon * 10.0).round() as i64);
        let cell = cells.entry(key).or_default();
        cell.0 += 1;
        cell.1 += rtt;
    }
    cells
        .into_iter()
        .map(|((lat, lon), (n, sum))| LocationAggregate {
            lat: lat as f64 / 10.0,
            lon: lon as f64 / 10.0,
            domain_count: n,
            mean_rtt_ms: sum / n as f64,
        })
        .collect()
}
