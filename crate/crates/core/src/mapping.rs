//! The domain to gathering-proxy mapping file clients download.
//!
//! Text format, LF line endings, sorted for byte-exact reproducibility:
//!
//! ```text
//! cgnmap v1 built_at=<unix>
//! !proxy <id> <host:port>
//! <domain>,<proxy_id>,<rtt_ms with 3 decimals>,<measured_at>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::model::{Domain, ModelError, RttTable, VantageId};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("rtt table is empty")]
    EmptyTable,
    #[error("vantage {0} has no endpoint")]
    UnknownProxy(VantageId),
    #[error("invalid endpoint address {0:?}")]
    Address(String),
    #[error("duplicate endpoint {0}")]
    DuplicateEndpoint(VantageId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported mapping format version {0}")]
    Version(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyEndpoint {
    pub proxy_id: VantageId,
    pub host: String,
    pub port: u16,
}

impl ProxyEndpoint {
    pub fn new(proxy_id: VantageId, address: &str) -> Result<Self, MappingError> {
        let (host, port) = address
            .rsplit_once(':')
            .ok_or_else(|| MappingError::Address(address.to_string()))?;
        let port: u16 = port
            .parse()
            .map_err(|_| MappingError::Address(address.to_string()))?;
        if port == 0 || host.is_empty() || host.contains(|c: char| c.is_whitespace() || c == ',') {
            return Err(MappingError::Address(address.to_string()));
        }
        Ok(ProxyEndpoint {
            proxy_id,
            host: host.to_string(),
            port,
        })
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingEntry {
    pub domain: Domain,
    pub proxy_id: VantageId,
    /// Stored at millisecond-thousandths precision, the file's resolution.
    pub rtt_ms: f64,
    pub measured_at: u64,
}

fn round_3dp(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingTable {
    pub version: u32,
    endpoints: BTreeMap<VantageId, ProxyEndpoint>,
    entries: BTreeMap<Domain, MappingEntry>,
    pub built_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup<'a> {
    Fresh(&'a ProxyEndpoint),
    /// Older than the freshness bound but still routable.
    Stale(&'a ProxyEndpoint),
    Miss,
}

impl Lookup<'_> {
    pub fn endpoint(&self) -> Option<&ProxyEndpoint> {
        match self {
            Lookup::Fresh(e) | Lookup::Stale(e) => Some(e),
            Lookup::Miss => None,
        }
    }
}

impl MappingTable {
    pub fn new(
        endpoints: Vec<ProxyEndpoint>,
        entries: Vec<MappingEntry>,
        built_at: u64,
    ) -> Result<Self, MappingError> {
        let mut t = MappingTable {
            version: FORMAT_VERSION,
            endpoints: BTreeMap::new(),
            entries: BTreeMap::new(),
            built_at,
        };
        for e in endpoints {
            t.add_endpoint(e)?;
        }
        for e in entries {
            t.add_entry(e)?;
        }
        Ok(t)
    }

    fn add_endpoint(&mut self, e: ProxyEndpoint) -> Result<(), MappingError> {
        if self.endpoints.contains_key(&e.proxy_id) {
            return Err(MappingError::DuplicateEndpoint(e.proxy_id));
        }
        self.endpoints.insert(e.proxy_id.clone(), e);
        Ok(())
    }

    /// Adds or replaces the entry for a domain.
    fn add_entry(&mut self, mut e: MappingEntry) -> Result<(), MappingError> {
        if !self.endpoints.contains_key(&e.proxy_id) {
            return Err(MappingError::UnknownProxy(e.proxy_id));
        }
        if !e.rtt_ms.is_finite() || e.rtt_ms < 0.0 {
            return Err(ModelError::Sample(format!("rtt_ms {}", e.rtt_ms)).into());
        }
        e.rtt_ms = round_3dp(e.rtt_ms);
        self.entries.insert(e.domain.clone(), e);
        Ok(())
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &ProxyEndpoint> {
        self.endpoints.values()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MappingEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, domain: &Domain) -> Option<&MappingEntry> {
        self.entries.get(domain)
    }

    pub fn endpoint(&self, id: &VantageId) -> Option<&ProxyEndpoint> {
        self.endpoints.get(id)
    }

    /// Exact-domain lookup; an entry is fresh while `now - measured_at <= max_age_s`.
    pub fn lookup_at(&self, host: &Domain, max_age_s: u64, now: u64) -> Lookup<'_> {
        let Some(entry) = self.entries.get(host) else {
            return Lookup::Miss;
        };
        let Some(ep) = self.endpoints.get(&entry.proxy_id) else {
            return Lookup::Miss;
        };
        if now.saturating_sub(entry.measured_at) <= max_age_s {
            Lookup::Fresh(ep)
        } else {
            Lookup::Stale(ep)
        }
    }

    pub fn lookup(&self, host: &Domain, max_age_s: u64) -> Lookup<'_> {
        self.lookup_at(host, max_age_s, unix_now())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::with_capacity(64 + self.entries.len() * 48);
        let _ = writeln!(out, "cgnmap v{} built_at={}", self.version, self.built_at);
        for e in self.endpoints.values() {
            let _ = writeln!(out, "!proxy {} {}", e.proxy_id, e.address());
        }
        for e in self.entries.values() {
            let _ = writeln!(
                out,
                "{},{},{:.3},{}",
                e.domain, e.proxy_id, e.rtt_ms, e.measured_at
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, MappingError> {
        let err = |line: usize, msg: &str| MappingError::Parse {
            line,
            msg: msg.to_string(),
        };
        if text.is_empty() {
            return Err(err(1, "empty file"));
        }
        if !text.ends_with('\n') {
            let last = text.lines().count();
            return Err(err(last, "truncated: final line is not terminated"));
        }
        let mut lines = text.split_terminator('\n').enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let rest = header
            .strip_prefix("cgnmap v")
            .ok_or_else(|| err(1, "bad header"))?;
        let (version, built) = rest.split_once(' ').ok_or_else(|| err(1, "bad header"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(MappingError::Version(version.to_string()));
        }
        let built_at: u64 = built
            .strip_prefix("built_at=")
            .and_then(|b| b.parse().ok())
            .ok_or_else(|| err(1, "bad built_at"))?;

        let mut table = MappingTable {
            version: FORMAT_VERSION,
            endpoints: BTreeMap::new(),
            entries: BTreeMap::new(),
            built_at,
        };
        let mut in_entries = false;
        for (i, line) in lines {
            let n = i + 1;
            if let Some(ep) = line.strip_prefix("!proxy ") {
                if in_entries {
                    return Err(err(n, "endpoint after entries"));
                }
                let (id, addr) = ep.split_once(' ').ok_or_else(|| err(n, "bad endpoint line"))?;
                let id = VantageId::new(id).map_err(|e| err(n, &e.to_string()))?;
                let endpoint = ProxyEndpoint::new(id, addr).map_err(|e| err(n, &e.to_string()))?;
                table.add_endpoint(endpoint).map_err(|e| err(n, &e.to_string()))?;
                continue;
            }
            in_entries = true;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(err(n, "expected 4 comma-separated fields"));
            }
            let domain = Domain::new(fields[0]).map_err(|e| err(n, &e.to_string()))?;
            if table.entries.contains_key(&domain) {
                return Err(err(n, "duplicate domain"));
            }
            let proxy_id = VantageId::new(fields[1]).map_err(|e| err(n, &e.to_string()))?;
            let rtt_ms: f64 = fields[2].parse().map_err(|_| err(n, "bad rtt_ms"))?;
            let measured_at: u64 = fields[3].parse().map_err(|_| err(n, "bad measured_at"))?;
            table
                .add_entry(MappingEntry {
                    domain,
                    proxy_id,
                    rtt_ms,
                    measured_at,
                })
                .map_err(|e| err(n, &e.to_string()))?;
        }
        Ok(table)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Maps every domain in the census to its lowest-RTT vantage (ties go to the
/// smallest id). `measured_at` is taken from the minimizing sample, the most
/// recent one if several share the minimum.
pub fn build(
    table: &RttTable,
    endpoints: Vec<ProxyEndpoint>,
    built_at: u64,
) -> Result<MappingTable, MappingError> {
    if table.is_empty() {
        return Err(MappingError::EmptyTable);
    }
    let mut mapping = MappingTable::new(endpoints, Vec::new(), built_at)?;
    for v in table.vantages() {
        if !mapping.endpoints.contains_key(&v) {
            return Err(MappingError::UnknownProxy(v));
        }
    }
    for (domain, by_vantage) in table.grouped() {
        let mut best: Option<(&VantageId, f64, u64)> = None;
        for (vantage, samples) in by_vantage {
            // Definitive rtt on this vantage, with the newest sample at that value.
            let mut def: Option<(f64, u64)> = None;
            for s in samples {
                def = match def {
                    Some((r, at)) if r < s.rtt_ms || (r == s.rtt_ms && at >= s.measured_at) => {
                        Some((r, at))
                    }
                    _ => Some((s.rtt_ms, s.measured_at)),
                };
            }
            let (rtt, at) = def.expect("grouped vantage has samples");
            // Vantages iterate in ascending order, so strict `<` keeps the smallest id on ties.
            if best.map(|(_, b, _)| rtt < b).unwrap_or(true) {
                best = Some((vantage, rtt, at));
            }
        }
        let (proxy, rtt, at) = best.expect("grouped domain has samples");
        mapping.add_entry(MappingEntry {
            domain: domain.clone(),
            proxy_id: proxy.clone(),
            rtt_ms: rtt,
            measured_at: at,
        })?;
    }
    Ok(mapping)
}
