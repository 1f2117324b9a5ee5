//! TCP handshake timing against web servers.
//!
//! A probe times a full TCP connect; the SYN/SYN-ACK exchange dominates the
//! measured interval.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{definitive_rtt, CensusError};
use crate::model::{Domain, RttSample, RttTable, VantageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub timeout_ms: u64,
    pub attempts: u32,
    pub port: u16,
    pub inter_probe_gap_ms: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            timeout_ms: 2000,
            attempts: 3,
            port: 80,
            inter_probe_gap_ms: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), CensusError> {
        if self.timeout_ms < 1 {
            return Err(CensusError::Config("timeout_ms must be >= 1"));
        }
        if self.attempts < 1 {
            return Err(CensusError::Config("attempts must be >= 1"));
        }
        Ok(())
    }
}

/// Clock and network capability used by the prober.
pub trait ProbeNetwork: Send + Sync {
    fn resolve(
        &self,
        host: &str,
        port: u16,
    ) -> impl Future<Output = io::Result<Vec<SocketAddr>>> + Send;

    /// Completes once the TCP handshake with `addr` has finished.
    fn connect(&self, addr: SocketAddr) -> impl Future<Output = io::Result<()>> + Send;

    fn now_unix(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(1)
            .max(1)
    }
}

/// The host's resolver and TCP stack.
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpNetwork;

impl ProbeNetwork for TcpNetwork {
    async fn resolve(&self, host: &str, port: u16) -> io::Result<Vec<SocketAddr>> {
        let addrs: Vec<SocketAddr> = tokio::net::lookup_host((host, port)).await?.collect();
        Ok(addrs)
    }

    async fn connect(&self, addr: SocketAddr) -> io::Result<()> {
        let stream = tokio::net::TcpStream::connect(addr).await?;
        drop(stream);
        Ok(())
    }
}

/// Probes one domain `cfg.attempts` times. Failed or timed-out attempts are
/// dropped; at least one sample is returned on success.
pub async fn probe_domain<N: ProbeNetwork>(
    domain: &Domain,
    vantage: &VantageId,
    cfg: &ProbeConfig,
    net: &N,
) -> Result<Vec<RttSample>, CensusError> {
    cfg.validate()?;
    let addrs = net
        .resolve(domain.as_str(), cfg.port)
        .await
        .map_err(|_| CensusError::Unresolvable(domain.clone()))?;
    // Prefer IPv4; the census compares like with like.
    let addr = addrs
        .iter()
        .find(|a| a.is_ipv4())
        .or_else(|| addrs.first())
        .copied()
        .ok_or_else(|| CensusError::Unresolvable(domain.clone()))?;

    let timeout = Duration::from_millis(cfg.timeout_ms);
    let mut samples = Vec::with_capacity(cfg.attempts as usize);
    for attempt in 0..cfg.attempts {
        if attempt > 0 && cfg.inter_probe_gap_ms > 0 {
            tokio::time::sleep(Duration::from_millis(cfg.inter_probe_gap_ms)).await;
        }
        let measured_at = net.now_unix();
        let start = Instant::now();
        match tokio::time::timeout(timeout, net.connect(addr)).await {
            Ok(Ok(())) => {
                let rtt_ms = start.elapsed().as_secs_f64() * 1000.0;
                samples.push(RttSample::new(
                    domain.clone(),
                    vantage.clone(),
                    rtt_ms,
                    measured_at,
                )?);
            }
            Ok(Err(e)) => debug!(%domain, %addr, attempt, error = %e, "probe failed"),
            Err(_) => debug!(%domain, %addr, attempt, "probe timed out"),
        }
    }
    if samples.is_empty() {
        return Err(CensusError::Unreachable(domain.clone()));
    }
    Ok(samples)
}

/// Result of probing a target list from one vantage point.
#[derive(Debug, Default)]
pub struct CensusOutcome {
    /// One definitive (minimum) sample per reachable domain.
    pub table: RttTable,
    pub unresolvable: Vec<Domain>,
    pub unreachable: Vec<Domain>,
}

/// Probes all domains with at most `workers` probes in flight and merges the
/// results. Output order does not depend on completion order.
pub async fn run_census<N: ProbeNetwork + 'static>(
    domains: &[Domain],
    vantage: &VantageId,
    cfg: &ProbeConfig,
    net: Arc<N>,
    workers: usize,
) -> Result<CensusOutcome, CensusError> {
    cfg.validate()?;
    let mut results: Vec<(Domain, Result<Vec<RttSample>, CensusError>)> =
        stream::iter(domains.iter().cloned())
            .map(|domain| {
                let net = Arc::clone(&net);
                let vantage = vantage.clone();
                let cfg = *cfg;
                async move {
                    let r = probe_domain(&domain, &vantage, &cfg, net.as_ref()).await;
                    (domain, r)
                }
            })
            .buffer_unordered(workers.max(1))
            .collect()
            .await;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = CensusOutcome::default();
    for (domain, r) in results {
        match r {
            Ok(samples) => {
                let rtt = definitive_rtt(&samples)?;
                let measured_at = samples[0].measured_at;
                out.table.insert(RttSample::new(
                    domain,
                    vantage.clone(),
                    rtt,
                    measured_at,
                )?)?;
            }
            Err(CensusError::Unresolvable(d)) => out.unresolvable.push(d),
            Err(CensusError::Unreachable(d)) => out.unreachable.push(d),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
