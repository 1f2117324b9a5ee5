use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use cgn_core::census::{
    location_aggregates, mean_weighted_rtt, min_rtt, provider_share, read_alias_csv, read_geo_csv, read_org_csv,
    read_rtt_csv, read_targets, run_census, stability_diff, write_location_csv, write_rtt_csv, OrgTable, ProbeConfig,
    TcpNetwork, WeightedRttInput,
};
use cgn_core::model::{Domain, RttTable, VantageId};
use cgn_core::stats::quantile;

use crate::{invalid, open_input, runtime, Cmd, CliError, Common};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProbeArgs {
    /// Target list, one domain per line
    #[arg(long)]
    pub targets: PathBuf,
    /// Id recorded as the vantage point of every sample
    #[arg(long)]
    pub vantage: String,
    /// Connect timeout per attempt
    #[arg(long, default_value_t = 2000)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub attempts: u32,
    #[arg(long, default_value_t = 80)]
    pub port: u16,
    /// Pause between attempts on one domain
    #[arg(long, default_value_t = 0)]
    pub gap_ms: u64,
    /// Domains probed concurrently
    #[arg(long, default_value_t = 64)]
    pub workers: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for ProbeArgs {
    const NAME: &'static str = "probe";
    const ABOUT: &'static str = "Measure TCP handshake RTTs to a target list (RTT CSV)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let src = self.targets.display().to_string();
        let domains = read_targets(open_input(&self.targets)?, &src).map_err(invalid)?;
        let vantage = VantageId::new(&self.vantage).map_err(invalid)?;
        let cfg = ProbeConfig {
            timeout_ms: self.timeout_ms,
            attempts: self.attempts,
            port: self.port,
            inter_probe_gap_ms: self.gap_ms,
        };
        cfg.validate().map_err(invalid)?;
        if self.workers == 0 {
            return Err(invalid("workers must be >= 1"));
        }
        let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
        let outcome = rt
            .block_on(run_census(&domains, &vantage, &cfg, Arc::new(TcpNetwork), self.workers))
            .map_err(runtime)?;
        info!(
            measured = outcome.table.len(),
            unresolvable = outcome.unresolvable.len(),
            unreachable = outcome.unreachable.len(),
            "probe finished"
        );
        for d in outcome.unresolvable.iter().chain(&outcome.unreachable) {
            warn!(domain = %d, "no measurement");
        }
        let mut buf = Vec::new();
        write_rtt_csv(&outcome.table, &mut buf).map_err(runtime)?;
        self.common.emit(&buf)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CensusReportArgs {
    /// RTT CSVs to merge (repeatable)
    #[arg(long, required = true)]
    pub rtt: Vec<PathBuf>,
    /// Earlier RTT CSV; reports how much each domain's RTT to its best vantage moved
    #[arg(long)]
    pub before: Option<PathBuf>,
    /// Geolocation CSV (domain,lat,lon); requires --locations-out
    #[arg(long, requires = "locations_out")]
    pub geo: Option<PathBuf>,
    /// Where to write per-location aggregates (lat,lon,domain_count,mean_rtt_ms)
    #[arg(long)]
    pub locations_out: Option<PathBuf>,
    /// Organization CSV (domain,orgname)
    #[arg(long)]
    pub orgs: Option<PathBuf>,
    /// Organization alias CSV (alias,canonical)
    #[arg(long, requires = "orgs")]
    pub aliases: Option<PathBuf>,
    /// Providers listed in the share ranking
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Bytes fetched per domain (domain,bytes) for the byte-weighted mean RTT
    #[arg(long)]
    pub page_bytes: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Serialize)]
struct Distribution {
    mean_ms: f64,
    median_ms: f64,
    p80_ms: f64,
    p90_ms: f64,
    max_ms: f64,
}

#[derive(Debug, Serialize)]
struct Stability {
    compared: usize,
    missing: usize,
    median_ms: f64,
    p80_ms: f64,
}

#[derive(Debug, Serialize)]
struct Share {
    org: String,
    share: f64,
}

#[derive(Debug, Serialize)]
struct Weighted {
    mean_weighted_rtt_ms: f64,
    domains_used: usize,
    domains_without_rtt: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    domains: usize,
    vantages: usize,
    samples: usize,
    min_rtt: Distribution,
    /// Domains whose minimum RTT is at each vantage.
    best_vantage: BTreeMap<VantageId, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stability: Option<Stability>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provider_share: Option<Vec<Share>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weighted: Option<Weighted>,
}

fn read_rtt(path: &Path) -> Result<RttTable, CliError> {
    read_rtt_csv(open_input(path)?, &path.display().to_string()).map_err(invalid)
}

fn read_page_bytes(path: &Path) -> Result<Vec<(Domain, u64)>, CliError> {
    let src = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open_input(path)?);
    let header = rdr.headers().map_err(|e| invalid(format!("{src}: {e}")))?.clone();
    if header.iter().collect::<Vec<_>>() != ["domain", "bytes"] {
        return Err(invalid(format!("{src}: header must be domain,bytes")));
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let bad = |m: String| invalid(format!("{src}:{}: {m}", i + 2));
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let d = Domain::new(&rec[0]).map_err(|e| bad(e.to_string()))?;
            let b: u64 = rec[1].parse().map_err(|_| bad(format!("bad byte count {:?}", &rec[1])))?;
            Ok((d, b))
        })
        .collect()
}

impl Cmd for CensusReportArgs {
    const NAME: &'static str = "census-report";
    const ABOUT: &'static str = "Summarize census RTTs: distribution, stability, providers, locations (JSON)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let mut table = RttTable::new();
        for p in &self.rtt {
            table.merge(read_rtt(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        }
        if table.is_empty() {
            return Err(invalid("no RTT samples"));
        }

        let mut best = BTreeMap::new();
        let mut minima = Vec::new();
        for d in table.domains() {
            let (v, rtt) = min_rtt(&table, &d).map_err(invalid)?;
            minima.push(rtt);
            best.insert(d, v);
        }
        let q = |p: f64| quantile(&minima, p).unwrap_or(f64::NAN);
        let distribution = Distribution {
            mean_ms: minima.iter().sum::<f64>() / minima.len() as f64,
            median_ms: q(0.5),
            p80_ms: q(0.8),
            p90_ms: q(0.9),
            max_ms: minima.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let mut best_vantage = BTreeMap::new();
        for v in best.values() {
            *best_vantage.entry(v.clone()).or_insert(0) += 1;
        }

        let stability = match &self.before {
            Some(p) => {
                let r = stability_diff(&read_rtt(p)?, &table, &best).map_err(invalid)?;
                Some(Stability {
                    compared: r.changes.len(),
                    missing: r.missing.len(),
                    median_ms: r.median_ms,
                    p80_ms: r.p80_ms,
                })
            }
            None => None,
        };

        let provider_share = match &self.orgs {
            Some(p) => {
                let rows = read_org_csv(open_input(p)?, &p.display().to_string()).map_err(invalid)?;
                let aliases = match &self.aliases {
                    Some(a) => read_alias_csv(open_input(a)?, &a.display().to_string()).map_err(invalid)?,
                    None => BTreeMap::new(),
                };
                let orgs = OrgTable::new(rows, aliases).map_err(invalid)?;
                let ranked = provider_share(&orgs, self.top_k).map_err(invalid)?;
                Some(ranked.into_iter().map(|(org, share)| Share { org, share }).collect())
            }
            None => None,
        };

        let weighted = match &self.page_bytes {
            Some(p) => {
                let mut input = WeightedRttInput::default();
                let mut without = 0;
                for (d, bytes) in read_page_bytes(p)? {
                    match min_rtt(&table, &d) {
                        Ok((_, rtt)) => input.push(d, bytes, rtt),
                        Err(_) => without += 1,
                    }
                }
                Some(Weighted {
                    mean_weighted_rtt_ms: mean_weighted_rtt(&input).map_err(invalid)?,
                    domains_used: input.entries.len(),
                    domains_without_rtt: without,
                })
            }
            None => None,
        };

        if let (Some(g), Some(out)) = (&self.geo, &self.locations_out) {
            let geo = read_geo_csv(open_input(g)?, &g.display().to_string()).map_err(invalid)?;
            let mut buf = Vec::new();
            write_location_csv(&location_aggregates(&table, &geo), &mut buf).map_err(runtime)?;
            cgn_core::fsutil::write_atomic(out, &buf).map_err(|e| runtime(format!("writing {}: {e}", out.display())))?;
        }

        let report = Report {
            domains: best.len(),
            vantages: table.vantages().len(),
            samples: table.len(),
            min_rtt: distribution,
            best_vantage,
            stability,
            provider_share,
            weighted,
        };
        let mut s = serde_json::to_string_pretty(&report).map_err(runtime)?;
        s.push('\n');
        self.common.emit(s.as_bytes())
    }
}
