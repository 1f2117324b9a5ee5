use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::info;

use cgn_core::census::read_rtt_csv;
use cgn_core::mapping::{build, unix_now, ProxyEndpoint};
use cgn_core::model::VantageId;
use cgn_core::siteselect::{
    gain_curve, read_matrix_csv, select_brute_force, select_heuristic, HeuristicConfig, Objective, SelectionProblem,
    SelectionReport, DEFAULT_SUBSET_CAP,
};

use crate::{invalid, open_input, runtime, Cmd, CliError, Common};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SelectArgs {
    /// Matrix CSV: domain,<location>,... with empty cells for missing RTTs
    #[arg(long, conflicts_with = "rtt")]
    pub matrix: Option<PathBuf>,
    /// RTT CSV (domain,vantage,rtt_ms,measured_at); vantages are the candidate locations
    #[arg(long)]
    pub rtt: Option<PathBuf>,
    /// Number of locations to choose
    #[arg(long)]
    pub budget: usize,
    /// median, average or p95
    #[arg(long, default_value = "median")]
    pub objective: String,
    /// Locations searched exhaustively per round
    #[arg(long, default_value_t = 20)]
    pub pool_size: usize,
    /// Locations carried into the next round
    #[arg(long, default_value_t = 15)]
    pub keep_size: usize,
    #[arg(long, default_value_t = 8)]
    pub rounds: usize,
    /// Enumerate every subset instead of running the heuristic
    #[arg(long)]
    pub exact: bool,
    /// Also write budget,value_ms,gain_ms for budgets 1..=budget to this CSV
    #[arg(long)]
    pub gain_out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl SelectArgs {
    fn problem(&self, objective: Objective) -> Result<SelectionProblem, CliError> {
        match (&self.matrix, &self.rtt) {
            (Some(p), None) => {
                read_matrix_csv(open_input(p)?, self.budget, objective).map_err(|e| invalid(format!("{}: {e}", p.display())))
            }
            (None, Some(p)) => {
                let table = read_rtt_csv(open_input(p)?, &p.display().to_string()).map_err(invalid)?;
                SelectionProblem::from_table(&table, self.budget, objective).map_err(invalid)
            }
            _ => Err(invalid("pass exactly one of --matrix or --rtt")),
        }
    }
}

impl Cmd for SelectArgs {
    const NAME: &'static str = "select";
    const ABOUT: &'static str = "Choose proxy locations minimizing an RTT objective (JSON)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn effective_seed(&self) -> Option<u64> {
        Some(self.common.seed_or_default())
    }
    fn run(&self) -> Result<(), CliError> {
        let objective: Objective = self.objective.parse().map_err(invalid)?;
        let problem = self.problem(objective)?;
        let hc = HeuristicConfig {
            pool_size: self.pool_size,
            keep_size: self.keep_size,
            rounds: self.rounds,
            seed: self.common.seed_or_default(),
        };
        let result = if self.exact {
            select_brute_force(&problem, DEFAULT_SUBSET_CAP).map_err(invalid)?
        } else {
            select_heuristic(&problem, &hc).map_err(invalid)?
        };
        info!(value_ms = result.objective_value, rounds = result.rounds_used, "selected");
        if let Some(path) = &self.gain_out {
            let curve = gain_curve(&problem, self.budget, &hc).map_err(invalid)?;
            let mut csv = String::from("budget,value_ms,gain_ms\n");
            for g in curve {
                let gain = g.gain_ms.map(|x| format!("{x:.3}")).unwrap_or_default();
                csv.push_str(&format!("{},{:.3},{gain}\n", g.budget, g.value_ms));
            }
            cgn_core::fsutil::write_atomic(path, csv.as_bytes())
                .map_err(|e| runtime(format!("writing {}: {e}", path.display())))?;
        }
        let report = SelectionReport {
            chosen: result.chosen,
            objective,
            value_ms: result.objective_value,
            budget: self.budget,
            seed: hc.seed,
        };
        let mut s = serde_json::to_string_pretty(&report).map_err(runtime)?;
        s.push('\n');
        self.common.emit(s.as_bytes())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MapArgs {
    /// RTT CSV (domain,vantage,rtt_ms,measured_at)
    #[arg(long)]
    pub rtt: PathBuf,
    /// Proxy CSV: proxy_id,address (host:port), one row per vantage
    #[arg(long)]
    pub proxies: PathBuf,
    /// Build timestamp (unix seconds); the current time when unset
    #[arg(long)]
    pub built_at: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn read_proxies(path: &std::path::Path) -> Result<Vec<ProxyEndpoint>, CliError> {
    let src = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open_input(path)?);
    let header = rdr.headers().map_err(|e| invalid(format!("{src}: {e}")))?.clone();
    if header.iter().collect::<Vec<_>>() != ["proxy_id", "address"] {
        return Err(invalid(format!("{src}: header must be proxy_id,address")));
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let bad = |m: String| invalid(format!("{src}:{}: {m}", i + 2));
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let id = VantageId::new(&rec[0]).map_err(|e| bad(e.to_string()))?;
            ProxyEndpoint::new(id, &rec[1]).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

impl Cmd for MapArgs {
    const NAME: &'static str = "map";
    const ABOUT: &'static str = "Build the domain-to-proxy mapping file from census RTTs";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let table = read_rtt_csv(open_input(&self.rtt)?, &self.rtt.display().to_string()).map_err(invalid)?;
        let endpoints = read_proxies(&self.proxies)?;
        let built_at = self.built_at.unwrap_or_else(unix_now);
        let mapping = build(&table, endpoints, built_at).map_err(invalid)?;
        info!(domains = mapping.len(), built_at, "built mapping");
        self.common.emit(mapping.serialize().as_bytes())
    }
}
