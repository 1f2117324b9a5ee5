use clap::Args;
use serde::{Deserialize, Serialize};

use cgn_core::pagesim::{read_sweep_csv, rows_by_mode};
use cgn_core::perfmodel::{
    cost_per_user_month, crossover_rtt, fit_linear, normalized_comparison, preset, r_squared, CoefficientPreset,
    CostInputs, IdealModels, LatencyDecomposition, LinearFit,
};

use crate::{invalid, read_input, Cmd, CliError, Common};

fn json(v: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(invalid)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn named_preset(name: &str) -> Result<CoefficientPreset, CliError> {
    preset(name).ok_or_else(|| invalid(format!("unknown preset {name:?} (final, workshop)")))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Sweep CSV (mode,rtt_ms,median_viz85_s,median_full_load_s)
    #[arg(long)]
    pub csv: std::path::PathBuf,
    /// Mode label to fit
    #[arg(long, default_value = "default")]
    pub mode: String,
    /// Load-time column: viz85 or full_load
    #[arg(long, default_value = "viz85")]
    pub metric: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    mode: &'a str,
    metric: &'a str,
    points: usize,
    slope: f64,
    intercept: f64,
    r_squared: f64,
}

impl Cmd for FitArgs {
    const NAME: &'static str = "fit";
    const ABOUT: &'static str = "Least-squares line of load time (s) against RTT (s) for one mode";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let rows = read_sweep_csv(&read_input(&self.csv)?).map_err(|e| invalid(format!("{}: {e}", self.csv.display())))?;
        let by_mode = rows_by_mode(&rows);
        let series = by_mode
            .get(self.mode.as_str())
            .ok_or_else(|| invalid(format!("no rows for mode {:?}", self.mode)))?;
        let points: Vec<(f64, f64)> = match self.metric.as_str() {
            "viz85" => series.iter().map(|r| (r.rtt_ms / 1000.0, r.median_viz85_s)).collect(),
            "full_load" => series.iter().map(|r| (r.rtt_ms / 1000.0, r.median_full_load_s)).collect(),
            m => return Err(invalid(format!("unknown metric {m:?} (viz85, full_load)"))),
        };
        let fit = fit_linear(&points).map_err(invalid)?;
        self.common.emit(&json(&FitOutput {
            mode: &self.mode,
            metric: &self.metric,
            points: points.len(),
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: r_squared(&fit, &points),
        })?)
    }
}

/// `a,b,c` or an inclusive range `start:stop:step`.
pub fn parse_values(list: &str) -> Result<Vec<f64>, CliError> {
    let bad = || invalid(format!("bad value list {list:?}"));
    let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
    let parts: Vec<&str> = list.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(bad());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n).map(|k| start + k as f64 * step).collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Last-mile RTTs in ms: a,b,c or start:stop:step
    #[arg(long, default_value = "0:200:10")]
    pub rtt_lm_ms: String,
    /// Extra distance to the server in ms: a,b,c or start:stop:step
    #[arg(long, default_value = "0,25,50,100,200")]
    pub delta_ms: String,
    /// Emit the full cross product instead of pairing values position by position
    #[arg(long)]
    pub grid: bool,
    /// Coefficient preset for the fetch-vs-default ratio: final or workshop
    #[arg(long, default_value = "final")]
    pub preset: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl CompareArgs {
    fn pairs(&self) -> Result<Vec<(f64, f64)>, CliError> {
        let lm = parse_values(&self.rtt_lm_ms)?;
        let delta = parse_values(&self.delta_ms)?;
        if self.grid {
            return Ok(delta.iter().flat_map(|&d| lm.iter().map(move |&l| (l, d))).collect());
        }
        match (lm.len(), delta.len()) {
            (a, b) if a == b => Ok(lm.into_iter().zip(delta).collect()),
            (1, _) => Ok(delta.into_iter().map(|d| (lm[0], d)).collect()),
            (_, 1) => Ok(lm.into_iter().map(|l| (l, delta[0])).collect()),
            (a, b) => Err(invalid(format!("{a} last-mile values vs {b} deltas; pass --grid for a cross product"))),
        }
    }
}

impl Cmd for CompareArgs {
    const NAME: &'static str = "compare";
    const ABOUT: &'static str = "Normalized load-time ratios over last-mile RTT and server distance (CSV)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let p = named_preset(&self.preset)?;
        let ideal = IdealModels::default();
        let mut out = String::from("rtt_lm_ms,delta_ms,fetch_vs_default,fetch_star_vs_cdn_star\n");
        for (lm, d) in self.pairs()? {
            let dec = LatencyDecomposition::new(lm / 1000.0, d / 1000.0).map_err(invalid)?;
            let c = normalized_comparison(&dec, &p, &ideal);
            out.push_str(&format!("{lm},{d},{:.6},{:.6}\n", c.fetch_vs_default, c.fetch_star_vs_cdn_star));
        }
        self.common.emit(out.as_bytes())
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CrossoverArgs {
    /// Coefficient preset: final or workshop
    #[arg(long, default_value = "final")]
    pub preset: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for CrossoverArgs {
    const NAME: &'static str = "crossover";
    const ABOUT: &'static str = "RTT at which the gathering line drops below the default line (JSON)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Out {
            preset: &'static str,
            default: LinearFit,
            fetch: LinearFit,
            crossover: cgn_core::perfmodel::Crossover,
        }
        let p = named_preset(&self.preset)?;
        let crossover = crossover_rtt(&p.default, &p.fetch).map_err(invalid)?;
        self.common.emit(&json(&Out {
            preset: p.name,
            default: p.default,
            fetch: p.fetch,
            crossover,
        })?)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CostArgs {
    /// Pages loaded per user per month
    #[arg(long, default_value_t = 3000.0)]
    pub pages: f64,
    /// Average page size in bytes
    #[arg(long, default_value_t = 2_000_000.0)]
    pub page_bytes: f64,
    /// Proxy service time per page, seconds
    #[arg(long, default_value_t = 5.2)]
    pub service_time_s: f64,
    /// Instance price, USD per hour
    #[arg(long, default_value_t = 0.431)]
    pub price_per_hour: f64,
    /// Egress price, USD per GB (10^9 bytes)
    #[arg(long, default_value_t = 0.087)]
    pub price_per_gb: f64,
    /// Pages served concurrently per instance
    #[arg(long, default_value_t = 1)]
    pub concurrency: u32,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for CostArgs {
    const NAME: &'static str = "cost";
    const ABOUT: &'static str = "Monthly gathering cost per user (JSON)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Out {
            inputs: CostInputs,
            network_usd: f64,
            compute_usd: f64,
            total_usd: f64,
        }
        let inputs = CostInputs {
            pages_per_month: self.pages,
            avg_page_bytes: self.page_bytes,
            service_time_s: self.service_time_s,
            price_per_hour: self.price_per_hour,
            price_per_gb: self.price_per_gb,
            concurrency: self.concurrency,
        };
        let c = cost_per_user_month(&inputs).map_err(invalid)?;
        self.common.emit(&json(&Out {
            inputs,
            network_usd: c.network_usd,
            compute_usd: c.compute_usd,
            total_usd: c.total_usd,
        })?)
    }
}
