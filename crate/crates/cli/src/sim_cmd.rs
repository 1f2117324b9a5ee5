use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::info;

use cgn_core::model::LinkSpec;
use cgn_core::pagesim::{
    generate_page, simulate, sweep, write_sweep_csv, Mode, PageGenConfig, PageSpec, RttGrid, Scenario, SweepAxis,
    SweepConfig,
};
use cgn_core::stats::derive_seed;

use crate::{invalid, read_input, runtime, Cmd, CliError, Common};

fn read_page(path: &Path) -> Result<PageSpec, CliError> {
    PageSpec::from_json(&read_input(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PageShape {
    /// Resources per generated page, root included
    #[arg(long, default_value_t = 50)]
    pub n_resources: usize,
    /// Total bytes per generated page
    #[arg(long, default_value_t = 2_000_000)]
    pub total_bytes: u64,
    /// Maximum dependency depth below the root
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Share of resources that are ads
    #[arg(long, default_value_t = 0.05)]
    pub ad_fraction: f64,
}

impl PageShape {
    /// Page `i` of a generated set uses `derive_seed(seed, i)`.
    fn generate(&self, seed: u64, n: usize) -> Result<Vec<PageSpec>, CliError> {
        (0..n)
            .map(|i| {
                generate_page(&PageGenConfig {
                    seed: derive_seed(seed, i as u64),
                    n_resources: self.n_resources,
                    total_bytes: self.total_bytes,
                    depth: self.depth,
                    ad_fraction: self.ad_fraction,
                })
                .map_err(invalid)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Page JSON
    #[arg(long)]
    pub page: PathBuf,
    /// Scenario JSON
    #[arg(long)]
    pub scenario: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for SimulateArgs {
    const NAME: &'static str = "simulate";
    const ABOUT: &'static str = "Simulate one page load and write its trace (JSON)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn effective_seed(&self) -> Option<u64> {
        Some(self.common.seed_or_default())
    }
    fn run(&self) -> Result<(), CliError> {
        let mut sc: Scenario = serde_json::from_str(&read_input(&self.scenario)?)
            .map_err(|e| invalid(format!("{}: {e}", self.scenario.display())))?;
        if let Some(s) = self.common.seed {
            sc.seed = s;
        }
        let page = read_page(&self.page)?;
        let trace = simulate(&page, &sc).map_err(invalid)?;
        info!(viz85_s = trace.viz85_s, full_load_s = trace.full_load_s, "simulated");
        let mut s = serde_json::to_string_pretty(&trace).map_err(runtime)?;
        s.push('\n');
        self.common.emit(s.as_bytes())
    }
}

/// Default plus gathering at 10 Mbps, 20 to 320 ms.
pub fn default_sweep() -> SweepConfig {
    let link = LinkSpec::lossless(0.1, 10e6);
    let cgn = Scenario {
        client_proxy: Some(link),
        proxy_server_rtt_s: 0.005,
        zero_rtt: true,
        ..Scenario::new(Mode::Cgn, link)
    };
    SweepConfig {
        scenarios: vec![Scenario::new(Mode::Default, link), cgn],
        grid: RttGrid {
            start_ms: 20.0,
            stop_ms: 320.0,
            step_ms: 20.0,
        },
        axis: SweepAxis::ClientServer,
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Sweep JSON ({scenarios, grid, axis}); a default-vs-gathering sweep when unset
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Directory of page JSON files; pages are generated from the seed when unset
    #[arg(long)]
    pub pages: Option<PathBuf>,
    /// Number of pages to generate
    #[arg(long, default_value_t = 20)]
    pub n_pages: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: PageShape,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn read_page_dir(dir: &Path) -> Result<Vec<PageSpec>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(invalid(format!("{}: no .json pages", dir.display())));
    }
    paths.iter().map(|p| read_page(p)).collect()
}

impl Cmd for SweepArgs {
    const NAME: &'static str = "sweep";
    const ABOUT: &'static str = "Median load times per mode over an RTT grid (CSV)";
    fn common(&self) -> &Common {
        &self.common
    }
    fn effective_seed(&self) -> Option<u64> {
        Some(self.common.seed_or_default())
    }
    fn run(&self) -> Result<(), CliError> {
        let mut cfg = match &self.scenario {
            Some(p) => serde_json::from_str(&read_input(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => default_sweep(),
        };
        if let Some(s) = self.common.seed {
            for sc in &mut cfg.scenarios {
                sc.seed = s;
            }
        }
        for sc in &cfg.scenarios {
            sc.validate().map_err(invalid)?;
        }
        let pages = match &self.pages {
            Some(dir) => read_page_dir(dir)?,
            None => self.shape.generate(self.common.seed_or_default(), self.n_pages)?,
        };
        let rows = sweep(&pages, &cfg).map_err(invalid)?;
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).map_err(runtime)?;
        self.common.emit(&buf)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenPagesArgs {
    /// Number of pages
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: PageShape,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for GenPagesArgs {
    const NAME: &'static str = "gen-pages";
    const ABOUT: &'static str = "Generate synthetic pages as page-NNNN.json into the --out directory";
    fn common(&self) -> &Common {
        &self.common
    }
    fn effective_seed(&self) -> Option<u64> {
        Some(self.common.seed_or_default())
    }
    fn run(&self) -> Result<(), CliError> {
        let dir = self
            .common
            .out
            .as_ref()
            .ok_or_else(|| invalid("gen-pages needs --out DIR"))?;
        let pages = self.shape.generate(self.common.seed_or_default(), self.n)?;
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for (i, p) in pages.iter().enumerate() {
            let path = dir.join(format!("page-{i:04}.json"));
            cgn_core::fsutil::write_atomic(&path, p.to_json().as_bytes())
                .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        }
        info!(pages = pages.len(), dir = %dir.display(), "wrote pages");
        Ok(())
    }
}
