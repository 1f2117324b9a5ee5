//! Command line front end. Every subcommand takes `--seed`, `--out` and
//! `--config`; a config file is a JSON object keyed by long flag names
//! (with `_` for `-`), and flags given on the command line win over it.

use std::ffi::OsString;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Command, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::info;

pub mod census_cmd;
pub mod model_cmd;
pub mod proxy_cmd;
pub mod select_cmd;
pub mod sim_cmd;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs, invalid parameters.
    Validation(String),
    /// Failures while doing the work: sockets, output files.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

pub fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

pub fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// RNG seed. Overrides seeds stored in input files; 0 when unset
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path, written atomically. Standard output when unset
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with flag values; explicit flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl Common {
    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Writes `bytes` to `--out` (temp file + rename) or to standard output.
    pub fn emit(&self, bytes: &[u8]) -> Result<(), CliError> {
        match &self.out {
            Some(p) => cgn_core::fsutil::write_atomic(p, bytes)
                .map_err(|e| runtime(format!("writing {}: {e}", p.display()))),
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(bytes).and_then(|_| so.flush()).map_err(runtime)
            }
        }
    }
}

/// One leaf subcommand.
pub trait Cmd: Args + FromArgMatches + Serialize + DeserializeOwned {
    const NAME: &'static str;
    const ABOUT: &'static str;
    fn common(&self) -> &Common;
    /// The seed the run actually uses, if the command is randomized.
    fn effective_seed(&self) -> Option<u64> {
        None
    }
    fn run(&self) -> Result<(), CliError>;
}

pub fn command_for<T: Cmd>() -> Command {
    T::augment_args(Command::new(T::NAME).about(T::ABOUT))
}

pub fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn open_input(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Parses the matches, layers the config file underneath, and validates the
/// combined keys.
pub fn resolve<T: Cmd>(m: &ArgMatches) -> Result<T, CliError> {
    let cli = T::from_arg_matches(m).map_err(invalid)?;
    let Some(path) = cli.common().config.clone() else {
        return Ok(cli);
    };
    let file: serde_json::Map<String, Value> =
        serde_json::from_str(&read_input(&path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let Value::Object(mut merged) = serde_json::to_value(&cli).map_err(invalid)? else {
        return Err(invalid("arguments did not serialize to an object"));
    };
    for (key, value) in file {
        if key == "config" || !merged.contains_key(&key) {
            return Err(invalid(format!("{}: unknown key {key:?}", path.display())));
        }
        if m.value_source(&key) != Some(ValueSource::CommandLine) {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn exec<T: Cmd>(m: &ArgMatches) -> Result<(), CliError> {
    let args: T = resolve(m)?;
    let config = serde_json::to_string(&args).map_err(invalid)?;
    let seed = args.effective_seed().map_or_else(|| "none".to_string(), |s| s.to_string());
    info!(command = T::NAME, %seed, %config, "resolved config");
    args.run()
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(filter)
        .try_init();
}

/// Parses argv, printing clap's message on failure. Help and version exit 0;
/// any other parse problem is a validation error.
fn parse(cmd: Command, argv: Vec<OsString>) -> Result<ArgMatches, i32> {
    cmd.try_get_matches_from(argv).map_err(|e| {
        let _ = e.print();
        match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
            _ => 1,
        }
    })
}

fn finish(r: Result<(), CliError>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            tracing::error!(exit_code = e.exit_code(), "{e}");
            e.exit_code()
        }
    }
}

fn model_command(name: &'static str, with_cost: bool) -> Command {
    let mut c = Command::new(name)
        .about("Linear load-time model: fits, comparisons, crossover")
        .subcommand_required(true)
        .subcommand(command_for::<model_cmd::FitArgs>())
        .subcommand(command_for::<model_cmd::CompareArgs>())
        .subcommand(command_for::<model_cmd::CrossoverArgs>());
    if with_cost {
        c = c.subcommand(command_for::<model_cmd::CostArgs>());
    }
    c
}

fn dispatch_model(m: &ArgMatches) -> Result<(), CliError> {
    match m.subcommand() {
        Some(("fit", s)) => exec::<model_cmd::FitArgs>(s),
        Some(("compare", s)) => exec::<model_cmd::CompareArgs>(s),
        Some(("crossover", s)) => exec::<model_cmd::CrossoverArgs>(s),
        Some(("cost", s)) => exec::<model_cmd::CostArgs>(s),
        _ => Err(invalid("missing model subcommand")),
    }
}

pub fn cgn_command() -> Command {
    Command::new("cgn")
        .about("Content gathering network tools")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(command_for::<census_cmd::ProbeArgs>())
        .subcommand(command_for::<census_cmd::CensusReportArgs>())
        .subcommand(command_for::<select_cmd::SelectArgs>())
        .subcommand(command_for::<select_cmd::MapArgs>())
        .subcommand(command_for::<proxy_cmd::GatherdArgs>())
        .subcommand(command_for::<proxy_cmd::GathercArgs>())
        .subcommand(command_for::<sim_cmd::SimulateArgs>())
        .subcommand(command_for::<sim_cmd::SweepArgs>())
        .subcommand(model_command("model", false))
        .subcommand(command_for::<model_cmd::CostArgs>())
        .subcommand(command_for::<sim_cmd::GenPagesArgs>())
}

/// Entry point of the `cgn` binary; returns the process exit code.
pub fn main_cgn(argv: Vec<OsString>) -> i32 {
    let m = match parse(cgn_command(), argv) {
        Ok(m) => m,
        Err(code) => return code,
    };
    init_logging();
    finish(match m.subcommand() {
        Some(("probe", s)) => exec::<census_cmd::ProbeArgs>(s),
        Some(("census-report", s)) => exec::<census_cmd::CensusReportArgs>(s),
        Some(("select", s)) => exec::<select_cmd::SelectArgs>(s),
        Some(("map", s)) => exec::<select_cmd::MapArgs>(s),
        Some(("gatherd", s)) => exec::<proxy_cmd::GatherdArgs>(s),
        Some(("gatherc", s)) => exec::<proxy_cmd::GathercArgs>(s),
        Some(("simulate", s)) => exec::<sim_cmd::SimulateArgs>(s),
        Some(("sweep", s)) => exec::<sim_cmd::SweepArgs>(s),
        Some(("model", s)) => dispatch_model(s),
        Some(("cost", s)) => exec::<model_cmd::CostArgs>(s),
        Some(("gen-pages", s)) => exec::<sim_cmd::GenPagesArgs>(s),
        _ => Err(invalid("missing subcommand")),
    })
}

/// Entry point for the single-purpose binaries (`gatherd`, `gatherc`).
pub fn main_single<T: Cmd>(argv: Vec<OsString>) -> i32 {
    let m = match parse(command_for::<T>().version(env!("CARGO_PKG_VERSION")), argv) {
        Ok(m) => m,
        Err(code) => return code,
    };
    init_logging();
    finish(exec::<T>(&m))
}

pub fn main_gathermodel(argv: Vec<OsString>) -> i32 {
    let cmd = model_command("gathermodel", true).version(env!("CARGO_PKG_VERSION"));
    let m = match parse(cmd, argv) {
        Ok(m) => m,
        Err(code) => return code,
    };
    init_logging();
    finish(dispatch_model(&m))
}
