use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::info;

use cgn_core::clientproxy::{ClientConfig, ClientProxy, HintStore};
use cgn_core::gatherproxy::{serve, GatherConfig, GatherMetrics, HttpFetcher};
use cgn_core::mapping::MappingTable;

use crate::{invalid, read_input, runtime, Cmd, CliError, Common};

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GatherdArgs {
    /// Address to accept REQUEST sessions on
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
    /// Concurrent origin fetches per session
    #[arg(long, default_value_t = 16)]
    pub parallelism: usize,
    /// Per-resource fetch timeout
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
    /// Resources fetched per page, root excluded
    #[arg(long, default_value_t = 256)]
    pub max_resources: usize,
    /// Body bytes shipped per page before truncating
    #[arg(long, default_value_t = 64 * 1024 * 1024)]
    pub max_total_bytes: u64,
    /// How many levels of CSS imports are followed
    #[arg(long, default_value_t = 2)]
    pub css_depth: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for GatherdArgs {
    const NAME: &'static str = "gatherd";
    const ABOUT: &'static str = "Run the gathering proxy next to web servers";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let cfg = GatherConfig {
            listen_addr: self.listen.clone(),
            fetch_parallelism: self.parallelism,
            per_resource_timeout_ms: self.timeout_ms,
            max_resources: self.max_resources,
            max_total_bytes: self.max_total_bytes,
            css_nesting_depth: self.css_depth,
        };
        cfg.validate().map_err(invalid)?;
        let fetcher = HttpFetcher::new(Duration::from_millis(cfg.per_resource_timeout_ms)).map_err(runtime)?;
        let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind(&cfg.listen_addr)
                .await
                .map_err(|e| runtime(format!("bind {}: {e}", cfg.listen_addr)))?;
            let addr = listener.local_addr().map_err(runtime)?;
            info!(%addr, "gatherd listening");
            serve(listener, Arc::new(cfg), Arc::new(fetcher), Arc::new(GatherMetrics::default()))
                .await
                .map_err(runtime)
        })
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GathercArgs {
    /// Address the browser uses as its HTTP proxy
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// Mapping file; reloaded when it changes
    #[arg(long, default_value = "map.cgn")]
    pub mapping: PathBuf,
    /// Mapping entries older than this are ignored
    #[arg(long, default_value_t = 86_400)]
    pub max_age_s: u64,
    /// Congestion window hint store (proxy_id,cwnd_hint_bytes,updated_at)
    #[arg(long, default_value = "hints.csv")]
    pub hints: PathBuf,
    /// Give up on a gathering proxy after this long without progress
    #[arg(long, default_value_t = 10_000)]
    pub gather_timeout_ms: u64,
    /// Gathered pages are dropped this long after completing
    #[arg(long, default_value_t = 60)]
    pub page_ttl_s: u64,
    /// Memory cap for gathered resources
    #[arg(long, default_value_t = 256 * 1024 * 1024)]
    pub store_cap_bytes: u64,
    /// How often the mapping file is checked for changes
    #[arg(long, default_value_t = 5)]
    pub reload_s: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

impl Cmd for GathercArgs {
    const NAME: &'static str = "gatherc";
    const ABOUT: &'static str = "Run the client-side forward proxy";
    fn common(&self) -> &Common {
        &self.common
    }
    fn run(&self) -> Result<(), CliError> {
        let cfg = ClientConfig {
            listen_addr: self.listen.clone(),
            mapping_path: self.mapping.clone(),
            mapping_max_age_s: self.max_age_s,
            gather_timeout_ms: self.gather_timeout_ms,
            hint_store_path: self.hints.clone(),
            page_ttl_s: self.page_ttl_s,
            store_cap_bytes: self.store_cap_bytes,
        };
        cfg.validate().map_err(invalid)?;
        if self.reload_s == 0 {
            return Err(invalid("reload_s must be >= 1"));
        }
        let table = MappingTable::parse(&read_input(&self.mapping)?)
            .map_err(|e| invalid(format!("{}: {e}", self.mapping.display())))?;
        let hints = HintStore::open(&self.hints).map_err(invalid)?;
        let proxy = Arc::new(ClientProxy::new(cfg, table, hints).map_err(invalid)?);
        let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
        let reload = Duration::from_secs(self.reload_s);
        let listen = self.listen.clone();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind(&listen)
                .await
                .map_err(|e| runtime(format!("bind {listen}: {e}")))?;
            let addr = listener.local_addr().map_err(runtime)?;
            info!(%addr, entries = proxy.mapping().current().len(), "gatherc listening");
            proxy.spawn_mapping_watcher(reload);
            proxy.serve(listener).await.map_err(runtime)
        })
    }
}
