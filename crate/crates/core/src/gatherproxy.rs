//! The gathering node: accepts gather sessions, fetches a page and its
//! subresources close to the origin, and streams each resource to the client
//! the moment it arrives.
//!
//! Discovery is static: `src`/`href` attributes in html and `url(...)` /
//! `@import` references in css. Nothing is executed, so script-generated
//! requests are not gathered; the client fetches those directly.

use std::collections::{HashSet, VecDeque};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use futures::stream::{FuturesUnordered, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tracing::{info, warn};

use crate::gatherwire::{
    read_frame, write_frame, EndPayload, ErrorPayload, FrameDecoder, GatherFrame, ManifestItem, ManifestPayload,
    RequestPayload, ResourceKind, ResourcePayload, WireError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatherConfig {
    pub listen_addr: String,
    pub fetch_parallelism: usize,
    pub per_resource_timeout_ms: u64,
    pub max_resources: usize,
    pub max_total_bytes: u64,
    pub css_nesting_depth: usize,
}

impl Default for GatherConfig {
    fn default() -> Self {
        GatherConfig {
            listen_addr: "127.0.0.1:7070".into(),
            fetch_parallelism: 16,
            per_resource_timeout_ms: 10_000,
            max_resources: 256,
            max_total_bytes: 64 * 1024 * 1024,
            css_nesting_depth: 2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid gather config: {0}")]
pub struct ConfigError(pub &'static str);

impl GatherConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fetch_parallelism < 1 {
            return Err(ConfigError("fetch_parallelism must be >= 1"));
        }
        if self.per_resource_timeout_ms < 1 {
            return Err(ConfigError("per_resource_timeout_ms must be >= 1"));
        }
        if self.max_resources < 1 {
            return Err(ConfigError("max_resources must be >= 1"));
        }
        if self.max_total_bytes < 1 {
            return Err(ConfigError("max_total_bytes must be >= 1"));
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.per_resource_timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRef {
    pub url: String,
    pub kind: ResourceKind,
    pub discovered_from: String,
}

fn html_tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)<(img|script|iframe|link)\b([^>]*)>").unwrap())
}

fn attr_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?is)(?:^|\s)([a-z-]+)\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s"'>]+))"#).unwrap()
    })
}

fn css_url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?is)url\(\s*(?:"([^"]*)"|'([^']*)'|([^)"'\s]*))\s*\)|@import\s+(?:"([^"]*)"|'([^']*)')"#)
            .unwrap()
    })
}

fn attrs(tag_body: &str) -> Vec<(String, String)> {
    attr_re()
        .captures_iter(tag_body)
        .map(|c| {
            let v = c.get(2).or(c.get(3)).or(c.get(4)).map_or("", |m| m.as_str());
            (c[1].to_ascii_lowercase(), v.trim().to_string())
        })
        .collect()
}

fn kind_from_path(url: &url::Url) -> ResourceKind {
    let path = url.path().to_ascii_lowercase();
    let ext = path.rsplit_once('.').map_or("", |(_, e)| e);
    match ext {
        "css" => ResourceKind::Css,
        "js" | "mjs" => ResourceKind::Js,
        "png" | "jpg" | "jpeg" | "gif" | "webp" | "svg" | "ico" | "avif" | "bmp" => ResourceKind::Img,
        "html" | "htm" => ResourceKind::Html,
        _ => ResourceKind::Other,
    }
}

/// Resolves `raw` against `base`; `None` for non-http targets.
fn resolve(base: &url::Url, raw: &str) -> Option<url::Url> {
    if raw.is_empty() {
        return None;
    }
    let mut u = base.join(raw).ok()?;
    if u.scheme() != "http" {
        return None;
    }
    u.set_fragment(None);
    Some(u)
}

/// Static discovery of the resources an html or css body references, in
/// document order, without duplicates. Anything unparseable yields nothing.
pub fn extract_resources(body: &[u8], base_url: &str, kind: ResourceKind) -> Vec<ResourceRef> {
    let Ok(base) = url::Url::parse(base_url) else {
        return Vec::new();
    };
    let text = String::from_utf8_lossy(body);
    let mut found: Vec<(url::Url, ResourceKind)> = Vec::new();
    match kind {
        ResourceKind::Html => {
            for cap in html_tag_re().captures_iter(&text) {
                let tag = cap[1].to_ascii_lowercase();
                let a = attrs(&cap[2]);
                let get = |name: &str| a.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
                let (raw, k) = match tag.as_str() {
                    "img" => (get("src"), Some(ResourceKind::Img)),
                    "script" => (get("src"), Some(ResourceKind::Js)),
                    "iframe" => (get("src"), Some(ResourceKind::Html)),
                    _ => {
                        let css = get("rel").is_some_and(|r| {
                            r.split_ascii_whitespace().any(|t| t.eq_ignore_ascii_case("stylesheet"))
                        });
                        (get("href"), css.then_some(ResourceKind::Css))
                    }
                };
                if let Some(u) = raw.and_then(|r| resolve(&base, r)) {
                    let k = k.unwrap_or_else(|| match kind_from_path(&u) {
                        ResourceKind::Css => ResourceKind::Css,
                        _ => ResourceKind::Other,
                    });
                    found.push((u, k));
                }
            }
        }
        ResourceKind::Css => {
            for cap in css_url_re().captures_iter(&text) {
                let import = cap.get(4).or(cap.get(5));
                let raw = cap.get(1).or(cap.get(2)).or(cap.get(3)).or(import).map_or("", |m| m.as_str().trim());
                if let Some(u) = resolve(&base, raw) {
                    let k = if import.is_some() {
                        ResourceKind::Css
                    } else {
                        kind_from_path(&u)
                    };
                    found.push((u, k));
                }
            }
        }
        _ => return Vec::new(),
    }
    let mut seen = HashSet::new();
    found
        .into_iter()
        .filter(|(u, _)| seen.insert(u.as_str().to_string()))
        .map(|(u, k)| ResourceRef {
            url: u.into(),
            kind: k,
            discovered_from: base_url.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedResponse {
    pub status: u16,
    /// `Name: value\r\n` lines, hop-by-hop headers removed.
    pub header_block: Vec<u8>,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
#[error("fetch of {url} failed: {msg}")]
pub struct FetchError {
    pub url: String,
    pub msg: String,
}

/// Origin access used by the gatherer.
pub trait Fetcher: Send + Sync + 'static {
    fn fetch(&self, url: &str) -> impl Future<Output = Result<FetchedResponse, FetchError>> + Send;
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

pub fn is_hop_by_hop(name: &str) -> bool {
    HOP_BY_HOP.iter().any(|h| name.eq_ignore_ascii_case(h))
}

/// Plain HTTP/1.1 fetcher. Redirects are not followed: a 3xx is content and
/// goes back to the browser as is.
#[derive(Debug, Clone)]
pub struct HttpFetcher {
    client: reqwest::Client,
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> Result<Self, FetchError> {
        let client = reqwest::Client::builder()
            .no_proxy()
            .redirect(reqwest::redirect::Policy::none())
            .connect_timeout(timeout)
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError {
                url: String::new(),
                msg: e.to_string(),
            })?;
        Ok(HttpFetcher { client })
    }
}

impl Fetcher for HttpFetcher {
    async fn fetch(&self, url: &str) -> Result<FetchedResponse, FetchError> {
        let err = |e: reqwest::Error| FetchError {
            url: url.to_string(),
            msg: e.to_string(),
        };
        let resp = self.client.get(url).send().await.map_err(err)?;
        let status = resp.status().as_u16();
        let mut header_block = Vec::new();
        for (name, value) in resp.headers() {
            if is_hop_by_hop(name.as_str()) {
                continue;
            }
            header_block.extend_from_slice(name.as_str().as_bytes());
            header_block.extend_from_slice(b": ");
            header_block.extend_from_slice(value.as_bytes());
            header_block.extend_from_slice(b"\r\n");
        }
        let body = resp.bytes().await.map_err(err)?.to_vec();
        Ok(FetchedResponse {
            status,
            header_block,
            body,
        })
    }
}

/// Process-wide counters, updated atomically by every session.
#[derive(Debug, Default)]
pub struct GatherMetrics {
    pub sessions: AtomicU64,
    pub resources: AtomicU64,
    pub body_bytes: AtomicU64,
    pub root_failures: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherSummary {
    pub url: String,
    pub resources: u64,
    pub bytes: u64,
    pub gather_ms: u64,
    pub truncated: bool,
    pub failed: bool,
}

fn ms_since(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

async fn timed_fetch<F: Fetcher>(fetcher: &F, url: &str, timeout: Duration) -> (Option<FetchedResponse>, u32) {
    let start = Instant::now();
    let r = tokio::time::timeout(timeout, fetcher.fetch(url)).await;
    let ms = start.elapsed().as_millis().min(u32::MAX as u128) as u32;
    match r {
        Ok(Ok(resp)) => (Some(resp), ms),
        Ok(Err(e)) => {
            warn!(url, error = %e, "subresource fetch failed");
            (None, ms)
        }
        Err(_) => {
            warn!(url, "subresource fetch timed out");
            (None, ms)
        }
    }
}

fn resource_frame(url: &str, resp: Option<FetchedResponse>, fetch_ms: u32) -> ResourcePayload {
    match resp {
        Some(r) => ResourcePayload::whole(url, r.status, r.header_block, r.body, fetch_ms),
        None => ResourcePayload::whole(url, 0, Vec::new(), Vec::new(), fetch_ms),
    }
}

fn should_parse(kind: ResourceKind, status: u16) -> bool {
    (200..300).contains(&status) && matches!(kind, ResourceKind::Html | ResourceKind::Css)
}

/// Runs one gather session, sending frames into `tx` as they become ready.
/// Stops early if the receiver goes away.
pub async fn gather<F: Fetcher>(
    req: RequestPayload,
    cfg: &GatherConfig,
    fetcher: &F,
    tx: mpsc::Sender<GatherFrame>,
) -> GatherSummary {
    let start = Instant::now();
    let mut summary = GatherSummary {
        url: req.url.clone(),
        resources: 0,
        bytes: 0,
        gather_ms: 0,
        truncated: false,
        failed: false,
    };
    let (root, root_ms) = timed_fetch(fetcher, &req.url, cfg.timeout()).await;
    let Some(root) = root else {
        summary.failed = true;
        summary.gather_ms = ms_since(start);
        let _ = tx
            .send(GatherFrame::Error(ErrorPayload {
                message: format!("could not fetch {}", req.url),
            }))
            .await;
        return summary;
    };

    let mut seen: HashSet<String> = HashSet::from([req.url.clone()]);
    let mut queue: VecDeque<(ResourceRef, usize)> = VecDeque::new();
    let mut listed = 1usize;
    let mut admit = |refs: Vec<ResourceRef>, css_depth: usize, truncated: &mut bool, queue: &mut VecDeque<(ResourceRef, usize)>| {
        let mut items = Vec::new();
        for r in refs {
            if seen.contains(&r.url) {
                continue;
            }
            if listed >= cfg.max_resources {
                *truncated = true;
                break;
            }
            seen.insert(r.url.clone());
            listed += 1;
            items.push(ManifestItem {
                url: r.url.clone(),
                kind: r.kind,
            });
            let d = if r.kind == ResourceKind::Css { css_depth + 1 } else { css_depth };
            queue.push_back((r, d));
        }
        items
    };

    let refs = if should_parse(ResourceKind::Html, root.status) {
        extract_resources(&root.body, &req.url, ResourceKind::Html)
    } else {
        Vec::new()
    };
    let mut first = vec![ManifestItem {
        url: req.url.clone(),
        kind: ResourceKind::Html,
    }];
    first.extend(admit(refs, 0, &mut summary.truncated, &mut queue));
    if tx
        .send(GatherFrame::Manifest(ManifestPayload { resources: first }))
        .await
        .is_err()
    {
        return summary;
    }
    summary.resources += 1;
    summary.bytes += root.body.len() as u64;
    if tx
        .send(GatherFrame::Resource(resource_frame(&req.url, Some(root), root_ms)))
        .await
        .is_err()
    {
        return summary;
    }

    let mut in_flight = FuturesUnordered::new();
    loop {
        while in_flight.len() < cfg.fetch_parallelism && summary.bytes <= cfg.max_total_bytes {
            let Some((r, depth)) = queue.pop_front() else { break };
            let timeout = cfg.timeout();
            in_flight.push(async move {
                let (resp, ms) = timed_fetch(fetcher, &r.url, timeout).await;
                (r, depth, resp, ms)
            });
        }
        let Some((r, depth, resp, ms)) = in_flight.next().await else {
            break;
        };
        if let Some(resp) = &resp {
            summary.bytes += resp.body.len() as u64;
            if summary.bytes > cfg.max_total_bytes {
                summary.truncated = true;
            }
            let room = r.kind == ResourceKind::Css && depth <= cfg.css_nesting_depth;
            if room && !summary.truncated && should_parse(r.kind, resp.status) {
                let more = extract_resources(&resp.body, &r.url, ResourceKind::Css);
                let items = admit(more, depth, &mut summary.truncated, &mut queue);
                if !items.is_empty()
                    && tx
                        .send(GatherFrame::Manifest(ManifestPayload { resources: items }))
                        .await
                        .is_err()
                {
                    return summary;
                }
            }
        }
        summary.resources += 1;
        if tx.send(GatherFrame::Resource(resource_frame(&r.url, resp, ms))).await.is_err() {
            return summary;
        }
    }
    if !queue.is_empty() {
        summary.truncated = true;
    }
    summary.gather_ms = ms_since(start);
    let _ = tx
        .send(GatherFrame::End(EndPayload {
            resource_count: summary.resources,
            total_body_bytes: summary.bytes,
            gather_ms: summary.gather_ms,
            truncated: summary.truncated,
            cwnd_hint_bytes: req.cwnd_hint_bytes,
        }))
        .await;
    summary
}

/// Sizes the socket send buffer from the client's window hint so the first
/// burst is not limited by a small default buffer.
fn apply_cwnd_hint(stream: &TcpStream, hint: u64) {
    if hint == 0 {
        return;
    }
    let sock = socket2::SockRef::from(stream);
    let want = (hint.saturating_mul(2)).min(64 * 1024 * 1024) as usize;
    match sock.send_buffer_size() {
        Ok(cur) if cur >= want => {}
        _ => {
            if let Err(e) = sock.set_send_buffer_size(want) {
                warn!(error = %e, "could not size send buffer from cwnd hint");
            }
        }
    }
}

/// Serves gather sessions on one connection, one page at a time.
pub async fn handle_connection<F: Fetcher>(
    stream: TcpStream,
    cfg: Arc<GatherConfig>,
    fetcher: Arc<F>,
    metrics: Arc<GatherMetrics>,
) -> Result<(), WireError> {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let mut dec = FrameDecoder::new();
    loop {
        let req = match read_frame(&mut rd, &mut dec).await? {
            None => return Ok(()),
            Some(GatherFrame::Request(r)) => r,
            Some(other) => {
                let msg = format!("expected REQUEST, got {:?}", other.frame_type());
                write_frame(&mut wr, &GatherFrame::Error(ErrorPayload { message: msg })).await?;
                return Ok(());
            }
        };
        apply_cwnd_hint(wr.as_ref(), req.cwnd_hint_bytes);
        let session_id = metrics.sessions.fetch_add(1, Ordering::Relaxed) + 1;
        let (tx, mut rx) = mpsc::channel::<GatherFrame>(64);
        let writer = async {
            while let Some(f) = rx.recv().await {
                write_frame(&mut wr, &f).await?;
            }
            Ok::<(), WireError>(())
        };
        let (summary, written) = tokio::join!(gather(req, &cfg, fetcher.as_ref(), tx), writer);
        metrics.resources.fetch_add(summary.resources, Ordering::Relaxed);
        metrics.body_bytes.fetch_add(summary.bytes, Ordering::Relaxed);
        if summary.failed {
            metrics.root_failures.fetch_add(1, Ordering::Relaxed);
        }
        info!(
            session_id,
            url = %summary.url,
            resources = summary.resources,
            bytes = summary.bytes,
            gather_ms = summary.gather_ms,
            truncated = summary.truncated,
            "gather session"
        );
        written?;
    }
}

/// Accept loop. Each connection gets its own task; a stalled origin only
/// holds up its own session.
pub async fn serve<F: Fetcher>(
    listener: TcpListener,
    cfg: Arc<GatherConfig>,
    fetcher: Arc<F>,
    metrics: Arc<GatherMetrics>,
) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let (cfg, fetcher, metrics) = (cfg.clone(), fetcher.clone(), metrics.clone());
        tokio::spawn(async move {
            if let Err(e) = handle_connection(stream, cfg, fetcher, metrics).await {
                warn!(%peer, error = %e, "gather connection ended with error");
            }
        });
    }
}

/// Binds and serves in the background; returns the bound address.
pub async fn spawn_server<F: Fetcher>(
    cfg: GatherConfig,
    fetcher: Arc<F>,
) -> std::io::Result<(SocketAddr, Arc<GatherMetrics>, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(&cfg.listen_addr).await?;
    let addr = listener.local_addr()?;
    let metrics = Arc::new(GatherMetrics::default());
    let handle = tokio::spawn(serve(listener, Arc::new(cfg), fetcher, metrics.clone()));
    Ok((addr, metrics, handle))
}
