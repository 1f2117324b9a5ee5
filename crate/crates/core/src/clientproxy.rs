//! The client-side forward proxy. The browser points its HTTP proxy setting
//! here. Page loads for mapped domains are turned into one gather session
//! with the nearest gathering node, and the resources it streams back are
//! served to the browser from a short-lived per-page store. Everything else,
//! and every failure, falls back to a direct fetch.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime};

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Body;
use hyper::header::{HeaderName, HeaderValue};
use hyper::{Method, Request, Response, StatusCode};
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tracing::{debug, info, warn};

use crate::fsutil::write_atomic;
use crate::gatherproxy::is_hop_by_hop;
use crate::gatherwire::{read_frame, write_frame, FrameDecoder, GatherFrame, RequestPayload, ResourceAssembler};
use crate::mapping::{unix_now, Lookup, MappingError, MappingTable, ProxyEndpoint};
use crate::model::{Domain, VantageId};

/// Header that forces (`gather`) or suppresses (`direct`) gathering.
pub const OVERRIDE_HEADER: &str = "x-cgn";

/// Upper bound on a learned window hint.
pub const MAX_HINT_BYTES: u64 = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub listen_addr: String,
    pub mapping_path: PathBuf,
    pub mapping_max_age_s: u64,
    pub gather_timeout_ms: u64,
    pub hint_store_path: PathBuf,
    /// Completed pages are dropped from the store after this long.
    pub page_ttl_s: u64,
    pub store_cap_bytes: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            listen_addr: "127.0.0.1:8080".into(),
            mapping_path: PathBuf::from("map.cgn"),
            mapping_max_age_s: 86_400,
            gather_timeout_ms: 10_000,
            hint_store_path: PathBuf::from("hints.csv"),
            page_ttl_s: 60,
            store_cap_bytes: 256 * 1024 * 1024,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.gather_timeout_ms < 1 {
            return Err("gather_timeout_ms must be >= 1".into());
        }
        if self.page_ttl_s < 1 {
            return Err("page_ttl_s must be >= 1".into());
        }
        if self.store_cap_bytes < 1 {
            return Err("store_cap_bytes must be >= 1".into());
        }
        Ok(())
    }

    fn gather_timeout(&self) -> Duration {
        Duration::from_millis(self.gather_timeout_ms)
    }
}

/// Per-proxy congestion window hints, persisted as
/// `proxy_id,cwnd_hint_bytes,updated_at`.
#[derive(Debug)]
pub struct HintStore {
    path: Option<PathBuf>,
    hints: Mutex<BTreeMap<VantageId, (u64, u64)>>,
}

impl HintStore {
    pub fn in_memory() -> Self {
        HintStore {
            path: None,
            hints: Mutex::new(BTreeMap::new()),
        }
    }

    /// Loads `path` if it exists. A missing file is an empty store.
    pub fn open(path: &Path) -> Result<Self, String> {
        let mut hints = BTreeMap::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
                let header = rdr.headers().map_err(|e| e.to_string())?.clone();
                if header.iter().collect::<Vec<_>>() != ["proxy_id", "cwnd_hint_bytes", "updated_at"] {
                    return Err(format!("{}: unexpected header {:?}", path.display(), header));
                }
                for (i, rec) in rdr.records().enumerate() {
                    let rec = rec.map_err(|e| e.to_string())?;
                    let bad = || format!("{}: bad record on line {}", path.display(), i + 2);
                    if rec.len() != 3 {
                        return Err(bad());
                    }
                    let id = VantageId::new(&rec[0]).map_err(|_| bad())?;
                    let hint: u64 = rec[1].parse().map_err(|_| bad())?;
                    let at: u64 = rec[2].parse().map_err(|_| bad())?;
                    hints.insert(id, (hint, at));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(format!("{}: {e}", path.display())),
        }
        Ok(HintStore {
            path: Some(path.to_path_buf()),
            hints: Mutex::new(hints),
        })
    }

    /// 0 for proxies never seen.
    pub fn read_hint(&self, proxy: &VantageId) -> u64 {
        self.hints.lock().unwrap().get(proxy).map_or(0, |h| h.0)
    }

    /// Records a hint and persists the store. Persistence failures leave the
    /// value in memory and are logged.
    pub fn update_hint(&self, proxy: &VantageId, bytes: u64) {
        let text = {
            let mut h = self.hints.lock().unwrap();
            h.insert(proxy.clone(), (bytes, unix_now()));
            let mut s = String::from("proxy_id,cwnd_hint_bytes,updated_at\n");
            for (id, (b, at)) in h.iter() {
                s.push_str(&format!("{id},{b},{at}\n"));
            }
            s
        };
        if let Some(path) = &self.path {
            if let Err(e) = write_atomic(path, text.as_bytes()) {
                warn!(path = %path.display(), error = %e, "hint store not writable; keeping hints in memory");
            }
        }
    }
}

/// The current mapping table, swapped atomically on refresh. Readers hold an
/// `Arc` to whichever table was current when they looked.
#[derive(Debug)]
pub struct MappingHandle {
    table: RwLock<Arc<MappingTable>>,
    loaded_mtime: Mutex<Option<SystemTime>>,
}

impl MappingHandle {
    pub fn new(table: MappingTable) -> Self {
        MappingHandle {
            table: RwLock::new(Arc::new(table)),
            loaded_mtime: Mutex::new(None),
        }
    }

    pub fn current(&self) -> Arc<MappingTable> {
        self.table.read().unwrap().clone()
    }

    pub fn swap(&self, table: MappingTable) {
        *self.table.write().unwrap() = Arc::new(table);
    }

    /// Re-reads `path`. On any error the previous table stays in place.
    pub fn refresh_mapping(&self, path: &Path) -> Result<(), MappingRefreshError> {
        let text = std::fs::read_to_string(path).map_err(|e| MappingRefreshError::Io(e.to_string()))?;
        match MappingTable::parse(&text) {
            Ok(t) => {
                self.swap(t);
                *self.loaded_mtime.lock().unwrap() = std::fs::metadata(path).and_then(|m| m.modified()).ok();
                info!(path = %path.display(), "mapping table refreshed");
                Ok(())
            }
            Err(e) => {
                warn!(path = %path.display(), error = %e, "mapping refresh failed; keeping previous table");
                Err(MappingRefreshError::Parse(e))
            }
        }
    }

    /// Refreshes when the file's modification time changed since the last
    /// successful load.
    pub fn refresh_if_changed(&self, path: &Path) -> Result<bool, MappingRefreshError> {
        let mtime = std::fs::metadata(path)
            .and_then(|m| m.modified())
            .map_err(|e| MappingRefreshError::Io(e.to_string()))?;
        if *self.loaded_mtime.lock().unwrap() == Some(mtime) {
            return Ok(false);
        }
        self.refresh_mapping(path).map(|_| true)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MappingRefreshError {
    #[error("reading mapping: {0}")]
    Io(String),
    #[error(transparent)]
    Parse(#[from] MappingError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredResource {
    pub status: u16,
    pub header_block: Vec<u8>,
    pub body: Vec<u8>,
}

#[derive(Debug)]
enum Slot {
    Pending,
    Ready(Arc<StoredResource>),
    Failed,
}

#[derive(Debug)]
struct Page {
    created: Instant,
    last_used: Instant,
    bytes: u64,
    done: bool,
    host: Option<String>,
    slots: HashMap<String, Slot>,
    notify: watch::Sender<u64>,
}

#[derive(Debug, Default)]
struct StoreInner {
    pages: HashMap<u64, Page>,
    index: HashMap<String, u64>,
    next_id: u64,
    total_bytes: u64,
}

/// Resources of in-progress and recently gathered pages, keyed by URL.
/// Bounded in bytes (least recently used pages go first) and in age.
#[derive(Debug)]
pub struct PageStore {
    inner: Mutex<StoreInner>,
    cap_bytes: u64,
    ttl: Duration,
}

pub enum Wait {
    Ready(Arc<StoredResource>),
    /// Known to the store but not deliverable (failed, evicted or timed out).
    Unavailable,
    /// Never listed by any active page.
    Unknown,
}

impl PageStore {
    pub fn new(cap_bytes: u64, ttl: Duration) -> Self {
        PageStore {
            inner: Mutex::new(StoreInner::default()),
            cap_bytes,
            ttl,
        }
    }

    fn expire(&self, inner: &mut StoreInner) {
        let now = Instant::now();
        let old: Vec<u64> = inner
            .pages
            .iter()
            .filter(|(_, p)| now.duration_since(p.created) > self.ttl)
            .map(|(&id, _)| id)
            .collect();
        for id in old {
            Self::drop_page(inner, id);
        }
    }

    fn drop_page(inner: &mut StoreInner, id: u64) {
        if let Some(p) = inner.pages.remove(&id) {
            inner.total_bytes -= p.bytes;
            for url in p.slots.keys() {
                if inner.index.get(url) == Some(&id) {
                    inner.index.remove(url);
                }
            }
            // Wake waiters so they notice the page is gone.
            p.notify.send_modify(|v| *v += 1);
        }
    }

    /// Opens a page whose root is pending. Returns its id.
    pub fn begin_page(&self, root_url: &str) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        self.expire(&mut inner);
        let id = inner.next_id;
        inner.next_id += 1;
        let (notify, _) = watch::channel(0);
        let now = Instant::now();
        inner.pages.insert(
            id,
            Page {
                created: now,
                last_used: now,
                bytes: 0,
                done: false,
                host: url::Url::parse(root_url).ok().and_then(|u| u.host_str().map(str::to_string)),
                slots: HashMap::from([(root_url.to_string(), Slot::Pending)]),
                notify,
            },
        );
        inner.index.insert(root_url.to_string(), id);
        id
    }

    pub fn list(&self, page: u64, urls: impl IntoIterator<Item = String>) {
        let mut inner = self.inner.lock().unwrap();
        let StoreInner { pages, index, .. } = &mut *inner;
        let Some(p) = pages.get_mut(&page) else { return };
        for u in urls {
            p.slots.entry(u.clone()).or_insert(Slot::Pending);
            index.insert(u, page);
        }
        p.notify.send_modify(|v| *v += 1);
    }

    pub fn put(&self, page: u64, url: &str, res: Option<StoredResource>) {
        let mut inner = self.inner.lock().unwrap();
        let added = res.as_ref().map_or(0, |r| (r.body.len() + r.header_block.len()) as u64);
        {
            let StoreInner { pages, index, .. } = &mut *inner;
            let Some(p) = pages.get_mut(&page) else { return };
            p.slots.insert(
                url.to_string(),
                match res {
                    Some(r) => Slot::Ready(Arc::new(r)),
                    None => Slot::Failed,
                },
            );
            index.insert(url.to_string(), page);
            p.bytes += added;
            p.notify.send_modify(|v| *v += 1);
        }
        inner.total_bytes += added;
        while inner.total_bytes > self.cap_bytes {
            let victim = inner
                .pages
                .iter()
                .filter(|(&id, _)| id != page)
                .min_by_key(|(_, p)| p.last_used)
                .map(|(&id, _)| id);
            match victim {
                Some(v) => Self::drop_page(&mut inner, v),
                None => break,
            }
        }
    }

    /// Marks the session finished; anything still pending has failed.
    pub fn finish(&self, page: u64) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(p) = inner.pages.get_mut(&page) {
            p.done = true;
            for s in p.slots.values_mut() {
                if matches!(s, Slot::Pending) {
                    *s = Slot::Failed;
                }
            }
            p.notify.send_modify(|v| *v += 1);
        }
    }

    pub fn contains(&self, url: &str) -> bool {
        let mut inner = self.inner.lock().unwrap();
        self.expire(&mut inner);
        inner.index.contains_key(url)
    }

    pub fn total_bytes(&self) -> u64 {
        self.inner.lock().unwrap().total_bytes
    }

    /// Waits while an unfinished session on `host` might still list `url`,
    /// e.g. an image a stylesheet references. True once `url` is listed.
    pub async fn wait_listed(&self, url: &str, host: &str, deadline: tokio::time::Instant) -> bool {
        loop {
            let mut rx = {
                let mut inner = self.inner.lock().unwrap();
                self.expire(&mut inner);
                if inner.index.contains_key(url) {
                    return true;
                }
                let open = inner.pages.values().find(|p| !p.done && p.host.as_deref() == Some(host));
                match open {
                    Some(p) => p.notify.subscribe(),
                    None => return false,
                }
            };
            if !matches!(tokio::time::timeout_at(deadline, rx.changed()).await, Ok(Ok(()))) {
                return false;
            }
        }
    }

    /// Waits until `url` arrives, fails, or `deadline` passes.
    pub async fn wait_for(&self, url: &str, deadline: tokio::time::Instant) -> Wait {
        let mut seen_known = false;
        loop {
            let mut rx = {
                let mut inner = self.inner.lock().unwrap();
                self.expire(&mut inner);
                let Some(&id) = inner.index.get(url) else {
                    return if seen_known { Wait::Unavailable } else { Wait::Unknown };
                };
                seen_known = true;
                let page = inner.pages.get_mut(&id).expect("index points at live page");
                page.last_used = Instant::now();
                match page.slots.get(url) {
                    Some(Slot::Ready(r)) => return Wait::Ready(r.clone()),
                    Some(Slot::Failed) | None => return Wait::Unavailable,
                    Some(Slot::Pending) if page.done => return Wait::Unavailable,
                    Some(Slot::Pending) => page.notify.subscribe(),
                }
            };
            match tokio::time::timeout_at(deadline, rx.changed()).await {
                Ok(Ok(())) => continue,
                _ => return Wait::Unavailable,
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct ClientMetrics {
    pub gather_sessions: AtomicU64,
    pub store_hits: AtomicU64,
    pub direct_fetches: AtomicU64,
    pub fallbacks: AtomicU64,
}

/// Strips the fragment and normalizes through the URL parser, the same way
/// the gatherer names resources.
pub fn store_key(raw: &str) -> Option<String> {
    let mut u = url::Url::parse(raw).ok()?;
    u.set_fragment(None);
    Some(u.into())
}

/// Whether a GET for `url` looks like a page load: the path is `/`, ends in
/// `/`, ends in `.html`/`.htm`, or has no extension in its last segment.
pub fn looks_like_page(url: &url::Url) -> bool {
    let path = url.path();
    if path.is_empty() || path.ends_with('/') {
        return true;
    }
    let last = path.rsplit('/').next().unwrap_or("");
    match last.rsplit_once('.') {
        None => true,
        Some((_, ext)) => ext.eq_ignore_ascii_case("html") || ext.eq_ignore_ascii_case("htm"),
    }
}

fn parse_header_block(block: &[u8]) -> Vec<(HeaderName, HeaderValue)> {
    block
        .split(|&b| b == b'\n')
        .filter_map(|line| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            let colon = line.iter().position(|&b| b == b':')?;
            let name = HeaderName::from_bytes(&line[..colon]).ok()?;
            let value = HeaderValue::from_bytes(line[colon + 1..].trim_ascii()).ok()?;
            Some((name, value))
        })
        .collect()
}

fn plain(status: StatusCode, msg: &str) -> Response<Full<Bytes>> {
    let mut r = Response::new(Full::new(Bytes::from(msg.to_string())));
    *r.status_mut() = status;
    r
}

fn from_store(res: &StoredResource) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(res.body.clone())));
    *resp.status_mut() = StatusCode::from_u16(res.status).unwrap_or(StatusCode::BAD_GATEWAY);
    let h = resp.headers_mut();
    for (name, value) in parse_header_block(&res.header_block) {
        if is_hop_by_hop(name.as_str()) || name == hyper::header::CONTENT_LENGTH {
            continue;
        }
        h.append(name, value);
    }
    resp
}

/// The local forward proxy.
#[derive(Debug)]
pub struct ClientProxy {
    cfg: ClientConfig,
    mapping: MappingHandle,
    hints: HintStore,
    store: PageStore,
    direct: reqwest::Client,
    pub metrics: ClientMetrics,
}

enum Route {
    Store,
    Gather(ProxyEndpoint),
    Direct,
}

impl ClientProxy {
    pub fn new(cfg: ClientConfig, table: MappingTable, hints: HintStore) -> Result<Self, String> {
        cfg.validate()?;
        let direct = reqwest::Client::builder()
            .no_proxy()
            .redirect(reqwest::redirect::Policy::none())
            .connect_timeout(cfg.gather_timeout())
            .build()
            .map_err(|e| e.to_string())?;
        Ok(ClientProxy {
            store: PageStore::new(cfg.store_cap_bytes, Duration::from_secs(cfg.page_ttl_s)),
            cfg,
            mapping: MappingHandle::new(table),
            hints,
            direct,
            metrics: ClientMetrics::default(),
        })
    }

    pub fn mapping(&self) -> &MappingHandle {
        &self.mapping
    }

    pub fn hints(&self) -> &HintStore {
        &self.hints
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    fn route(&self, method: &Method, url: &url::Url, key: &str, override_: Option<&str>) -> Route {
        if method != Method::GET {
            return Route::Direct;
        }
        if self.store.contains(key) {
            return Route::Store;
        }
        if override_ == Some("direct") {
            return Route::Direct;
        }
        let wants = override_ == Some("gather") || looks_like_page(url);
        if !wants {
            return Route::Direct;
        }
        let Some(domain) = url.host_str().and_then(|h| Domain::new(h).ok()) else {
            return Route::Direct;
        };
        let table = self.mapping.current();
        match table.lookup(&domain, self.cfg.mapping_max_age_s) {
            Lookup::Miss => Route::Direct,
            l => Route::Gather(l.endpoint().expect("hit").clone()),
        }
    }

    /// Handles one browser request.
    pub async fn handle<B>(self: &Arc<Self>, req: Request<B>) -> Response<Full<Bytes>>
    where
        B: Body + Send,
        B::Data: Send,
        B::Error: std::fmt::Display,
    {
        let (parts, body) = req.into_parts();
        let raw = if parts.uri.scheme().is_some() {
            parts.uri.to_string()
        } else if let Some(host) = parts.headers.get(hyper::header::HOST).and_then(|h| h.to_str().ok()) {
            format!("http://{host}{}", parts.uri)
        } else {
            return plain(StatusCode::BAD_REQUEST, "absolute-form request URI required");
        };
        let Some(key) = store_key(&raw) else {
            return plain(StatusCode::BAD_REQUEST, "unparseable request URI");
        };
        let url = url::Url::parse(&key).expect("normalized");
        if url.scheme() != "http" {
            return plain(StatusCode::BAD_REQUEST, "only http is proxied");
        }
        let override_ = parts
            .headers
            .get(OVERRIDE_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(|s| s.trim().to_ascii_lowercase());
        let body = match body.collect().await {
            Ok(b) => b.to_bytes(),
            Err(e) => return plain(StatusCode::BAD_REQUEST, &format!("reading request body: {e}")),
        };

        let deadline = tokio::time::Instant::now() + self.cfg.gather_timeout();
        match self.route(&parts.method, &url, &key, override_.as_deref()) {
            Route::Store => {
                if let Wait::Ready(r) = self.store.wait_for(&key, deadline).await {
                    self.metrics.store_hits.fetch_add(1, Ordering::Relaxed);
                    return from_store(&r);
                }
                self.metrics.fallbacks.fetch_add(1, Ordering::Relaxed);
                debug!(url = %key, "store miss after wait; fetching directly");
            }
            Route::Gather(ep) => {
                let page = self.store.begin_page(&key);
                self.metrics.gather_sessions.fetch_add(1, Ordering::Relaxed);
                let me = self.clone();
                let root = key.clone();
                tokio::spawn(async move { me.run_session(page, root, ep).await });
                if let Wait::Ready(r) = self.store.wait_for(&key, deadline).await {
                    self.metrics.store_hits.fetch_add(1, Ordering::Relaxed);
                    return from_store(&r);
                }
                self.metrics.fallbacks.fetch_add(1, Ordering::Relaxed);
                info!(url = %key, "gather failed or timed out; falling back to direct fetch");
            }
            Route::Direct => {
                let host = url.host_str().unwrap_or("");
                if parts.method == Method::GET
                    && override_.as_deref() != Some("direct")
                    && self.store.wait_listed(&key, host, deadline).await
                {
                    if let Wait::Ready(r) = self.store.wait_for(&key, deadline).await {
                        self.metrics.store_hits.fetch_add(1, Ordering::Relaxed);
                        return from_store(&r);
                    }
                    self.metrics.fallbacks.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        self.direct_fetch(&parts.method, &key, &parts.headers, body).await
    }

    async fn direct_fetch(
        &self,
        method: &Method,
        url: &str,
        headers: &hyper::HeaderMap,
        body: Bytes,
    ) -> Response<Full<Bytes>> {
        self.metrics.direct_fetches.fetch_add(1, Ordering::Relaxed);
        let mut fwd = hyper::HeaderMap::new();
        for (k, v) in headers {
            let n = k.as_str();
            if is_hop_by_hop(n) || n == "host" || n == OVERRIDE_HEADER || n == "proxy-connection" {
                continue;
            }
            fwd.append(k.clone(), v.clone());
        }
        let sent = self
            .direct
            .request(method.clone(), url)
            .headers(fwd)
            .body(body)
            .send()
            .await;
        let resp = match sent {
            Ok(r) => r,
            Err(e) => {
                warn!(url, error = %e, "direct fetch failed");
                return plain(StatusCode::BAD_GATEWAY, "upstream fetch failed");
            }
        };
        let status = resp.status();
        let hdrs = resp.headers().clone();
        let bytes = match resp.bytes().await {
            Ok(b) => b,
            Err(e) => {
                warn!(url, error = %e, "direct fetch body failed");
                return plain(StatusCode::BAD_GATEWAY, "upstream body failed");
            }
        };
        let mut out = Response::new(Full::new(bytes));
        *out.status_mut() = status;
        for (k, v) in &hdrs {
            if is_hop_by_hop(k.as_str()) || k == hyper::header::CONTENT_LENGTH {
                continue;
            }
            out.headers_mut().append(k.clone(), v.clone());
        }
        out
    }

    /// Drives one gather session, filling the store as frames arrive.
    async fn run_session(self: Arc<Self>, page: u64, root: String, ep: ProxyEndpoint) {
        let r = self.session_inner(page, &root, &ep).await;
        if let Err(e) = &r {
            warn!(proxy = %ep.proxy_id, url = %root, error = %e, "gather session failed");
        }
        self.store.finish(page);
    }

    async fn session_inner(&self, page: u64, root: &str, ep: &ProxyEndpoint) -> Result<(), String> {
        let timeout = self.cfg.gather_timeout();
        let stream = tokio::time::timeout(timeout, TcpStream::connect(ep.address()))
            .await
            .map_err(|_| "connect timed out".to_string())?
            .map_err(|e| format!("connect: {e}"))?;
        let _ = stream.set_nodelay(true);
        let (mut rd, mut wr) = stream.into_split();
        let req = RequestPayload {
            url: root.to_string(),
            cwnd_hint_bytes: self.hints.read_hint(&ep.proxy_id),
            want_compression: false,
        };
        write_frame(&mut wr, &GatherFrame::Request(req))
            .await
            .map_err(|e| e.to_string())?;
        wr.flush().await.map_err(|e| e.to_string())?;

        let mut dec = FrameDecoder::new();
        let mut asm = ResourceAssembler::default();
        let mut wire_bytes: u64 = 0;
        loop {
            let frame = tokio::time::timeout(timeout, read_frame(&mut rd, &mut dec))
                .await
                .map_err(|_| "gather session stalled".to_string())?
                .map_err(|e| e.to_string())?;
            match frame {
                None => return Err("proxy closed the session before END".into()),
                Some(GatherFrame::Manifest(m)) => {
                    self.store.list(page, m.resources.into_iter().map(|i| i.url));
                }
                Some(GatherFrame::Resource(chunk)) => {
                    wire_bytes += chunk.body.len() as u64;
                    if let Some(r) = asm.push(chunk).map_err(|e| e.to_string())? {
                        let stored = (r.status != 0).then(|| StoredResource {
                            status: r.status,
                            header_block: r.header_block,
                            body: r.body,
                        });
                        self.store.put(page, &r.url, stored);
                    }
                }
                Some(GatherFrame::End(end)) => {
                    debug!(
                        url = root,
                        resources = end.resource_count,
                        bytes = end.total_body_bytes,
                        echoed_hint = end.cwnd_hint_bytes,
                        "gather session complete"
                    );
                    // A window large enough for half the page lets the next
                    // session skip most of slow start.
                    let observed = (wire_bytes / 2).min(MAX_HINT_BYTES);
                    if observed > 0 {
                        self.hints.update_hint(&ep.proxy_id, observed);
                    }
                    return Ok(());
                }
                Some(GatherFrame::Error(e)) => return Err(format!("proxy error: {}", e.message)),
                Some(GatherFrame::Request(_)) => return Err("proxy sent a REQUEST frame".into()),
            }
        }
    }

    /// Serves browser connections until the listener fails.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        loop {
            let (stream, _) = listener.accept().await?;
            let me = self.clone();
            tokio::spawn(async move {
                let io = hyper_util::rt::TokioIo::new(stream);
                let svc = hyper::service::service_fn(move |req| {
                    let me = me.clone();
                    async move { Ok::<_, Infallible>(me.handle(req).await) }
                });
                if let Err(e) = hyper::server::conn::http1::Builder::new().serve_connection(io, svc).await {
                    debug!(error = %e, "browser connection ended");
                }
            });
        }
    }

    /// Periodically reloads the mapping file when it changes on disk.
    pub fn spawn_mapping_watcher(self: &Arc<Self>, every: Duration) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let _ = me.mapping.refresh_if_changed(&me.cfg.mapping_path);
            }
        })
    }
}
