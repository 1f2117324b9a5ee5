//! Deterministic page-load simulator.
//!
//! A page is a tree of resources rooted at one html document; a child can
//! only be requested once its parent has arrived. Five delivery modes:
//!
//! * `Default`: the browser talks to every origin itself, with a pool of
//!   connections per host. Each new connection pays a handshake RTT.
//!   Transfers in flight at the same time split the client's bandwidth.
//! * `Cgn`: one request to a gathering proxy near the servers. The proxy
//!   walks the dependency tree over a short RTT, then streams every byte to
//!   the client as one transfer.
//! * `CdnImages`, `Cdn90`, `CdnAll`: like `Default`, but some resources come
//!   from a CDN edge over `client_cdn` (images only, a seeded random 90%, or
//!   everything).
//!
//! `viz85` is the time by which 85% of the visual bytes (html and images)
//! have arrived, a byte-level stand-in for visual completeness.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LinkSpec, ModelError};
use crate::netem::{transfer_time, Congestion, LossStream, NetemError};
use crate::stats::{derive_seed, median};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("page has no resources")]
    EmptyPage,
    #[error("page needs exactly one root resource, found {0}")]
    Roots(usize),
    #[error("root resource {0} is not html")]
    RootNotHtml(String),
    #[error("resource {0} has zero size")]
    ZeroSize(String),
    #[error("duplicate resource url {0}")]
    DuplicateUrl(String),
    #[error("resource {child} depends on unknown {parent}")]
    UnknownParent { child: String, parent: String },
    #[error("dependency cycle through {0}")]
    Cycle(String),
    #[error("resource url {0} has no host")]
    BadUrl(String),
    #[error("page generator: {0}")]
    Infeasible(String),
    #[error("mode {0} needs the {1} link")]
    MissingLink(Mode, &'static str),
    #[error("{0}")]
    Scenario(String),
    #[error("rtt grid is empty or invalid")]
    EmptyGrid,
    #[error("sweep needs at least one page")]
    NoPages,
    #[error(transparent)]
    Netem(#[from] NetemError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageResourceKind {
    Html,
    Css,
    Js,
    Img,
    Ad,
}

impl PageResourceKind {
    fn ext(self) -> &'static str {
        match self {
            PageResourceKind::Html => "html",
            PageResourceKind::Css => "css",
            PageResourceKind::Js => "js",
            PageResourceKind::Img => "png",
            PageResourceKind::Ad => "gif",
        }
    }

    fn is_container(self) -> bool {
        matches!(self, PageResourceKind::Html | PageResourceKind::Css | PageResourceKind::Js)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageResource {
    pub url: String,
    pub kind: PageResourceKind,
    #[serde(rename = "size")]
    pub size_bytes: u64,
    pub visual: bool,
    #[serde(default)]
    pub depends_on: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSpec {
    #[serde(rename = "origin")]
    pub origin_domain: String,
    pub resources: Vec<PageResource>,
}

/// Index form of a validated page.
#[derive(Debug, Clone)]
struct PageTree {
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    hosts: Vec<String>,
}

impl PageSpec {
    fn tree(&self) -> Result<PageTree, SimError> {
        if self.resources.is_empty() {
            return Err(SimError::EmptyPage);
        }
        let mut index = HashMap::new();
        for (i, r) in self.resources.iter().enumerate() {
            if r.size_bytes == 0 {
                return Err(SimError::ZeroSize(r.url.clone()));
            }
            if index.insert(r.url.as_str(), i).is_some() {
                return Err(SimError::DuplicateUrl(r.url.clone()));
            }
        }
        let roots: Vec<usize> = (0..self.resources.len())
            .filter(|&i| self.resources[i].depends_on.is_none())
            .collect();
        if roots.len() != 1 {
            return Err(SimError::Roots(roots.len()));
        }
        let root = roots[0];
        if self.resources[root].kind != PageResourceKind::Html {
            return Err(SimError::RootNotHtml(self.resources[root].url.clone()));
        }
        let mut parent = vec![None; self.resources.len()];
        let mut children = vec![Vec::new(); self.resources.len()];
        for (i, r) in self.resources.iter().enumerate() {
            if let Some(p) = &r.depends_on {
                let &pi = index.get(p.as_str()).ok_or_else(|| SimError::UnknownParent {
                    child: r.url.clone(),
                    parent: p.clone(),
                })?;
                parent[i] = Some(pi);
                children[pi].push(i);
            }
        }
        // With a single root, every node reachable from it means no cycles.
        let mut depth = vec![usize::MAX; self.resources.len()];
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            for &c in &children[i] {
                depth[c] = depth[i] + 1;
                queue.push_back(c);
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(SimError::Cycle(self.resources[i].url.clone()));
        }
        let hosts = self
            .resources
            .iter()
            .map(|r| {
                url::Url::parse(&r.url)
                    .ok()
                    .and_then(|u| u.host_str().map(str::to_string))
                    .ok_or_else(|| SimError::BadUrl(r.url.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(PageTree {
            root,
            parent,
            children,
            depth,
            hosts,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.tree().map(|_| ())
    }

    pub fn total_bytes(&self) -> u64 {
        self.resources.iter().map(|r| r.size_bytes).sum()
    }

    /// Longest parent chain, in edges. A lone html document has depth 0.
    pub fn depth(&self) -> Result<usize, SimError> {
        Ok(self.tree()?.depth.into_iter().max().unwrap_or(0))
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let p: PageSpec = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("page serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageGenConfig {
    pub seed: u64,
    pub n_resources: usize,
    pub total_bytes: u64,
    /// Maximum dependency depth in edges below the root.
    pub depth: usize,
    pub ad_fraction: f64,
}

impl Default for PageGenConfig {
    fn default() -> Self {
        PageGenConfig {
            seed: 0,
            n_resources: 50,
            total_bytes: 2_000_000,
            depth: 3,
            ad_fraction: 0.05,
        }
    }
}

/// Target byte shares by kind; images dominate, as on typical pages.
const BYTE_SHARES: [(PageResourceKind, f64); 5] = [
    (PageResourceKind::Html, 0.05),
    (PageResourceKind::Css, 0.06),
    (PageResourceKind::Js, 0.13),
    (PageResourceKind::Img, 0.72),
    (PageResourceKind::Ad, 0.04),
];

const THIRD_PARTY_HOSTS: [&str; 3] = ["cdn.thirdparty.test", "fonts.thirdparty.test", "static.widgets.test"];

pub fn generate_page(cfg: &PageGenConfig) -> Result<PageSpec, SimError> {
    if cfg.n_resources < 1 {
        return Err(SimError::Infeasible("n_resources must be >= 1".into()));
    }
    if cfg.depth < 1 {
        return Err(SimError::Infeasible("depth must be >= 1".into()));
    }
    if cfg.total_bytes < cfg.n_resources as u64 {
        return Err(SimError::Infeasible(format!(
            "total_bytes {} < n_resources {}",
            cfg.total_bytes, cfg.n_resources
        )));
    }
    if !(0.0..=1.0).contains(&cfg.ad_fraction) {
        return Err(SimError::Infeasible("ad_fraction must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let origin = format!("p{:08x}.test", rng.gen::<u32>());
    let n = cfg.n_resources;
    let others = n - 1;
    let n_ads = ((cfg.ad_fraction * others as f64).round() as usize).min(others);

    // Kinds and parents. Index 0 is the root document.
    let mut kinds = vec![PageResourceKind::Html];
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut depth = vec![0usize];
    for i in 0..others - n_ads {
        let kind = if i == 0 {
            PageResourceKind::Img
        } else {
            match rng.gen_range(0..100) {
                0..=59 => PageResourceKind::Img,
                60..=84 => PageResourceKind::Js,
                _ => PageResourceKind::Css,
            }
        };
        let want = rng.gen_range(1..=cfg.depth);
        let candidates: Vec<usize> = (0..kinds.len())
            .filter(|&j| kinds[j].is_container() && depth[j] + 1 <= want)
            .collect();
        let deepest = candidates.iter().map(|&j| depth[j]).max().unwrap_or(0);
        let pool: Vec<usize> = candidates.into_iter().filter(|&j| depth[j] == deepest).collect();
        let p = pool[rng.gen_range(0..pool.len())];
        kinds.push(kind);
        parent.push(Some(p));
        depth.push(depth[p] + 1);
    }
    // Ads hang off the deepest container that still leaves room, i.e. they
    // arrive last.
    for _ in 0..n_ads {
        let limit = cfg.depth - 1;
        let best = (0..kinds.len())
            .filter(|&j| kinds[j].is_container() && depth[j] <= limit)
            .max_by_key(|&j| (depth[j], std::cmp::Reverse(j)))
            .unwrap_or(0);
        kinds.push(PageResourceKind::Ad);
        parent.push(Some(best));
        depth.push(depth[best] + 1);
    }

    let sizes = allocate_sizes(&kinds, cfg.total_bytes, &mut rng);
    let hosts: Vec<String> = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| match k {
            _ if i == 0 => origin.clone(),
            PageResourceKind::Ad => format!("ads{}.adnet.test", rng.gen_range(0..2)),
            _ if rng.gen_bool(0.6) => origin.clone(),
            _ => THIRD_PARTY_HOSTS[rng.gen_range(0..THIRD_PARTY_HOSTS.len())].to_string(),
        })
        .collect();
    let urls: Vec<String> = (0..n)
        .map(|i| {
            if i == 0 {
                format!("http://{origin}/")
            } else {
                format!("http://{}/r{i}.{}", hosts[i], kinds[i].ext())
            }
        })
        .collect();
    let resources = (0..n)
        .map(|i| PageResource {
            url: urls[i].clone(),
            kind: kinds[i],
            size_bytes: sizes[i],
            visual: matches!(kinds[i], PageResourceKind::Html | PageResourceKind::Img),
            depends_on: parent[i].map(|p| urls[p].clone()),
        })
        .collect();
    Ok(PageSpec {
        origin_domain: origin,
        resources,
    })
}

/// Splits `total` bytes so each kind gets its target share (renormalized
/// over the kinds present), each resource at least one byte, summing exactly.
fn allocate_sizes(kinds: &[PageResourceKind], total: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let n = kinds.len();
    if n == 1 {
        return vec![total];
    }
    let weights: Vec<f64> = (0..n).map(|_| 0.2 - (1.0 - rng.gen::<f64>()).ln()).collect();
    let present: f64 = BYTE_SHARES
        .iter()
        .filter(|(k, _)| kinds.contains(k))
        .map(|(_, s)| s)
        .sum();
    let mut ideal = vec![0.0; n];
    for (k, share) in BYTE_SHARES {
        let members: Vec<usize> = (0..n).filter(|&i| kinds[i] == k).collect();
        let wsum: f64 = members.iter().map(|&i| weights[i]).sum();
        for &i in &members {
            ideal[i] = share / present * weights[i] / wsum;
        }
    }
    let spare = (total - n as u64) as f64;
    let mut sizes: Vec<u64> = ideal.iter().map(|f| 1 + (f * spare).floor() as u64).collect();
    let mut left = total - sizes.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = (ideal[a] * spare).fract();
        let fb = (ideal[b] * spare).fract();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Default,
    Cgn,
    CdnImages,
    Cdn90,
    CdnAll,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Default, Mode::Cgn, Mode::CdnImages, Mode::Cdn90, Mode::CdnAll];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Default => "default",
            Mode::Cgn => "cgn",
            Mode::CdnImages => "cdn_images",
            Mode::Cdn90 => "cdn90",
            Mode::CdnAll => "cdn_all",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// On-the-fly image recompression at the proxy: fewer bytes, more serial
/// compute before streaming starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    /// Output/input size ratio for images, in (0, 1].
    pub ratio: f64,
    /// Proxy compute per MB (10^6 bytes) of input images.
    pub compute_s_per_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: Mode,
    /// Optional name for output rows; defaults to the mode name.
    #[serde(default)]
    pub label: Option<String>,
    pub client_server: LinkSpec,
    #[serde(default)]
    pub client_proxy: Option<LinkSpec>,
    #[serde(default)]
    pub client_cdn: Option<LinkSpec>,
    #[serde(default)]
    pub proxy_server_rtt_s: f64,
    #[serde(default = "default_overhead")]
    pub proxy_overhead_s: f64,
    /// Congestion control on the proxy-to-client path. Origin servers and
    /// CDN edges are modeled as loss-based senders.
    #[serde(default)]
    pub congestion: Congestion,
    #[serde(default = "default_conns")]
    pub parallel_conns_per_origin: usize,
    #[serde(default)]
    pub zero_rtt: bool,
    /// Initial window of the proxy-to-client transfer; defaults to the
    /// client_proxy link's initial window.
    #[serde(default)]
    pub cwnd_hint_bytes: Option<u64>,
    #[serde(default)]
    pub compression: Option<Compression>,
    #[serde(default)]
    pub seed: u64,
}

fn default_overhead() -> f64 {
    0.7
}

fn default_conns() -> usize {
    6
}

impl Scenario {
    /// A scenario with defaults for everything but the mode and links.
    pub fn new(mode: Mode, client_server: LinkSpec) -> Self {
        Scenario {
            mode,
            label: None,
            client_server,
            client_proxy: None,
            client_cdn: None,
            proxy_server_rtt_s: 0.0,
            proxy_overhead_s: default_overhead(),
            congestion: Congestion::CubicLike,
            parallel_conns_per_origin: default_conns(),
            zero_rtt: false,
            cwnd_hint_bytes: None,
            compression: None,
            seed: 0,
        }
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.mode.name())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.client_server.validate()?;
        match self.mode {
            Mode::Cgn => self
                .client_proxy
                .as_ref()
                .ok_or(SimError::MissingLink(self.mode, "client_proxy"))?
                .validate()?,
            Mode::CdnImages | Mode::Cdn90 | Mode::CdnAll => self
                .client_cdn
                .as_ref()
                .ok_or(SimError::MissingLink(self.mode, "client_cdn"))?
                .validate()?,
            Mode::Default => {}
        }
        if !self.proxy_server_rtt_s.is_finite() || self.proxy_server_rtt_s < 0.0 {
            return Err(SimError::Scenario("proxy_server_rtt_s must be >= 0".into()));
        }
        if !self.proxy_overhead_s.is_finite() || self.proxy_overhead_s < 0.0 {
            return Err(SimError::Scenario("proxy_overhead_s must be >= 0".into()));
        }
        if self.parallel_conns_per_origin < 1 {
            return Err(SimError::Scenario("parallel_conns_per_origin must be >= 1".into()));
        }
        if let Some(c) = self.compression {
            if !(c.ratio > 0.0 && c.ratio <= 1.0) || !(c.compute_s_per_mb >= 0.0) {
                return Err(SimError::Scenario("compression ratio must be in (0, 1], compute >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub url: String,
    pub bytes: u64,
    pub visual: bool,
    pub request_t: f64,
    pub first_byte_t: f64,
    pub complete_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadTrace {
    pub mode: Mode,
    /// Same order as the page's resources.
    pub entries: Vec<TraceEntry>,
    pub viz85_s: f64,
    pub full_load_s: f64,
}

impl LoadTrace {
    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }
}

/// Earliest completion time by which 85% of visual bytes are in. Pages
/// without visual bytes fall back to the full load time.
fn viz85(entries: &[TraceEntry]) -> f64 {
    let total: u64 = entries.iter().filter(|e| e.visual).map(|e| e.bytes).sum();
    let full = entries.iter().map(|e| e.complete_t).fold(0.0, f64::max);
    if total == 0 {
        return full;
    }
    let mut vis: Vec<&TraceEntry> = entries.iter().filter(|e| e.visual).collect();
    vis.sort_by(|a, b| a.complete_t.total_cmp(&b.complete_t));
    let need = 0.85 * total as f64;
    let mut acc = 0u64;
    for e in vis {
        acc += e.bytes;
        if acc as f64 >= need {
            return e.complete_t;
        }
    }
    full
}

/// Checks per-resource time ordering and that no child is requested before
/// its parent completed.
pub fn validate_trace(page: &PageSpec, trace: &LoadTrace) -> Result<(), String> {
    let tree = page.tree().map_err(|e| e.to_string())?;
    for (i, e) in trace.entries.iter().enumerate() {
        if !(e.request_t <= e.first_byte_t && e.first_byte_t <= e.complete_t) {
            return Err(format!("{}: times out of order", e.url));
        }
        if let Some(p) = tree.parent[i] {
            if e.request_t < trace.entries[p].complete_t {
                return Err(format!("{} requested before its parent completed", e.url));
            }
        }
    }
    Ok(())
}

pub fn simulate(page: &PageSpec, sc: &Scenario) -> Result<LoadTrace, SimError> {
    let tree = page.tree()?;
    sc.validate()?;
    let entries = match sc.mode {
        Mode::Cgn => simulate_cgn(page, &tree, sc)?,
        _ => simulate_direct(page, &tree, sc)?,
    };
    let full_load_s = entries.iter().map(|e| e.complete_t).fold(0.0, f64::max);
    Ok(LoadTrace {
        mode: sc.mode,
        viz85_s: viz85(&entries),
        full_load_s,
        entries,
    })
}

#[derive(PartialEq)]
struct Ready(f64, usize);

impl Eq for Ready {}

impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ready {
    // Min-heap on (time, index).
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

fn simulate_direct(page: &PageSpec, tree: &PageTree, sc: &Scenario) -> Result<Vec<TraceEntry>, SimError> {
    let n = page.resources.len();
    let via_cdn: Vec<bool> = match sc.mode {
        Mode::Default => vec![false; n],
        Mode::CdnAll => vec![true; n],
        Mode::CdnImages => page.resources.iter().map(|r| r.kind == PageResourceKind::Img).collect(),
        Mode::Cdn90 => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, 0xCD90));
            (0..n).map(|_| rng.gen_bool(0.9)).collect()
        }
        Mode::Cgn => unreachable!(),
    };
    // One loss stream for the whole load keeps CdnAll with an identical CDN
    // link draw-for-draw equal to Default.
    let mut loss = LossStream::new(sc.client_server.loss, derive_seed(sc.seed, 1))?;
    let mut cdn_loss = match &sc.client_cdn {
        Some(l) if l.loss != sc.client_server.loss => Some(LossStream::new(l.loss, derive_seed(sc.seed, 2))?),
        _ => None,
    };

    let mut pools: HashMap<(&str, bool), Vec<f64>> = HashMap::new();
    let mut active: Vec<(f64, f64)> = Vec::new();
    let mut out: Vec<Option<TraceEntry>> = vec![None; n];
    let mut heap = BinaryHeap::from([Ready(0.0, tree.root)]);
    while let Some(Ready(ready, i)) = heap.pop() {
        let r = &page.resources[i];
        let link = if via_cdn[i] {
            sc.client_cdn.as_ref().expect("validated")
        } else {
            &sc.client_server
        };
        let pool = pools.entry((tree.hosts[i].as_str(), via_cdn[i])).or_default();
        let (slot, start) = match pool.iter().position(|&free| free <= ready) {
            Some(k) => (k, ready),
            None if pool.len() < sc.parallel_conns_per_origin => {
                pool.push(0.0);
                (pool.len() - 1, ready + link.rtt_s)
            }
            None => {
                let (k, &free) = pool
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("pool non-empty");
                (k, free)
            }
        };
        let sharing = 1 + active.iter().filter(|(s, c)| *s <= start && start < *c).count();
        let shared = LinkSpec {
            bandwidth_bps: link.bandwidth_bps / sharing as f64,
            ..*link
        };
        let stream = match (&mut cdn_loss, via_cdn[i]) {
            (Some(s), true) => s,
            _ => &mut loss,
        };
        let t = transfer_time(r.size_bytes, &shared, stream, Congestion::CubicLike, link.init_cwnd_bytes())?;
        let complete = start + t;
        pool[slot] = complete;
        active.push((start, complete));
        out[i] = Some(TraceEntry {
            url: r.url.clone(),
            bytes: r.size_bytes,
            visual: r.visual,
            request_t: ready,
            first_byte_t: (start + link.rtt_s).min(complete),
            complete_t: complete,
        });
        for &c in &tree.children[i] {
            heap.push(Ready(complete, c));
        }
    }
    Ok(out.into_iter().map(|e| e.expect("tree reaches all")).collect())
}

fn simulate_cgn(page: &PageSpec, tree: &PageTree, sc: &Scenario) -> Result<Vec<TraceEntry>, SimError> {
    let link = sc.client_proxy.as_ref().expect("validated");
    let handshake = if sc.zero_rtt { 0.0 } else { link.rtt_s };
    let levels = tree.depth.iter().max().copied().unwrap_or(0) + 1;
    let mut gather = levels as f64 * sc.proxy_server_rtt_s + sc.proxy_overhead_s;

    // Wire sizes after optional image recompression.
    let wire: Vec<u64> = page
        .resources
        .iter()
        .map(|r| match sc.compression {
            Some(c) if r.kind == PageResourceKind::Img => ((r.size_bytes as f64 * c.ratio).round() as u64).max(1),
            _ => r.size_bytes,
        })
        .collect();
    if let Some(c) = sc.compression {
        let img: u64 = page
            .resources
            .iter()
            .filter(|r| r.kind == PageResourceKind::Img)
            .map(|r| r.size_bytes)
            .sum();
        gather += c.compute_s_per_mb * img as f64 / 1e6;
    }
    let stream_start = handshake + 0.5 * link.rtt_s + gather;
    let total: u64 = wire.iter().sum();
    let mut loss = LossStream::new(link.loss, derive_seed(sc.seed, 3))?;
    let start_cwnd = sc.cwnd_hint_bytes.unwrap_or_else(|| link.init_cwnd_bytes());
    let t = transfer_time(total, link, &mut loss, sc.congestion, start_cwnd)?;

    // Manifest order: breadth-first from the root, document order within a level.
    let mut order: Vec<usize> = (0..page.resources.len()).collect();
    order.sort_by_key(|&i| (tree.depth[i], i));
    let mut complete = vec![0.0; page.resources.len()];
    let mut cum = 0u64;
    let mut prev = stream_start;
    let mut first_byte = vec![0.0; page.resources.len()];
    for &i in &order {
        cum += wire[i];
        complete[i] = stream_start + t * cum as f64 / total as f64;
        first_byte[i] = prev;
        prev = complete[i];
    }
    Ok(page
        .resources
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let request_t = tree.parent[i].map_or(0.0, |p| complete[p]);
            TraceEntry {
                url: r.url.clone(),
                bytes: r.size_bytes,
                visual: r.visual,
                request_t,
                first_byte_t: first_byte[i].max(request_t),
                complete_t: complete[i],
            }
        })
        .collect())
}

/// Inclusive RTT grid in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttGrid {
    pub start_ms: f64,
    pub stop_ms: f64,
    pub step_ms: f64,
}

impl RttGrid {
    pub fn points(&self) -> Result<Vec<f64>, SimError> {
        let ok = self.start_ms.is_finite()
            && self.stop_ms.is_finite()
            && self.step_ms > 0.0
            && self.start_ms >= 0.0
            && self.stop_ms >= self.start_ms;
        if !ok {
            return Err(SimError::EmptyGrid);
        }
        let n = ((self.stop_ms - self.start_ms) / self.step_ms + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.start_ms + k as f64 * self.step_ms).collect())
    }
}

/// Which latency the grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Client-server RTT. The gathering proxy sits next to the servers, so
    /// the client-proxy RTT moves with it.
    #[default]
    ClientServer,
    ClientCdn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scenarios: Vec<Scenario>,
    pub grid: RttGrid,
    #[serde(default)]
    pub axis: SweepAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: String,
    pub rtt_ms: f64,
    pub median_viz85_s: f64,
    pub median_full_load_s: f64,
}

pub fn scenario_at(sc: &Scenario, axis: SweepAxis, rtt_ms: f64) -> Scenario {
    let mut s = sc.clone();
    let rtt = rtt_ms / 1000.0;
    match axis {
        SweepAxis::ClientServer => {
            s.client_server.rtt_s = rtt;
            if let Some(p) = &mut s.client_proxy {
                p.rtt_s = rtt;
            }
        }
        SweepAxis::ClientCdn => {
            if let Some(c) = &mut s.client_cdn {
                c.rtt_s = rtt;
            }
        }
    }
    s
}

/// Median viz85 and full-load time per (scenario, grid point). Page `i` runs
/// with seed `derive_seed(scenario.seed, i)`. Output order is scenario-major
/// and independent of thread scheduling.
pub fn sweep(pages: &[PageSpec], cfg: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    if pages.is_empty() {
        return Err(SimError::NoPages);
    }
    let grid = cfg.grid.points()?;
    for p in pages {
        p.validate()?;
    }
    let jobs: Vec<(usize, f64)> = (0..cfg.scenarios.len())
        .flat_map(|s| grid.iter().map(move |&g| (s, g)))
        .collect();
    jobs.par_iter()
        .map(|&(s, rtt_ms)| {
            let base = scenario_at(&cfg.scenarios[s], cfg.axis, rtt_ms);
            let mut viz = Vec::with_capacity(pages.len());
            let mut full = Vec::with_capacity(pages.len());
            for (i, page) in pages.iter().enumerate() {
                let sc = Scenario {
                    seed: derive_seed(base.seed, i as u64),
                    ..base.clone()
                };
                let t = simulate(page, &sc)?;
                viz.push(t.viz85_s);
                full.push(t.full_load_s);
            }
            Ok(SweepRow {
                mode: base.label().to_string(),
                rtt_ms,
                median_viz85_s: median(&viz).expect("non-empty"),
                median_full_load_s: median(&full).expect("non-empty"),
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "mode,rtt_ms,median_viz85_s,median_full_load_s";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6}", r.mode, r.rtt_ms, r.median_viz85_s, r.median_full_load_s)?;
    }
    Ok(())
}

/// Parses sweep CSV back into rows (for fitting).
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>, String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != SWEEP_CSV_HEADER {
        return Err(format!("expected header {SWEEP_CSV_HEADER}"));
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| e.to_string())?;
            let num = |k: usize| -> Result<f64, String> {
                rec[k].parse().map_err(|_| format!("line {}: bad number {:?}", i + 2, &rec[k]))
            };
            Ok(SweepRow {
                mode: rec[0].to_string(),
                rtt_ms: num(1)?,
                median_viz85_s: num(2)?,
                median_full_load_s: num(3)?,
            })
        })
        .collect()
}

/// Rows grouped by mode label, in grid order.
pub fn rows_by_mode(rows: &[SweepRow]) -> BTreeMap<&str, Vec<&SweepRow>> {
    let mut m: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.mode.as_str()).or_default().push(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossModel;

    fn single_html() -> PageSpec {
        PageSpec {
            origin_domain: "x.test".into(),
            resources: vec![PageResource {
                url: "http://x.test/".into(),
                kind: PageResourceKind::Html,
                size_bytes: 14_600,
                visual: true,
                depends_on: None,
            }],
        }
    }

    fn res(url: &str, kind: PageResourceKind, size: u64, parent: Option<&str>) -> PageResource {
        PageResource {
            url: url.into(),
            kind,
            size_bytes: size,
            visual: matches!(kind, PageResourceKind::Html | PageResourceKind::Img),
            depends_on: parent.map(str::to_string),
        }
    }

    fn link() -> LinkSpec {
        LinkSpec::lossless(0.1, 1e7)
    }

    #[test]
    fn default_single_html_example() {
        let t = simulate(&single_html(), &Scenario::new(Mode::Default, link())).unwrap();
        assert!((t.full_load_s - 0.21168).abs() < 1e-12, "{}", t.full_load_s);
        assert_eq!(t.viz85_s, t.full_load_s);
    }

    #[test]
    fn cgn_single_html_example() {
        let mut sc = Scenario::new(Mode::Cgn, link());
        sc.client_proxy = Some(link());
        sc.zero_rtt = true;
        sc.proxy_overhead_s = 0.0;
        sc.cwnd_hint_bytes = Some(14_600);
        let t = simulate(&single_html(), &sc).unwrap();
        assert!((t.full_load_s - 0.16168).abs() < 1e-12, "{}", t.full_load_s);
    }

    #[test]
    fn cdn_all_with_same_link_equals_default() {
        let page = generate_page(&PageGenConfig {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let l = LinkSpec::lossless(0.08, 1e7).with_loss(LossModel::Uniform { rate: 0.01 });
        let d = simulate(&page, &Scenario::new(Mode::Default, l)).unwrap();
        let mut c = Scenario::new(Mode::CdnAll, l);
        c.client_cdn = Some(l);
        let ct = simulate(&page, &c).unwrap();
        assert_eq!(d.entries, ct.entries);
    }

    #[test]
    fn missing_link_rejected() {
        let r = simulate(&single_html(), &Scenario::new(Mode::Cgn, link()));
        assert!(matches!(r, Err(SimError::MissingLink(Mode::Cgn, _))));
    }

    #[test]
    fn page_validation() {
        let mut p = single_html();
        p.resources.push(res("http://x.test/a.png", PageResourceKind::Img, 10, Some("http://x.test/b.css")));
        p.resources.push(res("http://x.test/b.css", PageResourceKind::Css, 10, Some("http://x.test/a.png")));
        assert!(matches!(p.validate(), Err(SimError::Cycle(_))));

        let mut q = single_html();
        q.resources.push(res("http://x.test/a.png", PageResourceKind::Img, 0, Some("http://x.test/")));
        assert!(matches!(q.validate(), Err(SimError::ZeroSize(_))));

        let mut r = single_html();
        r.resources.push(res("http://x.test/a.png", PageResourceKind::Img, 5, Some("http://x.test/nope")));
        assert!(matches!(r.validate(), Err(SimError::UnknownParent { .. })));

        let mut s = single_html();
        s.resources.push(res("http://y.test/", PageResourceKind::Html, 5, None));
        assert_eq!(s.validate(), Err(SimError::Roots(2)));
    }

    #[test]
    fn generator_basics() {
        let one = generate_page(&PageGenConfig {
            n_resources: 1,
            total_bytes: 777,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(one.resources.len(), 1);
        assert_eq!(one.resources[0].size_bytes, 777);
        assert_eq!(one.resources[0].kind, PageResourceKind::Html);

        let cfg = PageGenConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_page(&cfg).unwrap(), generate_page(&cfg).unwrap());
        assert!(generate_page(&PageGenConfig {
            n_resources: 10,
            total_bytes: 9,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn generator_image_share_and_depth() {
        for seed in 0..20 {
            let p = generate_page(&PageGenConfig {
                seed,
                n_resources: 50,
                total_bytes: 2_000_000,
                depth: 3,
                ad_fraction: 0.05,
            })
            .unwrap();
            assert_eq!(p.total_bytes(), 2_000_000);
            assert!(p.depth().unwrap() <= 3);
            let img: u64 = p
                .resources
                .iter()
                .filter(|r| r.kind == PageResourceKind::Img)
                .map(|r| r.size_bytes)
                .sum();
            let share = img as f64 / 2e6;
            assert!((0.65..=0.80).contains(&share), "seed {seed}: {share}");
            let ads_deepest = p
                .resources
                .iter()
                .filter(|r| r.kind == PageResourceKind::Ad)
                .all(|r| !r.visual);
            assert!(ads_deepest);
        }
    }

    #[test]
    fn traces_validate_in_every_mode() {
        let page = generate_page(&PageGenConfig::default()).unwrap();
        let l = LinkSpec::lossless(0.12, 1e7);
        for mode in Mode::ALL {
            let mut sc = Scenario::new(mode, l);
            sc.client_proxy = Some(l);
            sc.client_cdn = Some(LinkSpec::lossless(0.03, 1e7));
            let t = simulate(&page, &sc).unwrap();
            validate_trace(&page, &t).unwrap();
            assert_eq!(t.total_bytes(), page.total_bytes());
            assert!(t.viz85_s <= t.full_load_s);
        }
    }

    #[test]
    fn default_linear_in_rtt_when_bandwidth_is_ample() {
        let page = generate_page(&PageGenConfig::default()).unwrap();
        let fast = |rtt| simulate(&page, &Scenario::new(Mode::Default, LinkSpec::lossless(rtt, 1e13))).unwrap();
        let floor = simulate(&page, &Scenario::new(Mode::Default, LinkSpec::lossless(1e-9, 1e13)))
            .unwrap()
            .viz85_s;
        let a = fast(0.05).viz85_s - floor;
        let b = fast(0.10).viz85_s - floor;
        assert!((b / a - 2.0).abs() < 1e-3, "{a} {b}");
    }

    #[test]
    fn page_json_roundtrip() {
        let p = generate_page(&PageGenConfig::default()).unwrap();
        let back = PageSpec::from_json(&p.to_json()).unwrap();
        assert_eq!(p, back);
        assert!(p.to_json().contains("\"origin\""));
    }

    #[test]
    fn grid_points() {
        let g = RttGrid {
            start_ms: 10.0,
            stop_ms: 320.0,
            step_ms: 10.0,
        };
        let pts = g.points().unwrap();
        assert_eq!(pts.len(), 32);
        assert_eq!(*pts.last().unwrap(), 320.0);
        assert!(RttGrid {
            start_ms: 5.0,
            stop_ms: 1.0,
            step_ms: 1.0
        }
        .points()
        .is_err());
    }

    #[test]
    fn sweep_single_page_medians_equal_values() {
        let page = generate_page(&PageGenConfig::default()).unwrap();
        let sc = Scenario::new(Mode::Default, link());
        let cfg = SweepConfig {
            scenarios: vec![sc.clone()],
            grid: RttGrid {
                start_ms: 100.0,
                stop_ms: 100.0,
                step_ms: 1.0,
            },
            axis: SweepAxis::ClientServer,
        };
        let rows = sweep(std::slice::from_ref(&page), &cfg).unwrap();
        let t = simulate(&page, &Scenario { seed: derive_seed(0, 0), ..sc }).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].median_viz85_s, t.viz85_s);
        assert!(sweep(&[], &cfg).is_err());
    }

    #[test]
    fn sweep_csv_roundtrip() {
        let rows = vec![SweepRow {
            mode: "cgn".into(),
            rtt_ms: 10.0,
            median_viz85_s: 1.5,
            median_full_load_s: 2.25,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "mode,rtt_ms,median_viz85_s,median_full_load_s\ncgn,10,1.500000,2.250000\n");
        assert_eq!(read_sweep_csv(&text).unwrap(), rows);
    }
}
