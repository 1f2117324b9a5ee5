//! Shared fixtures: an in-process synthetic origin server, a gathering node
//! and a client proxy wired together on loopback.
#![allow(dead_code)]

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use cgn_core::clientproxy::{ClientConfig, ClientProxy, HintStore};
use cgn_core::gatherproxy::{spawn_server, GatherConfig, GatherMetrics, HttpFetcher};
use cgn_core::mapping::{unix_now, MappingEntry, MappingTable, ProxyEndpoint};
use cgn_core::model::{Domain, VantageId};
use http_body_util::Full;
use hyper::{Request, Response};
use tokio::net::TcpListener;

pub mod instances;

#[derive(Clone)]
pub struct Served {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
    pub delay: Duration,
}

/// A static HTTP origin that counts requests per path.
pub struct Origin {
    pub addr: SocketAddr,
    pub hits: Arc<Mutex<HashMap<String, u64>>>,
    pub total: Arc<AtomicU64>,
}

impl Origin {
    pub async fn start<S: Into<String>>(files: Vec<(S, Served)>) -> Origin {
        let files: Arc<HashMap<String, Served>> =
            Arc::new(files.into_iter().map(|(p, s)| (p.into(), s)).collect());
        let hits = Arc::new(Mutex::new(HashMap::new()));
        let total = Arc::new(AtomicU64::new(0));
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (h, t) = (hits.clone(), total.clone());
        tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else { return };
                let (files, h, t) = (files.clone(), h.clone(), t.clone());
                tokio::spawn(async move {
                    let svc = hyper::service::service_fn(move |req: Request<hyper::body::Incoming>| {
                        let (files, h, t) = (files.clone(), h.clone(), t.clone());
                        async move {
                            let path = req.uri().path_and_query().map(|p| p.to_string()).unwrap_or_default();
                            *h.lock().unwrap().entry(path.clone()).or_insert(0) += 1;
                            t.fetch_add(1, Ordering::SeqCst);
                            let resp = match files.get(&path) {
                                Some(s) => {
                                    tokio::time::sleep(s.delay).await;
                                    Response::builder()
                                        .status(s.status)
                                        .header("content-type", s.content_type)
                                        .header("x-origin", "synthetic")
                                        .body(Full::new(Bytes::from(s.body.clone())))
                                        .unwrap()
                                }
                                None => Response::builder()
                                    .status(404)
                                    .body(Full::new(Bytes::from_static(b"not found")))
                                    .unwrap(),
                            };
                            Ok::<_, Infallible>(resp)
                        }
                    });
                    let io = hyper_util::rt::TokioIo::new(stream);
                    let _ = hyper::server::conn::http1::Builder::new().serve_connection(io, svc).await;
                });
            }
        });
        Origin { addr, hits, total }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn hits(&self, path: &str) -> u64 {
        self.hits.lock().unwrap().get(path).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }
}

pub fn served(content_type: &'static str, body: impl Into<Vec<u8>>) -> Served {
    Served {
        status: 200,
        content_type,
        body: body.into(),
        delay: Duration::ZERO,
    }
}

/// Deterministic pseudo-random bytes so every resource has distinct content.
pub fn blob(seed: u64, len: usize) -> Vec<u8> {
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

/// One html page referencing `n` subresources: a stylesheet that itself
/// references one image, scripts, and images. Returns (files, subresource
/// paths in document order).
pub fn site(n: usize) -> (Vec<(String, Served)>, Vec<String>) {
    assert!(n >= 2);
    let mut html = String::from("<html><head><link rel=\"stylesheet\" href=\"/style.css\">");
    let mut paths: Vec<String> = vec!["/style.css".into(), "/bg.png".into()];
    let mut files: Vec<(String, Served)> = vec![
        ("/style.css".into(), served("text/css", "body { background: url(/bg.png) }")),
        ("/bg.png".into(), served("image/png", blob(1, 3000))),
    ];
    for i in 0..n - 2 {
        let (path, ct) = if i % 3 == 0 {
            (format!("/s{i}.js"), "application/javascript")
        } else {
            (format!("/i{i}.png"), "image/png")
        };
        if ct.starts_with("image") {
            html.push_str(&format!("<img src=\"{path}\">"));
        } else {
            html.push_str(&format!("<script src=\"{path}\"></script>"));
        }
        files.push((path.clone(), served(ct, blob(10 + i as u64, 2000 + 997 * i))));
        paths.push(path);
    }
    html.push_str("</head><body>hello</body></html>");
    files.push(("/".into(), served("text/html", html)));
    (files, paths)
}

pub fn mapping_for(domain: &str, proxies: &[(&str, SocketAddr)], chosen: &str) -> MappingTable {
    let endpoints = proxies
        .iter()
        .map(|(id, a)| ProxyEndpoint::new(VantageId::new(id).unwrap(), &a.to_string()).unwrap())
        .collect();
    let entries = vec![MappingEntry {
        domain: Domain::new(domain).unwrap(),
        proxy_id: VantageId::new(chosen).unwrap(),
        rtt_ms: 1.0,
        measured_at: unix_now(),
    }];
    MappingTable::new(endpoints, entries, unix_now()).unwrap()
}

pub async fn start_gatherd(cfg: GatherConfig) -> (SocketAddr, Arc<GatherMetrics>) {
    let fetcher = Arc::new(HttpFetcher::new(Duration::from_millis(cfg.per_resource_timeout_ms)).unwrap());
    let cfg = GatherConfig {
        listen_addr: "127.0.0.1:0".into(),
        ..cfg
    };
    let (addr, metrics, _h) = spawn_server(cfg, fetcher).await.unwrap();
    (addr, metrics)
}

pub async fn start_client(table: MappingTable, gather_timeout_ms: u64, hints: HintStore) -> (SocketAddr, Arc<ClientProxy>) {
    let cfg = ClientConfig {
        listen_addr: "127.0.0.1:0".into(),
        gather_timeout_ms,
        ..Default::default()
    };
    let proxy = Arc::new(ClientProxy::new(cfg, table, hints).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(proxy.clone().serve(listener));
    (addr, proxy)
}

/// A "browser" that sends everything through the client proxy.
pub fn browser(proxy: SocketAddr) -> reqwest::Client {
    reqwest::Client::builder()
        .proxy(reqwest::Proxy::http(format!("http://{proxy}")).unwrap())
        .redirect(reqwest::redirect::Policy::none())
        .build()
        .unwrap()
}

/// A direct client, for reference responses.
pub fn direct() -> reqwest::Client {
    reqwest::Client::builder().no_proxy().build().unwrap()
}

pub async fn get(c: &reqwest::Client, url: &str) -> (u16, Vec<u8>) {
    let r = c.get(url).send().await.unwrap();
    let s = r.status().as_u16();
    (s, r.bytes().await.unwrap().to_vec())
}

/// An address nothing listens on.
pub async fn dead_addr() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let a = l.local_addr().unwrap();
    drop(l);
    a
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FakeGather {
    /// Reply to every REQUEST with an ERROR frame.
    Error,
    /// Read the REQUEST and never answer.
    Stall,
    /// Run a real gather session.
    Real,
}

/// A gather node whose behavior can be scripted; records every REQUEST.
pub struct FakeGatherd {
    pub addr: SocketAddr,
    pub requests: Arc<Mutex<Vec<cgn_core::gatherwire::RequestPayload>>>,
}

pub async fn fake_gatherd(mode: FakeGather) -> FakeGatherd {
    use cgn_core::gatherproxy::gather;
    use cgn_core::gatherwire::{read_frame, write_frame, ErrorPayload, FrameDecoder, GatherFrame};

    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let requests = Arc::new(Mutex::new(Vec::new()));
    let rec = requests.clone();
    let fetcher = Arc::new(HttpFetcher::new(Duration::from_secs(5)).unwrap());
    tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else { return };
            let (rec, fetcher) = (rec.clone(), fetcher.clone());
            tokio::spawn(async move {
                let (mut rd, mut wr) = stream.into_split();
                let mut dec = FrameDecoder::new();
                while let Ok(Some(GatherFrame::Request(req))) = read_frame(&mut rd, &mut dec).await {
                    rec.lock().unwrap().push(req.clone());
                    match mode {
                        FakeGather::Error => {
                            let f = GatherFrame::Error(ErrorPayload {
                                message: "injected failure".into(),
                            });
                            let _ = write_frame(&mut wr, &f).await;
                        }
                        FakeGather::Stall => {
                            tokio::time::sleep(Duration::from_secs(3600)).await;
                        }
                        FakeGather::Real => {
                            let (tx, mut rx) = tokio::sync::mpsc::channel(64);
                            let cfg = GatherConfig::default();
                            let writer = async {
                                while let Some(f) = rx.recv().await {
                                    write_frame(&mut wr, &f).await.unwrap();
                                }
                            };
                            tokio::join!(gather(req, &cfg, fetcher.as_ref(), tx), writer);
                        }
                    }
                }
            });
        }
    });
    FakeGatherd { addr, requests }
}
