//! Browser -> client proxy -> gather node -> origin, all on loopback.

mod common;

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use cgn_core::clientproxy::HintStore;
use cgn_core::gatherproxy::GatherConfig;
use cgn_core::model::VantageId;
use common::*;

/// Loads the page and every subresource through `client`; returns bodies in
/// request order, the html first.
async fn load_page(client: &reqwest::Client, origin: &Origin, root: &str, paths: &[String]) -> Vec<Vec<u8>> {
    let mut out = vec![];
    let (s, b) = get(client, &origin.url(root)).await;
    assert_eq!(s, 200);
    out.push(b);
    let urls: Vec<String> = paths.iter().map(|p| origin.url(p)).collect();
    let fetches = urls.iter().map(|u| get(client, u));
    for (s, b) in futures::future::join_all(fetches).await {
        assert_eq!(s, 200);
        out.push(b);
    }
    out
}

async fn reference(files: &[(String, Served)], paths: &[String]) -> Vec<Vec<u8>> {
    let find = |p: &str| files.iter().find(|(q, _)| q == p).unwrap().1.body.clone();
    std::iter::once(find("/")).chain(paths.iter().map(|p| find(p))).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn gathered_page_is_byte_identical_with_one_session() {
    let (files, paths) = site(10);
    let want = reference(&files, &paths).await;
    let origin = Origin::start(files).await;
    let (gaddr, gmetrics) = start_gatherd(GatherConfig::default()).await;
    let table = mapping_for("127.0.0.1", &[("g1", gaddr)], "g1");
    let (caddr, proxy) = start_client(table, 5_000, HintStore::in_memory()).await;

    let got = load_page(&browser(caddr), &origin, "/", &paths).await;
    assert_eq!(got, want);

    let direct_bodies = load_page(&direct(), &origin, "/", &paths).await;
    assert_eq!(direct_bodies, want);

    assert_eq!(gmetrics.sessions.load(Ordering::Relaxed), 1);
    assert_eq!(proxy.metrics.gather_sessions.load(Ordering::Relaxed), 1);
    assert_eq!(proxy.metrics.direct_fetches.load(Ordering::Relaxed), 0);
    // One upstream fetch per resource from the gatherer, plus our own direct
    // reference load.
    for p in paths.iter().chain(std::iter::once(&"/".to_string())) {
        assert_eq!(origin.hits(p), 2, "{p}");
    }
}

async fn fallback_case(mode: Option<FakeGather>, mapped: bool, timeout_ms: u64) -> (Origin, std::sync::Arc<cgn_core::clientproxy::ClientProxy>, Duration) {
    let (files, paths) = site(10);
    let want = reference(&files, &paths).await;
    let origin = Origin::start(files).await;
    let gaddr = match mode {
        Some(m) => fake_gatherd(m).await.addr,
        None => dead_addr().await,
    };
    let domain = if mapped { "127.0.0.1" } else { "elsewhere.test" };
    let table = mapping_for(domain, &[("g1", gaddr)], "g1");
    let (caddr, proxy) = start_client(table, timeout_ms, HintStore::in_memory()).await;
    let t0 = Instant::now();
    let got = load_page(&browser(caddr), &origin, "/", &paths).await;
    let took = t0.elapsed();
    assert_eq!(got, want);
    (origin, proxy, took)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn mapping_miss_goes_direct() {
    let (origin, proxy, _) = fallback_case(Some(FakeGather::Real), false, 2_000).await;
    assert_eq!(proxy.metrics.gather_sessions.load(Ordering::Relaxed), 0);
    assert_eq!(proxy.metrics.direct_fetches.load(Ordering::Relaxed), 11);
    assert_eq!(origin.total(), 11);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn error_frame_falls_back() {
    let (_, proxy, took) = fallback_case(Some(FakeGather::Error), true, 5_000).await;
    assert_eq!(proxy.metrics.gather_sessions.load(Ordering::Relaxed), 1);
    assert!(proxy.metrics.fallbacks.load(Ordering::Relaxed) >= 1);
    assert!(took < Duration::from_secs(3), "{took:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stalled_gatherer_times_out_and_falls_back() {
    let (_, proxy, took) = fallback_case(Some(FakeGather::Stall), true, 400).await;
    assert!(proxy.metrics.fallbacks.load(Ordering::Relaxed) >= 1);
    assert!(took >= Duration::from_millis(400));
    assert!(took < Duration::from_secs(5), "{took:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unreachable_gatherer_falls_back() {
    let (_, proxy, _) = fallback_case(None, true, 2_000).await;
    assert!(proxy.metrics.fallbacks.load(Ordering::Relaxed) >= 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hint_is_echoed_in_next_request() {
    let (mut files, paths) = site(10);
    let html = files.iter().find(|(p, _)| p == "/").unwrap().1.clone();
    files.push(("/second.html".into(), html));
    let origin = Origin::start(files).await;
    let fake = fake_gatherd(FakeGather::Real).await;
    let table = mapping_for("127.0.0.1", &[("g1", fake.addr)], "g1");
    let (caddr, proxy) = start_client(table, 5_000, HintStore::in_memory()).await;
    let b = browser(caddr);

    load_page(&b, &origin, "/", &paths).await;
    let g1 = VantageId::new("g1").unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while proxy.hints().read_hint(&g1) == 0 {
        assert!(Instant::now() < deadline, "hint never recorded");
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let learned = proxy.hints().read_hint(&g1);
    get(&b, &origin.url("/second.html")).await;

    let reqs = fake.requests.lock().unwrap().clone();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[0].cwnd_hint_bytes, 0);
    assert_eq!(reqs[1].cwnd_hint_bytes, learned);
    assert!(learned > 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn mapping_swap_redirects_new_pages() {
    let (mut files, paths) = site(5);
    let html = files.iter().find(|(p, _)| p == "/").unwrap().1.clone();
    files.push(("/next.html".into(), html));
    let origin = Origin::start(files).await;
    let (a, ma) = start_gatherd(GatherConfig::default()).await;
    let (b, mb) = start_gatherd(GatherConfig::default()).await;
    let proxies = [("ga", a), ("gb", b)];
    let (caddr, proxy) = start_client(mapping_for("127.0.0.1", &proxies, "ga"), 5_000, HintStore::in_memory()).await;
    let client = browser(caddr);

    load_page(&client, &origin, "/", &paths).await;
    proxy.mapping().swap(mapping_for("127.0.0.1", &proxies, "gb"));
    let (s, _) = get(&client, &origin.url("/next.html")).await;
    assert_eq!(s, 200);

    assert_eq!(ma.sessions.load(Ordering::Relaxed), 1);
    assert_eq!(mb.sessions.load(Ordering::Relaxed), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn non_get_is_forwarded_directly() {
    let (files, _) = site(3);
    let origin = Origin::start(files).await;
    let (gaddr, gm) = start_gatherd(GatherConfig::default()).await;
    let (caddr, proxy) = start_client(mapping_for("127.0.0.1", &[("g1", gaddr)], "g1"), 5_000, HintStore::in_memory()).await;
    let r = browser(caddr).post(origin.url("/")).body("x=1").send().await.unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(gm.sessions.load(Ordering::Relaxed), 0);
    assert_eq!(proxy.metrics.direct_fetches.load(Ordering::Relaxed), 1);
}
