"""Smoke test for the cgn extension module.

Build and install first:
    pip install -e crates/py --no-build-isolation
"""

import json

import cgn


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok: {msg}")


def main():
    c = cgn.cost_per_user_month()
    check(abs(c["total_usd"] - 2.38) <= 0.02, f"default cost {c['total_usd']:.4f}")
    check(cgn.cost_per_user_month(concurrency=4)["total_usd"] < 1.0, "concurrency 4 below $1")

    x = cgn.crossover_rtt()
    check(abs(x * 1000 - 50.725) < 0.01, f"crossover {x * 1000:.3f} ms")
    cmp = cgn.normalized_comparison(0.1, 0.1)
    check(abs(cmp["fetch_star_vs_cdn_star"] - 1.2017) < 1e-3, "idealized ratio at 100/100 ms")

    slope, intercept, r2 = cgn.fit_linear([(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)])
    check(abs(slope - 2) < 1e-12 and abs(intercept - 1) < 1e-12 and r2 > 0.999999, "exact line fit")

    ge = (0.01, 0.6, 1.0, 0.0)
    analytic = cgn.ge_stationary_loss(*ge)
    empirical = cgn.ge_empirical_loss(*ge, 200_000, 1)
    check(abs(analytic - empirical) < 0.005, f"gilbert-elliott {analytic:.4f} vs {empirical:.4f}")

    pages = [cgn.generate_page(seed) for seed in range(3)]
    check(all(len(json.loads(p)["resources"]) == 50 for p in pages), "generated pages have 50 resources")
    link = {"rtt_s": 0.16, "bandwidth_bps": 1e7}
    default = cgn.simulate(pages[0], json.dumps({"mode": "default", "client_server": link}))
    gathered = cgn.simulate(
        pages[0],
        json.dumps({"mode": "cgn", "client_server": link, "client_proxy": link,
                    "proxy_server_rtt_s": 0.005, "zero_rtt": True}),
    )
    check(gathered["viz85_s"] < default["viz85_s"], f"gathering faster at 160 ms "
          f"({gathered['viz85_s']:.3f} vs {default['viz85_s']:.3f} s)")
    csv = cgn.sweep(pages, json.dumps({
        "scenarios": [{"mode": "default", "client_server": link}],
        "grid": {"start_ms": 20, "stop_ms": 100, "step_ms": 40},
    }))
    check(csv.splitlines()[0] == "mode,rtt_ms,median_viz85_s,median_full_load_s"
          and len(csv.splitlines()) == 4, "sweep csv shape")

    end = cgn.encode_end()
    check(end[:5] == b"\x00\x00\x00\x5d\x04" and len(end) == 98, "golden END frame")
    frames = cgn.decode_frames(cgn.encode_request("http://x.test/", 4096) + end)
    check([t for t, _ in frames] == ["request", "end"], "decoded frame types")
    check(frames[0][1]["cwnd_hint_bytes"] == 4096, "request hint survives")
    try:
        cgn.decode_frames(end[:-1])
        check(False, "truncated stream rejected")
    except ValueError:
        check(True, "truncated stream rejected")

    rtt = ("domain,vantage,rtt_ms,measured_at\n"
           "a.test,east,5,100\na.test,west,80,100\nb.test,west,6,100\n")
    m = cgn.Mapping.build(rtt, [("east", "10.0.0.1:7070"), ("west", "10.0.0.2:7070")], 1000)
    check(len(m) == 2, "mapping size")
    check(m.lookup("a.test", 86400, 2000) == ("10.0.0.1:7070", True), "fresh lookup")
    check(m.lookup("b.test", 10, 2000) == ("10.0.0.2:7070", False), "stale lookup")
    check(m.lookup("c.test", 86400, 2000) is None, "miss")
    check(len(cgn.Mapping.parse(m.serialize())) == 2, "mapping text roundtrip")

    matrix = "domain,east,west,mid\na.test,5,80,\nb.test,70,6,\nc.test,9,90,40\n"
    r = cgn.select(matrix, 2, "average", seed=4)
    check(r["chosen"] == ["east", "west"] and r["seed"] == 4, f"selection {r}")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
