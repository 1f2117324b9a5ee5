//! Seeded instance builders shared by the property suites and the
//! acceptance target.

use cgn_core::model::{Domain, RttSample, RttTable, VantageId};
use cgn_core::siteselect::{Objective, SelectionProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn loc(i: usize) -> VantageId {
    VantageId::new(&format!("l{i:02}")).unwrap()
}

pub fn dom(i: usize) -> Domain {
    Domain::new(&format!("d{i:04}.test")).unwrap()
}

/// Uniform random RTTs in [1, 300) ms, fully populated.
pub fn random_problem(seed: u64, n_locations: usize, n_domains: usize, budget: usize, objective: Objective) -> SelectionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n_domains)
        .map(|_| (0..n_locations).map(|_| Some(rng.gen_range(1.0..300.0))).collect())
        .collect();
    SelectionProblem::new(
        (0..n_domains).map(dom).collect(),
        (0..n_locations).map(loc).collect(),
        rows,
        budget,
        objective,
    )
    .unwrap()
}

/// 26 locations; 12 of them (chosen by `seed`) each cover their own cluster
/// of 8 domains at 5 ms. Every other entry is 100 ms. Returns the problem
/// and the planted set in ascending id order.
pub fn planted_problem(seed: u64) -> (SelectionProblem, Vec<VantageId>) {
    let (n, l, per) = (26, 12, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let planted: Vec<usize> = ids[..l].to_vec();
    let mut rows = Vec::new();
    for &p in &planted {
        for _ in 0..per {
            let mut row = vec![Some(100.0); n];
            row[p] = Some(5.0);
            rows.push(row);
        }
    }
    let domains = (0..rows.len()).map(dom).collect();
    let problem = SelectionProblem::new(domains, (0..n).map(loc).collect(), rows, l, Objective::Average).unwrap();
    let mut want: Vec<VantageId> = planted.into_iter().map(loc).collect();
    want.sort();
    (problem, want)
}

/// A census-like instance: 30 data centers scattered on a plane, domains
/// clustered around 16 hosting hubs with Zipf-like popularity. RTT grows
/// with distance plus jitter.
pub fn census_like_problem(seed: u64, budget: usize) -> SelectionProblem {
    census_like_problem_sized(seed, budget, 16, 800)
}

pub fn census_like_problem_sized(seed: u64, budget: usize, n_hubs: usize, n_domains: usize) -> SelectionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locs: Vec<(f64, f64)> = (0..30).map(|_| (rng.gen(), rng.gen())).collect();
    let hubs: Vec<(f64, f64)> = (0..n_hubs).map(|_| (rng.gen(), rng.gen())).collect();
    let weights: Vec<f64> = (1..=hubs.len()).map(|k| 1.0 / k as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut rows = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        let mut u = rng.gen::<f64>() * total;
        let mut h = 0;
        while u > weights[h] && h + 1 < hubs.len() {
            u -= weights[h];
            h += 1;
        }
        let p = (
            hubs[h].0 + rng.gen_range(-0.03..0.03),
            hubs[h].1 + rng.gen_range(-0.03..0.03),
        );
        let row = locs
            .iter()
            .map(|&(x, y)| {
                let d = ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt();
                Some(1.0 + 250.0 * d + rng.gen_range(0.0..3.0))
            })
            .collect();
        rows.push(row);
    }
    SelectionProblem::new(
        (0..n_domains).map(dom).collect(),
        (0..30).map(loc).collect(),
        rows,
        budget,
        Objective::Median,
    )
    .unwrap()
}

/// Random census table: `n_domains` x `n_vantages`, 1..=3 samples per pair.
pub fn random_rtt_table(seed: u64, n_domains: usize, n_vantages: usize) -> RttTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = RttTable::new();
    for d in 0..n_domains {
        for v in 0..n_vantages {
            for k in 0..rng.gen_range(1..=3u64) {
                // Coarse values make ties common.
                let rtt = (rng.gen_range(0.0..200.0f64) * 4.0).round() / 4.0;
                t.insert(RttSample::new(dom(d), loc(v), rtt, 1_700_000_000 + k).unwrap()).unwrap();
            }
        }
    }
    t
}
