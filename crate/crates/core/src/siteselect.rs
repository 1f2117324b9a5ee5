//! Choosing a budget of proxy locations that minimizes a latency objective
//! over each domain's best (minimum) RTT.
//!
//! Small instances are solved exactly by enumeration. Larger ones use an
//! iterative pool heuristic: brute-force a pool of candidates, keep the most
//! useful part of the pool, refill it with fresh random locations and repeat.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::census::definitive_rtt;
use crate::model::{Domain, RttTable, VantageId};
use crate::stats::nearest_rank;

pub const DEFAULT_SUBSET_CAP: u128 = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("budget must be between 1 and the number of locations ({locations}), got {budget}")]
    Budget { budget: usize, locations: usize },
    #[error("domain {0} has no finite rtt entry")]
    UncoveredDomain(Domain),
    #[error("matrix row for {0} has the wrong number of columns")]
    Shape(Domain),
    #[error("no domains in the selection problem")]
    Empty,
    #[error("duplicate location {0}")]
    DuplicateLocation(VantageId),
    #[error("unknown location {0}")]
    UnknownLocation(VantageId),
    #[error("chosen set must be non-empty")]
    EmptyChoice,
    #[error("{subsets} subsets exceed the brute-force cap of {cap}; use the heuristic")]
    TooLarge { subsets: u128, cap: u128 },
    #[error("heuristic needs pool_size >= keep_size >= budget (got {pool} >= {keep} >= {budget})")]
    PoolSizes { pool: usize, keep: usize, budget: usize },
    #[error("rounds must be at least 1")]
    ZeroRounds,
    #[error("matrix csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Median,
    Average,
    P95,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Median => "median",
            Objective::Average => "average",
            Objective::P95 => "p95",
        }
    }

    /// Applies the objective to per-domain minima. `scratch` is reordered.
    fn apply(&self, scratch: &mut [f64]) -> f64 {
        match self {
            Objective::Average => {
                let sum: f64 = scratch.iter().sum();
                sum / scratch.len() as f64
            }
            Objective::Median => select_rank(scratch, 0.5),
            Objective::P95 => select_rank(scratch, 0.95),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Objective::Median),
            "average" | "mean" => Ok(Objective::Average),
            "p95" => Ok(Objective::P95),
            other => Err(format!("unknown objective {other:?}")),
        }
    }
}

fn select_rank(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Domains x locations RTT matrix plus a budget and objective. Missing
/// entries are `+inf`. Locations are held in ascending id order.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    domains: Vec<Domain>,
    locations: Vec<VantageId>,
    /// Column-major: `columns[loc][domain]`.
    columns: Vec<Vec<f64>>,
    budget: usize,
    objective: Objective,
}

impl SelectionProblem {
    /// `rows[i][j]` is the RTT from `locations[j]` to `domains[i]`.
    pub fn new(
        domains: Vec<Domain>,
        locations: Vec<VantageId>,
        rows: Vec<Vec<Option<f64>>>,
        budget: usize,
        objective: Objective,
    ) -> Result<Self, SelectError> {
        if domains.is_empty() || rows.len() != domains.len() {
            return Err(SelectError::Empty);
        }
        let mut seen = BTreeSet::new();
        for l in &locations {
            if !seen.insert(l) {
                return Err(SelectError::DuplicateLocation(l.clone()));
            }
        }
        let mut order: Vec<usize> = (0..locations.len()).collect();
        order.sort_by(|&a, &b| locations[a].cmp(&locations[b]));
        let mut columns = vec![Vec::with_capacity(domains.len()); locations.len()];
        for (domain, row) in domains.iter().zip(&rows) {
            if row.len() != locations.len() {
                return Err(SelectError::Shape(domain.clone()));
            }
            if !row.iter().any(|v| v.map(|x| x.is_finite()).unwrap_or(false)) {
                return Err(SelectError::UncoveredDomain(domain.clone()));
            }
            for (dst, &src) in order.iter().enumerate() {
                columns[dst].push(row[src].unwrap_or(f64::INFINITY));
            }
        }
        let locations: Vec<VantageId> = order.iter().map(|&i| locations[i].clone()).collect();
        let p = SelectionProblem {
            domains,
            locations,
            columns,
            budget,
            objective,
        };
        p.check_budget(budget)?;
        Ok(p)
    }

    /// Builds the matrix from definitive RTTs in a census table.
    pub fn from_table(
        table: &RttTable,
        budget: usize,
        objective: Objective,
    ) -> Result<Self, SelectError> {
        let locations: Vec<VantageId> = table.vantages().into_iter().collect();
        let index: BTreeMap<&VantageId, usize> =
            locations.iter().enumerate().map(|(i, v)| (v, i)).collect();
        let mut domains = Vec::new();
        let mut rows = Vec::new();
        for (domain, by_vantage) in table.grouped() {
            let mut row = vec![None; locations.len()];
            for (vantage, samples) in by_vantage {
                let owned: Vec<_> = samples.into_iter().cloned().collect();
                row[index[vantage]] = definitive_rtt(&owned).ok();
            }
            domains.push(domain.clone());
            rows.push(row);
        }
        SelectionProblem::new(domains, locations, rows, budget, objective)
    }

    fn check_budget(&self, budget: usize) -> Result<(), SelectError> {
        if budget == 0 || budget > self.locations.len() {
            return Err(SelectError::Budget {
                budget,
                locations: self.locations.len(),
            });
        }
        Ok(())
    }

    pub fn with_budget(&self, budget: usize) -> Result<Self, SelectError> {
        self.check_budget(budget)?;
        Ok(SelectionProblem {
            budget,
            ..self.clone()
        })
    }

    pub fn with_objective(&self, objective: Objective) -> Self {
        SelectionProblem {
            objective,
            ..self.clone()
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn locations(&self) -> &[VantageId] {
        &self.locations
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    /// RTT from location index `loc` (ascending id order) to domain index `dom`.
    pub fn rtt(&self, dom: usize, loc: usize) -> f64 {
        self.columns[loc][dom]
    }

    fn index_of(&self, id: &VantageId) -> Result<usize, SelectError> {
        self.locations
            .binary_search(id)
            .map_err(|_| SelectError::UnknownLocation(id.clone()))
    }

    fn eval_indices(&self, chosen: &[usize], scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.resize(self.domains.len(), f64::INFINITY);
        for &loc in chosen {
            for (m, &v) in scratch.iter_mut().zip(&self.columns[loc]) {
                if v < *m {
                    *m = v;
                }
            }
        }
        self.objective.apply(scratch)
    }

    fn ids(&self, idx: &[usize]) -> Vec<VantageId> {
        idx.iter().map(|&i| self.locations[i].clone()).collect()
    }
}

/// Objective over `{min over chosen of rtt(domain, loc)}`. A domain with no
/// finite entry under `chosen` makes the value infinite.
pub fn evaluate(problem: &SelectionProblem, chosen: &[VantageId]) -> Result<f64, SelectError> {
    if chosen.is_empty() {
        return Err(SelectError::EmptyChoice);
    }
    let idx = chosen
        .iter()
        .map(|c| problem.index_of(c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(problem.eval_indices(&idx, &mut Vec::new()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Sorted ascending.
    pub chosen: Vec<VantageId>,
    pub objective_value: f64,
    pub rounds_used: usize,
}

/// Number of `k`-subsets of `n`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Exhaustive search over `budget`-subsets of `pool` (ascending location
/// indices). Returns the best value and subset; the first subset in
/// lexicographic order wins ties. Subtrees under each first element are
/// searched in parallel and merged in order, so ties resolve as in a
/// sequential scan.
fn best_subset(problem: &SelectionProblem, pool: &[usize], budget: usize) -> (f64, Vec<usize>) {
    let d = problem.domains.len();
    if budget == 0 || budget > pool.len() {
        return (f64::INFINITY, Vec::new());
    }

    fn recurse(
        problem: &SelectionProblem,
        pool: &[usize],
        start: usize,
        budget: usize,
        levels: &mut [Vec<f64>],
        stack: &mut Vec<usize>,
        scratch: &mut [f64],
        best: &mut (f64, Vec<usize>),
    ) {
        let depth = stack.len();
        if depth == budget {
            scratch.copy_from_slice(&levels[depth]);
            let v = problem.objective.apply(scratch);
            if best.1.is_empty() || v < best.0 {
                *best = (v, stack.clone());
            }
            return;
        }
        let need = budget - depth;
        for i in start..=pool.len() - need {
            let loc = pool[i];
            let (lo, hi) = levels.split_at_mut(depth + 1);
            let (prev, next) = (&lo[depth], &mut hi[0]);
            for ((n, &p), &c) in next.iter_mut().zip(prev).zip(&problem.columns[loc]) {
                *n = if c < p { c } else { p };
            }
            stack.push(loc);
            recurse(problem, pool, i + 1, budget, levels, stack, scratch, best);
            stack.pop();
        }
    }

    let subtree = |first: usize| {
        // levels[k] holds per-domain minima after choosing k locations.
        let mut levels = vec![vec![f64::INFINITY; d]; budget + 1];
        levels[1].copy_from_slice(&problem.columns[pool[first]]);
        let mut stack = Vec::with_capacity(budget);
        stack.push(pool[first]);
        let mut best = (f64::INFINITY, Vec::new());
        let mut scratch = vec![0.0; d];
        recurse(problem, pool, first + 1, budget, &mut levels, &mut stack, &mut scratch, &mut best);
        best
    };
    let firsts: Vec<usize> = (0..=pool.len() - budget).collect();
    let results: Vec<(f64, Vec<usize>)> = if binomial(pool.len(), budget) > 2_000 {
        firsts.par_iter().map(|&f| subtree(f)).collect()
    } else {
        firsts.iter().map(|&f| subtree(f)).collect()
    };
    let mut best = (f64::INFINITY, Vec::new());
    for r in results {
        if best.1.is_empty() || r.0 < best.0 {
            best = r;
        }
    }
    best
}

/// Globally optimal subset by enumeration, refusing instances with more than
/// `cap` subsets.
pub fn select_brute_force(
    problem: &SelectionProblem,
    cap: u128,
) -> Result<SelectionResult, SelectError> {
    let n = problem.locations.len();
    let subsets = binomial(n, problem.budget);
    if subsets > cap {
        return Err(SelectError::TooLarge { subsets, cap });
    }
    let pool: Vec<usize> = (0..n).collect();
    let (value, idx) = best_subset(problem, &pool, problem.budget);
    Ok(SelectionResult {
        chosen: problem.ids(&idx),
        objective_value: value,
        rounds_used: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub pool_size: usize,
    pub keep_size: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            pool_size: 20,
            keep_size: 15,
            rounds: 8,
            seed: 0,
        }
    }
}

/// Shrinks `pool` to `keep` locations. Locations outside the pool's current
/// best subset are removed first (their removal cannot worsen the pool's
/// budget-constrained optimum); among those, each step removes the one whose
/// loss least worsens the objective of the remaining pool as a whole.
fn shrink_pool(
    problem: &SelectionProblem,
    pool: &[usize],
    best: &[usize],
    keep: usize,
) -> Vec<usize> {
    let mut remaining = pool.to_vec();
    let mut scratch = Vec::new();
    let mut trial = Vec::with_capacity(pool.len());
    while remaining.len() > keep {
        let mut pick: Option<(f64, usize)> = None;
        for (pos, loc) in remaining.iter().enumerate() {
            if best.contains(loc) {
                continue;
            }
            trial.clear();
            trial.extend(remaining.iter().filter(|&&l| l != *loc));
            let v = problem.eval_indices(&trial, &mut scratch);
            // `<=` prefers dropping later (larger) ids on ties.
            if pick.map(|(pv, _)| v <= pv).unwrap_or(true) {
                pick = Some((v, pos));
            }
        }
        match pick {
            Some((_, pos)) => {
                remaining.remove(pos);
            }
            None => break,
        }
    }
    remaining
}

/// Iterative pool heuristic. Deterministic given `cfg.seed`; degenerates to
/// exact enumeration when all locations fit in one pool.
pub fn select_heuristic(
    problem: &SelectionProblem,
    cfg: &HeuristicConfig,
) -> Result<SelectionResult, SelectError> {
    if cfg.rounds == 0 {
        return Err(SelectError::ZeroRounds);
    }
    if !(cfg.pool_size >= cfg.keep_size && cfg.keep_size >= problem.budget) {
        return Err(SelectError::PoolSizes {
            pool: cfg.pool_size,
            keep: cfg.keep_size,
            budget: problem.budget,
        });
    }
    let n = problem.locations.len();
    if n <= cfg.pool_size {
        let pool: Vec<usize> = (0..n).collect();
        let (value, idx) = best_subset(problem, &pool, problem.budget);
        return Ok(SelectionResult {
            chosen: problem.ids(&idx),
            objective_value: value,
            rounds_used: 1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kept: Vec<usize> = Vec::new();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.rounds {
        let fresh_candidates: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
        let want = (cfg.pool_size - kept.len()).min(fresh_candidates.len());
        let mut pool = kept.clone();
        pool.extend(
            sample(&mut rng, fresh_candidates.len(), want)
                .into_iter()
                .map(|i| fresh_candidates[i]),
        );
        pool.sort_unstable();

        let (value, subset) = best_subset(problem, &pool, problem.budget);
        let better = match &best {
            None => true,
            Some((bv, bs)) => value < *bv || (value == *bv && subset < *bs),
        };
        if better {
            best = Some((value, subset.clone()));
        }
        kept = shrink_pool(problem, &pool, &subset, cfg.keep_size);
    }
    let (value, idx) = best.expect("at least one round");
    Ok(SelectionResult {
        chosen: problem.ids(&idx),
        objective_value: value,
        rounds_used: cfg.rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainPoint {
    pub budget: usize,
    pub value_ms: f64,
    /// Improvement over the previous budget; `None` for the first point.
    pub gain_ms: Option<f64>,
}

/// Objective value (via the heuristic) for each budget `1..=max_budget`.
pub fn gain_curve(
    problem: &SelectionProblem,
    max_budget: usize,
    cfg: &HeuristicConfig,
) -> Result<Vec<GainPoint>, SelectError> {
    let mut out: Vec<GainPoint> = Vec::with_capacity(max_budget);
    for l in 1..=max_budget {
        let p = problem.with_budget(l)?;
        let r = select_heuristic(&p, cfg)?;
        let gain = out.last().map(|prev| prev.value_ms - r.objective_value);
        out.push(GainPoint {
            budget: l,
            value_ms: r.objective_value,
            gain_ms: gain,
        });
    }
    Ok(out)
}

/// Nearest-rank helper for callers reporting several objectives of one choice.
pub fn per_domain_minima(
    problem: &SelectionProblem,
    chosen: &[VantageId],
) -> Result<Vec<f64>, SelectError> {
    let idx = chosen
        .iter()
        .map(|c| problem.index_of(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut scratch = vec![f64::INFINITY; problem.domains.len()];
    for loc in idx {
        for (m, &v) in scratch.iter_mut().zip(&problem.columns[loc]) {
            *m = m.min(v);
        }
    }
    Ok(scratch)
}

/// Median, mean and p90 of per-domain minima under `chosen`.
pub fn summary(problem: &SelectionProblem, chosen: &[VantageId]) -> Result<(f64, f64, f64), SelectError> {
    let mut v = per_domain_minima(problem, chosen)?;
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Ok((
        nearest_rank(&v, 0.5).unwrap_or(f64::INFINITY),
        mean,
        nearest_rank(&v, 0.9).unwrap_or(f64::INFINITY),
    ))
}

/// Reads a `domain,loc1,loc2,...` matrix; empty cells are missing entries.
pub fn read_matrix_csv<R: std::io::Read>(
    reader: R,
    budget: usize,
    objective: Objective,
) -> Result<SelectionProblem, SelectError> {
    let parse = |line: usize, msg: String| SelectError::Parse { line, msg };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if header.get(0) != Some("domain") || header.len() < 2 {
        return Err(parse(1, "header must be domain,<location>,...".into()));
    }
    let locations = header
        .iter()
        .skip(1)
        .map(|l| VantageId::new(l).map_err(|e| parse(1, e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut domains = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(e.position().map(|p| p.line() as usize).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        domains.push(Domain::new(&rec[0]).map_err(|e| parse(line, e.to_string()))?);
        let row = rec
            .iter()
            .skip(1)
            .map(|cell| match cell {
                "" => Ok(None),
                v => match v.parse::<f64>() {
                    Ok(x) if x.is_finite() && x >= 0.0 => Ok(Some(x)),
                    _ => Err(parse(line, format!("bad rtt {v:?}"))),
                },
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    SelectionProblem::new(domains, locations, rows, budget, objective)
}

/// Writes the matrix with locations in ascending id order, 3 decimal places.
pub fn write_matrix_csv<W: std::io::Write>(problem: &SelectionProblem, mut w: W) -> std::io::Result<()> {
    write!(w, "domain")?;
    for l in &problem.locations {
        write!(w, ",{l}")?;
    }
    writeln!(w)?;
    for (d, domain) in problem.domains.iter().enumerate() {
        write!(w, "{domain}")?;
        for col in &problem.columns {
            match col[d] {
                v if v.is_finite() => write!(w, ",{v:.3}")?,
                _ => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// The `select` command's JSON result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub chosen: Vec<VantageId>,
    pub objective: Objective,
    pub value_ms: f64,
    pub budget: usize,
    pub seed: u64,
}
