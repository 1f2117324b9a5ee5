//! Linear load-time models, crossover and normalized comparisons, and the
//! per-user operating cost of a gathering proxy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PerfError {
    #[error("need at least two distinct x values to fit a line")]
    Degenerate,
    #[error("non-finite input point ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("the lines are parallel; no crossover")]
    NoCrossover,
    #[error("{field} must be {expected}, got {value}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        expected: &'static str,
    },
}

/// `time_s = slope * rtt_s + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub const fn new(slope: f64, intercept: f64) -> Self {
        LinearFit { slope, intercept }
    }

    pub fn predict(&self, rtt_s: f64) -> f64 {
        self.slope * rtt_s + self.intercept
    }
}

pub fn predict(fit: &LinearFit, rtt_s: f64) -> f64 {
    fit.predict(rtt_s)
}

/// Ordinary least squares over `(rtt_s, time_s)` points.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit, PerfError> {
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(PerfError::NonFinite(x, y));
    }
    if points.len() < 2 {
        return Err(PerfError::Degenerate);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(PerfError::Degenerate);
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Coefficient of determination of `fit` on `points`. A perfect fit (or a
/// constant series matched exactly) is 1.
pub fn r_squared(fit: &LinearFit, points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - fit.predict(p.0)).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Median load time against client-server RTT, with and without gathering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientPreset {
    pub name: &'static str,
    pub default: LinearFit,
    pub fetch: LinearFit,
}

pub const FINAL_PRESET: CoefficientPreset = CoefficientPreset {
    name: "final",
    default: LinearFit::new(18.6, 1.9),
    fetch: LinearFit::new(4.8, 2.6),
};

/// Coefficients from the earlier, smaller evaluation.
pub const WORKSHOP_PRESET: CoefficientPreset = CoefficientPreset {
    name: "workshop",
    default: LinearFit::new(36.4, 2.1),
    fetch: LinearFit::new(3.8, 2.7),
};

pub fn preset(name: &str) -> Option<CoefficientPreset> {
    match name {
        "final" => Some(FINAL_PRESET),
        "workshop" => Some(WORKSHOP_PRESET),
        _ => None,
    }
}

/// Idealized models sharing the gathering slope: a fully tuned CDN
/// evaluated at last-mile RTT, and a zero-overhead gatherer evaluated at
/// server RTT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdealModels {
    pub cdn_star: LinearFit,
    pub fetch_star: LinearFit,
}

impl Default for IdealModels {
    fn default() -> Self {
        IdealModels {
            cdn_star: LinearFit::new(4.8, 1.9),
            fetch_star: LinearFit::new(4.8, 1.9),
        }
    }
}

/// Client-to-server latency split into a last-mile part and the extra
/// distance `delta` to the server. The gathering proxy is assumed to sit
/// where the server RTT is paid, so `rtt_g == rtt_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyDecomposition {
    rtt_lm_s: f64,
    delta_s: f64,
}

impl LatencyDecomposition {
    pub fn new(rtt_lm_s: f64, delta_s: f64) -> Result<Self, PerfError> {
        if !rtt_lm_s.is_finite() || rtt_lm_s < 0.0 {
            return Err(PerfError::OutOfRange {
                field: "rtt_lm_s",
                value: rtt_lm_s,
                expected: ">= 0",
            });
        }
        if !delta_s.is_finite() || delta_s < 0.0 {
            return Err(PerfError::OutOfRange {
                field: "delta_s",
                value: delta_s,
                expected: ">= 0",
            });
        }
        Ok(LatencyDecomposition { rtt_lm_s, delta_s })
    }

    pub fn rtt_lm_s(&self) -> f64 {
        self.rtt_lm_s
    }
    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }
    pub fn rtt_s_s(&self) -> f64 {
        self.rtt_lm_s + self.delta_s
    }
    pub fn rtt_g_s(&self) -> f64 {
        self.rtt_s_s()
    }
}

/// RTT above which `b` is faster than `a` (when `a` has the larger slope).
pub fn crossover_rtt(a: &LinearFit, b: &LinearFit) -> Result<Crossover, PerfError> {
    if a.slope == b.slope {
        return Err(PerfError::NoCrossover);
    }
    let x = (b.intercept - a.intercept) / (a.slope - b.slope);
    Ok(if x >= 0.0 {
        Crossover::At(x)
    } else {
        Crossover::NonePositive(x)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "rtt_s", rename_all = "snake_case")]
pub enum Crossover {
    At(f64),
    /// The lines meet only at a negative RTT.
    NonePositive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalizedComparison {
    pub rtt_lm_s: f64,
    pub delta_s: f64,
    pub fetch_vs_default: f64,
    pub fetch_star_vs_cdn_star: f64,
}

pub fn normalized_comparison(
    d: &LatencyDecomposition,
    preset: &CoefficientPreset,
    ideal: &IdealModels,
) -> NormalizedComparison {
    let rs = d.rtt_s_s();
    NormalizedComparison {
        rtt_lm_s: d.rtt_lm_s(),
        delta_s: d.delta_s(),
        fetch_vs_default: preset.fetch.predict(rs) / preset.default.predict(rs),
        fetch_star_vs_cdn_star: ideal.fetch_star.predict(d.rtt_g_s()) / ideal.cdn_star.predict(d.rtt_lm_s()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostInputs {
    pub pages_per_month: f64,
    pub avg_page_bytes: f64,
    pub service_time_s: f64,
    pub price_per_hour: f64,
    pub price_per_gb: f64,
    pub concurrency: u32,
}

impl Default for CostInputs {
    fn default() -> Self {
        CostInputs {
            pages_per_month: 3000.0,
            avg_page_bytes: 2_000_000.0,
            service_time_s: 5.2,
            price_per_hour: 0.431,
            price_per_gb: 0.087,
            concurrency: 1,
        }
    }
}

impl CostInputs {
    pub fn validate(&self) -> Result<(), PerfError> {
        let fields = [
            ("pages_per_month", self.pages_per_month),
            ("avg_page_bytes", self.avg_page_bytes),
            ("service_time_s", self.service_time_s),
            ("price_per_hour", self.price_per_hour),
            ("price_per_gb", self.price_per_gb),
        ];
        for (field, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(PerfError::OutOfRange {
                    field,
                    value,
                    expected: "finite and >= 0",
                });
            }
        }
        if self.concurrency < 1 {
            return Err(PerfError::OutOfRange {
                field: "concurrency",
                value: 0.0,
                expected: ">= 1",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub network_usd: f64,
    pub compute_usd: f64,
    pub total_usd: f64,
}

/// Monthly cost of serving one user. GB is 10^9 bytes, as billed.
pub fn cost_per_user_month(c: &CostInputs) -> Result<CostBreakdown, PerfError> {
    c.validate()?;
    let network_usd = c.pages_per_month * c.avg_page_bytes / 1e9 * c.price_per_gb;
    let compute_usd =
        c.pages_per_month * c.service_time_s / 3600.0 * c.price_per_hour / c.concurrency as f64;
    Ok(CostBreakdown {
        network_usd,
        compute_usd,
        total_usd: network_usd + compute_usd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_line_recovered() {
        let pts: Vec<_> = [0.0, 1.0, 2.5, 4.0].iter().map(|&x| (x, 3.0 * x + 1.0)).collect();
        let f = fit_linear(&pts).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((r_squared(&f, &pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_define_line() {
        let f = fit_linear(&[(1.0, 2.0), (3.0, 8.0)]).unwrap();
        assert_eq!((f.slope, f.intercept), (3.0, -1.0));
    }

    #[test]
    fn degenerate_rejected() {
        assert_eq!(fit_linear(&[(1.0, 2.0), (1.0, 3.0)]), Err(PerfError::Degenerate));
        assert_eq!(fit_linear(&[(1.0, 2.0)]), Err(PerfError::Degenerate));
    }

    #[test]
    fn planted_slope_with_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (1..=32)
            .map(|i| {
                let x = i as f64 * 0.01;
                (x, 18.6 * x + 1.9 + rng.gen_range(-0.05..0.05))
            })
            .collect();
        let f = fit_linear(&pts).unwrap();
        assert!((f.slope / 18.6 - 1.0).abs() < 0.05, "{f:?}");
    }

    #[test]
    fn equation_values() {
        assert!((FINAL_PRESET.default.predict(0.160) - 4.876).abs() < 1e-12);
        assert_eq!(FINAL_PRESET.fetch.predict(0.0), 2.6);
        assert!((IdealModels::default().cdn_star.predict(0.1) - 2.38).abs() < 1e-12);
    }

    #[test]
    fn crossover_values() {
        let Crossover::At(x) = crossover_rtt(&FINAL_PRESET.default, &FINAL_PRESET.fetch).unwrap() else {
            panic!()
        };
        assert!((x - 0.7 / 13.8).abs() < 1e-12);
        assert!((x - 0.0507).abs() < 1e-4);
        let a = LinearFit::new(2.0, 1.0);
        assert_eq!(crossover_rtt(&a, &a), Err(PerfError::NoCrossover));
        assert_eq!(crossover_rtt(&a, &LinearFit::new(2.0, 5.0)), Err(PerfError::NoCrossover));
        assert!(matches!(
            crossover_rtt(&LinearFit::new(2.0, 5.0), &LinearFit::new(1.0, 1.0)),
            Ok(Crossover::NonePositive(_))
        ));
    }

    #[test]
    fn normalized_examples() {
        let ideal = IdealModels::default();
        let at0 = normalized_comparison(&LatencyDecomposition::new(0.1, 0.0).unwrap(), &FINAL_PRESET, &ideal);
        assert_eq!(at0.fetch_star_vs_cdn_star, 1.0);
        let c = normalized_comparison(&LatencyDecomposition::new(0.1, 0.1).unwrap(), &FINAL_PRESET, &ideal);
        assert!((c.fetch_star_vs_cdn_star - 2.86 / 2.38).abs() < 1e-12);
        assert!((c.fetch_star_vs_cdn_star - 1.2017).abs() < 1e-3);
        assert!(LatencyDecomposition::new(0.1, -0.01).is_err());
    }

    #[test]
    fn cost_defaults() {
        let c = cost_per_user_month(&CostInputs::default()).unwrap();
        assert!((c.network_usd - 0.522).abs() < 1e-9);
        assert!((c.compute_usd - 1.8677).abs() < 1e-3);
        assert!((c.total_usd - 2.38).abs() < 0.02);
        let four = cost_per_user_month(&CostInputs {
            concurrency: 4,
            ..Default::default()
        })
        .unwrap();
        assert!(four.total_usd < 1.0);
        let zero = cost_per_user_month(&CostInputs {
            pages_per_month: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(zero.total_usd, 0.0);
    }

    proptest! {
        #[test]
        fn crossover_equalizes(s1 in 0.1f64..50.0, i1 in 0.0f64..5.0, s2 in 0.1f64..50.0, i2 in 0.0f64..5.0) {
            prop_assume!((s1 - s2).abs() > 1e-3);
            let (a, b) = (LinearFit::new(s1, i1), LinearFit::new(s2, i2));
            let x = match crossover_rtt(&a, &b).unwrap() {
                Crossover::At(x) | Crossover::NonePositive(x) => x,
            };
            prop_assert!((a.predict(x) - b.predict(x)).abs() < 1e-9);
        }

        #[test]
        fn ideal_ratio_decreasing_toward_one(lm in 0.0f64..1.0, step in 1e-3f64..0.5, delta in 1e-3f64..0.5) {
            let ideal = IdealModels::default();
            let r = |lm| normalized_comparison(&LatencyDecomposition::new(lm, delta).unwrap(), &FINAL_PRESET, &ideal).fetch_star_vs_cdn_star;
            let (a, b) = (r(lm), r(lm + step));
            prop_assert!(a > 1.0 && b > 1.0);
            prop_assert!(b < a);
        }

        #[test]
        fn cost_linear_in_pages(p in 0.0f64..1e5, k in 1.0f64..10.0, conc in 1u32..16) {
            let base = CostInputs { pages_per_month: p, concurrency: conc, ..Default::default() };
            let a = cost_per_user_month(&base).unwrap();
            let b = cost_per_user_month(&CostInputs { pages_per_month: p * k, ..base }).unwrap();
            prop_assert!((b.total_usd - k * a.total_usd).abs() <= 1e-9 * (1.0 + b.total_usd));
            let one = cost_per_user_month(&CostInputs { concurrency: 1, ..base }).unwrap();
            prop_assert!((a.compute_usd * conc as f64 - one.compute_usd).abs() <= 1e-9 * (1.0 + one.compute_usd));
        }
    }
}
