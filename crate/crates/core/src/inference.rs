//! Bootstrap test of `H0: theta = theta0` based on the enlarged argmax, and
//! confidence regions by test inversion.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direction::{distance_statistic_cached, DirectionalObjective, DistanceOptions, DistanceResult, WarmCache};
use crate::error::{invalid, Result};
use crate::idset::ParamGrid;

/// Share of failed draws above which a test is flagged unreliable.
pub const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Direction search for the base statistic; `iota` sets the enlarged argmax.
    pub distance: DistanceOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            draws: 200,
            alpha: 0.10,
            seed: 0,
            distance: DistanceOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapTestResult {
    pub theta0: Vec<f64>,
    pub d_hat: f64,
    /// `sqrt(n) * D(theta0)`.
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    /// Bootstrap statistics of the successful draws, in draw order.
    pub draws: Vec<f64>,
    pub failed_draws: Vec<usize>,
    pub unreliable: bool,
    pub u_hat_set: Vec<Vec<f64>>,
    pub alpha: f64,
    pub seed: u64,
    pub adjusted: bool,
}

/// Seed of stream `stream` below `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// `ceil((1 - alpha) B)`-th order statistic (1-based) of `draws`.
pub fn critical_value(draws: &[f64], alpha: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(invalid("no bootstrap draws"));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((1.0 - alpha) * sorted.len() as f64 - 1e-9).ceil() as usize;
    Ok(sorted[k.clamp(1, sorted.len()) - 1])
}

/// Monte Carlo p-value `(1 + #{T* >= t}) / (B + 1)`.
pub fn p_value(draws: &[f64], statistic: f64) -> f64 {
    let exceed = draws.iter().filter(|&&d| d >= statistic).count();
    (1 + exceed) as f64 / (draws.len() + 1) as f64
}

pub fn bootstrap_test(obj: &dyn DirectionalObjective, opts: &BootstrapOptions) -> Result<BootstrapTestResult> {
    bootstrap_test_cached(obj, opts, false, &mut WarmCache::new())
}

/// Same pipeline on bias-adjusted values `transport - eps (log n - KL)`,
/// aimed at the unregularized identified set.
pub fn adjusted_bootstrap_test(obj: &dyn DirectionalObjective, opts: &BootstrapOptions) -> Result<BootstrapTestResult> {
    bootstrap_test_cached(obj, opts, true, &mut WarmCache::new())
}

fn check(obj: &dyn DirectionalObjective, opts: &BootstrapOptions) -> Result<()> {
    if opts.draws < 50 {
        return Err(invalid(format!("need at least 50 bootstrap draws, got {}", opts.draws)));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    if !obj.is_balanced() {
        return Err(invalid("the bootstrap test needs samples of equal size"));
    }
    Ok(())
}

/// Bootstrap test reusing and extending a warm-start cache.
pub fn bootstrap_test_cached(
    obj: &dyn DirectionalObjective,
    opts: &BootstrapOptions,
    adjusted: bool,
    cache: &mut WarmCache,
) -> Result<BootstrapTestResult> {
    check(obj, opts)?;
    let base = distance_statistic_cached(obj, &opts.distance, cache)?;
    let (d_hat, u_hat) = contact_set(obj, &base, adjusted, opts.distance.iota)?;
    let root_n = (obj.sample_size() as f64).sqrt();
    let statistic = root_n * d_hat;

    let cache: &WarmCache = cache;
    let outcomes: Vec<Option<f64>> = (0..opts.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let draw = obj.resample(&mut rng).ok()?;
            let mut t = f64::NEG_INFINITY;
            for (u, base_value) in &u_hat {
                let e = draw.evaluate(u, cache.nearest(u)).ok()?;
                if !e.converged {
                    return None;
                }
                let v = if adjusted {
                    draw.adjusted_value(e.transport_cost, e.kl).ok()?
                } else {
                    e.value
                };
                t = t.max(root_n * (v - base_value));
            }
            t.is_finite().then_some(t)
        })
        .collect();
    let draws: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed_draws: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.is_none())
        .map(|(b, _)| b)
        .collect();
    let unreliable = failed_draws.len() as f64 > MAX_FAILED_SHARE * opts.draws as f64;
    let critical = critical_value(&draws, opts.alpha)?;
    Ok(BootstrapTestResult {
        theta0: obj.theta().to_vec(),
        d_hat,
        statistic,
        critical_value: critical,
        p_value: p_value(&draws, statistic),
        reject: statistic > critical,
        draws,
        failed_draws,
        unreliable,
        u_hat_set: u_hat.into_iter().map(|(u, _)| u).collect(),
        alpha: opts.alpha,
        seed: opts.seed,
        adjusted,
    })
}

/// Maximum value over the evaluated directions and the directions within
/// `iota` of it, each paired with its base value.
fn contact_set(
    obj: &dyn DirectionalObjective,
    base: &DistanceResult,
    adjusted: bool,
    iota: f64,
) -> Result<(f64, Vec<(Vec<f64>, f64)>)> {
    if !adjusted {
        let u_hat = base
            .enlarged_argmax
            .iter()
            .map(|u| {
                let c = base
                    .candidate_directions
                    .iter()
                    .find(|c| &c.u == u)
                    .expect("argmax comes from candidates");
                (u.clone(), c.value)
            })
            .collect();
        return Ok((base.d_hat, dedup(u_hat)));
    }
    let values = base
        .candidate_directions
        .iter()
        .map(|c| obj.adjusted_value(c.transport_cost, c.kl).map(|v| (c.u.clone(), v)))
        .collect::<Result<Vec<_>>>()?;
    let max = values.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let u_hat = values.into_iter().filter(|x| x.1 >= max - iota - 1e-12).collect();
    Ok((max, dedup(u_hat)))
}

fn dedup(mut v: Vec<(Vec<f64>, f64)>) -> Vec<(Vec<f64>, f64)> {
    let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(v.len());
    for x in v.drain(..) {
        if !out.iter().any(|y| y.0 == x.0) {
            out.push(x);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointSummary {
    pub theta: Vec<f64>,
    pub d_hat: f64,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub unreliable: bool,
    /// Successful draws and how many of them reach the statistic; enough to
    /// redo the decision at any level.
    pub valid_draws: usize,
    pub exceedances: usize,
}

impl PointSummary {
    /// Decision at level `alpha` from the same draws.
    pub fn accepts_at(&self, alpha: f64) -> bool {
        if self.valid_draws == 0 {
            return false;
        }
        let b = self.valid_draws;
        let k = (((1.0 - alpha) * b as f64 - 1e-9).ceil() as usize).clamp(1, b);
        self.exceedances > b - k
    }
}

impl From<&BootstrapTestResult> for PointSummary {
    fn from(r: &BootstrapTestResult) -> Self {
        Self {
            theta: r.theta0.clone(),
            d_hat: r.d_hat,
            statistic: r.statistic,
            critical_value: r.critical_value,
            p_value: r.p_value,
            reject: r.reject,
            unreliable: r.unreliable,
            valid_draws: r.draws.len(),
            exceedances: r.draws.iter().filter(|&&d| d >= r.statistic).count(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub grid: ParamGrid,
    pub accepted: Vec<bool>,
    pub alpha: f64,
    pub per_point: Vec<PointSummary>,
}

/// Inverts the bootstrap test over `grid`; point `i` uses seed
/// `derive_seed(opts.seed, i)`.
pub fn confidence_region<F>(
    grid: &ParamGrid,
    opts: &BootstrapOptions,
    adjusted: bool,
    make: F,
) -> Result<ConfidenceRegion>
where
    F: Fn(&[f64]) -> Result<Box<dyn DirectionalObjective>>,
{
    let mut cache = WarmCache::new();
    let mut per_point = Vec::with_capacity(grid.len());
    for (i, theta) in grid.points().iter().enumerate() {
        let obj = make(theta)?;
        let point_opts = BootstrapOptions {
            seed: derive_seed(opts.seed, i as u64),
            ..*opts
        };
        let r = bootstrap_test_cached(obj.as_ref(), &point_opts, adjusted, &mut cache)?;
        per_point.push(PointSummary::from(&r));
    }
    Ok(ConfidenceRegion {
        grid: grid.clone(),
        accepted: per_point.iter().map(|p| !p.reject).collect(),
        alpha: opts.alpha,
        per_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::direction::MarginalObjective;
    use crate::measure::EmpiricalMeasure;
    use crate::models::{BenefitShareModel, ZeroModel};
    use crate::ot::SinkhornOptions;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn rct(n: usize, seed: u64) -> (EmpiricalMeasure, EmpiricalMeasure) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d0 = Normal::new(0.0, 1.0).unwrap();
        let d1 = Normal::new(2.0, 1.0).unwrap();
        let x = (0..n).map(|_| vec![d0.sample(&mut rng)]).collect();
        let y = (0..n).map(|_| vec![d1.sample(&mut rng)]).collect();
        (
            EmpiricalMeasure::uniform(x).unwrap(),
            EmpiricalMeasure::uniform(y).unwrap(),
        )
    }

    fn opts(draws: usize, seed: u64) -> BootstrapOptions {
        BootstrapOptions {
            draws,
            seed,
            distance: DistanceOptions {
                resolution: 11,
                iota: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_draws_give_that_critical_value() {
        let d = vec![1.5; 100];
        assert_eq!(critical_value(&d, 0.1).unwrap(), 1.5);
        assert_eq!(p_value(&d, 1.5), 1.0);
        assert_eq!(p_value(&d, 1.6), 1.0 / 101.0);
    }

    #[test]
    fn zero_model_never_rejects() {
        let m = ZeroModel {
            dim_x: 1,
            dim_y: 1,
            k: 1,
            p: 1,
        };
        let (mu, nu) = rct(30, 0);
        let obj = MarginalObjective::new(&m, &[0.0], &mu, &nu, SinkhornOptions::default()).unwrap();
        let r = bootstrap_test(&obj, &opts(50, 1)).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!(r.draws.iter().all(|t| t.abs() < 1e-10));
        assert!(!r.reject);
        assert!(!r.unreliable);
    }

    #[test]
    fn guards() {
        let m = ZeroModel {
            dim_x: 1,
            dim_y: 1,
            k: 1,
            p: 1,
        };
        let (mu, _) = rct(10, 0);
        let (nu, _) = rct(12, 1);
        let obj = MarginalObjective::new(&m, &[0.0], &mu, &mu, SinkhornOptions::default()).unwrap();
        assert!(bootstrap_test(&obj, &opts(49, 0)).is_err());
        assert!(bootstrap_test(
            &obj,
            &BootstrapOptions {
                alpha: 1.0,
                ..opts(50, 0)
            }
        )
        .is_err());
        let unbalanced = MarginalObjective::new(&m, &[0.0], &mu, &nu, SinkhornOptions::default()).unwrap();
        assert!(bootstrap_test(&unbalanced, &opts(50, 0)).is_err());
    }

    #[test]
    fn draws_are_reproducible_and_b_invariant_statistic() {
        let (mu, nu) = rct(60, 3);
        let obj = MarginalObjective::new(
            &BenefitShareModel,
            &[0.6],
            &mu,
            &nu,
            SinkhornOptions::with_epsilon(0.05),
        )
        .unwrap();
        let a = bootstrap_test(&obj, &opts(60, 7)).unwrap();
        let b = bootstrap_test(&obj, &opts(60, 7)).unwrap();
        assert_eq!(a.draws, b.draws);
        let c = bootstrap_test(&obj, &opts(80, 7)).unwrap();
        assert_eq!(a.statistic, c.statistic);
        assert_eq!(a.draws[..], c.draws[..60]);
        assert_eq!(a.reject, a.statistic > a.critical_value);
    }

    #[test]
    fn far_outside_point_is_rejected() {
        let (mu, nu) = rct(200, 5);
        let obj = MarginalObjective::new(
            &BenefitShareModel,
            &[0.3],
            &mu,
            &nu,
            SinkhornOptions::with_epsilon(0.05),
        )
        .unwrap();
        let r = bootstrap_test(&obj, &opts(100, 2)).unwrap();
        assert!(r.reject && r.p_value < 0.05, "{r:?}");
    }

    #[test]
    fn adjustment_lowers_the_statistic() {
        let (mu, nu) = rct(40, 8);
        let obj =
            MarginalObjective::new(&BenefitShareModel, &[0.5], &mu, &nu, SinkhornOptions::with_epsilon(0.1)).unwrap();
        let plain = bootstrap_test(&obj, &opts(50, 1)).unwrap();
        let adj = adjusted_bootstrap_test(&obj, &opts(50, 1)).unwrap();
        assert!(adj.statistic <= plain.statistic);
        assert!(adj.adjusted && !plain.adjusted);
    }

    #[test]
    fn region_monotone_in_alpha() {
        let (mu, nu) = rct(60, 9);
        let grid = ParamGrid::from_triples(&[(0.4, 1.0, 4)]).unwrap();
        let make = |t: &[f64]| -> Result<Box<dyn DirectionalObjective>> {
            Ok(Box::new(MarginalObjective::new(
                &BenefitShareModel,
                t,
                &mu,
                &nu,
                SinkhornOptions::with_epsilon(0.05),
            )?))
        };
        let loose = confidence_region(
            &grid,
            &BootstrapOptions {
                alpha: 0.05,
                ..opts(50, 4)
            },
            false,
            make,
        )
        .unwrap();
        let tight = confidence_region(
            &grid,
            &BootstrapOptions {
                alpha: 0.3,
                ..opts(50, 4)
            },
            false,
            make,
        )
        .unwrap();
        for (l, t) in loose.accepted.iter().zip(&tight.accepted) {
            assert!(!t || *l);
        }
        for (p, a) in loose.per_point.iter().zip(&loose.accepted) {
            assert_eq!(*a, !p.reject);
        }
    }

    proptest! {
        #[test]
        fn critical_value_matches_sorted_quantile(
            d in proptest::collection::vec(-3.0f64..3.0, 1..300),
            alpha in 0.01f64..0.99,
        ) {
            let mut s = d.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ((1.0 - alpha) * s.len() as f64 - 1e-9).ceil().max(1.0) as usize;
            prop_assert_eq!(critical_value(&d, alpha).unwrap(), s[k - 1]);
            let below = s.iter().filter(|&&x| x <= s[k - 1]).count() as f64;
            prop_assert!(below >= (1.0 - alpha) * s.len() as f64 - 1e-9);
        }
    }
}
