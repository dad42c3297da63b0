//! Maximization of `u -> c(u)` over the unit ball: the distance statistic and
//! its enlarged argmax.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{multinomial_counts, EmpiricalMeasure};
use crate::models::MomentModel;
use crate::ot::{conservative_adjust, plan_phi_mean, sinkhorn_warm, PhiTensor, Potentials, SinkhornOptions};

/// One evaluation of the inner entropic problem at a direction.
#[derive(Debug, Clone)]
pub struct DirectionEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub transport_cost: f64,
    pub kl: f64,
    pub converged: bool,
    pub marginal_error: f64,
    pub potentials: Option<Potentials>,
}

/// A concave map `u -> c(u)` on the unit ball built from two empirical samples.
pub trait DirectionalObjective: Send + Sync {
    fn dim(&self) -> usize;
    /// Scale `n` of the statistic `sqrt(n) * D`.
    fn sample_size(&self) -> usize;
    /// Whether both samples have the same size.
    fn is_balanced(&self) -> bool {
        true
    }
    fn epsilon(&self) -> f64;
    fn phi_sup_norm(&self) -> f64;
    fn theta(&self) -> &[f64];
    fn evaluate(&self, u: &[f64], warm: Option<&Potentials>) -> Result<DirectionEval>;
    /// Transport cost shifted down by the worst-case entropic bias.
    fn adjusted_value(&self, transport_cost: f64, kl: f64) -> Result<f64>;
    /// The same objective on a bootstrap draw of the underlying samples.
    fn resample(&self, rng: &mut dyn RngCore) -> Result<Box<dyn DirectionalObjective>>;
}

/// `c(u) = min_P E_P[u' phi] + eps KL(P | mu x nu)` on fixed sample atoms.
#[derive(Debug, Clone)]
pub struct MarginalObjective {
    phi: Arc<PhiTensor>,
    a: Vec<f64>,
    b: Vec<f64>,
    n_mu: usize,
    n_nu: usize,
    sinkhorn: SinkhornOptions,
}

impl MarginalObjective {
    pub fn new(
        model: &dyn MomentModel,
        theta: &[f64],
        mu: &EmpiricalMeasure,
        nu: &EmpiricalMeasure,
        sinkhorn: SinkhornOptions,
    ) -> Result<Self> {
        let phi = Arc::new(PhiTensor::build(model, theta, mu, nu)?);
        Ok(Self {
            phi,
            a: mu.weights().to_vec(),
            b: nu.weights().to_vec(),
            n_mu: mu.sample_size(),
            n_nu: nu.sample_size(),
            sinkhorn,
        })
    }

    pub fn from_phi(
        phi: Arc<PhiTensor>,
        a: Vec<f64>,
        b: Vec<f64>,
        sample_sizes: (usize, usize),
        sinkhorn: SinkhornOptions,
    ) -> Result<Self> {
        if a.len() != phi.rows() || b.len() != phi.cols() {
            return Err(invalid("weights do not match the moment tensor"));
        }
        Ok(Self {
            phi,
            a,
            b,
            n_mu: sample_sizes.0,
            n_nu: sample_sizes.1,
            sinkhorn,
        })
    }

    pub fn phi(&self) -> &Arc<PhiTensor> {
        &self.phi
    }
    pub fn weights(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }
    pub fn sinkhorn_options(&self) -> &SinkhornOptions {
        &self.sinkhorn
    }
}

impl DirectionalObjective for MarginalObjective {
    fn dim(&self) -> usize {
        self.phi.moment_dim()
    }
    fn sample_size(&self) -> usize {
        self.n_mu
    }
    fn is_balanced(&self) -> bool {
        self.n_mu == self.n_nu
    }
    fn epsilon(&self) -> f64 {
        self.sinkhorn.epsilon
    }
    fn phi_sup_norm(&self) -> f64 {
        self.phi.sup_norm()
    }
    fn theta(&self) -> &[f64] {
        self.phi.theta()
    }

    fn evaluate(&self, u: &[f64], warm: Option<&Potentials>) -> Result<DirectionEval> {
        let cost = self.phi.with_direction(u)?;
        let r = sinkhorn_warm(&cost, &self.a, &self.b, &self.sinkhorn, warm)?;
        let gradient = plan_phi_mean(&r, &cost);
        Ok(DirectionEval {
            value: r.value,
            gradient,
            transport_cost: r.transport_cost,
            kl: r.kl,
            converged: r.converged,
            marginal_error: r.marginal_error,
            potentials: Some(r.potentials()),
        })
    }

    fn adjusted_value(&self, transport_cost: f64, kl: f64) -> Result<f64> {
        if self.a.len() != self.b.len() {
            return Err(invalid("the bias adjustment needs samples of equal size"));
        }
        Ok(conservative_adjust(
            transport_cost,
            self.sinkhorn.epsilon,
            self.a.len(),
            kl,
        ))
    }

    fn resample(&self, rng: &mut dyn RngCore) -> Result<Box<dyn DirectionalObjective>> {
        let draw = |w: &[f64], n: usize, rng: &mut dyn RngCore| -> Vec<f64> {
            multinomial_counts(w, n, rng)
                .into_iter()
                .map(|c| c as f64 / n as f64)
                .collect()
        };
        let a = draw(&self.a, self.n_mu, rng);
        let b = draw(&self.b, self.n_nu, rng);
        Ok(Box::new(Self {
            phi: Arc::clone(&self.phi),
            a,
            b,
            n_mu: self.n_mu,
            n_nu: self.n_nu,
            sinkhorn: self.sinkhorn,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Pga,
    SphereGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionResult {
    pub u_star: Vec<f64>,
    pub c_value: f64,
    /// Norm of the projected-gradient mapping at exit; absent for pure grids.
    pub gradient_norm: Option<f64>,
    pub iterations: usize,
    pub method: SearchMethod,
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn project(u: &mut [f64]) {
    let r = norm(u);
    if r > 1.0 {
        u.iter_mut().for_each(|v| *v /= r);
    }
}

/// Projected gradient ascent on the unit ball. The step halves on decrease
/// and grows by half after each strict improvement.
///
/// Stops when `|P(u + s g) - u| / s <= tol`, which vanishes at constrained
/// maxima including boundary ones, or when halving has shrunk the step by a
/// factor 1e8. Returns the best iterate seen.
pub fn projected_gradient_ascent<F>(
    mut eval: F,
    u0: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DirectionResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if norm(u0) > 1.0 + 1e-10 {
        return Err(invalid("starting direction lies outside the unit ball"));
    }
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(invalid("step and tolerance must be positive"));
    }
    let checked = |(v, g): (f64, Vec<f64>)| -> Result<(f64, Vec<f64>)> {
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("objective or gradient".into()));
        }
        Ok((v, g))
    };
    let mut u = u0.to_vec();
    project(&mut u);
    let (mut v, mut g) = checked(eval(&u)?)?;
    let mut s = step;
    let mut iterations = 0;
    let mut mapping = f64::INFINITY;
    while iterations < max_iter {
        let mut cand: Vec<f64> = u.iter().zip(&g).map(|(x, d)| x + s * d).collect();
        project(&mut cand);
        mapping = norm(&cand.iter().zip(&u).map(|(a, b)| a - b).collect::<Vec<_>>()) / s;
        // Below a relative step of 1e-8 only solver noise decides ascent.
        if mapping <= tol || s < step * 1e-8 {
            break;
        }
        iterations += 1;
        let (vc, gc) = checked(eval(&cand)?)?;
        if vc < v {
            s *= 0.5;
            continue;
        }
        if vc > v {
            s *= 1.5;
        }
        u = cand;
        v = vc;
        g = gc;
    }
    Ok(DirectionResult {
        u_star: u,
        c_value: v,
        gradient_norm: Some(mapping),
        iterations,
        method: SearchMethod::Pga,
    })
}

/// Candidate directions: the origin first, then a grid over the ball.
///
/// `p = 1` uses `resolution` equally spaced points on `[-1, 1]`; `p = 2` uses
/// `resolution` equally spaced angles on the circles of radius 1/2 and 1;
/// `p >= 3` uses seeded uniform directions on the same two spheres.
pub fn sphere_grid_points(p: usize, resolution: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if resolution < 3 {
        return Err(invalid(format!("grid resolution must be at least 3, got {resolution}")));
    }
    if p == 0 {
        return Err(invalid("direction dimension must be positive"));
    }
    let mut pts = vec![vec![0.0; p]];
    match p {
        1 => {
            for i in 0..resolution {
                let u = -1.0 + 2.0 * i as f64 / (resolution - 1) as f64;
                if u.abs() > 1e-15 {
                    pts.push(vec![u]);
                }
            }
        }
        2 => {
            for r in [0.5, 1.0] {
                for i in 0..resolution {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / resolution as f64;
                    pts.push(vec![r * a.cos(), r * a.sin()]);
                }
            }
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..resolution {
                let mut v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                let r = norm(&v);
                v.iter_mut().for_each(|x| *x /= r);
                pts.push(v.iter().map(|x| 0.5 * x).collect());
                pts.push(v);
            }
        }
    }
    Ok(pts)
}

/// Exhaustive search over [`sphere_grid_points`]; returns the best point and
/// every evaluated `(u, c(u))` pair.
pub fn sphere_grid_max<F>(
    mut eval: F,
    p: usize,
    resolution: usize,
    seed: u64,
) -> Result<(DirectionResult, Vec<(Vec<f64>, f64)>)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let pts = sphere_grid_points(p, resolution, seed)?;
    let mut evals = Vec::with_capacity(pts.len());
    for u in pts {
        let v = eval(&u)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective at {u:?}")));
        }
        evals.push((u, v));
    }
    let mut best = 0;
    for (i, e) in evals.iter().enumerate() {
        if e.1 > evals[best].1 {
            best = i;
        }
    }
    Ok((
        DirectionResult {
            u_star: evals[best].0.clone(),
            c_value: evals[best].1,
            gradient_norm: None,
            iterations: evals.len(),
            method: SearchMethod::SphereGrid,
        },
        evals,
    ))
}

/// `iota_n = scale * n^{-1/2} * log n`.
pub fn default_iota(n: usize, scale: f64) -> f64 {
    let n = n as f64;
    scale * n.ln() / n.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub resolution: usize,
    /// Run projected gradient ascent from the best grid point.
    pub refine: bool,
    /// Defaults to `0.1 / sup|phi|`.
    pub step: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Width of the enlarged argmax.
    pub iota: f64,
    pub seed: u64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            resolution: 21,
            refine: true,
            step: None,
            tol: 1e-6,
            max_iter: 500,
            iota: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub u: Vec<f64>,
    pub value: f64,
    pub transport_cost: f64,
    pub kl: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceResult {
    pub theta: Vec<f64>,
    pub d_hat: f64,
    pub direction: DirectionResult,
    pub candidate_directions: Vec<Candidate>,
    pub enlarged_argmax: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl DistanceResult {
    pub fn all_converged(&self) -> bool {
        self.candidate_directions.iter().all(|c| c.converged)
    }
}

/// Dual potentials keyed by direction, reused as Sinkhorn starting points.
#[derive(Debug, Clone, Default)]
pub struct WarmCache {
    entries: Vec<(Vec<f64>, Potentials)>,
}

impl WarmCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Potentials stored at the direction closest to `u`.
    pub fn nearest(&self, u: &[f64]) -> Option<&Potentials> {
        self.entries
            .iter()
            .map(|(v, p)| (dist2(u, v), p))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, p)| p)
    }

    pub fn insert(&mut self, u: &[f64], pot: Potentials) {
        match self.entries.iter_mut().find(|(v, _)| dist2(u, v) < 1e-28) {
            Some(slot) => slot.1 = pot,
            None => self.entries.push((u.to_vec(), pot)),
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `D(theta) = max_{|u| <= 1} c(u)` on the candidate grid plus a gradient
/// refinement, together with the enlarged argmax `{u : c(u) >= D - iota}`.
pub fn distance_statistic(obj: &dyn DirectionalObjective, opts: &DistanceOptions) -> Result<DistanceResult> {
    distance_statistic_cached(obj, opts, &mut WarmCache::new())
}

/// As [`distance_statistic`], warm-starting every solve from `cache` and
/// recording the new potentials there.
pub fn distance_statistic_cached(
    obj: &dyn DirectionalObjective,
    opts: &DistanceOptions,
    cache: &mut WarmCache,
) -> Result<DistanceResult> {
    if !(opts.iota >= 0.0) {
        return Err(invalid("iota must be nonnegative"));
    }
    let p = obj.dim();
    let mut grid = sphere_grid_points(p, opts.resolution, opts.seed)?;
    grid.sort_by(|a, b| norm(a).total_cmp(&norm(b)));

    let mut candidates: Vec<Candidate> = Vec::new();
    let mut warnings = Vec::new();
    let mut run = |u: &[f64], cache: &mut WarmCache, candidates: &mut Vec<Candidate>| -> Result<DirectionEval> {
        let mut e = obj.evaluate(u, cache.nearest(u))?;
        if let Some(pot) = e.potentials.take() {
            cache.insert(u, pot);
        }
        if !e.converged {
            warnings.push(format!(
                "sinkhorn stopped at marginal error {:.2e} for u = {u:?}",
                e.marginal_error
            ));
        }
        let cand = Candidate {
            u: u.to_vec(),
            value: e.value,
            transport_cost: e.transport_cost,
            kl: e.kl,
            converged: e.converged,
        };
        // Repeat visits differ only by solver tolerance; keep one entry per direction.
        match candidates.iter_mut().find(|c| c.u == cand.u) {
            Some(old) if old.value >= cand.value => {}
            Some(old) => *old = cand,
            None => candidates.push(cand),
        }
        Ok(e)
    };

    for u in &grid {
        run(u, cache, &mut candidates)?;
    }
    let best_grid = argmax(&candidates);
    let mut direction = DirectionResult {
        u_star: candidates[best_grid].u.clone(),
        c_value: candidates[best_grid].value,
        gradient_norm: None,
        iterations: candidates.len(),
        method: SearchMethod::SphereGrid,
    };
    if opts.refine {
        let sup = obj.phi_sup_norm();
        let step = opts.step.unwrap_or(if sup > 0.0 { 0.1 / sup } else { 0.1 });
        let start = candidates[best_grid].u.clone();
        let pga = projected_gradient_ascent(
            |u| run(u, cache, &mut candidates).map(|e| (e.value, e.gradient)),
            &start,
            step,
            opts.tol,
            opts.max_iter,
        )?;
        if pga.c_value >= direction.c_value {
            direction = pga;
        }
    }
    let best = argmax(&candidates);
    let d_hat = candidates[best].value;
    if d_hat > direction.c_value {
        direction.u_star = candidates[best].u.clone();
        direction.c_value = d_hat;
    }
    let enlarged_argmax = candidates
        .iter()
        .filter(|c| c.value >= d_hat - opts.iota - 1e-12)
        .map(|c| c.u.clone())
        .collect();
    Ok(DistanceResult {
        theta: obj.theta().to_vec(),
        d_hat,
        direction,
        candidate_directions: candidates,
        enlarged_argmax,
        warnings,
    })
}

fn argmax(c: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, x) in c.iter().enumerate() {
        if x.value > c[best].value {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BenefitShareModel, ZeroModel};
    use rand_distr::Normal;

    fn rct(n: usize, seed: u64) -> (EmpiricalMeasure, EmpiricalMeasure) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |m: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            let d = Normal::new(m, 1.0).unwrap();
            (0..n).map(|_| vec![d.sample(rng)]).collect()
        };
        let x = draw(0.0, &mut rng);
        let y = draw(2.0, &mut rng);
        (
            EmpiricalMeasure::uniform(x).unwrap(),
            EmpiricalMeasure::uniform(y).unwrap(),
        )
    }

    #[test]
    fn pga_linear_objective_reaches_boundary() {
        let b = [0.6, -0.8];
        let lin = |u: &[f64]| Ok((u[0] * b[0] + u[1] * b[1], b.to_vec()));
        let r = projected_gradient_ascent(lin, &[0.0, 0.0], 0.1, 1e-10, 500).unwrap();
        assert!((r.u_star[0] - 0.6).abs() < 1e-9 && (r.u_star[1] + 0.8).abs() < 1e-9);
        assert!((r.c_value - 1.0).abs() < 1e-9);
        assert!(r.gradient_norm.unwrap() <= 1e-10);
    }

    #[test]
    fn pga_interior_maximum() {
        let f = |u: &[f64]| Ok((-(u[0] * u[0] + u[1] * u[1]), vec![-2.0 * u[0], -2.0 * u[1]]));
        let r = projected_gradient_ascent(f, &[0.5, 0.5], 0.1, 1e-9, 500).unwrap();
        assert!(norm(&r.u_star) < 1e-9, "{r:?}");
        assert!(r.c_value.abs() < 1e-17);
    }

    #[test]
    fn pga_overshoot_returns_best_iterate() {
        // Huge step: every move overshoots; halving must recover.
        let f = |u: &[f64]| Ok((-(u[0] - 0.3).powi(2), vec![-2.0 * (u[0] - 0.3)]));
        let r = projected_gradient_ascent(f, &[-1.0], 50.0, 1e-9, 500).unwrap();
        assert!((r.u_star[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn pga_rejects_nonfinite_objective() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(matches!(
            projected_gradient_ascent(f, &[0.0], 0.1, 1e-6, 10),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn three_point_grid() {
        let f = |u: &[f64]| {
            Ok(if u[0] < 0.0 {
                -0.3
            } else if u[0] > 0.0 {
                0.18
            } else {
                0.0
            })
        };
        let (best, all) = sphere_grid_max(f, 1, 3, 0).unwrap();
        assert_eq!(best.u_star, vec![1.0]);
        assert_eq!(best.c_value, 0.18);
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].0, vec![0.0]);
    }

    #[test]
    fn circle_grid_finds_first_axis() {
        let res = 36;
        let (best, _) = sphere_grid_max(|u| Ok(u[0]), 2, res, 0).unwrap();
        let angle = best.u_star[1].atan2(best.u_star[0]).abs();
        assert!(angle <= std::f64::consts::PI / res as f64);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        assert!(sphere_grid_max(|_| Ok(0.0), 2, 2, 0).is_err());
    }

    #[test]
    fn high_dimensional_grid_contains_origin_and_stays_in_ball() {
        let pts = sphere_grid_points(4, 10, 3).unwrap();
        assert_eq!(pts[0], vec![0.0; 4]);
        assert!(pts.iter().all(|u| norm(u) <= 1.0 + 1e-12));
        assert_eq!(pts, sphere_grid_points(4, 10, 3).unwrap());
    }

    #[test]
    fn zero_model_distance() {
        let m = ZeroModel {
            dim_x: 1,
            dim_y: 1,
            k: 1,
            p: 2,
        };
        let mu = EmpiricalMeasure::uniform(vec![vec![0.0], vec![1.0]]).unwrap();
        let obj = MarginalObjective::new(&m, &[0.0], &mu, &mu, SinkhornOptions::default()).unwrap();
        let opts = DistanceOptions {
            resolution: 8,
            ..Default::default()
        };
        let r = distance_statistic(&obj, &opts).unwrap();
        assert!(r.d_hat.abs() < 1e-12);
        assert_eq!(r.enlarged_argmax.len(), r.candidate_directions.len());
    }

    #[test]
    fn iota_limits() {
        let (mu, nu) = rct(50, 1);
        let obj = MarginalObjective::new(
            &BenefitShareModel,
            &[0.5],
            &mu,
            &nu,
            SinkhornOptions::with_epsilon(0.05),
        )
        .unwrap();
        let all = distance_statistic(
            &obj,
            &DistanceOptions {
                iota: f64::INFINITY,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(all.enlarged_argmax.len(), all.candidate_directions.len());
        let tight = distance_statistic(&obj, &DistanceOptions::default()).unwrap();
        for u in &tight.enlarged_argmax {
            let c = tight.candidate_directions.iter().find(|c| &c.u == u).unwrap();
            assert!(c.value >= tight.d_hat - 1e-12);
        }
        assert!(tight.candidate_directions.iter().any(|c| c.u == vec![0.0]));
    }

    #[test]
    fn rct_pga_matches_one_dimensional_grid() {
        let (mu, nu) = rct(300, 2);
        let obj = MarginalObjective::new(
            &BenefitShareModel,
            &[0.4],
            &mu,
            &nu,
            SinkhornOptions::with_epsilon(0.02),
        )
        .unwrap();
        let r = distance_statistic(&obj, &DistanceOptions::default()).unwrap();
        assert_eq!(r.direction.u_star, vec![1.0]);
        let at_one = obj.evaluate(&[1.0], None).unwrap().value;
        assert!((r.d_hat - at_one).abs() < 1e-6);
        let (grid, _) = sphere_grid_max(|u| obj.evaluate(u, None).map(|e| e.value), 1, 201, 0).unwrap();
        assert!((r.d_hat - grid.c_value).abs() < 1e-6);
    }

    #[test]
    fn joint_rescaling_of_phi_and_epsilon() {
        let (mu, nu) = rct(80, 4);
        let eps = 0.05;
        let base =
            MarginalObjective::new(&BenefitShareModel, &[0.8], &mu, &nu, SinkhornOptions::with_epsilon(eps)).unwrap();
        let s = 3.0;
        let scaled = MarginalObjective::from_phi(
            Arc::new(base.phi().scaled(s)),
            mu.weights().to_vec(),
            nu.weights().to_vec(),
            (80, 80),
            SinkhornOptions::with_epsilon(s * eps),
        )
        .unwrap();
        let opts = DistanceOptions::default();
        let d1 = distance_statistic(&base, &opts).unwrap().d_hat;
        let d2 = distance_statistic(&scaled, &opts).unwrap().d_hat;
        assert!((d2 - s * d1).abs() <= 1e-9 * (1.0 + d2.abs()), "{d2} vs {}", s * d1);
    }

    #[test]
    fn resample_keeps_atoms_and_reweights() {
        let (mu, nu) = rct(40, 5);
        let obj = MarginalObjective::new(&BenefitShareModel, &[0.5], &mu, &nu, SinkhornOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = obj.resample(&mut rng).unwrap();
        assert_eq!(b.sample_size(), 40);
        assert!(b.evaluate(&[1.0], None).unwrap().converged);
    }

    #[test]
    fn warm_cache_prefers_nearest() {
        let mut c = WarmCache::new();
        let p = |v: f64| Potentials { f: vec![v], g: vec![v] };
        c.insert(&[0.0], p(0.0));
        c.insert(&[1.0], p(1.0));
        c.insert(&[1.0], p(2.0));
        assert_eq!(c.len(), 2);
        assert_eq!(c.nearest(&[0.7]).unwrap().f, vec![2.0]);
    }
}
