//! Seeded simulation designs and the drivers behind the demo curves and the
//! coverage study.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direction::{DirectionalObjective, MarginalObjective, WarmCache};
use crate::error::{invalid, Result};
use crate::idset::ParamGrid;
use crate::inference::{confidence_region, derive_seed, BootstrapOptions, PointSummary};
use crate::measure::EmpiricalMeasure;
use crate::models::{BenefitShareModel, MomentModel, PanelLogitScoreModel};
use crate::ot::SinkhornOptions;
use crate::panel::{Observation, PanelData, PanelSummary, PartitionedObjective};

/// Two-period logit panel with discrete covariates, normal fixed effects,
/// completely-at-random attrition and an independent refreshment sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitDgpConfig {
    pub theta0: Vec<f64>,
    /// Atoms of each covariate coordinate, drawn uniformly and independently.
    pub supports: Vec<Vec<f64>>,
    pub n_org: usize,
    pub n_ref: usize,
    pub attrition_rate: f64,
    pub n_sims: usize,
    pub seed: u64,
}

impl Default for LogitDgpConfig {
    fn default() -> Self {
        Self {
            theta0: vec![1.0, 2.0],
            supports: vec![vec![0.42, 0.55, 0.60], vec![0.54, 0.65, 0.72]],
            n_org: 2000,
            n_ref: 2000,
            attrition_rate: 0.10,
            n_sims: 50,
            seed: 20240601,
        }
    }
}

impl LogitDgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta0.is_empty() || self.theta0.len() != self.supports.len() {
            return Err(invalid("theta0 and supports must have the same nonzero length"));
        }
        if self
            .supports
            .iter()
            .any(|s| s.is_empty() || s.iter().any(|v| !v.is_finite()))
        {
            return Err(invalid("covariate supports must be nonempty and finite"));
        }
        if self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("theta0 must be finite"));
        }
        if !(0.0..1.0).contains(&self.attrition_rate) {
            return Err(invalid(format!(
                "attrition rate must lie in [0, 1), got {}",
                self.attrition_rate
            )));
        }
        if self.n_org == 0 || self.n_ref == 0 {
            return Err(invalid("sample sizes must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.theta0.len()
    }

    /// Number of retained units; attrition removes an exact share.
    pub fn n_retained(&self) -> usize {
        self.n_org - (self.attrition_rate * self.n_org as f64).round() as usize
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn draw_x(cfg: &LogitDgpConfig, rng: &mut impl Rng) -> Vec<f64> {
    cfg.supports.iter().map(|s| s[rng.random_range(0..s.len())]).collect()
}

fn draw_y(x: &[f64], theta: &[f64], alpha: f64, rng: &mut impl Rng) -> u8 {
    let v: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let noise = (v / (1.0 - v)).ln();
    let index: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    (index + alpha - noise > 0.0) as u8
}

/// One replication; the RNG stream is `(config.seed, rep)`.
pub fn simulate_panel_logit(cfg: &LogitDgpConfig, rep: u64) -> Result<PanelData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);
    let th = &cfg.theta0;
    let mut wave1 = Vec::with_capacity(cfg.n_org);
    let mut wave2 = Vec::with_capacity(cfg.n_org);
    for id in 0..cfg.n_org as u64 {
        let alpha: f64 = StandardNormal.sample(&mut rng);
        let x1 = draw_x(cfg, &mut rng);
        let x2 = draw_x(cfg, &mut rng);
        let y1 = draw_y(&x1, th, alpha, &mut rng);
        let y2 = draw_y(&x2, th, alpha, &mut rng);
        wave1.push((id + 1, Observation { y: y1, x: x1 }));
        wave2.push((id + 1, Observation { y: y2, x: x2 }));
    }
    let mut kept: Vec<usize> = sample(&mut rng, cfg.n_org, cfg.n_retained()).into_vec();
    kept.sort_unstable();
    let retainers = kept.into_iter().map(|i| wave2[i].clone()).collect();
    let refreshment = (0..cfg.n_ref)
        .map(|_| {
            let alpha: f64 = StandardNormal.sample(&mut rng);
            let _ = draw_x(cfg, &mut rng);
            let x2 = draw_x(cfg, &mut rng);
            let y2 = draw_y(&x2, th, alpha, &mut rng);
            Observation { y: y2, x: x2 }
        })
        .collect();
    PanelData::new(cfg.k(), wave1, retainers, refreshment)
}

/// Population law of the design on the `(y, x)` atoms of both periods,
/// integrating the fixed effect on a fine grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationPanel {
    pub atoms: Vec<Vec<f64>>,
    /// Row-major `atoms x atoms` joint probabilities of `(period 1, period 2)`.
    pub joint: Vec<f64>,
    pub marginal: Vec<f64>,
}

pub fn population_panel(cfg: &LogitDgpConfig) -> Result<PopulationPanel> {
    cfg.validate()?;
    let mut xs: Vec<Vec<f64>> = vec![vec![]];
    for s in &cfg.supports {
        xs = xs
            .into_iter()
            .flat_map(|p| {
                s.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    let px = 1.0 / xs.len() as f64;
    let mut atoms = Vec::new();
    for y in [0.0, 1.0] {
        for x in &xs {
            let mut a = vec![y];
            a.extend_from_slice(x);
            atoms.push(a);
        }
    }
    // Trapezoid rule on [-12, 12]; the integrand is smooth and decays fast.
    let nodes = 4001;
    let h = 24.0 / (nodes - 1) as f64;
    let weights: Vec<(f64, f64)> = (0..nodes)
        .map(|i| {
            let a = -12.0 + h * i as f64;
            let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            (a, w * h * (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let prob = |atom: &[f64], alpha: f64| {
        let idx: f64 = atom[1..].iter().zip(&cfg.theta0).map(|(a, b)| a * b).sum();
        let p1 = logistic(idx + alpha);
        if atom[0] > 0.5 {
            p1
        } else {
            1.0 - p1
        }
    };
    let n = atoms.len();
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = px
                * px
                * weights
                    .iter()
                    .map(|(a, w)| w * prob(&atoms[i], *a) * prob(&atoms[j], *a))
                    .sum::<f64>();
        }
    }
    let marginal = (0..n).map(|i| (0..n).map(|j| joint[i * n + j]).sum()).collect();
    Ok(PopulationPanel { atoms, joint, marginal })
}

/// Population gradient at `u = 0` of the partitioned objective:
/// `p E_joint[phi] + (1 - p) E_{f1 x f2}[phi]`. Under random attrition the
/// attriter marginals equal the population ones.
pub fn population_moment(pop: &PopulationPanel, retention: f64, theta: &[f64]) -> Vec<f64> {
    let k = theta.len();
    let model = PanelLogitScoreModel::new(k);
    let n = pop.atoms.len();
    let mut out = vec![0.0; k];
    let mut phi = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            model.evaluate(&pop.atoms[i], &pop.atoms[j], theta, &mut phi);
            let w = retention * pop.joint[i * n + j] + (1.0 - retention) * pop.marginal[i] * pop.marginal[j];
            for c in 0..k {
                out[c] += w * phi[c];
            }
        }
    }
    out
}

/// The unique zero of [`population_moment`], which is the whole entropic
/// identified set of the partitioned moment. Newton with a central-difference
/// Jacobian from `theta0`.
pub fn population_entropic_point(cfg: &LogitDgpConfig) -> Result<Vec<f64>> {
    let pop = population_panel(cfg)?;
    let p = cfg.n_retained() as f64 / cfg.n_org as f64;
    let k = cfg.k();
    let mut th = cfg.theta0.clone();
    for _ in 0..50 {
        let g = population_moment(&pop, p, &th);
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-14 {
            return Ok(th);
        }
        let mut jac = vec![vec![0.0; k]; k];
        for c in 0..k {
            let h = 1e-5;
            let (mut a, mut b) = (th.clone(), th.clone());
            a[c] += h;
            b[c] -= h;
            let (ga, gb) = (population_moment(&pop, p, &a), population_moment(&pop, p, &b));
            for r in 0..k {
                jac[r][c] = (ga[r] - gb[r]) / (2.0 * h);
            }
        }
        let step = solve(jac, g).ok_or_else(|| invalid("singular population Jacobian"))?;
        th.iter_mut().zip(&step).for_each(|(t, s)| *t -= s);
    }
    Err(invalid("population moment root did not converge"))
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub u: f64,
    pub value: f64,
    pub converged: bool,
}

/// `u -> c_theta(u)` for the benefit-share moment on two Gaussian arms of
/// size `n` each, over `u_points` equally spaced values in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn run_rct_demo(
    n: usize,
    mu0: f64,
    mu1: f64,
    sigma: f64,
    epsilon: f64,
    thetas: &[f64],
    u_points: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if n < 100 {
        return Err(invalid(format!("need at least 100 units per arm, got {n}")));
    }
    if u_points < 2 {
        return Err(invalid("need at least two u values"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0: Vec<Vec<f64>> = (0..n).map(|_| vec![mu0 + normal.sample(&mut rng)]).collect();
    let y1: Vec<Vec<f64>> = (0..n).map(|_| vec![mu1 + normal.sample(&mut rng)]).collect();
    let mu = EmpiricalMeasure::uniform(y0)?;
    let nu = EmpiricalMeasure::uniform(y1)?;
    let us: Vec<f64> = (0..u_points)
        .map(|i| -1.0 + 2.0 * i as f64 / (u_points - 1) as f64)
        .collect();
    let mut cache = WarmCache::new();
    let mut out = Vec::with_capacity(thetas.len() * us.len());
    for &theta in thetas {
        let obj = MarginalObjective::new(
            &BenefitShareModel as &dyn MomentModel,
            &[theta],
            &mu,
            &nu,
            SinkhornOptions::with_epsilon(epsilon),
        )?;
        for &u in &us {
            let e = obj.evaluate(&[u], cache.nearest(&[u]))?;
            if let Some(p) = e.potentials.clone() {
                cache.insert(&[u], p);
            }
            out.push(CurvePoint {
                theta,
                u,
                value: e.value,
                converged: e.converged,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageOptions {
    pub epsilon: f64,
    pub iota_scale: f64,
    pub bootstrap: BootstrapOptions,
}

/// Outcome of one replication at every grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub points: Vec<PointSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub grid: ParamGrid,
    pub mean_distance: Vec<f64>,
    pub coverage: Vec<f64>,
    pub n_sims: usize,
    pub alpha: f64,
    pub replications: Vec<Replication>,
    /// Replications that errored, with the message; excluded from the means.
    pub failed: Vec<(usize, String)>,
}

impl CoverageReport {
    /// Coverage recomputed at another level from the same bootstrap draws.
    pub fn coverage_at(&self, alpha: f64) -> Vec<f64> {
        let n = self.replications.len().max(1) as f64;
        (0..self.grid.len())
            .map(|i| {
                self.replications
                    .iter()
                    .filter(|r| r.points[i].accepts_at(alpha))
                    .count() as f64
                    / n
            })
            .collect()
    }
}

/// The objective used by the coverage study: the partitioned moment on one
/// simulated panel.
pub fn panel_objective(
    summary: &Arc<PanelSummary>,
    theta: &[f64],
    epsilon: f64,
) -> Result<Box<dyn DirectionalObjective>> {
    Ok(Box::new(PartitionedObjective::new(
        Arc::clone(summary),
        theta,
        SinkhornOptions::with_epsilon(epsilon),
    )?))
}

/// Simulates `cfg.n_sims` panels and inverts the bootstrap test over `grid`
/// on each. Replication `r` draws data from stream `r` and bootstrap seeds
/// from `derive_seed(seed, r)`, so results do not depend on scheduling.
pub fn run_coverage_study(cfg: &LogitDgpConfig, grid: &ParamGrid, opts: &CoverageOptions) -> Result<CoverageReport> {
    cfg.validate()?;
    if cfg.n_sims < 10 {
        return Err(invalid(format!("need at least 10 replications, got {}", cfg.n_sims)));
    }
    if grid.dim() != cfg.k() {
        return Err(invalid("grid dimension does not match theta0"));
    }
    let iota = crate::direction::default_iota(cfg.n_org, opts.iota_scale);
    let outcomes: Vec<std::result::Result<Replication, (usize, String)>> = (0..cfg.n_sims)
        .into_par_iter()
        .map(|rep| {
            let run = || -> Result<Replication> {
                let data = simulate_panel_logit(cfg, rep as u64)?;
                let summary = Arc::new(PanelSummary::from_data(&data)?);
                let mut b = opts.bootstrap;
                b.seed = derive_seed(opts.bootstrap.seed ^ cfg.seed, rep as u64);
                b.distance.iota = iota;
                let region = confidence_region(grid, &b, false, |t| panel_objective(&summary, t, opts.epsilon))?;
                Ok(Replication {
                    rep,
                    points: region.per_point,
                })
            };
            run().map_err(|e| (rep, e.to_string()))
        })
        .collect();
    let mut replications = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => replications.push(r),
            Err(f) => failed.push(f),
        }
    }
    if replications.is_empty() {
        return Err(invalid(format!(
            "every replication failed; first error: {}",
            failed[0].1
        )));
    }
    let n_ok = replications.len() as f64;
    let mean_distance = (0..grid.len())
        .map(|i| replications.iter().map(|r| r.points[i].d_hat).sum::<f64>() / n_ok)
        .collect();
    let mut report = CoverageReport {
        grid: grid.clone(),
        mean_distance,
        coverage: Vec::new(),
        n_sims: cfg.n_sims,
        alpha: opts.bootstrap.alpha,
        replications,
        failed,
    };
    report.coverage = (0..grid.len())
        .map(|i| report.replications.iter().filter(|r| !r.points[i].reject).count() as f64 / n_ok)
        .collect();
    Ok(report)
}

/// Self-contained SVG heatmap of `values` on a two-dimensional grid. Cells
/// are colored on a linear scale from white at `range.0` to dark blue at
/// `range.1`.
pub fn heatmap_svg(grid: &ParamGrid, values: &[f64], range: (f64, f64), title: &str) -> Result<String> {
    if grid.dim() != 2 || values.len() != grid.len() {
        return Err(invalid("heatmaps need a two-dimensional grid and one value per point"));
    }
    let (ax, ay) = (&grid.axes()[0], &grid.axes()[1]);
    let cell = 24.0;
    let (left, top) = (60.0, 40.0);
    let width = left + cell * ax.count as f64 + 20.0;
    let height = top + cell * ay.count as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="20" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
    let span = (range.1 - range.0).max(f64::MIN_POSITIVE);
    for (idx, v) in values.iter().enumerate() {
        let (i, j) = (idx / ay.count, idx % ay.count);
        let t = ((v - range.0) / span).clamp(0.0, 1.0);
        let (r, g, b) = (
            (255.0 * (1.0 - t) + 8.0 * t) as u8,
            (255.0 * (1.0 - t) + 48.0 * t) as u8,
            (255.0 * (1.0 - t) + 107.0 * t) as u8,
        );
        let x = left + cell * i as f64;
        let y = top + cell * (ay.count - 1 - j) as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"><title>{v:.4}</title></rect>"#
        );
    }
    let base = top + cell * ay.count as f64;
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{}" font-family="sans-serif" font-size="11">{:.3}</text>"#,
        base + 15.0,
        ax.low
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
        left + cell * ax.count as f64,
        base + 15.0,
        ax.high
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{base}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
        left - 5.0,
        ay.low
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
        left - 5.0,
        top + 10.0,
        ay.high
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Complete-case pairs drawn from the design with no attrition, for checks of
/// the conditional-likelihood moment.
pub fn simulate_complete_pairs(
    cfg: &LogitDgpConfig,
    n: usize,
    rng: &mut dyn RngCore,
) -> Vec<(Observation, Observation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    (0..n)
        .map(|_| {
            let alpha: f64 = StandardNormal.sample(&mut rng);
            let x1 = draw_x(cfg, &mut rng);
            let x2 = draw_x(cfg, &mut rng);
            let y1 = draw_y(&x1, &cfg.theta0, alpha, &mut rng);
            let y2 = draw_y(&x2, &cfg.theta0, alpha, &mut rng);
            (Observation { y: y1, x: x1 }, Observation { y: y2, x: x2 })
        })
        .collect()
}
