use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cost::CostTensor;
use crate::error::{invalid, Error, Result};
use crate::measure::EmpiricalMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    /// l1 tolerance on the row and column marginals.
    pub tol: f64,
    pub max_iter: usize,
    /// Anneal from a large regularization on cold starts.
    pub epsilon_scaling: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tol: 1e-9,
            max_iter: 10_000,
            epsilon_scaling: true,
        }
    }
}

impl SinkhornOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }
}

/// Dual potentials, normalized so that `sum_i a_i f_i = sum_j b_j g_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `<P, C> + eps * KL(P | a x b)`.
    pub value: f64,
    pub transport_cost: f64,
    pub kl: f64,
    /// `<P, C> + eps * sum P (log P - 1)`, reported for comparison only.
    pub shifted_entropy_value: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
    pub epsilon: f64,
    #[serde(skip)]
    log_a: Vec<f64>,
    #[serde(skip)]
    log_b: Vec<f64>,
}

impl SinkhornResult {
    pub fn potentials(&self) -> Potentials {
        Potentials {
            f: self.f.clone(),
            g: self.g.clone(),
        }
    }

    /// Materializes the optimal coupling; `O(nm)` memory.
    pub fn coupling(&self, cost: &CostTensor) -> Array2<f64> {
        let ie = 1.0 / self.epsilon;
        Array2::from_shape_fn((cost.rows(), cost.cols()), |(i, j)| {
            let h = self.log_a[i] + self.log_b[j];
            if h == f64::NEG_INFINITY {
                0.0
            } else {
                (h + (self.f[i] + self.g[j] - cost.cost_at(i, j)) * ie).exp()
            }
        })
    }

    fn row_logits(&self) -> Vec<f64> {
        let ie = 1.0 / self.epsilon;
        self.f.iter().zip(&self.log_a).map(|(f, la)| f * ie + la).collect()
    }

    fn col_logits(&self) -> Vec<f64> {
        let ie = 1.0 / self.epsilon;
        self.g.iter().zip(&self.log_b).map(|(g, lb)| g * ie + lb).collect()
    }
}

pub fn sinkhorn(
    cost: &CostTensor,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    sinkhorn_warm(cost, mu.weights(), nu.weights(), opts, None)
}

/// Log-domain Sinkhorn on weights `a`, `b`, optionally started from `warm`.
pub fn sinkhorn_warm(
    cost: &CostTensor,
    a: &[f64],
    b: &[f64],
    opts: &SinkhornOptions,
    warm: Option<&Potentials>,
) -> Result<SinkhornResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if a.len() != n || b.len() != m {
        return Err(invalid(format!(
            "weights of length ({}, {}) for a {n}x{m} cost",
            a.len(),
            b.len()
        )));
    }
    let eps = opts.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    cost.check_finite()?;
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();

    let (mut f, mut g) = match warm {
        Some(p) if p.f.len() == n && p.g.len() == m => (p.f.clone(), p.g.clone()),
        Some(_) => return Err(invalid("warm-start potentials have the wrong shape")),
        None => (vec![0.0; n], vec![0.0; m]),
    };

    let mut stages = Vec::new();
    if opts.epsilon_scaling && warm.is_none() {
        let mut e = cost.range();
        while e > 2.0 * eps {
            stages.push(e);
            e /= 2.0;
        }
    }
    stages.push(eps);

    let mut iterations = 0;
    let mut converged = false;
    let last = stages.len() - 1;
    let mut work = Work::new(n, m);
    for (s, &e) in stages.iter().enumerate() {
        let final_stage = s == last;
        let tol = if final_stage { opts.tol } else { opts.tol.max(1e-3) };
        let mut accel = Anderson::new(m, b);
        // f_next caches R(g) when g was not extrapolated.
        let mut f_next: Option<Vec<f64>> = None;
        // Plain-step state to return to if an extrapolation does not help.
        let mut fallback: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        let mut cooldown = 0usize;
        let mut cooldown_len = 1usize;
        let mut best = f64::INFINITY;
        loop {
            match f_next.take() {
                Some(v) => f = v,
                None => work.row_update(cost, &g, &log_b, e, &mut f),
            }
            let mut g_exact = vec![0.0; m];
            work.col_update(cost, &f, &log_a, e, &mut g_exact);
            iterations += 1;
            // (f, g_exact) has exact columns; one more row pass measures the rows.
            let mut f2 = vec![0.0; n];
            work.row_update(cost, &g_exact, &log_b, e, &mut f2);
            let err: f64 = (0..n)
                .filter(|&i| a[i] > 0.0)
                .map(|i| a[i] * (((f[i] - f2[i]) / e).exp() - 1.0).abs())
                .sum();
            if let Some((g_fb, f_fb, _)) = fallback.take() {
                if err < best {
                    cooldown_len = 1;
                }
                if !(err < Anderson::SLACK * best) {
                    accel.reset();
                    cooldown = cooldown_len;
                    cooldown_len = (2 * cooldown_len).min(Anderson::MAX_COOLDOWN);
                    g = g_fb;
                    f_next = Some(f_fb);
                    if iterations >= opts.max_iter {
                        break;
                    }
                    continue;
                }
            }
            best = best.min(err);
            if err <= tol || iterations >= opts.max_iter {
                g = g_exact;
                converged = final_stage && err <= tol;
                break;
            }
            let next = if cooldown > 0 {
                cooldown -= 1;
                None
            } else {
                accel.step(&g, &g_exact)
            };
            match next {
                Some(x) => {
                    fallback = Some((g_exact, f2, err));
                    g = x;
                }
                None => {
                    f_next = Some(f2);
                    g = g_exact;
                }
            }
        }
        if iterations >= opts.max_iter {
            break;
        }
    }

    let shift = (dot(a, &f) - dot(b, &g)) / 2.0;
    f.iter_mut().for_each(|v| *v -= shift);
    g.iter_mut().for_each(|v| *v += shift);

    let mut out = SinkhornResult {
        f,
        g,
        value: 0.0,
        transport_cost: 0.0,
        kl: 0.0,
        shifted_entropy_value: 0.0,
        iterations,
        marginal_error: 0.0,
        converged,
        epsilon: eps,
        log_a,
        log_b,
    };
    let pm = cost.plan_moments(&out.row_logits(), &out.col_logits(), 1.0 / eps);
    let row_err: f64 = pm.row_sums.iter().zip(a).map(|(r, a)| (r - a).abs()).sum();
    let col_err: f64 = pm.col_sums.iter().zip(b).map(|(c, b)| (c - b).abs()).sum();
    out.marginal_error = row_err.max(col_err);
    let dual = dot(&pm.row_sums, &out.f) + dot(&pm.col_sums, &out.g);
    out.kl = ((dual - pm.transport) / eps).max(0.0);
    out.transport_cost = pm.transport;
    out.value = pm.transport + eps * out.kl;
    let cross: f64 = pm
        .row_sums
        .iter()
        .zip(&out.log_a)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, la)| r * la)
        .sum::<f64>()
        + pm.col_sums
            .iter()
            .zip(&out.log_b)
            .filter(|(c, _)| **c > 0.0)
            .map(|(c, lb)| c * lb)
            .sum::<f64>();
    let mass: f64 = pm.row_sums.iter().sum();
    out.shifted_entropy_value = pm.transport + eps * (out.kl + cross - mass);
    if !out.value.is_finite() {
        return Err(Error::NonFinite("entropic value".into()));
    }
    Ok(out)
}

struct Work {
    h: Vec<f64>,
    lse: Vec<f64>,
}

impl Work {
    fn new(n: usize, m: usize) -> Self {
        Self {
            h: vec![0.0; n.max(m)],
            lse: vec![0.0; n.max(m)],
        }
    }

    /// `f_i = -eps log sum_j b_j exp((g_j - C_ij) / eps)`.
    fn row_update(&mut self, cost: &CostTensor, g: &[f64], log_b: &[f64], eps: f64, f: &mut [f64]) {
        let (n, m) = (f.len(), g.len());
        for j in 0..m {
            self.h[j] = g[j] / eps + log_b[j];
        }
        cost.row_lse(&self.h[..m], 1.0 / eps, &mut self.lse[..n]);
        for i in 0..n {
            f[i] = -eps * self.lse[i];
        }
    }

    fn col_update(&mut self, cost: &CostTensor, f: &[f64], log_a: &[f64], eps: f64, g: &mut [f64]) {
        let (n, m) = (f.len(), g.len());
        for i in 0..n {
            self.h[i] = f[i] / eps + log_a[i];
        }
        cost.col_lse(&self.h[..n], 1.0 / eps, &mut self.lse[..m]);
        for j in 0..m {
            g[j] = -eps * self.lse[j];
        }
    }
}

/// Type-II Anderson acceleration of the map `g -> C(R(g))`, with residuals
/// weighted by the column marginal. The caller keeps an extrapolated step only
/// while the marginal error stays within `SLACK` of the best error so far.
struct Anderson {
    sqrt_w: Vec<f64>,
    dx: Vec<Vec<f64>>,
    dr: Vec<Vec<f64>>,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl Anderson {
    const MEMORY: usize = 6;
    /// Cap on the plain steps taken after a rejected extrapolation; the count
    /// doubles on each rejection and resets once an extrapolation sets a new
    /// best error.
    const MAX_COOLDOWN: usize = 64;
    /// Extrapolations may raise the error up to this factor over the best
    /// error of the stage.
    const SLACK: f64 = 2.0;

    fn new(m: usize, b: &[f64]) -> Self {
        debug_assert_eq!(m, b.len());
        Self {
            sqrt_w: b.iter().map(|v| v.sqrt()).collect(),
            dx: Vec::new(),
            dr: Vec::new(),
            prev: None,
        }
    }

    fn reset(&mut self) {
        self.dx.clear();
        self.dr.clear();
        self.prev = None;
    }

    /// Next iterate from `x` and `G(x)`, or `None` for the plain step `G(x)`.
    fn step(&mut self, x: &[f64], gx: &[f64]) -> Option<Vec<f64>> {
        let r: Vec<f64> = gx.iter().zip(x).map(|(a, b)| a - b).collect();
        if let Some((px, pr)) = self.prev.take() {
            self.dx.push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.dr.push(r.iter().zip(&pr).map(|(a, b)| a - b).collect());
            if self.dx.len() > Self::MEMORY {
                self.dx.remove(0);
                self.dr.remove(0);
            }
        }
        self.prev = Some((x.to_vec(), r.clone()));
        let k = self.dr.len();
        if k == 0 {
            return None;
        }
        let wdot =
            |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).zip(&self.sqrt_w).map(|((a, b), w)| a * b * w * w).sum() };
        let mut gram = vec![vec![0.0; k]; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            for j in 0..=i {
                let v = wdot(&self.dr[i], &self.dr[j]);
                gram[i][j] = v;
                gram[j][i] = v;
            }
            rhs[i] = wdot(&self.dr[i], &r);
        }
        let trace: f64 = (0..k).map(|i| gram[i][i]).sum();
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] += 1e-10 * trace + f64::MIN_POSITIVE;
        }
        let gamma = solve_small(gram, rhs)?;
        let mut next = gx.to_vec();
        for (c, (dx, dr)) in gamma.iter().zip(self.dx.iter().zip(&self.dr)) {
            for j in 0..next.len() {
                next[j] -= c * (dx[j] + dr[j]);
            }
        }
        next.iter().all(|v| v.is_finite()).then_some(next)
    }
}

/// Gaussian elimination with partial pivoting for the tiny Anderson systems.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let k = b.len();
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..k {
            let factor = a[row][col] / a[col][col];
            for c in col..k {
                a[row][c] -= factor * a[col][c];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let s: f64 = (row + 1..k).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad_u c_eps(u) = E_P[phi]` under the entropic plan of `result`.
pub fn gradient_in_u(result: &SinkhornResult, cost: &CostTensor) -> Result<Vec<f64>> {
    if result.f.len() != cost.rows() || result.g.len() != cost.cols() {
        return Err(invalid("potentials do not match the cost tensor"));
    }
    if !result.converged && result.marginal_error > 1e-6 {
        return Err(Error::NotConverged {
            context: "the gradient plan".into(),
            marginal_error: result.marginal_error,
        });
    }
    Ok(plan_phi_mean(result, cost))
}

/// `E_P[phi]` without the convergence guard.
pub(crate) fn plan_phi_mean(result: &SinkhornResult, cost: &CostTensor) -> Vec<f64> {
    cost.plan_moments(&result.row_logits(), &result.col_logits(), 1.0 / result.epsilon)
        .phi_mean
}

/// `<P, C> + eps * KL(P | a x b)` for an explicit plan.
pub fn entropic_value(plan: &Array2<f64>, cost: &Array2<f64>, eps: f64, a: &[f64], b: &[f64]) -> Result<f64> {
    if plan.dim() != cost.dim() || plan.nrows() != a.len() || plan.ncols() != b.len() {
        return Err(invalid("plan, cost and marginals have inconsistent shapes"));
    }
    let row_err: f64 = plan.rows().into_iter().zip(a).map(|(r, a)| (r.sum() - a).abs()).sum();
    let col_err: f64 = plan
        .columns()
        .into_iter()
        .zip(b)
        .map(|(c, b)| (c.sum() - b).abs())
        .sum();
    if row_err > 1e-6 || col_err > 1e-6 {
        return Err(invalid(format!(
            "plan marginals are off by ({row_err:.3e}, {col_err:.3e})"
        )));
    }
    let mut total = 0.0;
    for ((i, j), &p) in plan.indexed_iter() {
        if p < 0.0 {
            return Err(invalid(format!("negative plan entry at ({i}, {j})")));
        }
        if p == 0.0 {
            continue;
        }
        let ab = a[i] * b[j];
        if ab == 0.0 {
            return Err(Error::InfeasibleSupport {
                row: i,
                col: j,
                mass: p,
            });
        }
        total += p * cost[[i, j]] + eps * p * (p / ab).ln();
    }
    Ok(total)
}

/// Shifts an entropic value down by its worst-case regularization bias.
pub fn conservative_adjust(value: f64, eps: f64, n: usize, kl: f64) -> f64 {
    value - eps * ((n as f64).ln() - kl)
}
