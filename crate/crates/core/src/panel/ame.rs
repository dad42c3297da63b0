//! Outer bounds on the average marginal effect from a Chebyshev remainder of
//! the logit conditional likelihood.

use std::sync::Arc;

use ndarray::Array3;
use num_rational::Rational64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::slope::entropic_extremes;
use super::PanelSummary;
use crate::error::{invalid, Result};
use crate::ot::{PhiTensor, SinkhornOptions};

const MAX_T: usize = 6;

fn poly_mul(a: &[i64], b: &[i64]) -> Vec<i64> {
    let mut out = vec![0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Integer coefficients of `T_n(2u - 1)` in powers of `u`.
fn shifted_chebyshev(n: usize) -> Vec<i64> {
    let z = [-1, 2];
    let mut prev = vec![1i64];
    let mut cur = vec![-1i64, 2];
    if n == 0 {
        return prev;
    }
    for _ in 1..n {
        let mut next = poly_mul(&cur, &z);
        next.iter_mut().for_each(|c| *c *= 2);
        for (i, c) in prev.iter().enumerate() {
            next[i] -= c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

/// Exact `b*` and error bound: `u^{T+1} - T*_{T+1}(u) / 2^{2T+1}` has degree
/// `T` and deviates from `u^{T+1}` by at most `1 / (2 * 4^T)` on `[0, 1]`.
pub fn chebyshev_coeffs_exact(t: usize) -> Result<(Vec<Rational64>, Rational64)> {
    if !(1..=MAX_T).contains(&t) {
        return Err(invalid(format!("number of periods must lie in 1..={MAX_T}, got {t}")));
    }
    let c = shifted_chebyshev(t + 1);
    let lead = 1i64 << (2 * t + 1);
    debug_assert_eq!(c[t + 1], lead);
    let b = c[..=t].iter().map(|&ci| Rational64::new(-ci, lead)).collect();
    Ok((b, Rational64::new(1, 2 * (1 << (2 * t)))))
}

pub fn chebyshev_coeffs(t: usize) -> Result<(Vec<f64>, f64)> {
    let (b, e) = chebyshev_coeffs_exact(t)?;
    let f = |r: &Rational64| *r.numer() as f64 / *r.denom() as f64;
    Ok((b.iter().map(f).collect(), f(&e)))
}

fn check_panel(x: &[Vec<f64>], theta: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(invalid("no periods"));
    }
    if let Some(row) = x.iter().find(|r| r.len() != theta.len()) {
        return Err(invalid(format!(
            "covariate row has {} entries, theta has {}",
            row.len(),
            theta.len()
        )));
    }
    Ok(())
}

fn index(x: &[f64], theta: &[f64]) -> f64 {
    x.iter().zip(theta).map(|(a, b)| a * b).sum()
}

/// Coefficients of `theta_j u (1 - u) prod_{t != tau} (1 + u (exp((x_t - x_tau)'theta) - 1))`.
/// `tau` and `j` are 1-based.
pub fn lambda_coeffs(x: &[Vec<f64>], theta: &[f64], tau: usize, j: usize) -> Result<Vec<f64>> {
    check_panel(x, theta)?;
    if !(1..=x.len()).contains(&tau) || !(1..=theta.len()).contains(&j) {
        return Err(invalid(format!("period {tau} or covariate {j} out of range")));
    }
    let tj = theta[j - 1];
    let mut poly = vec![0.0, tj, -tj];
    let base = index(&x[tau - 1], theta);
    for (t, row) in x.iter().enumerate() {
        if t + 1 == tau {
            continue;
        }
        let e = (index(row, theta) - base).exp() - 1.0;
        let mut next = vec![0.0; poly.len() + 1];
        for (i, c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] += c * e;
        }
        poly = next;
    }
    Ok(poly)
}

/// `log C_s` for all `s`, from the elementary symmetric recurrence on the
/// shifted exponentials.
fn log_elementary(x: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = x.iter().map(|r| index(r, theta)).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = vec![0.0; z.len() + 1];
    e[0] = 1.0;
    for (t, zt) in z.iter().enumerate() {
        let w = (zt - m).exp();
        for s in (1..=t + 1).rev() {
            e[s] += w * e[s - 1];
        }
    }
    e.iter().enumerate().map(|(s, v)| v.ln() + s as f64 * m).collect()
}

/// Elementary symmetric polynomial of degree `s` in `exp(x_t'theta)`.
pub fn elementary_c(x: &[Vec<f64>], theta: &[f64], s: usize) -> Result<f64> {
    check_panel(x, theta)?;
    if s > x.len() {
        return Err(invalid(format!("degree {s} exceeds {} periods", x.len())));
    }
    Ok(log_elementary(x, theta)[s].exp())
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Center `p` and half-width `a` of the outer AME bound for one unit with
/// covariates `x` and outcome count `s`.
pub fn ame_p_a(x: &[Vec<f64>], s: usize, theta: &[f64], tau: usize, j: usize) -> Result<(f64, f64)> {
    let t = x.len();
    if s > t {
        return Err(invalid(format!("outcome count {s} exceeds {t} periods")));
    }
    let lambda = lambda_coeffs(x, theta, tau, j)?;
    let (b, err) = chebyshev_coeffs(t)?;
    let top = lambda[t + 1];
    // exp(s x_tau'theta) / C_s
    let ratio = (s as f64 * index(&x[tau - 1], theta) - log_elementary(x, theta)[s]).exp();
    let p: f64 = (0..=s)
        .map(|r| (lambda[r] + b[r] * top) * binom(t - r, s - r))
        .sum::<f64>()
        * ratio;
    let a = err * top.abs() * binom(t, s) * ratio;
    Ok((p, a))
}

/// A unit observed in every period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedUnit {
    pub y: Vec<u8>,
    pub x: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmeBounds {
    pub lower: f64,
    pub upper: f64,
    /// Sample mean of `p`.
    pub center: f64,
    /// Sample mean of `a`.
    pub half_width: f64,
}

/// `mean(p) -/+ mean(a)` over complete units.
pub fn ame_bounds_no_attrition(units: &[BalancedUnit], theta: &[f64], tau: usize, j: usize) -> Result<AmeBounds> {
    if units.is_empty() {
        return Err(invalid("no units"));
    }
    let t = units[0].x.len();
    let mut sp = 0.0;
    let mut sa = 0.0;
    for u in units {
        if u.x.len() != t || u.y.len() != t {
            return Err(invalid("units must share the number of periods"));
        }
        if u.y.iter().any(|y| *y > 1) {
            return Err(invalid("outcomes must be binary"));
        }
        let s = u.y.iter().map(|y| *y as usize).sum();
        let (p, a) = ame_p_a(&u.x, s, theta, tau, j)?;
        sp += p;
        sa += a;
    }
    let n = units.len() as f64;
    let (center, half_width) = (sp / n, sa / n);
    Ok(AmeBounds {
        lower: center - half_width,
        upper: center + half_width,
        center,
        half_width,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmeResult {
    pub theta_grid: Vec<Vec<f64>>,
    pub intervals: Vec<(f64, f64)>,
    pub union: Vec<(f64, f64)>,
}

/// Sorted disjoint intervals covering exactly the union of the inputs.
pub fn merge_intervals(intervals: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = intervals.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in v {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

fn thin(points: &[Vec<f64>], cap: usize) -> Vec<Vec<f64>> {
    if cap == 0 || points.len() <= cap {
        return points.to_vec();
    }
    if cap == 1 {
        return vec![points[points.len() / 2].clone()];
    }
    (0..cap)
        .map(|i| points[(i * (points.len() - 1) + (cap - 1) / 2) / (cap - 1)].clone())
        .collect()
}

fn interval_at(summary: &PanelSummary, theta: &[f64], epsilon: f64, tau: usize, j: usize) -> Result<(f64, f64)> {
    let n = summary.n_atoms();
    let mut phi = Array3::zeros((n, n, 2));
    for (i, a1) in summary.atoms.iter().enumerate() {
        for (k, a2) in summary.atoms.iter().enumerate() {
            let x = vec![a1[1..].to_vec(), a2[1..].to_vec()];
            let s = (a1[0] + a2[0]).round() as usize;
            let (p, a) = ame_p_a(&x, s, theta, tau, j)?;
            phi[[i, k, 0]] = p - a;
            phi[[i, k, 1]] = p + a;
        }
    }
    let n_ret = summary.n_ret() as f64;
    let (mut ret_lo, mut ret_hi) = (0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            let c = summary.retainer_pairs[i * n + k] as f64;
            ret_lo += c * phi[[i, k, 0]] / n_ret;
            ret_hi += c * phi[[i, k, 1]] / n_ret;
        }
    }
    if summary.n_att() == 0 {
        return Ok((ret_lo, ret_hi));
    }
    let m = summary.marginals()?;
    let b: Vec<f64> = summary.atoms.iter().map(|x| m.f2_att.pmf.prob_of(x)).collect();
    let phi = Arc::new(PhiTensor::from_dense(phi, theta.to_vec())?);
    let (mins, maxs) = entropic_extremes(&phi, &m.f1_att.probs, &b, &SinkhornOptions::with_epsilon(epsilon))?;
    let p = summary.p_hat();
    Ok((p * ret_lo + (1.0 - p) * mins[0], p * ret_hi + (1.0 - p) * maxs[1]))
}

/// Profiles the two-period AME bounds over accepted slope values and takes
/// the union. `grid_size` caps the number of slope values by uniform thinning
/// (0 keeps all).
pub fn ame_bounds_attrition(
    summary: &PanelSummary,
    accepted: &[Vec<f64>],
    epsilon: f64,
    grid_size: usize,
    tau: usize,
    j: usize,
) -> Result<AmeResult> {
    if accepted.is_empty() {
        return Err(crate::Error::EmptySet("no accepted slope values".into()));
    }
    if summary.n_ret() == 0 {
        return Err(invalid("no retainers"));
    }
    if !(1..=2).contains(&tau) {
        return Err(invalid(format!("period {tau} out of range for a two-period panel")));
    }
    let theta_grid = thin(accepted, grid_size);
    let intervals: Vec<(f64, f64)> = theta_grid
        .par_iter()
        .map(|t| interval_at(summary, t, epsilon, tau, j))
        .collect::<Result<_>>()?;
    Ok(AmeResult {
        union: merge_intervals(&intervals),
        theta_grid,
        intervals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn chebyshev_low_degrees() {
        let (b, e) = chebyshev_coeffs_exact(2).unwrap();
        assert_eq!(b, vec![r(1, 32), r(-9, 16), r(3, 2)]);
        assert_eq!(e, r(1, 32));
        let (b, e) = chebyshev_coeffs_exact(1).unwrap();
        assert_eq!(b, vec![r(-1, 8), r(1, 1)]);
        assert_eq!(e, r(1, 8));
        assert_eq!(shifted_chebyshev(3), vec![-1, 18, -48, 32]);
        assert!(chebyshev_coeffs(0).is_err() && chebyshev_coeffs(7).is_err());
    }

    #[test]
    fn chebyshev_error_is_attained() {
        for t in 1..=4 {
            let (b, e) = chebyshev_coeffs(t).unwrap();
            let n = 100_000;
            let worst = (0..=n)
                .map(|i| {
                    let u = i as f64 / n as f64;
                    let approx: f64 = b.iter().rev().fold(0.0, |acc, c| acc * u + c);
                    (u.powi(t as i32 + 1) - approx).abs()
                })
                .fold(0.0, f64::max);
            assert!((worst - e).abs() < 1e-10, "T={t}: {worst} vs {e}");
            if t > 1 {
                assert_eq!(chebyshev_coeffs(t - 1).unwrap().1 / e, 4.0);
            }
        }
    }

    #[test]
    fn lambda_two_periods() {
        let th = [1.0, 2.0];
        let x = vec![vec![0.42, 0.54], vec![0.60, 0.72]];
        let e = ((0.60 - 0.42) * 1.0 + (0.72 - 0.54) * 2.0f64).exp();
        let l = lambda_coeffs(&x, &th, 1, 2).unwrap();
        let want = [0.0, 2.0, 2.0 * (e - 2.0), 2.0 * (1.0 - e)];
        for (a, b) in l.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        let same = lambda_coeffs(&[vec![0.5, 0.5], vec![0.5, 0.5]], &th, 2, 1).unwrap();
        assert_eq!(same, vec![0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn elementary_two_periods() {
        let th = [0.7];
        let x = vec![vec![0.3], vec![-1.1]];
        let (e1, e2) = ((0.3f64 * 0.7).exp(), (-1.1f64 * 0.7).exp());
        assert_eq!(elementary_c(&x, &th, 0).unwrap(), 1.0);
        assert!((elementary_c(&x, &th, 1).unwrap() - (e1 + e2)).abs() < 1e-14);
        assert!((elementary_c(&x, &th, 2).unwrap() - e1 * e2).abs() < 1e-14);
        assert!(elementary_c(&x, &th, 3).is_err());
    }

    #[test]
    fn p_a_two_periods() {
        let th = [1.0, 2.0];
        let x = vec![vec![0.55, 0.65], vec![0.42, 0.72]];
        let (tau, j) = (1, 1);
        let l = lambda_coeffs(&x, &th, tau, j).unwrap();
        let (b, _) = chebyshev_coeffs(2).unwrap();
        let ez = (0.55f64 + 1.3).exp();
        let c1 = elementary_c(&x, &th, 1).unwrap();
        let c2 = elementary_c(&x, &th, 2).unwrap();
        let (p0, a0) = ame_p_a(&x, 0, &th, tau, j).unwrap();
        assert!((p0 - b[0] * l[3]).abs() < 1e-14 && (a0 - l[3].abs() / 32.0).abs() < 1e-14);
        let (p1, a1) = ame_p_a(&x, 1, &th, tau, j).unwrap();
        assert!((p1 - (th[0] + (2.0 * b[0] + b[1]) * l[3]) * ez / c1).abs() < 1e-13);
        assert!((a1 - l[3].abs() * ez / (16.0 * c1)).abs() < 1e-14);
        let (p2, _) = ame_p_a(&x, 2, &th, tau, j).unwrap();
        assert!((p2 - (b[0] + b[1] + b[2] - 1.0) * l[3] * ez * ez / c2).abs() < 1e-13);
    }

    #[test]
    fn constant_covariates_collapse_bounds() {
        let units: Vec<BalancedUnit> = (0..4)
            .map(|i| BalancedUnit {
                y: vec![(i % 2) as u8, (i / 2) as u8],
                x: vec![vec![0.4 + 0.1 * i as f64]; 2],
            })
            .collect();
        let b = ame_bounds_no_attrition(&units, &[1.3], 1, 1).unwrap();
        assert_eq!(b.half_width, 0.0);
        assert_eq!(b.lower, b.upper);
        assert!((b.upper - b.lower - 2.0 * b.half_width).abs() < 1e-15);
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_intervals(&[(0.0, 1.0)]), vec![(0.0, 1.0)]);
        assert_eq!(
            merge_intervals(&[(2.0, 3.0), (0.0, 1.0), (0.5, 1.5), (3.0, 4.0)]),
            vec![(0.0, 1.5), (2.0, 4.0)]
        );
    }

    #[test]
    fn thinning_keeps_ends() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let t = thin(&pts, 4);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], vec![0.0]);
        assert_eq!(t[3], vec![9.0]);
        assert_eq!(thin(&pts, 0).len(), 10);
    }

    proptest! {
        #[test]
        fn lambda_identity(
            x in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 2), 1..5),
            th in proptest::collection::vec(-2.0f64..2.0, 2),
            us in proptest::collection::vec(0.0f64..1.0, 20),
        ) {
            let tau = 1;
            let l = lambda_coeffs(&x, &th, tau, 2).unwrap();
            prop_assert_eq!(l[0], 0.0);
            prop_assert!(l.iter().sum::<f64>().abs() < 1e-10);
            for u in us {
                let lhs: f64 = l.iter().rev().fold(0.0, |acc, c| acc * u + c);
                let base = index(&x[0], &th);
                let rhs = th[1] * u * (1.0 - u)
                    * x[1..].iter().map(|r| 1.0 + u * ((index(r, &th) - base).exp() - 1.0)).product::<f64>();
                prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn elementary_sum_identity(
            x in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 2), 1..6),
            th in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let total: f64 = (0..=x.len()).map(|s| elementary_c(&x, &th, s).unwrap()).sum();
            let prod: f64 = x.iter().map(|r| 1.0 + index(r, &th).exp()).product();
            prop_assert!((total - prod).abs() < 1e-12 * prod);
        }

        #[test]
        fn merged_union_is_exact(raw in proptest::collection::vec((-5.0f64..5.0, 0.0f64..2.0), 1..12), probe in -6.0f64..8.0) {
            let iv: Vec<(f64, f64)> = raw.iter().map(|(l, w)| (*l, l + w)).collect();
            let m = merge_intervals(&iv);
            for w in m.windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
            let inside = |set: &[(f64, f64)]| set.iter().any(|(l, h)| *l <= probe && probe <= *h);
            prop_assert_eq!(inside(&iv), inside(&m));
        }
    }
}
