//! Partitioned bounds on the common slope: retainers enter through their
//! sample moment, attriters through entropic OT over recovered marginals.

use std::sync::Arc;

use ndarray::Array3;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DiscretePmf, PanelData, PanelSummary};
use crate::direction::{DirectionEval, DirectionalObjective};
use crate::error::{invalid, Error, Result};
use crate::idset::ParamGrid;
use crate::models::{MomentModel, PanelLogitScoreModel};
use crate::ot::{conservative_adjust, plan_phi_mean, sinkhorn_warm, PhiTensor, Potentials, SinkhornOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeBounds {
    pub theta: Vec<f64>,
    pub nu_lower: Vec<f64>,
    pub nu_upper: Vec<f64>,
    pub retainer_moment: Vec<f64>,
    pub attriter_lower: Vec<f64>,
    pub attriter_upper: Vec<f64>,
    pub p_hat: f64,
    pub clipped_mass: f64,
}

impl SlopeBounds {
    pub fn contains_zero(&self) -> bool {
        self.nu_lower
            .iter()
            .zip(&self.nu_upper)
            .all(|(l, u)| *l <= 0.0 && 0.0 <= *u)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeSet {
    pub bounds: Vec<SlopeBounds>,
    pub members: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Score tensor on `atoms x atoms` where both sides are `(y, x)` atoms.
fn score_tensor(atoms: &[Vec<f64>], k: usize, theta: &[f64]) -> Result<PhiTensor> {
    if theta.len() != k {
        return Err(Error::DimensionMismatch {
            index: 0,
            expected: k,
            found: theta.len(),
        });
    }
    let model = PanelLogitScoreModel::new(k);
    let n = atoms.len();
    let mut phi = Array3::zeros((n, n, k));
    let mut out = vec![0.0; k];
    for i in 0..n {
        for j in 0..n {
            model.evaluate(&atoms[i], &atoms[j], theta, &mut out);
            for c in 0..k {
                phi[[i, j, c]] = out[c];
            }
        }
    }
    PhiTensor::from_dense(phi, theta.to_vec())
}

fn unit(p: usize, c: usize, sign: f64) -> Vec<f64> {
    let mut u = vec![0.0; p];
    u[c] = sign;
    u
}

/// Per-component entropic minimum of `phi_c` and maximum of `phi_c` over
/// couplings of `(a, b)`. The maximum is minus the minimum of `-phi_c`.
pub(crate) fn entropic_extremes(
    phi: &Arc<PhiTensor>,
    a: &[f64],
    b: &[f64],
    opts: &SinkhornOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = phi.moment_dim();
    let solve = |c: usize, sign: f64| -> Result<f64> {
        let cost = phi.with_direction(&unit(p, c, sign))?;
        let r = sinkhorn_warm(&cost, a, b, opts, None)?;
        if !r.converged {
            return Err(Error::NotConverged {
                context: format!("attriter bound, component {}", c + 1),
                marginal_error: r.marginal_error,
            });
        }
        Ok(sign * r.value)
    };
    let pairs: Vec<(f64, f64)> = (0..p)
        .into_par_iter()
        .map(|c| Ok((solve(c, 1.0)?, solve(c, -1.0)?)))
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn aligned(f1: &DiscretePmf, f2: &DiscretePmf) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut atoms = f1.support.clone();
    for a in &f2.support {
        if f1.prob_of(a) == 0.0 && !atoms.contains(a) {
            atoms.push(a.clone());
        }
    }
    let a: Vec<f64> = atoms.iter().map(|x| f1.prob_of(x)).collect();
    let b: Vec<f64> = atoms.iter().map(|x| f2.prob_of(x)).collect();
    (atoms, a, b)
}

/// Entropic lower and upper bounds on `E[phi]` over attriter couplings.
pub fn attriter_ot_bounds(
    model: &PanelLogitScoreModel,
    theta: &[f64],
    f1_att: &DiscretePmf,
    f2_att: &DiscretePmf,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = model.param_dim();
    if let Some(bad) = f1_att.support.iter().chain(&f2_att.support).find(|a| a.len() != k + 1) {
        return Err(invalid(format!("atom {bad:?} does not have {} coordinates", k + 1)));
    }
    let (atoms, a, b) = aligned(f1_att, f2_att);
    let phi = Arc::new(score_tensor(&atoms, k, theta)?);
    entropic_extremes(&phi, &a, &b, &SinkhornOptions::with_epsilon(epsilon))
}

fn retainer_moment(summary: &PanelSummary, phi: &PhiTensor) -> Vec<f64> {
    let a = summary.n_atoms();
    let n_ret = summary.n_ret() as f64;
    let mut m = vec![0.0; phi.moment_dim()];
    for i in 0..a {
        for j in 0..a {
            let c = summary.retainer_pairs[i * a + j];
            if c > 0 {
                for (mc, v) in m.iter_mut().zip(phi.phi_at(i, j)) {
                    *mc += c as f64 * v / n_ret;
                }
            }
        }
    }
    m
}

/// Attriter weights `(f1_att, f2_att)` on the summary atoms; `None` when every
/// unit is retained, in which case the attriter term carries weight zero.
fn attriter_weights(summary: &PanelSummary) -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
    if summary.n_ret() == 0 {
        return Err(invalid("no retainers"));
    }
    if summary.n_att() == 0 {
        return Ok(None);
    }
    let m = summary.marginals()?;
    let b = summary.atoms.iter().map(|x| m.f2_att.pmf.prob_of(x)).collect();
    Ok(Some((m.f1_att.probs, b, m.f2_att.clipped_mass)))
}

fn bounds_from_summary(summary: &PanelSummary, theta: &[f64], epsilon: f64) -> Result<SlopeBounds> {
    let phi = Arc::new(score_tensor(&summary.atoms, summary.k, theta)?);
    let ret = retainer_moment(summary, &phi);
    let p_hat = summary.p_hat();
    let (att_lo, att_hi, clipped) = match attriter_weights(summary)? {
        Some((a, b, clipped)) => {
            let (lo, hi) = entropic_extremes(&phi, &a, &b, &SinkhornOptions::with_epsilon(epsilon))?;
            (lo, hi, clipped)
        }
        None => (vec![0.0; summary.k], vec![0.0; summary.k], 0.0),
    };
    let mix = |att: &[f64]| -> Vec<f64> {
        ret.iter()
            .zip(att)
            .map(|(r, t)| p_hat * r + (1.0 - p_hat) * t)
            .collect()
    };
    Ok(SlopeBounds {
        theta: theta.to_vec(),
        nu_lower: mix(&att_lo),
        nu_upper: mix(&att_hi),
        retainer_moment: ret.clone(),
        attriter_lower: att_lo,
        attriter_upper: att_hi,
        p_hat,
        clipped_mass: clipped,
    })
}

/// Bounds `[nu_lower, nu_upper]` on the score moment at one `theta`.
pub fn slope_bounds_at(summary: &PanelSummary, theta: &[f64], epsilon: f64) -> Result<SlopeBounds> {
    bounds_from_summary(summary, theta, epsilon)
}

/// Componentwise membership `nu_lower <= 0 <= nu_upper` over a grid.
pub fn slope_identified_set(data: &PanelData, grid: &ParamGrid, epsilon: f64) -> Result<SlopeSet> {
    if data.retainers.is_empty() {
        return Err(invalid("no retainers"));
    }
    if data.refreshment.is_empty() {
        return Err(invalid("empty refreshment sample"));
    }
    if grid.dim() != data.k {
        return Err(invalid(format!(
            "grid has dimension {}, data has {} covariates",
            grid.dim(),
            data.k
        )));
    }
    let summary = PanelSummary::from_data(data)?;
    let bounds: Vec<SlopeBounds> = grid
        .points()
        .par_iter()
        .map(|t| bounds_from_summary(&summary, t, epsilon))
        .collect::<Result<_>>()?;
    let members = bounds.iter().map(SlopeBounds::contains_zero).collect();
    let mut warnings = Vec::new();
    if let Some(b) = bounds.first() {
        if b.clipped_mass > super::SEVERE_CLIP {
            warnings.push(format!(
                "recovered attriter marginal clipped {:.3} of its mass; samples look incompatible",
                b.clipped_mass
            ));
        }
    }
    Ok(SlopeSet {
        bounds,
        members,
        warnings,
    })
}

/// `c(u) = p u'nu_ret + (1 - p) c_att(u)`, the directional objective whose
/// maximum is the sharp distance of the partitioned moment.
#[derive(Debug, Clone)]
pub struct PartitionedObjective {
    summary: Arc<PanelSummary>,
    phi: Arc<PhiTensor>,
    p_hat: f64,
    nu_ret: Vec<f64>,
    attriters: Option<(Vec<f64>, Vec<f64>)>,
    clipped_mass: f64,
    sinkhorn: SinkhornOptions,
}

impl PartitionedObjective {
    pub fn new(summary: Arc<PanelSummary>, theta: &[f64], sinkhorn: SinkhornOptions) -> Result<Self> {
        let phi = Arc::new(score_tensor(&summary.atoms, summary.k, theta)?);
        Self::with_phi(summary, phi, sinkhorn)
    }

    fn with_phi(summary: Arc<PanelSummary>, phi: Arc<PhiTensor>, sinkhorn: SinkhornOptions) -> Result<Self> {
        let nu_ret = retainer_moment(&summary, &phi);
        let (attriters, clipped_mass) = match attriter_weights(&summary)? {
            Some((a, b, c)) => (Some((a, b)), c),
            None => (None, 0.0),
        };
        Ok(Self {
            p_hat: summary.p_hat(),
            summary,
            phi,
            nu_ret,
            attriters,
            clipped_mass,
            sinkhorn,
        })
    }

    pub fn p_hat(&self) -> f64 {
        self.p_hat
    }
    pub fn retainer_moment(&self) -> &[f64] {
        &self.nu_ret
    }
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }
    /// Attriter weights on the atom list, when there are attriters.
    pub fn attriter_weights(&self) -> Option<(&[f64], &[f64])> {
        self.attriters.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }
    pub fn summary(&self) -> &Arc<PanelSummary> {
        &self.summary
    }
}

impl DirectionalObjective for PartitionedObjective {
    fn dim(&self) -> usize {
        self.phi.moment_dim()
    }
    fn sample_size(&self) -> usize {
        self.summary.n_org()
    }
    fn is_balanced(&self) -> bool {
        self.summary.n_org() == self.summary.n_ref()
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
        let p = self.p_hat;
        let lin: f64 = u.iter().zip(&self.nu_ret).map(|(a, b)| a * b).sum();
        let cost = self.phi.with_direction(u)?;
        let Some((a, b)) = &self.attriters else {
            return Ok(DirectionEval {
                value: lin,
                gradient: self.nu_ret.clone(),
                transport_cost: lin,
                kl: 0.0,
                converged: true,
                marginal_error: 0.0,
                potentials: None,
            });
        };
        let r = sinkhorn_warm(&cost, a, b, &self.sinkhorn, warm)?;
        let att_grad = plan_phi_mean(&r, &cost);
        Ok(DirectionEval {
            value: p * lin + (1.0 - p) * r.value,
            gradient: self
                .nu_ret
                .iter()
                .zip(&att_grad)
                .map(|(n, g)| p * n + (1.0 - p) * g)
                .collect(),
            transport_cost: p * lin + (1.0 - p) * r.transport_cost,
            kl: r.kl,
            converged: r.converged,
            marginal_error: r.marginal_error,
            potentials: Some(r.potentials()),
        })
    }

    /// Only the attriter term carries entropic bias; its KL is bounded by the
    /// log of the atom count.
    fn adjusted_value(&self, transport_cost: f64, kl: f64) -> Result<f64> {
        if self.attriters.is_none() {
            return Ok(transport_cost);
        }
        let n = self.summary.n_atoms();
        let shift = transport_cost - conservative_adjust(transport_cost, self.sinkhorn.epsilon, n, kl);
        Ok(transport_cost - (1.0 - self.p_hat) * shift)
    }

    fn resample(&self, rng: &mut dyn RngCore) -> Result<Box<dyn DirectionalObjective>> {
        let draw = Arc::new(self.summary.resample(rng));
        Ok(Box::new(Self::with_phi(draw, Arc::clone(&self.phi), self.sinkhorn)?))
    }
}

/// Non-switcher and switcher mass of the within-covariate coupling at one
/// covariate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitcherMass {
    pub x: Vec<f64>,
    pub w00: f64,
    pub w11: f64,
    pub switchers: f64,
}

/// Mass accounting for couplings that keep covariates fixed and minimize
/// switching: `w00 = min(f1(0,x), f2(0,x))`, `w11` likewise, and the rest
/// `|f1(1,x) - f2(1,x)|` switches. Requires equal covariate marginals.
pub fn switcher_mass(f1: &DiscretePmf, f2: &DiscretePmf) -> Result<Vec<SwitcherMass>> {
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for a in f1.support.iter().chain(&f2.support) {
        if a.is_empty() {
            return Err(invalid("atoms must carry an outcome"));
        }
        if !xs.iter().any(|x| x.as_slice() == &a[1..]) {
            xs.push(a[1..].to_vec());
        }
    }
    let at = |f: &DiscretePmf, y: f64, x: &[f64]| {
        let mut atom = vec![y];
        atom.extend_from_slice(x);
        f.prob_of(&atom)
    };
    xs.into_iter()
        .map(|x| {
            let (a0, a1) = (at(f1, 0.0, &x), at(f1, 1.0, &x));
            let (b0, b1) = (at(f2, 0.0, &x), at(f2, 1.0, &x));
            if ((a0 + a1) - (b0 + b1)).abs() > 1e-12 {
                return Err(invalid(format!(
                    "covariate value {x:?} has different mass in the two periods"
                )));
            }
            Ok(SwitcherMass {
                w00: a0.min(b0),
                w11: a1.min(b1),
                switchers: (a1 - b1).abs(),
                x,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{transport_lp, CostTensor};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pmf(atoms: &[(u8, f64)], p: &[f64]) -> DiscretePmf {
        DiscretePmf::new(atoms.iter().map(|(y, x)| vec![*y as f64, *x]).collect(), p.to_vec()).unwrap()
    }

    #[test]
    fn single_atom_has_zero_bounds() {
        let f = pmf(&[(1, 0.4)], &[1.0]);
        let (lo, hi) = attriter_ot_bounds(&PanelLogitScoreModel::new(1), &[1.0], &f, &f, 0.1).unwrap();
        assert_eq!((lo[0], hi[0]), (0.0, 0.0));
    }

    #[test]
    fn identical_marginals_pin_switchers_to_zero() {
        // Same covariate in both periods makes every switcher score zero.
        let f = pmf(&[(0, 0.5), (1, 0.5)], &[0.3, 0.7]);
        let m = switcher_mass(&f, &f).unwrap();
        assert_eq!(m[0].switchers, 0.0);
        let (lo, hi) = attriter_ot_bounds(&PanelLogitScoreModel::new(1), &[1.5], &f, &f, 0.1).unwrap();
        assert!(lo[0].abs() < 1e-12 && hi[0].abs() < 1e-12);
    }

    #[test]
    fn two_atom_bounds_match_coupling_scan() {
        let f1 = pmf(&[(0, 0.4), (1, 0.6)], &[0.45, 0.55]);
        let f2 = pmf(&[(0, 0.6), (1, 0.4)], &[0.3, 0.7]);
        let theta = [2.0];
        let eps = 1e-3;
        let (lo, hi) = attriter_ot_bounds(&PanelLogitScoreModel::new(1), &theta, &f1, &f2, eps).unwrap();
        // P = [[t, a0 - t], [b0 - t, a1 - b0 + t]] on the supports in order.
        let model = PanelLogitScoreModel::new(1);
        let phi = |i: usize, j: usize| model.evaluate_vec(&f1.support[i], &f2.support[j], &theta)[0];
        let (a, b) = (&f1.probs, &f2.probs);
        let (tmin, tmax) = ((a[0] - b[1]).max(0.0), a[0].min(b[0]));
        let (mut best_lo, mut best_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..=200_000 {
            let t = tmin + (tmax - tmin) * s as f64 / 200_000.0;
            let p = [[t, a[0] - t], [b[0] - t, a[1] - b[0] + t]];
            let mut e = 0.0;
            let mut kl = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    e += p[i][j] * phi(i, j);
                    if p[i][j] > 0.0 {
                        kl += p[i][j] * (p[i][j] / (a[i] * b[j])).ln();
                    }
                }
            }
            best_lo = best_lo.min(e + eps * kl);
            best_hi = best_hi.max(e - eps * kl);
        }
        assert!((lo[0] - best_lo).abs() < 1e-3, "{} vs {best_lo}", lo[0]);
        assert!((hi[0] - best_hi).abs() < 1e-3, "{} vs {best_hi}", hi[0]);
        assert!(hi[0] >= lo[0]);
    }

    fn random_pair(rng: &mut ChaCha8Rng, nx: usize) -> (DiscretePmf, DiscretePmf) {
        let xs: Vec<f64> = (0..nx).map(|i| 0.1 * i as f64).collect();
        let mass: Vec<f64> = (0..nx).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = mass.iter().sum();
        let mut atoms = Vec::new();
        let (mut p1, mut p2) = (Vec::new(), Vec::new());
        for (x, m) in xs.iter().zip(&mass) {
            let m = m / total;
            let (s1, s2): (f64, f64) = (rng.random(), rng.random());
            for (y, w1, w2) in [(0.0, 1.0 - s1, 1.0 - s2), (1.0, s1, s2)] {
                atoms.push(vec![y, *x]);
                p1.push(m * w1);
                p2.push(m * w2);
            }
        }
        let fix = |mut p: Vec<f64>| {
            let t: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= t);
            p
        };
        (
            DiscretePmf::new(atoms.clone(), fix(p1)).unwrap(),
            DiscretePmf::new(atoms, fix(p2)).unwrap(),
        )
    }

    fn switch_cost(atoms: &[Vec<f64>]) -> Array2<f64> {
        let n = atoms.len();
        Array2::from_shape_fn((n, n), |(i, j)| {
            if atoms[i][1..] != atoms[j][1..] {
                10.0
            } else if atoms[i][0] != atoms[j][0] {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn mass_accounting_matches_lp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for nx in 1..=4 {
            for _ in 0..5 {
                let (f1, f2) = random_pair(&mut rng, nx);
                let cost = switch_cost(&f1.support);
                let lp = transport_lp(&cost, &f1.probs, &f2.probs).unwrap();
                let plan = lp.plan;
                for m in switcher_mass(&f1, &f2).unwrap() {
                    let i0 = f1
                        .support
                        .iter()
                        .position(|a| a[0] == 0.0 && a[1..] == m.x[..])
                        .unwrap();
                    let i1 = i0 + 1;
                    assert!((plan[[i0, i0]] - m.w00).abs() < 1e-12);
                    assert!((plan[[i1, i1]] - m.w11).abs() < 1e-12);
                    assert!((plan[[i0, i1]] + plan[[i1, i0]] - m.switchers).abs() < 1e-12);
                }
                let sinkhorn = crate::ot::sinkhorn_warm(
                    &CostTensor::from_matrix(cost).unwrap(),
                    &f1.probs,
                    &f2.probs,
                    &SinkhornOptions {
                        epsilon: 0.01,
                        tol: 1e-13,
                        max_iter: 100_000,
                        epsilon_scaling: true,
                    },
                    None,
                )
                .unwrap();
                assert!((sinkhorn.transport_cost - lp.value).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn switcher_mass_needs_matching_covariates() {
        let f1 = pmf(&[(0, 0.1), (1, 0.2)], &[0.5, 0.5]);
        let f2 = pmf(&[(0, 0.1), (1, 0.1)], &[0.5, 0.5]);
        assert!(switcher_mass(&f1, &f2).is_err());
    }
}
