//! Two-period fixed-effects logit with attrition and a refreshment sample.
//!
//! Retainers are observed in both periods and keep their empirical joint law;
//! only attriters are coupled by optimal transport, against the period-2
//! attriter marginal recovered from the refreshment sample.

mod ame;
mod slope;

use std::collections::HashSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::measure::multinomial_counts;

pub use ame::{
    ame_bounds_attrition, ame_bounds_no_attrition, ame_p_a, chebyshev_coeffs, chebyshev_coeffs_exact, elementary_c,
    lambda_coeffs, merge_intervals, AmeBounds, AmeResult, BalancedUnit,
};
pub use slope::{
    attriter_ot_bounds, slope_bounds_at, slope_identified_set, switcher_mass, PartitionedObjective, SlopeBounds,
    SlopeSet, SwitcherMass,
};

/// Clipped mass above which the recovered attriter marginal is flagged.
pub const SEVERE_CLIP: f64 = 0.1;

/// One `(y, x)` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: u8,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn atom(&self) -> Vec<f64> {
        let mut a = Vec::with_capacity(self.x.len() + 1);
        a.push(self.y as f64);
        a.extend_from_slice(&self.x);
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    pub k: usize,
    /// Period-1 records of all original units, keyed by unit id.
    pub wave1: Vec<(u64, Observation)>,
    /// Period-2 records of the units still present.
    pub retainers: Vec<(u64, Observation)>,
    pub refreshment: Vec<Observation>,
}

impl PanelData {
    pub fn new(
        k: usize,
        wave1: Vec<(u64, Observation)>,
        retainers: Vec<(u64, Observation)>,
        refreshment: Vec<Observation>,
    ) -> Result<Self> {
        let check = |o: &Observation, what: &str| -> Result<()> {
            if o.y > 1 {
                return Err(invalid(format!("{what}: outcome {} is not binary", o.y)));
            }
            if o.x.len() != k {
                return Err(invalid(format!("{what}: {} covariates, expected {k}", o.x.len())));
            }
            if o.x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("{what}: non-finite covariate")));
            }
            Ok(())
        };
        let mut ids = HashSet::new();
        for (id, o) in &wave1 {
            check(o, &format!("wave 1 unit {id}"))?;
            if !ids.insert(*id) {
                return Err(invalid(format!("duplicate wave 1 unit {id}")));
            }
        }
        let mut seen = HashSet::new();
        for (id, o) in &retainers {
            check(o, &format!("retainer {id}"))?;
            if !ids.contains(id) {
                return Err(invalid(format!("retainer {id} has no wave 1 record")));
            }
            if !seen.insert(*id) {
                return Err(invalid(format!("duplicate retainer {id}")));
            }
        }
        for (i, o) in refreshment.iter().enumerate() {
            check(o, &format!("refreshment row {i}"))?;
        }
        Ok(Self {
            k,
            wave1,
            retainers,
            refreshment,
        })
    }

    pub fn n_org(&self) -> usize {
        self.wave1.len()
    }
    pub fn n_ret(&self) -> usize {
        self.retainers.len()
    }
    pub fn n_ref(&self) -> usize {
        self.refreshment.len()
    }
    pub fn p_hat(&self) -> f64 {
        self.n_ret() as f64 / self.n_org() as f64
    }
}

/// Probability mass function on `(y, x)` atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePmf {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl DiscretePmf {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(invalid("support and probabilities must be nonempty and aligned"));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid("probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        let mut keys = HashSet::new();
        for a in &support {
            if !keys.insert(bits(a)) {
                return Err(invalid(format!("duplicate atom {a:?}")));
            }
        }
        Ok(Self { support, probs })
    }

    /// Normalized counts.
    pub fn from_counts(support: Vec<Vec<f64>>, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(invalid("no observations"));
        }
        Self::new(support, counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn prob_of(&self, atom: &[f64]) -> f64 {
        let key = bits(atom);
        self.support
            .iter()
            .position(|a| bits(a) == key)
            .map_or(0.0, |i| self.probs[i])
    }
}

fn bits(a: &[f64]) -> Vec<u64> {
    a.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn sorted_atoms<'a>(atoms: impl Iterator<Item = Vec<f64>> + 'a) -> Vec<Vec<f64>> {
    let mut v: Vec<Vec<f64>> = atoms.collect();
    v.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v.dedup_by(|a, b| bits(a) == bits(b));
    v
}

/// Panel data reduced to counts on a common atom list, which is all the
/// estimators need. Bootstrap draws stay on the same atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub k: usize,
    pub atoms: Vec<Vec<f64>>,
    /// Period-1 atom counts of attriters.
    pub attriters: Vec<usize>,
    /// Row-major `atoms x atoms` counts of retainer `(period 1, period 2)` pairs.
    pub retainer_pairs: Vec<usize>,
    pub refreshment: Vec<usize>,
}

impl PanelSummary {
    pub fn from_data(data: &PanelData) -> Result<Self> {
        if data.wave1.is_empty() {
            return Err(invalid("empty wave 1"));
        }
        let atoms = sorted_atoms(
            data.wave1
                .iter()
                .map(|(_, o)| o.atom())
                .chain(data.retainers.iter().map(|(_, o)| o.atom()))
                .chain(data.refreshment.iter().map(|o| o.atom())),
        );
        let index: std::collections::HashMap<Vec<u64>, usize> =
            atoms.iter().enumerate().map(|(i, a)| (bits(a), i)).collect();
        let idx = |o: &Observation| index[&bits(&o.atom())];
        let a = atoms.len();
        let wave2: std::collections::HashMap<u64, &Observation> =
            data.retainers.iter().map(|(id, o)| (*id, o)).collect();
        let mut attriters = vec![0; a];
        let mut retainer_pairs = vec![0; a * a];
        for (id, o) in &data.wave1 {
            match wave2.get(id) {
                Some(o2) => retainer_pairs[idx(o) * a + idx(o2)] += 1,
                None => attriters[idx(o)] += 1,
            }
        }
        let mut refreshment = vec![0; a];
        for o in &data.refreshment {
            refreshment[idx(o)] += 1;
        }
        Ok(Self {
            k: data.k,
            atoms,
            attriters,
            retainer_pairs,
            refreshment,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }
    pub fn n_att(&self) -> usize {
        self.attriters.iter().sum()
    }
    pub fn n_ret(&self) -> usize {
        self.retainer_pairs.iter().sum()
    }
    pub fn n_org(&self) -> usize {
        self.n_att() + self.n_ret()
    }
    pub fn n_ref(&self) -> usize {
        self.refreshment.iter().sum()
    }
    pub fn p_hat(&self) -> f64 {
        self.n_ret() as f64 / self.n_org() as f64
    }

    /// Units and refreshment records drawn with replacement, independently.
    pub fn resample(&self, rng: &mut dyn RngCore) -> Self {
        let n_org = self.n_org();
        let unit_w: Vec<f64> = self
            .attriters
            .iter()
            .chain(&self.retainer_pairs)
            .map(|&c| c as f64 / n_org as f64)
            .collect();
        let counts = multinomial_counts(&unit_w, n_org, rng);
        let a = self.n_atoms();
        let n_ref = self.n_ref();
        let ref_w: Vec<f64> = self.refreshment.iter().map(|&c| c as f64 / n_ref as f64).collect();
        Self {
            k: self.k,
            atoms: self.atoms.clone(),
            attriters: counts[..a].to_vec(),
            retainer_pairs: counts[a..].to_vec(),
            refreshment: multinomial_counts(&ref_w, n_ref, rng),
        }
    }

    /// Marginal PMFs on the common atom list.
    pub fn marginals(&self) -> Result<Marginals> {
        let (n_ret, n_att, n_ref) = (self.n_ret(), self.n_att(), self.n_ref());
        if n_ret == 0 {
            return Err(invalid("no retainers"));
        }
        if n_ref == 0 {
            return Err(invalid("empty refreshment sample"));
        }
        if n_att == 0 {
            return Err(invalid("every unit is retained; attriter marginals need 0 < p < 1"));
        }
        let a = self.n_atoms();
        let mut r1 = vec![0; a];
        let mut r2 = vec![0; a];
        for i in 0..a {
            for j in 0..a {
                let c = self.retainer_pairs[i * a + j];
                r1[i] += c;
                r2[j] += c;
            }
        }
        let atoms = || self.atoms.clone();
        let f2 = DiscretePmf::from_counts(atoms(), &self.refreshment)?;
        let f2_ret = DiscretePmf::from_counts(atoms(), &r2)?;
        let p_hat = self.p_hat();
        let f2_att = recover_attriter_marginal(&f2, &f2_ret, p_hat)?;
        Ok(Marginals {
            f1_ret: DiscretePmf::from_counts(atoms(), &r1)?,
            f1_att: DiscretePmf::from_counts(atoms(), &self.attriters)?,
            f2_ret,
            f2,
            f2_att,
            p_hat,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredMarginal {
    pub pmf: DiscretePmf,
    /// Total negative mass removed before renormalizing.
    pub clipped_mass: f64,
    pub severe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub f1_ret: DiscretePmf,
    pub f1_att: DiscretePmf,
    pub f2_ret: DiscretePmf,
    pub f2: DiscretePmf,
    pub f2_att: RecoveredMarginal,
    pub p_hat: f64,
}

/// Smoothed marginals for continuous covariates. Not implemented: covariates
/// are treated as discrete atoms throughout.
#[cfg(feature = "kernel")]
pub fn estimate_marginals_kernel(_data: &PanelData, _bandwidth: f64) -> Result<Marginals> {
    Err(invalid("kernel marginal estimation is not implemented"))
}

/// Frequency estimates of the period marginals; see [`PanelSummary::marginals`].
pub fn estimate_marginals(data: &PanelData) -> Result<Marginals> {
    if data.retainers.is_empty() {
        return Err(invalid("no retainers"));
    }
    if data.refreshment.is_empty() {
        return Err(invalid("empty refreshment sample"));
    }
    PanelSummary::from_data(data)?.marginals()
}

/// `f2_att = (f2 - p f2_ret) / (1 - p)` atomwise on the union support, with
/// negative atoms clipped to zero and the result renormalized.
pub fn recover_attriter_marginal(f2: &DiscretePmf, f2_ret: &DiscretePmf, p_hat: f64) -> Result<RecoveredMarginal> {
    if !(0.0..1.0).contains(&p_hat) {
        return Err(invalid(format!("retention rate must lie in [0, 1), got {p_hat}")));
    }
    let support = sorted_atoms(f2.support.iter().chain(&f2_ret.support).cloned());
    let raw: Vec<f64> = support
        .iter()
        .map(|a| (f2.prob_of(a) - p_hat * f2_ret.prob_of(a)) / (1.0 - p_hat))
        .collect();
    let clipped_mass: f64 = raw.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let kept: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = kept.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("recovered attriter marginal has no mass"));
    }
    let probs = kept.iter().map(|v| v / total).collect();
    Ok(RecoveredMarginal {
        pmf: DiscretePmf::new(support, probs)?,
        clipped_mass,
        severe: clipped_mass > SEVERE_CLIP,
    })
}
