//! Weighted point clouds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A discrete probability measure on `R^d`.
///
/// `sample_size` is the number of observations the measure was built from. It
/// equals the number of points for a raw empirical measure and exceeds it when
/// duplicate observations have been aggregated into weighted atoms. Bootstrap
/// resampling draws `sample_size` observations and keeps the atom set fixed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    sample_size: usize,
}

impl EmpiricalMeasure {
    /// Uniform weights `1/n` on the given points.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(invalid("empirical measure needs at least one point"));
        }
        let w = 1.0 / n as f64;
        Self::new(points, vec![w; n])
    }

    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let sample_size = points.len();
        Self::with_sample_size(points, weights, sample_size)
    }

    /// Atoms with observation counts; weights are `count / total`.
    pub fn from_counts(points: Vec<Vec<f64>>, counts: &[usize]) -> Result<Self> {
        if points.len() != counts.len() {
            return Err(invalid(format!("{} points but {} counts", points.len(), counts.len())));
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(invalid("all counts are zero"));
        }
        let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::with_sample_size(points, weights, total)
    }

    pub fn with_sample_size(points: Vec<Vec<f64>>, weights: Vec<f64>, sample_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("empirical measure needs at least one point"));
        }
        if points.len() != weights.len() {
            return Err(invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    index: i,
                    expected: dim,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("point {i}")));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(invalid(format!("weight {i} is {w}")));
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(invalid(format!("weights sum to {total}, not 1")));
        }
        if sample_size == 0 {
            return Err(invalid("sample size must be positive"));
        }
        Ok(Self {
            points,
            weights,
            sample_size,
        })
    }

    /// Rescales arbitrary nonnegative weights to sum to one.
    pub fn normalized(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(invalid("weights must have a positive finite sum"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Self::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() <= 1e-15)
    }

    /// Same atoms, new weights (e.g. a bootstrap replicate).
    pub fn reweighted(&self, weights: Vec<f64>, sample_size: usize) -> Result<Self> {
        Self::with_sample_size(self.points.clone(), weights, sample_size)
    }

    /// Multinomial resample of `sample_size` observations onto the same atoms.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let n = self.sample_size;
        let counts = multinomial_counts(&self.weights, n, rng);
        let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Self {
            points: self.points.clone(),
            weights,
            sample_size: n,
        }
    }
}

/// Draws `n` indices from `weights` and returns per-index counts.
pub(crate) fn multinomial_counts<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0usize; weights.len()];
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    for _ in 0..n {
        let r = rng.random::<f64>() * total;
        let idx = cdf.partition_point(|&c| c <= r).min(weights.len() - 1);
        // skip zero-weight atoms that share a cdf value with their predecessor
        let idx = if weights[idx] > 0.0 {
            idx
        } else {
            (idx..weights.len())
                .find(|&k| weights[k] > 0.0)
                .or_else(|| (0..idx).rev().find(|&k| weights[k] > 0.0))
                .unwrap_or(idx)
        };
        counts[idx] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_weights() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(EmpiricalMeasure::new(pts.clone(), vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(pts.clone(), vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(pts, vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn rejects_ragged_points() {
        let err = EmpiricalMeasure::uniform(vec![vec![0.0, 1.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { index: 1, .. }));
    }

    #[test]
    fn duplicate_points_are_allowed() {
        let m = EmpiricalMeasure::uniform(vec![vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn resample_keeps_atoms_and_mass() {
        let m = EmpiricalMeasure::from_counts(vec![vec![0.0], vec![1.0], vec![2.0]], &[5, 0, 15]).unwrap();
        assert_eq!(m.sample_size(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = m.resample(&mut rng);
        assert_eq!(r.len(), 3);
        assert_eq!(r.weights()[1], 0.0);
        assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
