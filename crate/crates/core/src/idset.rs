//! Grid estimator `{theta : D(theta) <= eta}` and set-distance diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direction::{distance_statistic_cached, DirectionalObjective, DistanceOptions, DistanceResult, WarmCache};
use crate::error::{invalid, Error, Result};

/// Grid points per warm-start chain; fixed so results do not depend on the
/// number of threads.
const CHAIN_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Rectangular parameter grid, materialized in row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    axes: Vec<Axis>,
    points: Vec<Vec<f64>>,
}

impl ParamGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(invalid("grid needs at least one axis"));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.count == 0 || !(a.low <= a.high) || !a.low.is_finite() || !a.high.is_finite() {
                return Err(invalid(format!("axis {i} is invalid: {a:?}")));
            }
        }
        let values: Vec<Vec<f64>> = axes
            .iter()
            .map(|a| {
                (0..a.count)
                    .map(|i| {
                        if a.count == 1 {
                            a.low
                        } else {
                            a.low + (a.high - a.low) * i as f64 / (a.count - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let mut points = vec![Vec::new()];
        for vals in &values {
            points = points
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        Ok(Self { axes, points })
    }

    /// `new` from `(low, high, count)` triples.
    pub fn from_triples(axes: &[(f64, f64, usize)]) -> Result<Self> {
        Self::new(
            axes.iter()
                .map(|&(low, high, count)| Axis { low, high, count })
                .collect(),
        )
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Same grid translated by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim() {
            return Err(invalid("shift has the wrong dimension"));
        }
        Self::new(
            self.axes
                .iter()
                .zip(delta)
                .map(|(a, d)| Axis {
                    low: a.low + d,
                    high: a.high + d,
                    count: a.count,
                })
                .collect(),
        )
    }

    /// Row-major index of the neighbour one step up along `axis`.
    fn neighbour(&self, index: usize, axis: usize) -> Option<usize> {
        let stride: usize = self.axes[axis + 1..].iter().map(|a| a.count).product();
        let pos = (index / stride) % self.axes[axis].count;
        (pos + 1 < self.axes[axis].count).then_some(index + stride)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifiedSetEstimate {
    pub grid: ParamGrid,
    pub d_values: Vec<f64>,
    pub eta: f64,
    pub members: Vec<bool>,
    pub warnings: Vec<String>,
}

impl IdentifiedSetEstimate {
    pub fn member_points(&self) -> Vec<Vec<f64>> {
        self.grid
            .points()
            .iter()
            .zip(&self.members)
            .filter(|(_, m)| **m)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.members.iter().any(|&m| m)
    }

    /// Membership under a different threshold, reusing the computed distances.
    pub fn with_eta(&self, eta: f64) -> Self {
        Self {
            members: self.d_values.iter().map(|&d| d <= eta).collect(),
            eta,
            ..self.clone()
        }
    }
}

/// `eta_n = c * n^{-1/2} * log n`.
pub fn default_eta(n: f64, c: f64) -> Result<f64> {
    if !(n >= 2.0) {
        return Err(invalid("eta needs n >= 2"));
    }
    if !(c > 0.0) {
        return Err(invalid(format!("eta constant must be positive, got {c}")));
    }
    Ok(c * n.ln() / n.sqrt())
}

/// Distance statistics at every grid point, with warm starts chained along
/// contiguous runs of the grid and chains evaluated in parallel.
pub fn distance_surface<F>(grid: &ParamGrid, opts: &DistanceOptions, make: F) -> Result<Vec<DistanceResult>>
where
    F: Fn(&[f64]) -> Result<Box<dyn DirectionalObjective>> + Sync,
{
    let chunks: Vec<Result<Vec<DistanceResult>>> = grid
        .points()
        .par_chunks(CHAIN_LEN)
        .map(|chunk| {
            let mut cache = WarmCache::new();
            chunk
                .iter()
                .map(|theta| {
                    let obj = make(theta)?;
                    distance_statistic_cached(obj.as_ref(), opts, &mut cache)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// `{theta in grid : D(theta) <= eta}`; an empty result carries a warning.
pub fn estimate_identified_set<F>(
    grid: &ParamGrid,
    eta: f64,
    opts: &DistanceOptions,
    make: F,
) -> Result<IdentifiedSetEstimate>
where
    F: Fn(&[f64]) -> Result<Box<dyn DirectionalObjective>> + Sync,
{
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!("eta must be positive, got {eta}")));
    }
    let results = distance_surface(grid, opts, make)?;
    let mut warnings: Vec<String> = results
        .iter()
        .flat_map(|r| r.warnings.iter().map(move |w| format!("theta {:?}: {w}", r.theta)))
        .collect();
    let d_values: Vec<f64> = results.iter().map(|r| r.d_hat.max(0.0)).collect();
    let members: Vec<bool> = d_values.iter().map(|&d| d <= eta).collect();
    if !members.iter().any(|&m| m) {
        warnings.push("estimated set is empty; the model may be misspecified at this epsilon and eta".into());
    }
    Ok(IdentifiedSetEstimate {
        grid: grid.clone(),
        d_values,
        eta,
        members,
        warnings,
    })
}

/// Bisects every grid edge whose endpoints disagree on membership for the
/// crossing `D(theta) = eta`, to within `tol` in parameter space.
pub fn refine_boundary<F>(
    est: &IdentifiedSetEstimate,
    opts: &DistanceOptions,
    tol: f64,
    make: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Box<dyn DirectionalObjective>> + Sync,
{
    let grid = &est.grid;
    let mut edges = Vec::new();
    for i in 0..grid.len() {
        for axis in 0..grid.dim() {
            if let Some(j) = grid.neighbour(i, axis) {
                if est.members[i] != est.members[j] {
                    edges.push((i, j));
                }
            }
        }
    }
    edges
        .par_iter()
        .map(|&(i, j)| {
            let (mut inside, mut outside) = if est.members[i] {
                (grid.points()[i].clone(), grid.points()[j].clone())
            } else {
                (grid.points()[j].clone(), grid.points()[i].clone())
            };
            let mut cache = WarmCache::new();
            while dist(&inside, &outside) > tol {
                let mid: Vec<f64> = inside.iter().zip(&outside).map(|(a, b)| 0.5 * (a + b)).collect();
                let obj = make(&mid)?;
                let d = distance_statistic_cached(obj.as_ref(), opts, &mut cache)?.d_hat;
                if d <= est.eta {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            Ok(inside.iter().zip(&outside).map(|(a, b)| 0.5 * (a + b)).collect())
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric Hausdorff distance between finite point sets.
pub fn hausdorff_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("hausdorff distance of an empty set".into()));
    }
    let directed = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        s.iter()
            .map(|x| t.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max)
    };
    Ok(directed(a, b).max(directed(b, a)))
}
