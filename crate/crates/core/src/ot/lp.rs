use ndarray::Array2;

use crate::error::{invalid, Error, Result};

/// Largest side handled by the exact solvers.
pub const LP_SIZE_LIMIT: usize = 64;
const PERMUTATION_LIMIT: usize = 8;
const MASS_EPS: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub value: f64,
    pub plan: Array2<f64>,
}

/// Exact unregularized optimal transport for small instances.
pub fn unregularized_ot_oracle(cost: &Array2<f64>, a: &[f64], b: &[f64]) -> Result<LpSolution> {
    let (n, m) = cost.dim();
    let uniform = |w: &[f64]| w.iter().all(|v| (v - 1.0 / w.len() as f64).abs() < 1e-15);
    if n == m && n <= PERMUTATION_LIMIT && a.len() == n && b.len() == m && uniform(a) && uniform(b) {
        return permutation_oracle(cost);
    }
    transport_lp(cost, a, b)
}

/// Minimum over all permutation plans of a square cost with uniform marginals.
pub fn permutation_oracle(cost: &Array2<f64>) -> Result<LpSolution> {
    let (n, m) = cost.dim();
    if n != m || n == 0 {
        return Err(invalid("permutation oracle needs a nonempty square cost"));
    }
    if n > PERMUTATION_LIMIT {
        return Err(Error::SizeLimit { rows: n, cols: m });
    }
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_val = eval(&perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = eval(&perm);
            if v < best_val {
                best_val = v;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let w = 1.0 / n as f64;
    let mut plan = Array2::zeros((n, n));
    for (i, &j) in best.iter().enumerate() {
        plan[[i, j]] = w;
    }
    Ok(LpSolution {
        value: best_val * w,
        plan,
    })
}

/// Transportation LP via successive shortest paths with Dijkstra potentials.
pub fn transport_lp(cost: &Array2<f64>, a: &[f64], b: &[f64]) -> Result<LpSolution> {
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m || n == 0 || m == 0 {
        return Err(invalid("marginals do not match the cost shape"));
    }
    if n > LP_SIZE_LIMIT || m > LP_SIZE_LIMIT {
        return Err(Error::SizeLimit { rows: n, cols: m });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 || a.iter().chain(b).any(|&v| v < 0.0) {
        return Err(invalid("marginals must be nonnegative with equal mass"));
    }

    // nodes: 0 = source, 1..=n rows, n+1..=n+m cols, n+m+1 = sink
    let s = 0;
    let t = n + m + 1;
    let row = |i: usize| 1 + i;
    let col = |j: usize| 1 + n + j;
    let nodes = n + m + 2;
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = Array2::<f64>::zeros((n, m));
    let mut pot = vec![0.0; nodes];
    for j in 0..m {
        pot[col(j)] = (0..n).map(|i| cost[[i, j]]).fold(f64::INFINITY, f64::min);
    }
    pot[t] = (0..m).map(|j| pot[col(j)]).fold(f64::INFINITY, f64::min);

    let mut dist = vec![0.0; nodes];
    let mut pred = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    loop {
        if supply.iter().sum::<f64>() <= 1e-13 || demand.iter().sum::<f64>() <= 1e-13 {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        pred.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        dist[s] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX || u == t {
                break;
            }
            done[u] = true;
            let relax = |v: usize, c: f64, dist: &mut Vec<f64>, pred: &mut Vec<usize>| {
                let rc = (c + pot[u] - pot[v]).max(0.0);
                if dist[u] + rc < dist[v] {
                    dist[v] = dist[u] + rc;
                    pred[v] = u;
                }
            };
            if u == s {
                for i in 0..n {
                    if supply[i] > MASS_EPS {
                        relax(row(i), 0.0, &mut dist, &mut pred);
                    }
                }
            } else if u <= n {
                let i = u - 1;
                for j in 0..m {
                    relax(col(j), cost[[i, j]], &mut dist, &mut pred);
                }
            } else {
                let j = u - 1 - n;
                for i in 0..n {
                    if flow[[i, j]] > MASS_EPS {
                        relax(row(i), -cost[[i, j]], &mut dist, &mut pred);
                    }
                }
                if demand[j] > MASS_EPS {
                    relax(t, 0.0, &mut dist, &mut pred);
                }
            }
        }
        if !dist[t].is_finite() {
            break;
        }
        let cap = dist[t];
        for v in 0..nodes {
            pot[v] += dist[v].min(cap);
        }
        // bottleneck along the path
        let mut path = vec![t];
        while *path.last().unwrap() != s {
            path.push(pred[*path.last().unwrap()]);
        }
        path.reverse();
        let first_row = path[1] - 1;
        let last_col = path[path.len() - 2] - 1 - n;
        let mut delta = supply[first_row].min(demand[last_col]);
        for w in path[1..path.len() - 1].windows(2) {
            if w[0] > n {
                let (j, i) = (w[0] - 1 - n, w[1] - 1);
                delta = delta.min(flow[[i, j]]);
            }
        }
        supply[first_row] -= delta;
        demand[last_col] -= delta;
        for w in path[1..path.len() - 1].windows(2) {
            if w[0] <= n {
                flow[[w[0] - 1, w[1] - 1 - n]] += delta;
            } else {
                let (j, i) = (w[0] - 1 - n, w[1] - 1);
                flow[[i, j]] -= delta;
                if flow[[i, j]] < MASS_EPS {
                    flow[[i, j]] = 0.0;
                }
            }
        }
    }
    let value = flow.iter().zip(cost.iter()).map(|(x, c)| x * c).sum();
    Ok(LpSolution { value, plan: flow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_permutation_is_optimal_for_antidiagonal_penalty() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let s = permutation_oracle(&c).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.plan, array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn flow_matches_brute_force_on_random_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=6 {
            for _ in 0..5 {
                let c = Array2::from_shape_fn((n, n), |_| rng.random_range(-2.0..2.0));
                let w = vec![1.0 / n as f64; n];
                let exact = permutation_oracle(&c).unwrap().value;
                let lp = transport_lp(&c, &w, &w).unwrap();
                assert!((exact - lp.value).abs() < 1e-12, "n={n}: {exact} vs {}", lp.value);
            }
        }
    }

    #[test]
    fn monotone_cost_uses_northwest_corner() {
        // Submodular cost: the comonotone (northwest corner) plan is optimal.
        let c = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64).powi(2));
        let a = [0.5, 0.3, 0.2];
        let b = [0.2, 0.2, 0.6];
        let s = transport_lp(&c, &a, &b).unwrap();
        let nw = array![[0.2, 0.2, 0.1], [0.0, 0.0, 0.3], [0.0, 0.0, 0.2]];
        let expected: f64 = nw.iter().zip(c.iter()).map(|(x, c)| x * c).sum();
        assert!((s.value - expected).abs() < 1e-12);
        for (r, a) in s.plan.rows().into_iter().zip(a) {
            assert!((r.sum() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_with_zero_weights() {
        let c = array![[1.0, 0.0, 5.0], [2.0, 3.0, 0.0]];
        let s = transport_lp(&c, &[0.0, 1.0], &[0.25, 0.0, 0.75]).unwrap();
        assert!((s.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn size_limit() {
        let c = Array2::zeros((65, 2));
        let err = transport_lp(&c, &vec![1.0 / 65.0; 65], &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::SizeLimit { rows: 65, cols: 2 }));
    }
}
