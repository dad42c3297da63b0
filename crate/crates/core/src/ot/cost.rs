use std::sync::Arc;

use ndarray::{Array2, Array3};

use super::lse2;
use crate::error::{invalid, Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::models::MomentModel;

/// Moment values `phi(x_i, y_j, theta)` for a fixed `theta`, cached so that a
/// new direction `u` only costs inner products.
#[derive(Debug)]
pub struct PhiTensor {
    rows: usize,
    cols: usize,
    p: usize,
    theta: Vec<f64>,
    sup_norm: f64,
    layout: PhiLayout,
}

#[derive(Debug)]
enum PhiLayout {
    Dense(Array3<f64>),
    Threshold(Threshold),
}

/// Scalar supports where `phi` only depends on whether `y_j >= x_i`.
#[derive(Debug)]
struct Threshold {
    xs: Vec<f64>,
    ys: Vec<f64>,
    row_order: Vec<usize>,
    col_order: Vec<usize>,
    /// per row: first sorted column position with `y >= x_i`
    row_cut: Vec<usize>,
    /// per column: number of sorted rows with `x <= y_j`
    col_cut: Vec<usize>,
    above: Vec<f64>,
    below: Vec<f64>,
}

impl PhiTensor {
    pub fn build(model: &dyn MomentModel, theta: &[f64], mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Self> {
        if mu.dim() != model.dim_x() {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: model.dim_x(),
                found: mu.dim(),
            });
        }
        if nu.dim() != model.dim_y() {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: model.dim_y(),
                found: nu.dim(),
            });
        }
        if theta.len() != model.param_dim() {
            return Err(invalid(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                model.param_dim()
            )));
        }
        let (n, m, p) = (mu.len(), nu.len(), model.moment_dim());
        if let (Some(form), 1, 1) = (model.threshold_form(theta), mu.dim(), nu.dim()) {
            let xs: Vec<f64> = mu.points().iter().map(|v| v[0]).collect();
            let ys: Vec<f64> = nu.points().iter().map(|v| v[0]).collect();
            let sup_norm = form.above.iter().chain(&form.below).fold(0.0f64, |a, v| a.max(v.abs()));
            return Ok(Self {
                rows: n,
                cols: m,
                p,
                theta: theta.to_vec(),
                sup_norm,
                layout: PhiLayout::Threshold(Threshold::new(xs, ys, form.above, form.below)),
            });
        }
        let mut phi = Array3::<f64>::zeros((n, m, p));
        let mut buf = vec![0.0; p];
        for (i, x) in mu.points().iter().enumerate() {
            for (j, y) in nu.points().iter().enumerate() {
                model.evaluate(x, y, theta, &mut buf);
                for c in 0..p {
                    phi[[i, j, c]] = buf[c];
                }
            }
        }
        Self::from_dense(phi, theta.to_vec())
    }

    /// Wraps precomputed moment values of shape `(n, m, p)`.
    pub fn from_dense(phi: Array3<f64>, theta: Vec<f64>) -> Result<Self> {
        let (n, m, p) = phi.dim();
        if n == 0 || m == 0 || p == 0 {
            return Err(invalid("moment tensor must be nonempty"));
        }
        let sup_norm = phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        Ok(Self {
            rows: n,
            cols: m,
            p,
            theta,
            sup_norm,
            layout: PhiLayout::Dense(phi),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn moment_dim(&self) -> usize {
        self.p
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    /// `max |phi_c(x_i, y_j)|` over all entries and components.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn phi_at(&self, i: usize, j: usize) -> Vec<f64> {
        match &self.layout {
            PhiLayout::Dense(phi) => (0..self.p).map(|c| phi[[i, j, c]]).collect(),
            PhiLayout::Threshold(t) => {
                if t.is_above(i, j) {
                    t.above.clone()
                } else {
                    t.below.clone()
                }
            }
        }
    }

    /// `phi` scaled by `s`; cost layout is preserved.
    pub fn scaled(&self, s: f64) -> Self {
        let layout = match &self.layout {
            PhiLayout::Dense(phi) => PhiLayout::Dense(phi * s),
            PhiLayout::Threshold(t) => PhiLayout::Threshold(Threshold {
                xs: t.xs.clone(),
                ys: t.ys.clone(),
                row_order: t.row_order.clone(),
                col_order: t.col_order.clone(),
                row_cut: t.row_cut.clone(),
                col_cut: t.col_cut.clone(),
                above: t.above.iter().map(|v| v * s).collect(),
                below: t.below.iter().map(|v| v * s).collect(),
            }),
        };
        Self {
            rows: self.rows,
            cols: self.cols,
            p: self.p,
            theta: self.theta.clone(),
            sup_norm: self.sup_norm * s.abs(),
            layout,
        }
    }

    /// Contracts the cached moments with a direction `u` in the unit ball.
    pub fn with_direction(self: &Arc<Self>, u: &[f64]) -> Result<CostTensor> {
        if u.len() != self.p {
            return Err(invalid(format!(
                "direction has length {}, moment dimension is {}",
                u.len(),
                self.p
            )));
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 + 1e-12 {
            return Err(invalid(format!("direction norm {norm} exceeds 1")));
        }
        let kind = match &self.layout {
            PhiLayout::Dense(phi) => {
                let mut c = Array2::<f64>::zeros((self.rows, self.cols));
                for ((i, j), v) in c.indexed_iter_mut() {
                    *v = (0..self.p).map(|k| u[k] * phi[[i, j, k]]).sum();
                }
                let ct = c.t().as_standard_layout().to_owned();
                CostKind::Dense { c, ct }
            }
            PhiLayout::Threshold(t) => CostKind::Threshold {
                above: dot(u, &t.above),
                below: dot(u, &t.below),
            },
        };
        Ok(CostTensor {
            phi: Arc::clone(self),
            u: u.to_vec(),
            kind,
        })
    }
}

impl Threshold {
    fn new(xs: Vec<f64>, ys: Vec<f64>, above: Vec<f64>, below: Vec<f64>) -> Self {
        let mut row_order: Vec<usize> = (0..xs.len()).collect();
        row_order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut col_order: Vec<usize> = (0..ys.len()).collect();
        col_order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
        let ys_sorted: Vec<f64> = col_order.iter().map(|&j| ys[j]).collect();
        let xs_sorted: Vec<f64> = row_order.iter().map(|&i| xs[i]).collect();
        let row_cut = xs.iter().map(|&x| ys_sorted.partition_point(|&y| y < x)).collect();
        let col_cut = ys.iter().map(|&y| xs_sorted.partition_point(|&x| x <= y)).collect();
        Self {
            xs,
            ys,
            row_order,
            col_order,
            row_cut,
            col_cut,
            above,
            below,
        }
    }

    fn is_above(&self, i: usize, j: usize) -> bool {
        self.ys[j] >= self.xs[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Transport cost `C_ij = u' phi(x_i, y_j, theta)` together with its moments.
#[derive(Debug, Clone)]
pub struct CostTensor {
    phi: Arc<PhiTensor>,
    u: Vec<f64>,
    kind: CostKind,
}

#[derive(Debug, Clone)]
enum CostKind {
    Dense { c: Array2<f64>, ct: Array2<f64> },
    Threshold { above: f64, below: f64 },
}

/// Plan marginals and moments for `P_ij = exp(hr_i + hc_j - C_ij / eps)`.
pub(crate) struct PlanMoments {
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub transport: f64,
    pub phi_mean: Vec<f64>,
}

/// Builds `C = u' phi(x_i, y_j, theta)` for all sample pairs.
pub fn build_cost_tensor(
    model: &dyn MomentModel,
    u: &[f64],
    theta: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<CostTensor> {
    Arc::new(PhiTensor::build(model, theta, mu, nu)?).with_direction(u)
}

impl CostTensor {
    /// A plain cost matrix, viewed as a scalar moment with `u = 1`.
    pub fn from_matrix(c: Array2<f64>) -> Result<Self> {
        let (n, m) = c.dim();
        let phi = c
            .clone()
            .into_shape_with_order((n, m, 1))
            .map_err(|e| invalid(e.to_string()))?;
        Arc::new(PhiTensor::from_dense(phi, Vec::new())?).with_direction(&[1.0])
    }

    pub fn rows(&self) -> usize {
        self.phi.rows
    }
    pub fn cols(&self) -> usize {
        self.phi.cols
    }
    pub fn moment_dim(&self) -> usize {
        self.phi.p
    }
    pub fn u(&self) -> &[f64] {
        &self.u
    }
    pub fn theta(&self) -> &[f64] {
        &self.phi.theta
    }
    pub fn phi(&self) -> &Arc<PhiTensor> {
        &self.phi
    }

    pub fn cost_at(&self, i: usize, j: usize) -> f64 {
        match (&self.kind, &self.phi.layout) {
            (CostKind::Dense { c, .. }, _) => c[[i, j]],
            (CostKind::Threshold { above, below }, PhiLayout::Threshold(t)) => {
                if t.is_above(i, j) {
                    *above
                } else {
                    *below
                }
            }
            _ => unreachable!("cost and moment layouts always agree"),
        }
    }

    pub fn phi_at(&self, i: usize, j: usize) -> Vec<f64> {
        self.phi.phi_at(i, j)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match &self.kind {
            CostKind::Dense { c, .. } => c.clone(),
            CostKind::Threshold { .. } => {
                Array2::from_shape_fn((self.rows(), self.cols()), |(i, j)| self.cost_at(i, j))
            }
        }
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let bad = match &self.kind {
            CostKind::Dense { c, .. } => c.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(ij, _)| ij),
            CostKind::Threshold { above, below } => (!above.is_finite() || !below.is_finite()).then_some((0, 0)),
        };
        match bad {
            Some((i, j)) => Err(Error::NonFinite(format!("cost entry ({i}, {j})"))),
            None => Ok(()),
        }
    }

    pub(crate) fn range(&self) -> f64 {
        match &self.kind {
            CostKind::Dense { c, .. } => {
                let (lo, hi) = c
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                hi - lo
            }
            CostKind::Threshold { above, below } => (above - below).abs(),
        }
    }

    /// `out_i = log sum_j exp(h_j - C_ij * inv_eps)`.
    pub(crate) fn row_lse(&self, h: &[f64], inv_eps: f64, out: &mut [f64]) {
        match (&self.kind, &self.phi.layout) {
            (CostKind::Dense { c, .. }, _) => dense_lse(c, h, inv_eps, out),
            (CostKind::Threshold { above, below }, PhiLayout::Threshold(t)) => {
                let (pre, suf) = prefix_suffix_lse(&t.col_order, h);
                for (i, o) in out.iter_mut().enumerate() {
                    let k = t.row_cut[i];
                    *o = lse2(suf[k] - above * inv_eps, pre[k] - below * inv_eps);
                }
            }
            _ => unreachable!(),
        }
    }

    /// `out_j = log sum_i exp(h_i - C_ij * inv_eps)`.
    pub(crate) fn col_lse(&self, h: &[f64], inv_eps: f64, out: &mut [f64]) {
        match (&self.kind, &self.phi.layout) {
            (CostKind::Dense { ct, .. }, _) => dense_lse(ct, h, inv_eps, out),
            (CostKind::Threshold { above, below }, PhiLayout::Threshold(t)) => {
                let (pre, suf) = prefix_suffix_lse(&t.row_order, h);
                for (j, o) in out.iter_mut().enumerate() {
                    let l = t.col_cut[j];
                    *o = lse2(pre[l] - above * inv_eps, suf[l] - below * inv_eps);
                }
            }
            _ => unreachable!(),
        }
    }

    pub(crate) fn plan_moments(&self, hr: &[f64], hc: &[f64], inv_eps: f64) -> PlanMoments {
        let (n, m, p) = (self.rows(), self.cols(), self.moment_dim());
        match (&self.kind, &self.phi.layout) {
            (CostKind::Dense { c, .. }, PhiLayout::Dense(phi)) => {
                let mut row_sums = vec![0.0; n];
                let mut col_sums = vec![0.0; m];
                let mut transport = 0.0;
                let mut phi_mean = vec![0.0; p];
                for i in 0..n {
                    if hr[i] == f64::NEG_INFINITY {
                        continue;
                    }
                    for j in 0..m {
                        let cij = c[[i, j]];
                        let pij = (hr[i] + hc[j] - cij * inv_eps).exp();
                        if pij == 0.0 {
                            continue;
                        }
                        row_sums[i] += pij;
                        col_sums[j] += pij;
                        transport += pij * cij;
                        for k in 0..p {
                            phi_mean[k] += pij * phi[[i, j, k]];
                        }
                    }
                }
                PlanMoments {
                    row_sums,
                    col_sums,
                    transport,
                    phi_mean,
                }
            }
            (CostKind::Threshold { above, below }, PhiLayout::Threshold(t)) => {
                let (pre, suf) = prefix_suffix_lse(&t.col_order, hc);
                let mut row_sums = vec![0.0; n];
                let (mut mass_above, mut mass_below) = (0.0, 0.0);
                for i in 0..n {
                    let k = t.row_cut[i];
                    let a = (hr[i] + suf[k] - above * inv_eps).exp();
                    let b = (hr[i] + pre[k] - below * inv_eps).exp();
                    row_sums[i] = a + b;
                    mass_above += a;
                    mass_below += b;
                }
                let (pre_r, suf_r) = prefix_suffix_lse(&t.row_order, hr);
                let col_sums = (0..m)
                    .map(|j| {
                        let l = t.col_cut[j];
                        (hc[j] + pre_r[l] - above * inv_eps).exp() + (hc[j] + suf_r[l] - below * inv_eps).exp()
                    })
                    .collect();
                let phi_mean = (0..p)
                    .map(|k| t.above[k] * mass_above + t.below[k] * mass_below)
                    .collect();
                PlanMoments {
                    row_sums,
                    col_sums,
                    transport: above * mass_above + below * mass_below,
                    phi_mean,
                }
            }
            _ => unreachable!(),
        }
    }
}

fn dense_lse(c: &Array2<f64>, h: &[f64], inv_eps: f64, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = c.row(i);
        let row = row.as_slice().expect("standard layout");
        let mut mx = f64::NEG_INFINITY;
        for (cj, hj) in row.iter().zip(h) {
            let v = hj - cj * inv_eps;
            if v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            *o = mx;
            continue;
        }
        let s: f64 = row.iter().zip(h).map(|(cj, hj)| (hj - cj * inv_eps - mx).exp()).sum();
        *o = mx + s.ln();
    }
}

/// Prefix and suffix log-sum-exp of `h` taken in `order`; both have length `len + 1`.
fn prefix_suffix_lse(order: &[usize], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let len = order.len();
    let mut pre = vec![f64::NEG_INFINITY; len + 1];
    let mut suf = vec![f64::NEG_INFINITY; len + 1];
    for (pos, &idx) in order.iter().enumerate() {
        pre[pos + 1] = lse2(pre[pos], h[idx]);
    }
    for pos in (0..len).rev() {
        suf[pos] = lse2(suf[pos + 1], h[order[pos]]);
    }
    (pre, suf)
}
