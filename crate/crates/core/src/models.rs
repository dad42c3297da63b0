//! Moment functions `phi(x, y, theta)` and their closed-form oracles.

use libm::erfc;

use crate::error::{invalid, Result};

/// A `p`-dimensional moment function of a pair of observations.
pub trait MomentModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn moment_dim(&self) -> usize;

    /// Writes `phi(x, y, theta)` into `out` (length `moment_dim`).
    fn evaluate(&self, x: &[f64], y: &[f64], theta: &[f64], out: &mut [f64]);

    /// Models whose moment depends on scalar `(x, y)` only through `1{y >= x}`
    /// return the two moment values here. The transport solver uses this to run
    /// in O(n + m) per iteration instead of O(nm).
    fn threshold_form(&self, _theta: &[f64]) -> Option<ThresholdForm> {
        None
    }

    fn evaluate_vec(&self, x: &[f64], y: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.moment_dim()];
        self.evaluate(x, y, theta, &mut out);
        out
    }
}

/// `phi = above` when `y >= x`, `below` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdForm {
    pub above: Vec<f64>,
    pub below: Vec<f64>,
}

/// Share of units that benefit from treatment: `1{y1 >= y0} - theta`.
///
/// The `x` side carries the control outcome `Y(0)`, the `y` side `Y(1)`. Ties
/// count as benefit.
#[derive(Clone, Copy, Debug, Default)]
pub struct BenefitShareModel;

impl MomentModel for BenefitShareModel {
    fn name(&self) -> &str {
        "benefit_share"
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn moment_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64], y: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = benefit_share_phi(x[0], y[0], theta[0]);
    }

    fn threshold_form(&self, theta: &[f64]) -> Option<ThresholdForm> {
        Some(ThresholdForm {
            above: vec![1.0 - theta[0]],
            below: vec![-theta[0]],
        })
    }
}

pub fn benefit_share_phi(y0: f64, y1: f64, theta: f64) -> f64 {
    if y1 >= y0 {
        1.0 - theta
    } else {
        -theta
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Sharp bounds on `P(Y(1) >= Y(0))` for `Y(0) ~ N(mu0, sigma^2)`,
/// `Y(1) ~ N(mu1, sigma^2)` with `mu1 >= mu0`.
pub fn makarov_bounds(mu0: f64, mu1: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if mu1 < mu0 {
        return Err(invalid(format!("requires mu1 >= mu0, got {mu1} < {mu0}")));
    }
    let lower = 1.0 - 2.0 * normal_cdf(-(mu1 - mu0) / (2.0 * sigma));
    Ok((lower, 1.0))
}

/// Conditional-likelihood moment of the two-period fixed-effects logit,
/// `s(y1, y2, x1, x2; theta) * 1{y1 + y2 = 1}`.
///
/// Observation layout: the `x` side is `(y1, x1_1..x1_k)` and the `y` side is
/// `(y2, x2_1..x2_k)`.
#[derive(Clone, Copy, Debug)]
pub struct PanelLogitScoreModel {
    k: usize,
}

impl PanelLogitScoreModel {
    pub fn new(k: usize) -> Self {
        assert!(k > 0, "covariate dimension must be positive");
        Self { k }
    }
}

impl MomentModel for PanelLogitScoreModel {
    fn name(&self) -> &str {
        "panel_logit"
    }
    fn dim_x(&self) -> usize {
        self.k + 1
    }
    fn dim_y(&self) -> usize {
        self.k + 1
    }
    fn param_dim(&self) -> usize {
        self.k
    }
    fn moment_dim(&self) -> usize {
        self.k
    }

    fn evaluate(&self, x: &[f64], y: &[f64], theta: &[f64], out: &mut [f64]) {
        let y1 = x[0] > 0.5;
        let y2 = y[0] > 0.5;
        if y1 == y2 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        score_into(y1, y2, &x[1..], &y[1..], theta, out);
    }
}

fn score_into(y1: bool, y2: bool, x1: &[f64], x2: &[f64], theta: &[f64], out: &mut [f64]) {
    let z1: f64 = x1.iter().zip(theta).map(|(a, b)| a * b).sum();
    let z2: f64 = x2.iter().zip(theta).map(|(a, b)| a * b).sum();
    let m = z1.max(z2);
    let e1 = (z1 - m).exp();
    let e2 = (z2 - m).exp();
    let w1 = e1 / (e1 + e2);
    let w2 = e2 / (e1 + e2);
    let (d1, d2) = (y1 as u8 as f64, y2 as u8 as f64);
    for c in 0..out.len() {
        out[c] = d1 * x1[c] + d2 * x2[c] - (w1 * x1[c] + w2 * x2[c]);
    }
}

/// Score of the conditional log-likelihood (without the switcher indicator).
pub fn logit_score(y1: u8, y2: u8, x1: &[f64], x2: &[f64], theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    score_into(y1 == 1, y2 == 1, x1, x2, theta, &mut out);
    out
}

/// `phi == 0`; used for fixtures and degenerate checks.
#[derive(Clone, Copy, Debug)]
pub struct ZeroModel {
    pub dim_x: usize,
    pub dim_y: usize,
    pub k: usize,
    pub p: usize,
}

impl MomentModel for ZeroModel {
    fn name(&self) -> &str {
        "zero"
    }
    fn dim_x(&self) -> usize {
        self.dim_x
    }
    fn dim_y(&self) -> usize {
        self.dim_y
    }
    fn param_dim(&self) -> usize {
        self.k
    }
    fn moment_dim(&self) -> usize {
        self.p
    }
    fn evaluate(&self, _x: &[f64], _y: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

pub const MODEL_NAMES: &[&str] = &["benefit_share", "panel_logit", "zero"];

/// Looks up a model by registry name. `k` is the covariate dimension for
/// `panel_logit` and the data dimension for `zero`; `benefit_share` ignores it.
pub fn model_by_name(name: &str, k: usize) -> Result<Box<dyn MomentModel>> {
    match name {
        "benefit_share" => Ok(Box::new(BenefitShareModel)),
        "panel_logit" => {
            if k == 0 {
                return Err(invalid("panel_logit needs at least one covariate"));
            }
            Ok(Box::new(PanelLogitScoreModel::new(k)))
        }
        "zero" => Ok(Box::new(ZeroModel {
            dim_x: k.max(1),
            dim_y: k.max(1),
            k: 1,
            p: 1,
        })),
        other => Err(invalid(format!(
            "unknown model '{other}' (expected one of {})",
            MODEL_NAMES.join(", ")
        ))),
    }
}
