//! Entropic optimal transport between two empirical measures.

mod cost;
mod lp;
mod sinkhorn;

pub use cost::{build_cost_tensor, CostTensor, PhiTensor};
pub use lp::{permutation_oracle, transport_lp, unregularized_ot_oracle, LpSolution};
pub(crate) use sinkhorn::plan_phi_mean;
pub use sinkhorn::{
    conservative_adjust, entropic_value, gradient_in_u, sinkhorn, sinkhorn_warm, Potentials, SinkhornOptions,
    SinkhornResult,
};

/// `log(exp(a) + exp(b))`, safe when both are `-inf`.
#[inline]
pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}
