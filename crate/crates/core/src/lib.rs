//! Moment-inequality inference for models whose moments depend on the joint
//! law of two variables observed only through their marginals, via entropic
//! optimal transport.

// Negated float comparisons reject NaN on purpose; index loops mirror the math.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod direction;
pub mod error;
pub mod idset;
pub mod inference;
pub mod mc;
pub mod measure;
pub mod models;
pub mod ot;
pub mod panel;

pub use error::{Error, Result};
pub use measure::EmpiricalMeasure;
pub use models::{model_by_name, BenefitShareModel, MomentModel, PanelLogitScoreModel, ZeroModel};
pub use ot::{build_cost_tensor, sinkhorn, CostTensor, PhiTensor, SinkhornOptions, SinkhornResult};
