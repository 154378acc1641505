#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod data;
pub mod ep;
pub mod error;
pub mod evaluation;
pub mod kernel;
pub mod loo;
pub mod model_selection;
pub mod ls_cv;
pub mod normal;
pub mod parallel;
pub mod validation;
