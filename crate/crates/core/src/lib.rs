// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod depth_head;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod proto;
pub mod trainer;
pub mod vit;
