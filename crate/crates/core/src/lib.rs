#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod detector;
pub mod experiments;
pub mod protocol;
pub mod search;
pub mod timing;
