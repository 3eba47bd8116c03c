// NaN-rejecting range checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod config;
pub mod edges;
pub mod fit;
pub mod geometry;
pub mod image;
pub mod marker;
pub mod refine;
pub mod sim;
pub mod tracking;
