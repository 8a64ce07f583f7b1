//! Multi-view urban region embeddings with hybrid attentive feature learning
//! and dual attentive fusion, plus Lasso-based downstream evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod params;
pub mod data;
pub mod layers;
pub mod halearning;
pub mod dafusion;
pub mod objective;
pub mod model;
pub mod trainer;
pub mod downstream;
