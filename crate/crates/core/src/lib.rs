//! Cost-aware sparse ensemble classification.
//!
//! A least-action classifier (LAC) is an agent that, for every example,
//! queries a fixed number of pre-trained classifiers from a pool one at a
//! time, choosing each next query from the responses it has already seen,
//! and then emits a class prediction. The crate provides the pieces needed to
//! build, train and compare such agents:
//!
//! - [`numkit`]: dense nets with exact manual gradients and Adam/SGD.
//! - [`pool`]: classifier pools backed by precomputed response tables.
//! - [`envmdp`]: the per-example episode (query, accumulate cost, reward).
//! - [`agent`]: the short-memory agent (response/mask tables, action
//!   generator, decision maker, baseline).
//! - [`training`]: hybrid REINFORCE + intermediate-supervision training.
//! - [`gdboost`]: GD-MC gradient boosting and bagging over dense learners.
//! - [`stacker`]: context-agnostic MLP and k-NN stacking baselines.
//! - [`analysis`]: brute-force policy oracles and reports.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod agent;
pub mod analysis;
pub mod envmdp;
pub mod gdboost;
pub mod numkit;
pub mod pool;
pub mod rng;
pub mod stacker;
pub mod training;
