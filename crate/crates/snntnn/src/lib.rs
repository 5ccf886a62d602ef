//! Sparse fully connected layers learned by a switcher network (SNN) that
//! reads the task network's (TNN) weight matrices and emits multiplicative
//! gates, trained in alternation with the task network under one
//! cross-entropy objective.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod rng;
pub mod snn;
pub mod tensor;
pub mod tnn;
pub mod train;
