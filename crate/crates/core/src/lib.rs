//! Low-shot and semi-supervised training for a multi-task twin network.
//!
//! A shared backbone embeds two inputs; a classification head scores each
//! input and a similarity head scores the pair. Training uses a class-weighted
//! combination of both cross-entropies. Self-training then grows the labeled
//! pool with pseudo labels that survive a veto vote cast by labeled
//! references through the similarity head.

pub mod autodiff;
pub mod data;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod metrics;
pub mod model;
pub mod ovv;
pub mod train;
pub mod experiment;
