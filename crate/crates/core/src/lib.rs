//! Federated low-rank adaptation of a frozen two-tower vision-language model.
//!
//! Parties keep their multimodal data local and exchange only adapter
//! updates. The crate provides the model itself ([`toymodel`]), the fusion
//! losses, server-side aggregation, the data-quality loop, privacy
//! mechanisms, contribution measurement, evaluation metrics, the round
//! orchestrator with its wire protocol and the client/simulation harness.

pub mod aggregation;
pub mod codec;
pub mod contribution;
pub mod dataquality;
pub mod fusion;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod orchestrator;
pub mod privacy;
pub mod rng;
pub mod toymodel;

#[cfg(test)]
pub(crate) mod testutil;
